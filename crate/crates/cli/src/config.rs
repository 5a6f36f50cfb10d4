use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use firerisk_core::describe::{CorrelationBasis, Deviation};
use firerisk_core::importance::{ForestConfig, DEFAULT_THRESHOLD};
use firerisk_core::ingest::{EventFormat, EventType, DEFAULT_TIMEZONE};
use firerisk_core::nb2::FitOptions;
use firerisk_core::panel::PeriodKind;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    #[default]
    Neighborhood,
    Station,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Neighborhood => "neighborhood",
            Granularity::Station => "station",
        }
    }
}

/// Which covariates enter the count models.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum FeatureSubset {
    /// Importance-based selection, per event type.
    #[default]
    Auto,
    All,
    Named(Vec<String>),
}

impl FromStr for FeatureSubset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "auto" => Ok(FeatureSubset::Auto),
            "all" => Ok(FeatureSubset::All),
            list => {
                let names: Vec<String> = list
                    .split(',')
                    .map(str::trim)
                    .filter(|n| !n.is_empty())
                    .map(String::from)
                    .collect();
                if names.is_empty() {
                    return Err("empty feature list".into());
                }
                Ok(FeatureSubset::Named(names))
            }
        }
    }
}

impl fmt::Display for FeatureSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureSubset::Auto => f.write_str("auto"),
            FeatureSubset::All => f.write_str("all"),
            FeatureSubset::Named(n) => f.write_str(&n.join(",")),
        }
    }
}

impl Serialize for FeatureSubset {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            FeatureSubset::Named(n) => n.serialize(s),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for FeatureSubset {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Word(String),
            List(Vec<String>),
        }
        match Raw::deserialize(d)? {
            Raw::Word(w) => w.parse().map_err(serde::de::Error::custom),
            Raw::List(l) if l.is_empty() => Err(serde::de::Error::custom("empty feature list")),
            Raw::List(l) => Ok(FeatureSubset::Named(l)),
        }
    }
}

fn default_train_fraction() -> f64 {
    0.7
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_classes() -> usize {
    4
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_region_property() -> String {
    "region_id".into()
}

fn default_timezone() -> String {
    DEFAULT_TIMEZONE.into()
}

/// Everything a run depends on. Paths are resolved against the config
/// file's directory when loaded from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub events: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub stations: Option<PathBuf>,
    pub geometry: Option<PathBuf>,
    /// Bounding region for the station partition; defaults to the envelope of `geometry`.
    #[serde(default)]
    pub boundary: Option<PathBuf>,
    #[serde(default = "default_region_property")]
    pub region_id_property: String,
    #[serde(default)]
    pub event_format: EventFormat,
    #[serde(default = "default_timezone")]
    pub timezone: String,
    /// `None`: weekly for modelling; every kind for `describe`.
    #[serde(default)]
    pub period_kind: Option<PeriodKind>,
    /// Empty means every type present in the events.
    #[serde(default)]
    pub event_types: Vec<EventType>,
    /// Inclusive start / exclusive end; default to the event extent.
    #[serde(default)]
    pub span_start: Option<String>,
    #[serde(default)]
    pub span_end: Option<String>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub feature_subset: FeatureSubset,
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub allow_network: bool,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub forest: ForestConfig,
    #[serde(default = "default_threshold")]
    pub importance_threshold: f64,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default)]
    pub deviation: Deviation,
    #[serde(default)]
    pub correlation_basis: CorrelationBasis,
    /// Directory relative paths were resolved against.
    #[serde(skip)]
    pub base: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        for p in [
            &mut cfg.events,
            &mut cfg.features,
            &mut cfg.stations,
            &mut cfg.geometry,
            &mut cfg.boundary,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.out.is_relative() {
            cfg.out = base.join(&cfg.out);
        }
        cfg.base = Some(base.to_path_buf());
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("events", &self.events),
            ("features", &self.features),
            ("stations", &self.stations),
            ("geometry", &self.geometry),
            ("boundary", &self.boundary),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    bail!("{name} file {} does not exist", p.display());
                }
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            bail!("train_fraction {} must lie in (0, 1)", self.train_fraction);
        }
        if !(0.0..=1.0).contains(&self.importance_threshold) {
            bail!("importance_threshold {} must lie in [0, 1]", self.importance_threshold);
        }
        if self.classes < 2 {
            bail!("classes must be at least 2");
        }
        firerisk_core::ingest::parse_timezone(&self.timezone)?;
        Ok(())
    }

    /// Modelling period; weekly unless configured.
    pub fn kind(&self) -> PeriodKind {
        self.period_kind.unwrap_or(PeriodKind::Weekly)
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    /// Input paths enter relative to the config file, so a relocated copy
    /// of the same inputs and config hashes the same.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        if let Some(base) = &self.base {
            for p in [&mut c.events, &mut c.features, &mut c.stations, &mut c.geometry, &mut c.boundary]
                .into_iter()
                .flatten()
            {
                if let Ok(rel) = p.strip_prefix(base) {
                    *p = rel.to_path_buf();
                }
            }
        }
        let mut v = serde_json::to_value(&c).expect("config serialises");
        if let Some(o) = v.as_object_mut() {
            o.remove("out");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn require<'a>(&self, field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        field
            .as_deref()
            .with_context(|| format!("`{name}` path is not configured"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.train_fraction, 0.7);
        assert_eq!(c.feature_subset, FeatureSubset::Auto);
        assert_eq!(c.kind(), PeriodKind::Weekly);
    }

    #[test]
    fn feature_subset_forms() {
        let c: RunConfig = serde_json::from_str(r#"{"feature_subset": ["a", "b"]}"#).unwrap();
        assert_eq!(c.feature_subset, FeatureSubset::Named(vec!["a".into(), "b".into()]));
        let c: RunConfig = serde_json::from_str(r#"{"feature_subset": "all"}"#).unwrap();
        assert_eq!(c.feature_subset, FeatureSubset::All);
        assert_eq!("x, y".parse(), Ok(FeatureSubset::Named(vec!["x".into(), "y".into()])));
    }

    #[test]
    fn hash_ignores_out() {
        let a = RunConfig::default();
        let b = RunConfig {
            out: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn hash_ignores_config_location() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let body = r#"{"events": "e.csv", "seed": 3}"#;
        for d in [&d1, &d2] {
            std::fs::write(d.path().join("c.json"), body).unwrap();
        }
        let a = RunConfig::load(&d1.path().join("c.json")).unwrap();
        let b = RunConfig::load(&d2.path().join("c.json")).unwrap();
        assert_ne!(a.events, b.events);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 1}"#).is_err());
    }
}
