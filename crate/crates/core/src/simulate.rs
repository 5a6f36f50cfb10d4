//! Synthetic city: planted NB2 models per event type, sampled over a
//! region × period grid, emitted in the same formats the ingest side reads.

use chrono::{Duration, NaiveDate, NaiveDateTime, TimeZone, Utc};
use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{parse_timezone, EventRecord, EventType, FeatureTable, IngestError, DEFAULT_TIMEZONE};
use crate::panel::{Observation, Panel, PanelError, PeriodGrid, PeriodKind, TimeSpan};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Panel(#[from] PanelError),
}

/// Uniform covariate on `[low, high]`, drawn once per region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGenerator {
    pub name: String,
    pub low: f64,
    pub high: f64,
}

/// Planted model for one event type; `coefficients` are intercept first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeParams {
    pub event_type: EventType,
    pub coefficients: Vec<f64>,
    pub alpha: f64,
}

fn default_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2011, 1, 3)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date")
}

fn default_timezone() -> String {
    DEFAULT_TIMEZONE.to_string()
}

fn default_exposure() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub n_regions: usize,
    pub features: Vec<FeatureGenerator>,
    pub types: Vec<TypeParams>,
    pub period_kind: PeriodKind,
    pub n_periods: usize,
    pub seed: u64,
    /// Exposure attached to every generated observation.
    #[serde(default = "default_exposure")]
    pub exposure: f64,
    /// Local start; floored to the period boundary.
    #[serde(default = "default_start")]
    pub start: NaiveDateTime,
    #[serde(default = "default_timezone")]
    pub timezone: String,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), SimulateError> {
        let bad = |m: String| Err(SimulateError::InvalidSpec(m));
        if self.n_regions == 0 || self.n_periods == 0 || self.types.is_empty() {
            return bad("need at least one region, period, and event type".into());
        }
        if !(self.exposure > 0.0 && self.exposure.is_finite()) {
            return bad(format!("exposure {} must be positive", self.exposure));
        }
        for f in &self.features {
            if !(f.low >= 0.0 && f.high >= f.low && f.high.is_finite()) {
                return bad(format!("feature `{}` needs 0 ≤ low ≤ high", f.name));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.types {
            if !seen.insert(t.event_type) {
                return bad(format!("event type {} listed twice", t.event_type.code()));
            }
            if t.coefficients.len() != self.features.len() + 1 {
                return bad(format!(
                    "{}: {} coefficients for {} features",
                    t.event_type.code(),
                    t.coefficients.len(),
                    self.features.len()
                ));
            }
            if !(t.alpha >= 0.0 && t.alpha.is_finite()) || t.coefficients.iter().any(|b| !b.is_finite()) {
                return bad(format!("{}: invalid parameters", t.event_type.code()));
            }
        }
        Ok(())
    }

    pub fn region_ids(&self) -> Vec<String> {
        let width = self.n_regions.to_string().len().max(3);
        (1..=self.n_regions).map(|i| format!("R{i:0width$}")).collect()
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }
}

/// One NB2 draw via the Gamma–Poisson mixture; `α = 0` is Poisson(μ).
pub fn sample_nb2<R: Rng + ?Sized>(mu: f64, alpha: f64, rng: &mut R) -> u64 {
    let lambda = if alpha > 0.0 {
        Gamma::new(1.0 / alpha, alpha * mu)
            .expect("positive shape and scale")
            .sample(rng)
    } else {
        mu
    };
    if !(lambda > 0.0) {
        return 0;
    }
    Poisson::new(lambda).expect("positive rate").sample(rng) as u64
}

/// Planted parameters, written alongside generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub seed: u64,
    pub feature_names: Vec<String>,
    pub types: Vec<TypeParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Counts with covariates joined.
    pub panel: Panel,
    pub events: Vec<EventRecord>,
    pub features: FeatureTable,
    pub truth: Truth,
    pub span: TimeSpan,
}

const FEATURE_STREAM: u64 = u64::MAX;

pub fn generate(spec: &ScenarioSpec) -> Result<Scenario, SimulateError> {
    spec.validate()?;
    let tz = parse_timezone(&spec.timezone)?;
    let mut cur = spec.period_kind.floor(spec.start);
    let first = cur;
    for _ in 0..spec.n_periods {
        cur = spec.period_kind.advance(cur);
    }
    let local = |t: NaiveDateTime| {
        tz.from_local_datetime(&t)
            .earliest()
            .map(|d| d.with_timezone(&Utc))
            .ok_or_else(|| SimulateError::InvalidSpec(format!("{t} does not exist in {}", spec.timezone)))
    };
    let span = TimeSpan {
        start: local(first)?,
        end: local(cur)?,
    };
    let grid = PeriodGrid::new(spec.period_kind, span, &tz)?;
    let regions = spec.region_ids();
    let p = spec.features.len();

    let mut values = Vec::with_capacity(regions.len() * p);
    for ri in 0..regions.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[ri as u64, FEATURE_STREAM]));
        for f in &spec.features {
            values.push(if f.high > f.low { rng.gen_range(f.low..=f.high) } else { f.low });
        }
    }
    let features = FeatureTable::new(regions.clone(), spec.feature_names(), values)?;

    let per_region: Vec<(Vec<Observation>, Vec<EventRecord>)> = (0..regions.len())
        .into_par_iter()
        .map(|ri| {
            let x = features.row(ri).to_vec();
            let mut obs = Vec::new();
            let mut events = Vec::new();
            for (pi, start) in grid.starts.iter().enumerate() {
                let (s, e) = grid.bounds(pi);
                let width_ms = (e - s).num_milliseconds();
                for (ti, t) in spec.types.iter().enumerate() {
                    let key = [ri as u64, pi as u64, ti as u64];
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &key));
                    let eta = t.coefficients[0]
                        + x.iter().zip(&t.coefficients[1..]).map(|(a, b)| a * b).sum::<f64>();
                    let mu = spec.exposure * eta.exp();
                    let count = sample_nb2(mu, t.alpha, &mut rng);
                    let mut offsets: Vec<i64> = (0..count).map(|_| rng.gen_range(0..width_ms)).collect();
                    offsets.sort_unstable();
                    for (j, off) in offsets.into_iter().enumerate() {
                        events.push(EventRecord {
                            event_id: format!("{}-{pi}-{}-{j}", regions[ri], t.event_type.code()),
                            dispatch_time: s + Duration::milliseconds(off),
                            event_type: t.event_type,
                            location: None,
                            region_id: Some(regions[ri].clone()),
                        });
                    }
                    obs.push(Observation {
                        region_id: regions[ri].clone(),
                        period_start: *start,
                        period_kind: spec.period_kind,
                        exposure: spec.exposure,
                        event_type: t.event_type,
                        count,
                        x: x.clone(),
                    });
                }
            }
            (obs, events)
        })
        .collect();
    let mut observations = Vec::new();
    let mut events = Vec::new();
    for (o, e) in per_region {
        observations.extend(o);
        events.extend(e);
    }
    events.sort_by(|a, b| (a.dispatch_time, &a.event_id).cmp(&(b.dispatch_time, &b.event_id)));
    let panel = Panel::new(spec.feature_names(), spec.period_kind, observations)?;
    Ok(Scenario {
        panel,
        events,
        features,
        truth: Truth {
            seed: spec.seed,
            feature_names: spec.feature_names(),
            types: spec.types.clone(),
        },
        span,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(b0: f64, alpha: f64, exposure: f64) -> ScenarioSpec {
        ScenarioSpec {
            n_regions: 50,
            features: vec![],
            types: vec![TypeParams {
                event_type: EventType::FR,
                coefficients: vec![b0],
                alpha,
            }],
            period_kind: PeriodKind::Daily,
            n_periods: 20,
            seed: 3,
            exposure,
            start: default_start(),
            timezone: default_timezone(),
        }
    }

    fn mean_var(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn poisson_draw_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_nb2(3.0, 0.0, &mut rng) as f64).collect();
        assert!((mean_var(&draws).0 - 3.0).abs() < 0.05);
    }

    #[test]
    fn nb2_draw_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_nb2(4.0, 0.5, &mut rng) as f64).collect();
        assert!((mean_var(&draws).1 - 12.0).abs() < 1.0);
    }

    #[test]
    fn tiny_mean_draws_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nonzero = (0..10_000).filter(|_| sample_nb2(1e-9, 0.5, &mut rng) > 0).count();
        assert!(nonzero <= 1);
    }

    #[test]
    fn grand_mean_matches_intercept() {
        let s = generate(&spec(2f64.ln(), 0.3, 1.0)).unwrap();
        assert_eq!(s.panel.len(), 1000);
        let m = s.panel.total_count() as f64 / 1000.0;
        assert!((m - 2.0).abs() < 0.15, "{m}");
        assert_eq!(s.events.len() as u64, s.panel.total_count());
    }

    #[test]
    fn doubled_exposure_doubles_counts() {
        let one = generate(&spec(1.0, 0.0, 1.0)).unwrap().panel.total_count() as f64;
        let two = generate(&spec(1.0, 0.0, 2.0)).unwrap().panel.total_count() as f64;
        assert!((two / one - 2.0).abs() < 0.1);
    }

    #[test]
    fn deterministic() {
        let a = generate(&spec(0.5, 0.5, 1.0)).unwrap();
        let b = generate(&spec(0.5, 0.5, 1.0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_coefficients() {
        let mut s = spec(0.0, 0.1, 1.0);
        s.types[0].coefficients.push(1.0);
        assert!(generate(&s).is_err());
    }
}
