//! `firerisk` command-line driver.

pub mod commands;
pub mod config;
pub mod output;
pub mod pipeline;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use firerisk_core::ingest::{parse_event_types, BBox, EventType};
use firerisk_core::panel::PeriodKind;

use crate::commands::FetchArgs;
use crate::config::{FeatureSubset, Granularity, RunConfig};
use crate::output::Output;

#[derive(Debug, Parser)]
#[command(name = "firerisk", version, about = "Emergency event risk modelling pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Overrides applied on top of the config file; flags win.
#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Period length: hourly, daily, weekly, monthly or yearly.
    #[arg(long, global = true, value_parser = parse_period)]
    pub period: Option<PeriodKind>,
    /// Comma-separated event type codes, e.g. FR,MD.
    #[arg(long, global = true, value_parser = parse_types, value_name = "FR,MD,...")]
    pub types: Option<TypeList>,
    #[arg(long, global = true, value_enum)]
    pub granularity: Option<Granularity>,
    /// `auto` (importance selection), `all`, or a comma-separated list.
    #[arg(long, global = true, value_name = "auto|name,...")]
    pub features: Option<FeatureSubset>,
    /// Permit network access for `fetch`.
    #[arg(long, global = true)]
    pub allow_network: bool,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone)]
pub struct TypeList(pub Vec<EventType>);

fn parse_period(s: &str) -> Result<PeriodKind, String> {
    s.parse()
}

fn parse_types(s: &str) -> Result<TypeList, String> {
    let t = parse_event_types(s).map_err(|e| e.to_string())?;
    if t.is_empty() {
        return Err("empty type list".into());
    }
    Ok(TypeList(t))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mean, standard deviation and CV of counts per type and interval.
    Describe,
    /// Feature × event type correlation matrix.
    Correlate,
    /// Forest permutation importance per event type.
    Importance,
    /// Station partition GeoJSON and neighborhood overlap weights.
    Voronoi,
    /// Fit one NB2 model per event type on the training split.
    Fit,
    /// Per-unit expected counts from fitted models.
    Predict {
        /// Directory holding `model_<TYPE>_<period>.json` files (default: --out).
        #[arg(long, value_name = "DIR")]
        models: Option<PathBuf>,
    },
    /// Held-out error metrics, error map and residual ECDF.
    Evaluate {
        /// Score stored models instead of refitting.
        #[arg(long, value_name = "DIR")]
        models: Option<PathBuf>,
    },
    /// Jenks risk tiers of per-unit expected counts.
    Classify {
        /// Directory holding fitted models (default: --out).
        #[arg(long, value_name = "DIR")]
        models: Option<PathBuf>,
    },
    /// Separate fits and metrics before and after a cutoff date.
    ComparePeriods {
        /// First instant of the later period, e.g. 2020-03-01.
        #[arg(long)]
        cutoff: String,
    },
    /// Generate a synthetic city with planted models.
    Simulate {
        /// Scenario JSON; a built-in two-type scenario when absent.
        #[arg(long, value_name = "PATH")]
        scenario: Option<PathBuf>,
    },
    /// Download an open-data export or a point-of-interest category.
    Fetch {
        /// Plain download URL.
        #[arg(long, conflicts_with = "category")]
        url: Option<String>,
        /// Point-of-interest category for an Overpass query.
        #[arg(long)]
        category: Option<String>,
        /// south,west,north,east in degrees.
        #[arg(long, value_parser = commands::parse_bbox, requires = "category")]
        bbox: Option<BBox>,
        #[arg(long, requires = "category")]
        endpoint: Option<String>,
        #[arg(long, value_name = "PATH")]
        dest: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Describe => "describe",
            Command::Correlate => "correlate",
            Command::Importance => "importance",
            Command::Voronoi => "voronoi",
            Command::Fit => "fit",
            Command::Predict { .. } => "predict",
            Command::Evaluate { .. } => "evaluate",
            Command::Classify { .. } => "classify",
            Command::ComparePeriods { .. } => "compare-periods",
            Command::Simulate { .. } => "simulate",
            Command::Fetch { .. } => "fetch",
        }
    }
}

/// Config file (or defaults) with command-line overrides applied.
pub fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(k) = g.period {
        cfg.period_kind = Some(k);
    }
    if let Some(t) = &g.types {
        cfg.event_types = t.0.clone();
    }
    if let Some(gr) = g.granularity {
        cfg.granularity = gr;
    }
    if let Some(f) = &g.features {
        cfg.feature_subset = f.clone();
    }
    if g.allow_network {
        cfg.allow_network = true;
    }
    if let Some(o) = &g.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global)?;
    cfg.validate()?;
    let mut out = Output::new(&cfg.out, cli.command.name(), cfg.seed, cfg.hash())?;
    let models = |m: &Option<PathBuf>| m.clone().unwrap_or_else(|| cfg.out.clone());
    match &cli.command {
        Command::Describe => commands::describe_cmd(&cfg, &mut out),
        Command::Correlate => commands::correlate_cmd(&cfg, &mut out),
        Command::Importance => commands::importance_cmd(&cfg, &mut out),
        Command::Voronoi => commands::voronoi_cmd(&cfg, &mut out),
        Command::Fit => commands::fit_cmd(&cfg, &mut out),
        Command::Predict { models: m } => commands::predict_cmd(&cfg, &models(m), &mut out),
        Command::Evaluate { models: m } => commands::evaluate_cmd(&cfg, m.as_deref(), &mut out),
        Command::Classify { models: m } => commands::classify_cmd(&cfg, &models(m), &mut out),
        Command::ComparePeriods { cutoff } => commands::compare_cmd(&cfg, cutoff, &mut out),
        Command::Simulate { scenario } => {
            commands::simulate_cmd(scenario.as_deref(), cli.global.seed, &cfg, &mut out)
        }
        Command::Fetch {
            url,
            category,
            bbox,
            endpoint,
            dest,
        } => commands::fetch_cmd(
            &FetchArgs {
                url: url.as_deref(),
                category: category.as_deref(),
                bbox: *bbox,
                endpoint: endpoint.as_deref(),
                dest,
            },
            cfg.allow_network,
            &out,
        ),
    }
}

/// Parses `args` and runs; returns the process exit code
/// (0 success, 1 validation or fit failure, 2 usage error).
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::try_parse_from(["firerisk", "--seed", "9", "--period", "daily", "--types", "FR,MD", "--features", "a,b", "fit"]).unwrap();
        let cfg = resolve_config(&cli.global).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.period_kind, Some(PeriodKind::Daily));
        assert_eq!(cfg.event_types, vec![EventType::FR, EventType::MD]);
        assert_eq!(cfg.feature_subset, FeatureSubset::Named(vec!["a".into(), "b".into()]));
    }

    #[test]
    fn bad_period_is_usage_error() {
        assert_eq!(run(["firerisk", "--period", "fortnightly", "describe"]), 2);
    }
}
