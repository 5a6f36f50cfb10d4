use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use firerisk_core::classify::classify_regions;
use firerisk_core::describe::{correlation_matrix, describe, residual_ecdf, write_descriptive_csv, DescriptiveRow, Level};
use firerisk_core::evaluate::{
    compare_periods, evaluate_model, fit_and_evaluate, write_metrics_csv, MetricReport, MetricRow,
};
use firerisk_core::importance::ForestConfig;
use firerisk_core::ingest::{
    build_overpass_query, fetch_overpass, fetch_url_to_file, write_events, BBox, EventType, DEFAULT_OVERPASS_URL,
    EDMONTON_BBOX,
};
use firerisk_core::nb2::{fit_nb2, CountData, Nb2Model};
use firerisk_core::panel::{split, PeriodKind};
use firerisk_core::simulate::{generate, FeatureGenerator, ScenarioSpec, TypeParams};
use firerisk_core::spatial::{partition_geojson, redistribute_features, regions_geojson, Point, Polygon, Region};

use crate::config::{FeatureSubset, RunConfig};
use crate::output::{atomic_write, Output};
use crate::pipeline::{read_regions, split_seed, Inputs, StationLayout};

fn geojson_bytes(fc: &geojson::FeatureCollection) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec(fc)?;
    b.push(b'\n');
    Ok(b)
}

fn model_name(t: EventType, kind: PeriodKind) -> String {
    format!("model_{}_{}.json", t.code(), kind)
}

/// Descriptive statistics, city-wide and per unit, over every period kind
/// (or only the configured one). Hourly per-unit panels are skipped unless
/// hourly is requested explicitly, as they scale with units × hours.
pub fn describe_cmd(cfg: &RunConfig, out: &mut Output) -> Result<()> {
    let inputs = Inputs::load(cfg)?;
    let kinds: Vec<PeriodKind> = cfg.period_kind.map_or_else(|| PeriodKind::ALL.to_vec(), |k| vec![k]);
    let mut city: Vec<DescriptiveRow<f64>> = Vec::new();
    let mut region: Vec<DescriptiveRow<f64>> = Vec::new();
    for &kind in &kinds {
        match inputs.city_counts(kind) {
            Ok(p) => city.extend(describe(&p, Level::City, cfg.deviation)),
            Err(e) => log::warn!("no {kind} city statistics: {e:#}"),
        }
        if kind == PeriodKind::Hourly && cfg.period_kind.is_none() {
            continue;
        }
        match inputs.counts(kind) {
            Ok(p) => region.extend(describe(&p, Level::Region, cfg.deviation)),
            Err(e) => log::warn!("no {kind} per-unit statistics: {e:#}"),
        }
    }
    sort_rows(&mut city);
    sort_rows(&mut region);
    out.write_with("descriptive_city.csv", |w| write_descriptive_csv(&city, w))?;
    out.write_with("descriptive_region.csv", |w| write_descriptive_csv(&region, w))?;
    Ok(())
}

fn sort_rows(rows: &mut [DescriptiveRow<f64>]) {
    rows.sort_by_key(|r| (r.event_type, r.period_kind));
}

pub fn correlate_cmd(cfg: &RunConfig, out: &mut Output) -> Result<()> {
    let inputs = Inputs::load(cfg)?;
    let panel = inputs.panel(cfg.kind())?;
    let m = correlation_matrix::<f64>(&panel, cfg.correlation_basis);
    out.write_with("correlation.csv", |w| m.write_csv(w, None))?;
    Ok(())
}

pub fn importance_cmd(cfg: &RunConfig, out: &mut Output) -> Result<()> {
    let inputs = Inputs::load(cfg)?;
    let panel = inputs.panel(cfg.kind())?;
    for &t in &inputs.types {
        let report = inputs.importance(&panel, t)?;
        out.write_with(&format!("importance_{}.csv", t.code()), |w| report.write_csv(w))?;
        out.write(&format!("importance_{}.json", t.code()), format!("{}\n", report.to_json()).as_bytes())?;
    }
    Ok(())
}

pub fn voronoi_cmd(cfg: &RunConfig, out: &mut Output) -> Result<()> {
    let geometry = read_regions(cfg.require(&cfg.geometry, "geometry")?, &cfg.region_id_property)?;
    let layout = StationLayout::build(cfg, &geometry)?;
    out.write("voronoi.geojson", &geojson_bytes(&partition_geojson(&layout.partition, &layout.projection))?)?;
    out.write_with("overlap.csv", |w| layout.overlap.write_csv(w))?;
    if let Some(path) = &cfg.features {
        let table = firerisk_core::ingest::parse_feature_table(path)?;
        let moved = redistribute_features(&table, &layout.overlap)?;
        out.write_with("station_features.csv", |w| moved.write_csv(w))?;
    }
    Ok(())
}

/// Fits one model per event type on the training split.
pub fn fit_cmd(cfg: &RunConfig, out: &mut Output) -> Result<()> {
    let inputs = Inputs::load(cfg)?;
    let kind = cfg.kind();
    let panel = inputs.panel(kind)?;
    for &t in &inputs.types {
        let typed = panel.for_type(t);
        let features = inputs.model_features(&panel, t)?;
        let parts = split(&typed, cfg.train_fraction, split_seed(cfg.seed, t))?;
        let data = CountData::<f64>::from_panel(&parts.train, &features)?;
        let model = fit_nb2(&data, &features, &cfg.fit).with_context(|| format!("fitting {}", t.code()))?;
        if !model.diagnostics.converged {
            log::warn!("{}: fit stopped before convergence", t.code());
        }
        println!(
            "{} {}: alpha = {}, log-likelihood = {}",
            t.code(),
            kind,
            model.alpha,
            model.diagnostics.log_likelihood
        );
        out.write(&model_name(t, kind), format!("{}\n", model.to_json()).as_bytes())?;
    }
    Ok(())
}

fn load_model(dir: &Path, t: EventType, kind: PeriodKind) -> Result<Nb2Model<f64>> {
    let path = dir.join(model_name(t, kind));
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading model {}", path.display()))?;
    Nb2Model::from_json(&text).with_context(|| format!("loading model {}", path.display()))
}

/// Expected count per unit for one period at unit exposure.
fn unit_means(inputs: &Inputs, model: &Nb2Model<f64>) -> Result<BTreeMap<String, f64>> {
    let table = inputs.feature_table()?;
    let rows: Vec<Vec<f64>> = (0..table.n_regions()).map(|i| table.row(i).to_vec()).collect();
    let mu = model.predict(table.feature_names(), &rows, 1.0)?;
    Ok(table.region_ids().iter().cloned().zip(mu).collect())
}

fn shapes_or_warn(inputs: &Inputs) -> Option<&[Region<f64>]> {
    if inputs.shapes.is_none() {
        log::info!("no geometry configured; skipping GeoJSON output");
    }
    inputs.shapes.as_deref()
}

pub fn predict_cmd(cfg: &RunConfig, models: &Path, out: &mut Output) -> Result<()> {
    let inputs = Inputs::load(cfg)?;
    let kind = cfg.kind();
    for &t in &inputs.types {
        let model = load_model(models, t, kind)?;
        let means = unit_means(&inputs, &model)?;
        let stem = format!("predictions_{}_{}", t.code(), kind);
        out.write_with(&format!("{stem}.csv"), |w| -> csv::Result<()> {
            let mut w = csv_writer(w);
            w.write_record(["region_id", "predicted_mean"])?;
            for (id, m) in &means {
                w.write_record([id.as_str(), &m.to_string()])?;
            }
            w.flush()?;
            Ok(())
        })?;
        if let Some(shapes) = shapes_or_warn(&inputs) {
            let fc = regions_geojson(shapes, |id| {
                let mut p = serde_json::Map::new();
                p.insert("predicted_mean".into(), (*means.get(id)?).into());
                Some(p)
            });
            out.write(&format!("{stem}.geojson"), &geojson_bytes(&fc)?)?;
        }
    }
    Ok(())
}

fn csv_writer(w: &mut Vec<u8>) -> csv::Writer<&mut Vec<u8>> {
    csv::Writer::from_writer(w)
}

pub fn classify_cmd(cfg: &RunConfig, models: &Path, out: &mut Output) -> Result<()> {
    let inputs = Inputs::load(cfg)?;
    let kind = cfg.kind();
    for &t in &inputs.types {
        let model = load_model(models, t, kind)?;
        let means = unit_means(&inputs, &model)?;
        let classes = classify_regions(&means, cfg.classes, None)?;
        let stem = format!("classes_{}_{}", t.code(), kind);
        out.write_with(&format!("{stem}.csv"), |w| classes.write_csv(w))?;
        if let Some(shapes) = shapes_or_warn(&inputs) {
            out.write(&format!("{stem}.geojson"), &geojson_bytes(&classes.geojson(shapes))?)?;
        }
    }
    Ok(())
}

/// Held-out metrics per event type. With `models`, the stored fits are
/// scored on the same test split `fit` held out; otherwise models are refit.
pub fn evaluate_cmd(cfg: &RunConfig, models: Option<&Path>, out: &mut Output) -> Result<()> {
    let inputs = Inputs::load(cfg)?;
    let kind = cfg.kind();
    let panel = inputs.panel(kind)?;
    let granularity = cfg.granularity.as_str();
    let mut rows = Vec::new();
    for &t in &inputs.types {
        let typed = panel.for_type(t);
        let seed = split_seed(cfg.seed, t);
        let report: MetricReport<f64> = match models {
            Some(dir) => {
                let model = load_model(dir, t, kind)?;
                let parts = split(&typed, cfg.train_fraction, seed)?;
                evaluate_model(&model, &parts.test)?
            }
            None => {
                let features = inputs.model_features(&panel, t)?;
                fit_and_evaluate::<f64>(&typed, &features, &cfg.fit, cfg.train_fraction, seed)?.1
            }
        }
        .with_granularity(granularity);
        println!("{} {}: MAE = {}, RMSE = {}", t.code(), kind, report.mae_obs, report.rmse);
        rows.push(MetricRow {
            station: "all".into(),
            model: kind.to_string(),
            event_type: t.code().into(),
            mae: report.mae_obs,
            rmse: report.rmse,
        });
        for (id, r) in &report.per_region {
            rows.push(MetricRow {
                station: id.clone(),
                model: kind.to_string(),
                event_type: t.code().into(),
                mae: r.mae,
                rmse: r.rmse,
            });
        }
        let stem = format!("{}_{}", t.code(), kind);
        let ecdf = residual_ecdf(&report.abs_errors)?;
        out.write_with(&format!("ecdf_{stem}.csv"), |w| ecdf.write_csv(w))?;
        out.write_json(&format!("report_{stem}.json"), &report)?;
        if let Some(shapes) = shapes_or_warn(&inputs) {
            out.write(&format!("errors_{stem}.geojson"), &geojson_bytes(&report.error_geojson(shapes))?)?;
        }
    }
    out.write_with(&format!("metrics_{kind}.csv"), |w| write_metrics_csv(&rows, w))?;
    Ok(())
}

pub fn compare_cmd(cfg: &RunConfig, cutoff: &str, out: &mut Output) -> Result<()> {
    let inputs = Inputs::load(cfg)?;
    let cutoff = crate::pipeline::parse_instant(cutoff, &inputs.tz)?;
    let kind = cfg.kind();
    let panel = inputs.panel(kind)?;
    let mut buf = Vec::new();
    for (i, &t) in inputs.types.iter().enumerate() {
        let features = inputs.model_features(&panel, t)?;
        let cmp = compare_periods::<f64>(
            &panel.for_type(t),
            cutoff,
            &features,
            &cfg.fit,
            cfg.train_fraction,
            split_seed(cfg.seed, t),
        )
        .with_context(|| format!("comparing periods for {}", t.code()))?;
        let mut part = Vec::new();
        cmp.write_csv(&mut part)?;
        let body = if i == 0 {
            &part[..]
        } else {
            let nl = part.iter().position(|b| *b == b'\n').map_or(part.len(), |p| p + 1);
            &part[nl..]
        };
        buf.extend_from_slice(body);
    }
    out.write(&format!("compare_{kind}.csv"), &buf)?;
    Ok(())
}

/// Scenario used when `simulate` is run without `--scenario`.
pub fn default_scenario(seed: u64) -> ScenarioSpec {
    let feature = |name: &str| FeatureGenerator {
        name: name.into(),
        low: 0.0,
        high: 2.0,
    };
    serde_json::from_value(serde_json::json!({
        "n_regions": 60,
        "features": [feature("population"), feature("poi_density"), feature("noise")],
        "types": [
            TypeParams { event_type: EventType::FR, coefficients: vec![0.5, 0.4, -0.3, 0.0], alpha: 0.5 },
            TypeParams { event_type: EventType::MD, coefficients: vec![1.0, 0.3, 0.2, 0.0], alpha: 0.3 },
        ],
        "period_kind": "weekly",
        "n_periods": 104,
        "seed": seed,
    }))
    .expect("valid built-in scenario")
}

pub fn simulate_cmd(scenario: Option<&Path>, seed: Option<u64>, cfg: &RunConfig, out: &mut Output) -> Result<()> {
    let mut spec = match scenario {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing scenario {}", p.display()))?
        }
        None => default_scenario(cfg.seed),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let s = generate(&spec)?;
    let mut events = Vec::new();
    write_events(&mut events, &s.events)?;
    out.write("events.csv", &events)?;
    out.write_with("features.csv", |w| s.features.write_csv(w))?;
    out.write_with("panel.csv", |w| s.panel.write_csv(w))?;
    out.write_json("truth.json", &s.truth)?;
    out.write_json("scenario.json", &spec)?;
    let (regions, stations) = synthetic_layout(&spec.region_ids());
    out.write("regions.geojson", &geojson_bytes(&regions_geojson(&regions, |_| Some(Default::default())))?)?;
    out.write_with("stations.csv", |w| -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["station_id", "lon", "lat"])?;
        for (id, p) in &stations {
            w.write_record([id.clone(), p.x.to_string(), p.y.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    let run = RunConfig {
        events: Some("events.csv".into()),
        features: Some("features.csv".into()),
        geometry: Some("regions.geojson".into()),
        stations: Some("stations.csv".into()),
        timezone: spec.timezone.clone(),
        period_kind: Some(spec.period_kind),
        event_types: spec.types.iter().map(|t| t.event_type).collect(),
        span_start: Some(s.span.start.to_rfc3339()),
        span_end: Some(s.span.end.to_rfc3339()),
        seed: spec.seed,
        feature_subset: FeatureSubset::All,
        out: "results".into(),
        forest: ForestConfig {
            n_trees: 200,
            ..ForestConfig::default()
        },
        ..RunConfig::default()
    };
    out.write_json("config.json", &run)?;
    Ok(())
}

const GRID_ORIGIN: (f64, f64) = (-113.65, 53.45);
const GRID_CELL_DEG: f64 = 0.01;

/// Square cells laid out row by row near the default city, and one station
/// near the centre of every 3 × 3 block of cells.
pub fn synthetic_layout(ids: &[String]) -> (Vec<Region<f64>>, Vec<(String, Point<f64>)>) {
    let cols = (ids.len() as f64).sqrt().ceil() as usize;
    let (x0, y0) = GRID_ORIGIN;
    let regions = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let (cx, cy) = ((i % cols) as f64, (i / cols) as f64);
            let poly = Polygon::rect(
                x0 + cx * GRID_CELL_DEG,
                y0 + cy * GRID_CELL_DEG,
                x0 + (cx + 1.0) * GRID_CELL_DEG,
                y0 + (cy + 1.0) * GRID_CELL_DEG,
            );
            Region::new(id.clone(), vec![poly]).expect("non-empty region")
        })
        .collect();
    let rows = ids.len().div_ceil(cols);
    let mut stations = Vec::new();
    for by in (0..rows).step_by(3) {
        for bx in (0..cols).step_by(3) {
            let x = x0 + (bx as f64 + 1.5 + 0.1 * (by % 2) as f64) * GRID_CELL_DEG;
            let y = y0 + (by as f64 + 1.5) * GRID_CELL_DEG;
            stations.push((format!("S{:02}", stations.len() + 1), Point::new(x, y)));
        }
    }
    (regions, stations)
}

pub struct FetchArgs<'a> {
    pub url: Option<&'a str>,
    pub category: Option<&'a str>,
    pub bbox: Option<BBox>,
    pub endpoint: Option<&'a str>,
    pub dest: &'a Path,
}

pub fn fetch_cmd(args: &FetchArgs<'_>, allow_network: bool, out: &Output) -> Result<()> {
    let bytes = match (args.url, args.category) {
        (Some(url), None) => fetch_url_to_file(url, args.dest, allow_network)?,
        (None, Some(cat)) => {
            let query = build_overpass_query(cat, &args.bbox.unwrap_or(EDMONTON_BBOX))?;
            fetch_overpass(args.endpoint.unwrap_or(DEFAULT_OVERPASS_URL), &query, args.dest, allow_network)?
        }
        _ => bail!("give exactly one of --url or --category"),
    };
    let name = args
        .dest
        .file_name()
        .ok_or_else(|| anyhow!("destination has no file name"))?
        .to_string_lossy();
    let meta = args.dest.with_file_name(format!("{name}.meta.json"));
    let mut m = serde_json::to_vec_pretty(out.metadata())?;
    m.push(b'\n');
    atomic_write(&meta, &m)?;
    println!("fetched {bytes} bytes into {}", args.dest.display());
    Ok(())
}

pub fn parse_bbox(s: &str) -> Result<BBox, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("bad bbox value `{x}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [south, west, north, east] if south < north && west < east => Ok(BBox {
            south,
            west,
            north,
            east,
        }),
        _ => Err("bbox must be south,west,north,east with south < north and west < east".into()),
    }
}
