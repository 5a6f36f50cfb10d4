//! Loading configured inputs into panels at the requested spatial unit.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use chrono::{DateTime, NaiveDate, TimeZone, Utc};
use chrono_tz::Tz;
use firerisk_core::importance::{feature_importance, select_features, Dataset, ImportanceReport};
use firerisk_core::ingest::{
    parse_events, parse_feature_table, parse_region_geometry_str, parse_stations, parse_timestamp, parse_timezone,
    EventRecord, EventType, FeatureTable,
};
use firerisk_core::panel::{aggregate, join_features, Panel, PeriodKind, TimeSpan};
use firerisk_core::seed::derive_seed;
use firerisk_core::spatial::{
    envelope, overlap_matrix, redistribute_features, voronoi, LocalProjection, OverlapMatrix, Point, Polygon,
    Region, VoronoiPartition,
};

use crate::config::{FeatureSubset, Granularity, RunConfig};

/// Sub-streams of the master seed.
pub const STREAM_FOREST: u64 = 1;
pub const STREAM_SPLIT: u64 = 2;

pub fn type_key(t: EventType) -> u64 {
    EventType::ALL.iter().position(|x| *x == t).expect("listed type") as u64
}

pub fn forest_seed(master: u64, t: EventType) -> u64 {
    derive_seed(master, &[STREAM_FOREST, type_key(t)])
}

pub fn split_seed(master: u64, t: EventType) -> u64 {
    derive_seed(master, &[STREAM_SPLIT, type_key(t)])
}

/// Station partition built from stations and neighborhood shapes.
pub struct StationLayout {
    pub projection: LocalProjection<f64>,
    pub partition: VoronoiPartition<f64>,
    pub overlap: OverlapMatrix<f64>,
    /// Cells mapped back to WGS84, keyed by station id.
    pub cells: Vec<Region<f64>>,
}

impl StationLayout {
    pub fn build(cfg: &RunConfig, neighborhoods: &[Region<f64>]) -> Result<Self> {
        let stations = parse_stations(cfg.require(&cfg.stations, "stations")?)?;
        let mut pts: Vec<Point<f64>> = neighborhoods.iter().flat_map(|r| r.vertices().copied()).collect();
        pts.extend(stations.stations.iter().map(|s| Point::new(s.lon, s.lat)));
        let projection = LocalProjection::fit(&pts)?;
        let planar: Vec<Region<f64>> = neighborhoods.iter().map(|r| r.map(|p| projection.forward(p))).collect();
        let bounding = match &cfg.boundary {
            Some(path) => {
                let shapes = read_regions(path, &cfg.region_id_property)?;
                let poly = single_polygon(&shapes)
                    .with_context(|| format!("{} must hold exactly one polygon", path.display()))?;
                poly.map(|p| projection.forward(p))
            }
            None => envelope(&planar, 0.01).ok_or_else(|| anyhow!("geometry has no vertices"))?,
        };
        let sites: Vec<Point<f64>> = stations
            .stations
            .iter()
            .map(|s| projection.forward(Point::new(s.lon, s.lat)))
            .collect();
        let partition = voronoi(&stations.ids(), &sites, &bounding)?;
        let overlap = overlap_matrix(&planar, &partition)?;
        let cells = partition
            .cells
            .iter()
            .zip(&partition.station_ids)
            .filter_map(|(c, id)| {
                let poly = c.as_ref()?.map(|p| projection.inverse(p));
                Region::new(id.clone(), vec![poly]).ok()
            })
            .collect();
        Ok(Self {
            projection,
            partition,
            overlap,
            cells,
        })
    }

    fn station_of(&self, e: &EventRecord) -> Option<String> {
        if let Some((lon, lat)) = e.location {
            let k = self.partition.nearest(&self.projection.forward(Point::new(lon, lat)));
            return Some(self.partition.station_ids[k].clone());
        }
        let rid = e.region_id.as_deref()?;
        let i = self.overlap.rows.iter().position(|r| r == rid)?;
        Some(self.overlap.cols[self.overlap.dominant(i)].clone())
    }
}

fn single_polygon(shapes: &[Region<f64>]) -> Option<Polygon<f64>> {
    match shapes {
        [r] if r.polygons.len() == 1 => Some(r.polygons[0].clone()),
        _ => None,
    }
}

pub fn read_regions(path: &Path, id_property: &str) -> Result<Vec<Region<f64>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_region_geometry_str(&text, id_property)?)
}

pub fn parse_instant(text: &str, tz: &Tz) -> Result<DateTime<Utc>> {
    if let Some(t) = parse_timestamp(text, tz) {
        return Ok(t);
    }
    let d = NaiveDate::parse_from_str(text.trim(), "%Y-%m-%d").with_context(|| format!("bad date `{text}`"))?;
    let local = d.and_hms_opt(0, 0, 0).expect("midnight");
    tz.from_local_datetime(&local)
        .earliest()
        .map(|t| t.with_timezone(&Utc))
        .ok_or_else(|| anyhow!("`{text}` does not exist in {tz}"))
}

/// Events assigned to spatial units, with the unit-level covariates.
pub struct Inputs {
    pub cfg: RunConfig,
    pub tz: Tz,
    pub events: Vec<EventRecord>,
    pub span: TimeSpan,
    pub types: Vec<EventType>,
    pub unit_ids: Vec<String>,
    pub features: Option<FeatureTable>,
    /// WGS84 shapes of the units, for map output.
    pub shapes: Option<Vec<Region<f64>>>,
    pub stations: Option<StationLayout>,
}

impl Inputs {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let tz = parse_timezone(&cfg.timezone)?;
        let mut format = cfg.event_format.clone();
        format.timezone = cfg.timezone.clone();
        let events_path = cfg.require(&cfg.events, "events")?;
        let parsed = parse_events(events_path, &format)?;
        let bad = parsed.errors().count();
        if bad > 0 {
            let first = parsed.errors().next().expect("non-empty");
            log::warn!("skipped {bad} malformed event row(s); first: {first}");
        }
        let mut events: Vec<EventRecord> = parsed.records().cloned().collect();
        if events.is_empty() {
            bail!("{} contains no usable events", events_path.display());
        }

        let span = match (&cfg.span_start, &cfg.span_end) {
            (Some(s), Some(e)) => TimeSpan {
                start: parse_instant(s, &tz)?,
                end: parse_instant(e, &tz)?,
            },
            (s, e) => {
                let first = events.iter().map(|e| e.dispatch_time).min().expect("non-empty");
                let last = events.iter().map(|e| e.dispatch_time).max().expect("non-empty");
                TimeSpan {
                    start: s.as_deref().map(|s| parse_instant(s, &tz)).transpose()?.unwrap_or(first),
                    end: e
                        .as_deref()
                        .map(|e| parse_instant(e, &tz))
                        .transpose()?
                        .unwrap_or(last + chrono::Duration::seconds(1)),
                }
            }
        };

        let types: Vec<EventType> = if cfg.event_types.is_empty() {
            events.iter().map(|e| e.event_type).collect::<BTreeSet<_>>().into_iter().collect()
        } else {
            let mut t = cfg.event_types.clone();
            t.sort();
            t.dedup();
            t
        };

        let table = cfg.features.as_deref().map(parse_feature_table).transpose()?;
        let geometry = cfg
            .geometry
            .as_deref()
            .map(|p| read_regions(p, &cfg.region_id_property))
            .transpose()?;

        if let Some(g) = &geometry {
            let locator = firerisk_core::spatial::RegionLocator::new(g);
            for e in events.iter_mut().filter(|e| e.region_id.is_none()) {
                if let Some((lon, lat)) = e.location {
                    e.region_id = locator.locate(&Point::new(lon, lat)).map(String::from);
                }
            }
        }

        let (unit_ids, features, shapes, stations) = match cfg.granularity {
            Granularity::Neighborhood => {
                let ids = match (&table, &geometry) {
                    (Some(t), _) => t.region_ids().to_vec(),
                    (None, Some(g)) => g.iter().map(|r| r.region_id.clone()).collect(),
                    (None, None) => events
                        .iter()
                        .filter_map(|e| e.region_id.clone())
                        .collect::<BTreeSet<_>>()
                        .into_iter()
                        .collect(),
                };
                (ids, table, geometry, None)
            }
            Granularity::Station => {
                let g = geometry
                    .as_deref()
                    .ok_or_else(|| anyhow!("station granularity needs `geometry`"))?;
                let layout = StationLayout::build(cfg, g)?;
                for e in &mut events {
                    e.region_id = layout.station_of(e);
                }
                let features = table
                    .as_ref()
                    .map(|t| redistribute_features(t, &layout.overlap))
                    .transpose()?;
                let ids = layout.partition.station_ids.clone();
                let shapes = Some(layout.cells.clone());
                (ids, features, shapes, Some(layout))
            }
        };

        Ok(Self {
            cfg: cfg.clone(),
            tz,
            events,
            span,
            types,
            unit_ids,
            features,
            shapes,
            stations,
        })
    }

    pub fn counts(&self, kind: PeriodKind) -> Result<Panel> {
        Ok(aggregate(&self.events, &self.unit_ids, kind, self.span, &self.types, &self.tz)?)
    }

    /// City-wide counts: every event mapped to one `city` unit.
    pub fn city_counts(&self, kind: PeriodKind) -> Result<Panel> {
        let events: Vec<EventRecord> = self
            .events
            .iter()
            .map(|e| EventRecord {
                region_id: Some("city".into()),
                ..e.clone()
            })
            .collect();
        Ok(aggregate(&events, &["city".to_string()], kind, self.span, &self.types, &self.tz)?)
    }

    pub fn feature_table(&self) -> Result<&FeatureTable> {
        self.features
            .as_ref()
            .ok_or_else(|| anyhow!("`features` path is not configured"))
    }

    /// Counts with every covariate joined.
    pub fn panel(&self, kind: PeriodKind) -> Result<Panel> {
        Ok(join_features(&self.counts(kind)?, self.feature_table()?, None)?)
    }

    pub fn importance(&self, panel: &Panel, t: EventType) -> Result<ImportanceReport<f64>> {
        let data = Dataset::<f64>::from_panel(&panel.for_type(t))?;
        let config = firerisk_core::importance::ForestConfig {
            seed: forest_seed(self.cfg.seed, t),
            ..self.cfg.forest
        };
        Ok(feature_importance(&data, &config, self.cfg.importance_threshold)?)
    }

    /// Model covariates for `t` under the configured subset.
    pub fn model_features(&self, panel: &Panel, t: EventType) -> Result<Vec<String>> {
        let table = self.feature_table()?;
        match &self.cfg.feature_subset {
            FeatureSubset::All => Ok(table.feature_names().to_vec()),
            FeatureSubset::Named(names) => {
                if let Some(bad) = names.iter().find(|n| table.feature_index(n).is_none()) {
                    bail!(
                        "unknown feature `{bad}`; available: {}",
                        table.feature_names().join(", ")
                    );
                }
                Ok(names.clone())
            }
            FeatureSubset::Auto => {
                let report = self.importance(panel, t)?;
                let sel = select_features(&report, self.cfg.importance_threshold);
                log::info!("{}: selected features {:?}", t.code(), sel.features);
                Ok(sel.features)
            }
        }
    }
}
