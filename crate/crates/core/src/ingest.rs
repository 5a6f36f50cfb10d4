//! Input parsing: dispatched events, region feature tables, stations,
//! region geometry, Overpass PoI queries, and gated HTTP fetches.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, TimeZone, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spatial::{Point, Polygon, Region};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("table is empty")]
    EmptyTable,
    #[error("negative value {value} at row {row}, column {column} (`{feature}`)")]
    NegativeValue {
        row: usize,
        column: usize,
        feature: String,
        value: f64,
    },
    #[error("invalid number `{text}` at row {row}, column {column}")]
    InvalidNumber {
        row: usize,
        column: usize,
        text: String,
    },
    #[error("duplicate region `{0}`")]
    DuplicateRegion(String),
    #[error("duplicate feature `{0}`")]
    DuplicateFeature(String),
    #[error("duplicate station `{0}`")]
    DuplicateStation(String),
    #[error("stations `{0}` and `{1}` share a location")]
    CoincidentStations(String, String),
    #[error("coordinate out of range at row {row}: ({lon}, {lat})")]
    CoordinateRange { row: usize, lon: f64, lat: f64 },
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("unknown PoI category `{0}`")]
    UnknownCategory(String),
    #[error("unknown timezone `{0}`")]
    UnknownTimezone(String),
    #[error("network access disabled; pass --allow-network to fetch")]
    NetworkDisabled,
    #[error("http status {0}")]
    HttpStatus(u16),
    #[error("transport error: {0}")]
    Transport(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Dispatch categories of the fire-rescue event feed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventType {
    FR,
    MD,
    AL,
    CA,
    TA,
    RC,
    OF,
    VF,
    HZ,
    TM,
    CM,
    XX,
}

impl EventType {
    pub const ALL: [EventType; 12] = [
        EventType::FR,
        EventType::MD,
        EventType::AL,
        EventType::CA,
        EventType::TA,
        EventType::RC,
        EventType::OF,
        EventType::VF,
        EventType::HZ,
        EventType::TM,
        EventType::CM,
        EventType::XX,
    ];

    pub fn code(self) -> &'static str {
        match self {
            EventType::FR => "FR",
            EventType::MD => "MD",
            EventType::AL => "AL",
            EventType::CA => "CA",
            EventType::TA => "TA",
            EventType::RC => "RC",
            EventType::OF => "OF",
            EventType::VF => "VF",
            EventType::HZ => "HZ",
            EventType::TM => "TM",
            EventType::CM => "CM",
            EventType::XX => "XX",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            EventType::FR => "Fire",
            EventType::MD => "Medical",
            EventType::AL => "Alarms",
            EventType::CA => "Citizen assist",
            EventType::TA => "Motor vehicle incident",
            EventType::RC => "Rescue",
            EventType::OF => "Outside fire",
            EventType::VF => "Vehicle fire",
            EventType::HZ => "Hazardous materials",
            EventType::TM => "Training/maintenance",
            EventType::CM => "Community",
            EventType::XX => "Others",
        }
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown event type `{0}`")]
pub struct UnknownEventType(pub String);

impl FromStr for EventType {
    type Err = UnknownEventType;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        EventType::ALL
            .iter()
            .copied()
            .find(|e| e.code().eq_ignore_ascii_case(t))
            .ok_or_else(|| UnknownEventType(t.to_string()))
    }
}

/// Parses a comma-separated list such as `FR,MD,AL`.
pub fn parse_event_types(list: &str) -> Result<Vec<EventType>, UnknownEventType> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

/// One dispatched incident.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_id: String,
    pub dispatch_time: DateTime<Utc>,
    pub event_type: EventType,
    /// `(longitude, latitude)` in WGS84 degrees.
    pub location: Option<(f64, f64)>,
    pub region_id: Option<String>,
}

/// Why a single event row was rejected.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum RowErrorKind {
    #[error("unknown event type `{0}`")]
    UnknownEventType(String),
    #[error("malformed timestamp `{0}`")]
    MalformedTimestamp(String),
    #[error("row has neither coordinates nor region_id")]
    MissingLocation,
    #[error("coordinate out of range or unparseable: lon `{lon}`, lat `{lat}`")]
    BadCoordinate { lon: String, lat: String },
    #[error("csv row error: {0}")]
    Csv(String),
}

/// A rejected row with its 1-based line number in the source file.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: {kind}")]
pub struct RowError {
    pub line: u64,
    pub kind: RowErrorKind,
}

/// Maps the logical event fields onto header names of a CSV export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EventFormat {
    pub event_id: String,
    pub dispatch_time: String,
    pub event_type: String,
    pub lon: String,
    pub lat: String,
    pub region_id: String,
    /// IANA zone applied to timestamps that carry no offset.
    pub timezone: String,
}

impl Default for EventFormat {
    fn default() -> Self {
        Self {
            event_id: "event_id".into(),
            dispatch_time: "dispatch_time".into(),
            event_type: "event_type".into(),
            lon: "lon".into(),
            lat: "lat".into(),
            region_id: "region_id".into(),
            timezone: DEFAULT_TIMEZONE.into(),
        }
    }
}

pub const DEFAULT_TIMEZONE: &str = "America/Edmonton";

pub fn parse_timezone(name: &str) -> Result<Tz, IngestError> {
    name.parse::<Tz>()
        .map_err(|_| IngestError::UnknownTimezone(name.to_string()))
}

/// Parses an RFC 3339 timestamp, or a naive `YYYY-MM-DD[ T]HH:MM[:SS]`
/// timestamp interpreted as civil time in `tz`.
pub fn parse_timestamp(text: &str, tz: &Tz) -> Option<DateTime<Utc>> {
    let t = text.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(t) {
        return Some(dt.with_timezone(&Utc));
    }
    const NAIVE: [&str; 6] = [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
        "%Y/%m/%d %H:%M:%S",
        "%Y/%m/%d %I:%M:%S %p",
    ];
    let naive = NAIVE
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(t, f).ok())?;
    tz.from_local_datetime(&naive)
        .earliest()
        .map(|dt| dt.with_timezone(&Utc))
}

/// Result of reading an events file.
#[derive(Debug, Clone, Default)]
pub struct EventParse {
    /// One entry per data row, in file order.
    pub rows: Vec<Result<EventRecord, RowError>>,
    /// Header columns not used by the format.
    pub ignored_columns: Vec<String>,
}

impl EventParse {
    pub fn records(&self) -> impl Iterator<Item = &EventRecord> {
        self.rows.iter().filter_map(|r| r.as_ref().ok())
    }

    pub fn errors(&self) -> impl Iterator<Item = &RowError> {
        self.rows.iter().filter_map(|r| r.as_ref().err())
    }

    /// All records, or the first row error.
    pub fn into_strict(self) -> Result<Vec<EventRecord>, RowError> {
        self.rows.into_iter().collect()
    }
}

pub fn parse_events(path: &Path, format: &EventFormat) -> Result<EventParse, IngestError> {
    let file = File::open(path).map_err(io_err(path))?;
    parse_events_reader(file, format)
}

pub fn parse_events_reader<R: Read>(
    reader: R,
    format: &EventFormat,
) -> Result<EventParse, IngestError> {
    let tz = parse_timezone(&format.timezone)?;
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| find(name).ok_or_else(|| IngestError::MissingColumn(name.to_string()));

    let id_col = find(&format.event_id);
    let time_col = need(&format.dispatch_time)?;
    let type_col = need(&format.event_type)?;
    let lon_col = find(&format.lon);
    let lat_col = find(&format.lat);
    let region_col = find(&format.region_id);
    if region_col.is_none() && (lon_col.is_none() || lat_col.is_none()) {
        return Err(IngestError::MissingColumn(format!(
            "{} or {}/{}",
            format.region_id, format.lon, format.lat
        )));
    }
    let used: HashSet<usize> = [Some(time_col), Some(type_col), id_col, lon_col, lat_col, region_col]
        .into_iter()
        .flatten()
        .collect();
    let ignored_columns: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| !used.contains(i))
        .map(|(_, h)| h.to_string())
        .collect();
    if !ignored_columns.is_empty() {
        log::warn!("ignoring unknown event columns: {}", ignored_columns.join(", "));
    }

    let mut rows = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        // header is line 1
        let fallback_line = idx as u64 + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(fallback_line);
                rows.push(Err(RowError {
                    line,
                    kind: RowErrorKind::Csv(e.to_string()),
                }));
                continue;
            }
        };
        let line = rec.position().map(|p| p.line()).unwrap_or(fallback_line);
        let get = |c: Option<usize>| c.and_then(|c| rec.get(c)).unwrap_or("");
        let row = parse_event_row(
            get(id_col),
            get(Some(time_col)),
            get(Some(type_col)),
            get(lon_col),
            get(lat_col),
            get(region_col),
            &tz,
            line,
        )
        .map_err(|kind| RowError { line, kind });
        rows.push(row);
    }
    Ok(EventParse {
        rows,
        ignored_columns,
    })
}

#[allow(clippy::too_many_arguments)]
fn parse_event_row(
    id: &str,
    time: &str,
    kind: &str,
    lon: &str,
    lat: &str,
    region: &str,
    tz: &Tz,
    line: u64,
) -> Result<EventRecord, RowErrorKind> {
    let event_type: EventType = kind
        .parse()
        .map_err(|e: UnknownEventType| RowErrorKind::UnknownEventType(e.0))?;
    let dispatch_time =
        parse_timestamp(time, tz).ok_or_else(|| RowErrorKind::MalformedTimestamp(time.into()))?;
    let location = match (lon.is_empty(), lat.is_empty()) {
        (true, true) => None,
        _ => {
            let bad = || RowErrorKind::BadCoordinate {
                lon: lon.into(),
                lat: lat.into(),
            };
            let x: f64 = lon.parse().map_err(|_| bad())?;
            let y: f64 = lat.parse().map_err(|_| bad())?;
            if !(-180.0..=180.0).contains(&x) || !(-90.0..=90.0).contains(&y) {
                return Err(bad());
            }
            Some((x, y))
        }
    };
    let region_id = (!region.is_empty()).then(|| region.to_string());
    if location.is_none() && region_id.is_none() {
        return Err(RowErrorKind::MissingLocation);
    }
    Ok(EventRecord {
        event_id: if id.is_empty() {
            format!("row{line}")
        } else {
            id.to_string()
        },
        dispatch_time,
        event_type,
        location,
        region_id,
    })
}

/// Writes events in the canonical `event_id,dispatch_time,event_type,lon,lat,region_id` layout.
pub fn write_events<W: Write>(writer: W, events: &[EventRecord]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["event_id", "dispatch_time", "event_type", "lon", "lat", "region_id"])?;
    for e in events {
        let (lon, lat) = e
            .location
            .map(|(x, y)| (x.to_string(), y.to_string()))
            .unwrap_or_default();
        w.write_record([
            e.event_id.as_str(),
            &e.dispatch_time.to_rfc3339_opts(chrono::SecondsFormat::AutoSi, true),
            e.event_type.code(),
            &lon,
            &lat,
            e.region_id.as_deref().unwrap_or(""),
        ])?;
    }
    w.flush().map_err(|e| IngestError::Csv(e.into()))?;
    Ok(())
}

/// Region × feature matrix of non-negative covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    region_ids: Vec<String>,
    feature_names: Vec<String>,
    /// Row-major, `region_ids.len() × feature_names.len()`.
    values: Vec<f64>,
}

impl FeatureTable {
    /// Builds a table, enforcing uniqueness and non-negative finite values.
    pub fn new(
        region_ids: Vec<String>,
        feature_names: Vec<String>,
        values: Vec<f64>,
    ) -> Result<Self, IngestError> {
        assert_eq!(values.len(), region_ids.len() * feature_names.len());
        let mut seen = HashSet::new();
        for r in &region_ids {
            if !seen.insert(r.as_str()) {
                return Err(IngestError::DuplicateRegion(r.clone()));
            }
        }
        let mut seen = HashSet::new();
        for f in &feature_names {
            if !seen.insert(f.as_str()) {
                return Err(IngestError::DuplicateFeature(f.clone()));
            }
        }
        let p = feature_names.len();
        for (i, v) in values.iter().enumerate() {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(IngestError::NegativeValue {
                    row: i / p.max(1) + 1,
                    column: i % p.max(1) + 1,
                    feature: feature_names[i % p.max(1)].clone(),
                    value: *v,
                });
            }
        }
        Ok(Self {
            region_ids,
            feature_names,
            values,
        })
    }

    pub fn region_ids(&self) -> &[String] {
        &self.region_ids
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn n_regions(&self) -> usize {
        self.region_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_features();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn value(&self, region: usize, feature: usize) -> f64 {
        self.values[region * self.n_features() + feature]
    }

    pub fn region_index(&self, region_id: &str) -> Option<usize> {
        self.region_ids.iter().position(|r| r == region_id)
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    pub fn row_for(&self, region_id: &str) -> Option<&[f64]> {
        self.region_index(region_id).map(|i| self.row(i))
    }

    pub fn column(&self, feature: usize) -> Vec<f64> {
        (0..self.n_regions()).map(|i| self.value(i, feature)).collect()
    }

    /// Column totals over all regions.
    pub fn totals(&self) -> Vec<f64> {
        (0..self.n_features())
            .map(|j| (0..self.n_regions()).map(|i| self.value(i, j)).sum())
            .collect()
    }

    /// Projects onto `names`, in the requested order.
    pub fn select(&self, names: &[String]) -> Result<FeatureTable, String> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| self.feature_index(n).ok_or_else(|| n.clone()))
            .collect::<Result<_, _>>()?;
        let mut values = Vec::with_capacity(self.n_regions() * idx.len());
        for i in 0..self.n_regions() {
            values.extend(idx.iter().map(|&j| self.value(i, j)));
        }
        Ok(FeatureTable {
            region_ids: self.region_ids.clone(),
            feature_names: names.to_vec(),
            values,
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), IngestError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["region_id".to_string()];
        header.extend(self.feature_names.iter().cloned());
        w.write_record(&header)?;
        for (i, r) in self.region_ids.iter().enumerate() {
            let mut rec = vec![r.clone()];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| IngestError::Csv(e.into()))?;
        Ok(())
    }
}

pub fn parse_feature_table(path: &Path) -> Result<FeatureTable, IngestError> {
    let file = File::open(path).map_err(io_err(path))?;
    parse_feature_table_reader(file)
}

pub fn parse_feature_table_reader<R: Read>(reader: R) -> Result<FeatureTable, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 {
        return Err(IngestError::EmptyTable);
    }
    let feature_names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut region_ids = Vec::new();
    let mut values = Vec::new();
    let mut seen = HashSet::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let id = rec.get(0).unwrap_or("").to_string();
        if !seen.insert(id.clone()) {
            return Err(IngestError::DuplicateRegion(id));
        }
        for (c, name) in feature_names.iter().enumerate() {
            let text = rec.get(c + 1).unwrap_or("");
            let v: f64 = text.parse().map_err(|_| IngestError::InvalidNumber {
                row,
                column: c + 1,
                text: text.to_string(),
            })?;
            if !v.is_finite() || v < 0.0 {
                return Err(IngestError::NegativeValue {
                    row,
                    column: c + 1,
                    feature: name.clone(),
                    value: v,
                });
            }
            values.push(v);
        }
        region_ids.push(id);
    }
    if region_ids.is_empty() {
        return Err(IngestError::EmptyTable);
    }
    FeatureTable::new(region_ids, feature_names, values)
}

/// Fire stations with WGS84 locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationSet {
    pub stations: Vec<Station>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub station_id: String,
    pub lon: f64,
    pub lat: f64,
}

impl StationSet {
    pub fn new(stations: Vec<Station>) -> Result<Self, IngestError> {
        let mut ids = HashSet::new();
        for s in &stations {
            if !ids.insert(s.station_id.as_str()) {
                return Err(IngestError::DuplicateStation(s.station_id.clone()));
            }
        }
        for (i, a) in stations.iter().enumerate() {
            for b in &stations[i + 1..] {
                if a.lon == b.lon && a.lat == b.lat {
                    return Err(IngestError::CoincidentStations(
                        a.station_id.clone(),
                        b.station_id.clone(),
                    ));
                }
            }
        }
        Ok(Self { stations })
    }

    pub fn ids(&self) -> Vec<String> {
        self.stations.iter().map(|s| s.station_id.clone()).collect()
    }
}

pub fn parse_stations(path: &Path) -> Result<StationSet, IngestError> {
    let file = File::open(path).map_err(io_err(path))?;
    parse_stations_reader(file)
}

pub fn parse_stations_reader<R: Read>(reader: R) -> Result<StationSet, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut stations = Vec::new();
    for (r, rec) in rdr.deserialize::<Station>().enumerate() {
        let s = rec?;
        if !(-180.0..=180.0).contains(&s.lon) || !(-90.0..=90.0).contains(&s.lat) {
            return Err(IngestError::CoordinateRange {
                row: r + 1,
                lon: s.lon,
                lat: s.lat,
            });
        }
        stations.push(s);
    }
    if stations.is_empty() {
        return Err(IngestError::EmptyTable);
    }
    StationSet::new(stations)
}

/// Reads a GeoJSON FeatureCollection whose features carry a `region_id`
/// property (string or number) and Polygon/MultiPolygon geometry in WGS84.
pub fn parse_region_geometry(path: &Path) -> Result<Vec<Region<f64>>, IngestError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_region_geometry_str(&text, "region_id")
}

pub fn parse_region_geometry_str(text: &str, id_property: &str) -> Result<Vec<Region<f64>>, IngestError> {
    let gj: geojson::GeoJson = text
        .parse()
        .map_err(|e: geojson::Error| IngestError::Geometry(e.to_string()))?;
    let fc = match gj {
        geojson::GeoJson::FeatureCollection(fc) => fc,
        _ => return Err(IngestError::Geometry("expected a FeatureCollection".into())),
    };
    let mut out = Vec::with_capacity(fc.features.len());
    let mut ids = BTreeSet::new();
    for (i, f) in fc.features.into_iter().enumerate() {
        let id = match f.property(id_property) {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(serde_json::Value::Number(n)) => n.to_string(),
            _ => {
                return Err(IngestError::Geometry(format!(
                    "feature {i} lacks property `{id_property}`"
                )))
            }
        };
        if !ids.insert(id.clone()) {
            return Err(IngestError::DuplicateRegion(id));
        }
        let geom = f
            .geometry
            .ok_or_else(|| IngestError::Geometry(format!("region `{id}` has no geometry")))?;
        let polygons = match geom.value {
            geojson::Value::Polygon(rings) => vec![polygon_from_rings(&id, &rings)?],
            geojson::Value::MultiPolygon(polys) => polys
                .iter()
                .map(|rings| polygon_from_rings(&id, rings))
                .collect::<Result<_, _>>()?,
            _ => {
                return Err(IngestError::Geometry(format!(
                    "region `{id}` is not a polygon"
                )))
            }
        };
        let region = Region::new(id.clone(), polygons)
            .map_err(|e| IngestError::Geometry(format!("region `{id}`: {e}")))?;
        out.push(region);
    }
    Ok(out)
}

fn polygon_from_rings(id: &str, rings: &[Vec<Vec<f64>>]) -> Result<Polygon<f64>, IngestError> {
    let to_ring = |ring: &Vec<Vec<f64>>| -> Result<Vec<Point<f64>>, IngestError> {
        if ring.len() < 4 || ring.first() != ring.last() {
            return Err(IngestError::Geometry(format!(
                "region `{id}` has an unclosed or short ring"
            )));
        }
        ring.iter()
            .map(|c| match c.as_slice() {
                [x, y, ..] if (-180.0..=180.0).contains(x) && (-90.0..=90.0).contains(y) => {
                    Ok(Point::new(*x, *y))
                }
                _ => Err(IngestError::Geometry(format!(
                    "region `{id}` has an invalid coordinate"
                ))),
            })
            .collect()
    };
    let mut iter = rings.iter();
    let exterior = iter
        .next()
        .ok_or_else(|| IngestError::Geometry(format!("region `{id}` has no rings")))?;
    let exterior = to_ring(exterior)?;
    let holes = iter.map(to_ring).collect::<Result<Vec<_>, _>>()?;
    Ok(Polygon::from_closed_rings(exterior, holes))
}

/// The nine grouped OpenStreetMap features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoiCategory {
    Food,
    Education,
    Healthcare,
    Entertainment,
    PublicService,
    Commercial,
    Retail,
    TrafficLights,
    BusStops,
}

impl PoiCategory {
    pub const ALL: [PoiCategory; 9] = [
        PoiCategory::Food,
        PoiCategory::Education,
        PoiCategory::Healthcare,
        PoiCategory::Entertainment,
        PoiCategory::PublicService,
        PoiCategory::Commercial,
        PoiCategory::Retail,
        PoiCategory::TrafficLights,
        PoiCategory::BusStops,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PoiCategory::Food => "Food",
            PoiCategory::Education => "Education",
            PoiCategory::Healthcare => "Healthcare",
            PoiCategory::Entertainment => "Entertainment",
            PoiCategory::PublicService => "Public Service",
            PoiCategory::Commercial => "Commercial",
            PoiCategory::Retail => "Retail",
            PoiCategory::TrafficLights => "traffic_lights",
            PoiCategory::BusStops => "bus_stops",
        }
    }

    /// OSM key and the values grouped under this category.
    pub fn tags(self) -> (&'static str, &'static [&'static str]) {
        match self {
            PoiCategory::Food => (
                "amenity",
                &["bar", "cafe", "fast_food", "food_court", "pub", "restaurant"],
            ),
            PoiCategory::Education => (
                "amenity",
                &["college", "kindergarten", "library", "school", "university"],
            ),
            PoiCategory::Healthcare => ("amenity", &["clinic", "hospital"]),
            PoiCategory::Entertainment => (
                "amenity",
                &[
                    "arts_centre",
                    "cinema",
                    "community_centre",
                    "events_venue",
                    "nightclub",
                    "theatre",
                ],
            ),
            PoiCategory::PublicService => (
                "amenity",
                &["courthouse", "fire_station", "police", "townhall"],
            ),
            PoiCategory::Commercial => ("building", &["office", "commercial", "government"]),
            PoiCategory::Retail => ("building", &["retail"]),
            PoiCategory::TrafficLights => ("highway", &["traffic_signals"]),
            PoiCategory::BusStops => ("highway", &["bus_stop"]),
        }
    }
}

impl FromStr for PoiCategory {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = |t: &str| {
            t.chars()
                .filter(|c| c.is_ascii_alphanumeric())
                .collect::<String>()
                .to_ascii_lowercase()
        };
        let key = norm(s);
        PoiCategory::ALL
            .iter()
            .copied()
            .find(|c| norm(c.name()) == key)
            .ok_or_else(|| IngestError::UnknownCategory(s.to_string()))
    }
}

/// South/west/north/east bounding box in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub south: f64,
    pub west: f64,
    pub north: f64,
    pub east: f64,
}

/// Approximate extent of the City of Edmonton.
pub const EDMONTON_BBOX: BBox = BBox {
    south: 53.39,
    west: -113.72,
    north: 53.72,
    east: -113.27,
};

/// Overpass QL selecting nodes and ways tagged with the category's values.
pub fn build_overpass_query(category: &str, bbox: &BBox) -> Result<String, IngestError> {
    let cat: PoiCategory = category.parse()?;
    let (key, values) = cat.tags();
    let filter = format!("[\"{key}\"~\"^({})$\"]", values.join("|"));
    let area = format!(
        "({},{},{},{})",
        bbox.south, bbox.west, bbox.north, bbox.east
    );
    Ok(format!(
        "[out:json][timeout:180];\n(\n  node{filter}{area};\n  way{filter}{area};\n);\nout center;\n"
    ))
}

pub const DEFAULT_OVERPASS_URL: &str = "https://overpass-api.de/api/interpreter";

/// Downloads `url` into `dest`, writing through a temporary file in the
/// destination directory and renaming it into place.
pub fn fetch_url_to_file(url: &str, dest: &Path, allow_network: bool) -> Result<u64, IngestError> {
    fetch(url, None, dest, allow_network)
}

/// POSTs an Overpass query and stores the JSON response.
pub fn fetch_overpass(
    endpoint: &str,
    query: &str,
    dest: &Path,
    allow_network: bool,
) -> Result<u64, IngestError> {
    fetch(endpoint, Some(query), dest, allow_network)
}

fn fetch(url: &str, body: Option<&str>, dest: &Path, allow_network: bool) -> Result<u64, IngestError> {
    if !allow_network {
        return Err(IngestError::NetworkDisabled);
    }
    if !(url.starts_with("http://") || url.starts_with("https://")) {
        return Err(IngestError::Transport(format!("unsupported url `{url}`")));
    }
    let resp = match body {
        None => ureq::get(url).call(),
        Some(q) => ureq::post(url).send_form(&[("data", q)]),
    };
    let resp = match resp {
        Ok(r) => r,
        Err(ureq::Error::Status(code, _)) => return Err(IngestError::HttpStatus(code)),
        Err(e) => return Err(IngestError::Transport(e.to_string())),
    };
    let dir = dest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    let n = std::io::copy(&mut resp.into_reader(), &mut tmp).map_err(io_err(dest))?;
    tmp.as_file().sync_all().map_err(io_err(dest))?;
    tmp.persist(dest).map_err(|e| IngestError::Io {
        path: dest.to_path_buf(),
        source: e.error,
    })?;
    Ok(n)
}
