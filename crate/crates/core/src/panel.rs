//! Region × period × event-type count panels.
//!
//! Periods are aligned in local civil time of a configured zone (weeks start
//! Monday 00:00, months and years are calendar-aligned) and stored as UTC
//! instants. Every cell of the grid is materialised, zeros included, and
//! every period carries unit exposure.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{DateTime, Datelike, Duration, NaiveDate, NaiveDateTime, TimeZone, Timelike, Utc};
use chrono_tz::Tz;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{EventRecord, EventType, FeatureTable};

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("span contains no complete {0} period")]
    EmptySpan(PeriodKind),
    #[error("no features for region `{0}`")]
    MissingRegionFeatures(String),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("cutoff {cutoff} outside panel span {first} .. {last}")]
    CutoffOutOfSpan {
        cutoff: DateTime<Utc>,
        first: DateTime<Utc>,
        last: DateTime<Utc>,
    },
    #[error("panel is empty")]
    EmptyPanel,
    #[error("train fraction {0} not in (0, 1)")]
    BadFraction(f64),
    #[error("inconsistent panel: {0}")]
    Inconsistent(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed panel row {row}: {msg}")]
    Malformed { row: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeriodKind {
    Hourly,
    Daily,
    Weekly,
    Monthly,
    Yearly,
}

impl PeriodKind {
    pub const ALL: [PeriodKind; 5] = [
        PeriodKind::Hourly,
        PeriodKind::Daily,
        PeriodKind::Weekly,
        PeriodKind::Monthly,
        PeriodKind::Yearly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PeriodKind::Hourly => "hourly",
            PeriodKind::Daily => "daily",
            PeriodKind::Weekly => "weekly",
            PeriodKind::Monthly => "monthly",
            PeriodKind::Yearly => "yearly",
        }
    }

    /// Start of the period containing `t` (local civil time).
    pub fn floor(self, t: NaiveDateTime) -> NaiveDateTime {
        let midnight = |d: NaiveDate| d.and_hms_opt(0, 0, 0).expect("midnight exists");
        match self {
            PeriodKind::Hourly => t
                .with_minute(0)
                .and_then(|t| t.with_second(0))
                .and_then(|t| t.with_nanosecond(0))
                .expect("valid hour"),
            PeriodKind::Daily => midnight(t.date()),
            PeriodKind::Weekly => midnight(
                t.date() - Duration::days(t.weekday().num_days_from_monday() as i64),
            ),
            PeriodKind::Monthly => midnight(t.date().with_day(1).expect("day 1")),
            PeriodKind::Yearly => midnight(NaiveDate::from_ymd_opt(t.year(), 1, 1).expect("jan 1")),
        }
    }

    /// Start of the following period; `t` must already be aligned.
    pub fn advance(self, t: NaiveDateTime) -> NaiveDateTime {
        match self {
            PeriodKind::Hourly => t + Duration::hours(1),
            PeriodKind::Daily => t + Duration::days(1),
            PeriodKind::Weekly => t + Duration::days(7),
            PeriodKind::Monthly => {
                let (y, m) = if t.month() == 12 {
                    (t.year() + 1, 1)
                } else {
                    (t.year(), t.month() + 1)
                };
                NaiveDate::from_ymd_opt(y, m, 1)
                    .expect("first of month")
                    .and_time(t.time())
            }
            PeriodKind::Yearly => NaiveDate::from_ymd_opt(t.year() + 1, 1, 1)
                .expect("jan 1")
                .and_time(t.time()),
        }
    }
}

impl fmt::Display for PeriodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PeriodKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PeriodKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown period kind `{s}`"))
    }
}

/// Half-open time interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSpan {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

fn to_utc(tz: &Tz, t: NaiveDateTime) -> Option<DateTime<Utc>> {
    tz.from_local_datetime(&t)
        .earliest()
        .map(|d| d.with_timezone(&Utc))
}

/// Period grid covering `span` in zone `tz`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodGrid {
    pub kind: PeriodKind,
    /// UTC instants at which each complete period starts.
    pub starts: Vec<DateTime<Utc>>,
    /// End of the last period.
    pub end: DateTime<Utc>,
    /// Partial periods dropped at the span edges.
    pub dropped_partial: usize,
}

impl PeriodGrid {
    pub fn new(kind: PeriodKind, span: TimeSpan, tz: &Tz) -> Result<Self, PanelError> {
        let local = |t: DateTime<Utc>| t.with_timezone(tz).naive_local();
        let first_local = kind.floor(local(span.start));
        let mut dropped = 0;
        let mut cur = first_local;
        if to_utc(tz, cur).map_or(true, |u| u < span.start) {
            dropped += 1;
            cur = kind.advance(cur);
        }
        let mut starts = Vec::new();
        let mut end = None;
        loop {
            let next = kind.advance(cur);
            let (Some(s), Some(e)) = (to_utc(tz, cur), to_utc(tz, next)) else {
                // nonexistent local instant (DST gap)
                cur = next;
                continue;
            };
            if e > span.end {
                if s < span.end {
                    dropped += 1;
                }
                break;
            }
            starts.push(s);
            end = Some(e);
            cur = next;
        }
        if dropped > 0 {
            log::warn!("dropped {dropped} partial {kind} period(s) at span edges");
        }
        let end = end.ok_or(PanelError::EmptySpan(kind))?;
        Ok(Self {
            kind,
            starts,
            end,
            dropped_partial: dropped,
        })
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    /// Index of the period containing `t`.
    pub fn index_of(&self, t: DateTime<Utc>) -> Option<usize> {
        if t < *self.starts.first()? || t >= self.end {
            return None;
        }
        Some(self.starts.partition_point(|s| *s <= t) - 1)
    }

    /// `[start, end)` of period `i`.
    pub fn bounds(&self, i: usize) -> (DateTime<Utc>, DateTime<Utc>) {
        let end = self.starts.get(i + 1).copied().unwrap_or(self.end);
        (self.starts[i], end)
    }
}

/// One (region, period, event type) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub region_id: String,
    pub period_start: DateTime<Utc>,
    pub period_kind: PeriodKind,
    pub exposure: f64,
    pub event_type: EventType,
    pub count: u64,
    /// Covariates aligned with the panel's `feature_names`.
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    feature_names: Vec<String>,
    period_kind: PeriodKind,
    observations: Vec<Observation>,
}

impl Panel {
    /// Validates cell uniqueness, shared period kind, and covariate shape.
    pub fn new(
        feature_names: Vec<String>,
        period_kind: PeriodKind,
        observations: Vec<Observation>,
    ) -> Result<Self, PanelError> {
        let mut seen = HashSet::with_capacity(observations.len());
        for o in &observations {
            if o.period_kind != period_kind {
                return Err(PanelError::Inconsistent(format!(
                    "observation of kind {} in a {period_kind} panel",
                    o.period_kind
                )));
            }
            if o.x.len() != feature_names.len() {
                return Err(PanelError::Inconsistent("covariate length mismatch".into()));
            }
            if !(o.exposure > 0.0 && o.exposure.is_finite()) {
                return Err(PanelError::Inconsistent("exposure must be positive".into()));
            }
            if o.x.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(PanelError::Inconsistent("covariates must be finite and >= 0".into()));
            }
            if !seen.insert((&o.region_id, o.period_start, o.event_type)) {
                return Err(PanelError::Inconsistent(format!(
                    "duplicate cell ({}, {}, {})",
                    o.region_id, o.period_start, o.event_type
                )));
            }
        }
        Ok(Self {
            feature_names,
            period_kind,
            observations,
        })
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn period_kind(&self) -> PeriodKind {
        self.period_kind
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// First and last period start.
    pub fn span(&self) -> Option<(DateTime<Utc>, DateTime<Utc>)> {
        let first = self.observations.iter().map(|o| o.period_start).min()?;
        let last = self.observations.iter().map(|o| o.period_start).max()?;
        Some((first, last))
    }

    /// Distinct region ids in first-seen order.
    pub fn regions(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.observations
            .iter()
            .filter(|o| seen.insert(o.region_id.as_str()))
            .map(|o| o.region_id.clone())
            .collect()
    }

    /// Sorted distinct period starts.
    pub fn periods(&self) -> Vec<DateTime<Utc>> {
        self.observations
            .iter()
            .map(|o| o.period_start)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn event_types(&self) -> Vec<EventType> {
        self.observations
            .iter()
            .map(|o| o.event_type)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn total_count(&self) -> u64 {
        self.observations.iter().map(|o| o.count).sum()
    }

    fn with_observations(&self, observations: Vec<Observation>) -> Panel {
        Panel {
            feature_names: self.feature_names.clone(),
            period_kind: self.period_kind,
            observations,
        }
    }

    /// Observations of a single event type.
    pub fn for_type(&self, t: EventType) -> Panel {
        self.filter(|o| o.event_type == t)
    }

    pub fn filter(&self, mut keep: impl FnMut(&Observation) -> bool) -> Panel {
        self.with_observations(self.observations.iter().filter(|o| keep(o)).cloned().collect())
    }

    /// Multiplies every count by `k`.
    pub fn scaled(&self, k: u64) -> Panel {
        let mut p = self.clone();
        for o in &mut p.observations {
            o.count *= k;
        }
        p
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), PanelError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = [
            "region_id",
            "period_start",
            "period_kind",
            "event_type",
            "count",
            "exposure",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(self.feature_names.iter().cloned());
        w.write_record(&header)?;
        for o in &self.observations {
            let mut rec = vec![
                o.region_id.clone(),
                o.period_start.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                o.period_kind.to_string(),
                o.event_type.to_string(),
                o.count.to_string(),
                o.exposure.to_string(),
            ];
            rec.extend(o.x.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| PanelError::Csv(e.into()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Panel, PanelError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        const FIXED: usize = 6;
        if headers.len() < FIXED {
            return Err(PanelError::Malformed {
                row: 0,
                msg: "missing panel columns".into(),
            });
        }
        let feature_names: Vec<String> = headers.iter().skip(FIXED).map(str::to_string).collect();
        let mut observations = Vec::new();
        let mut kind = None;
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = i + 1;
            let bad = |msg: String| PanelError::Malformed { row, msg };
            let field = |c: usize| rec.get(c).unwrap_or("");
            let period_start = DateTime::parse_from_rfc3339(field(1))
                .map_err(|e| bad(e.to_string()))?
                .with_timezone(&Utc);
            let period_kind: PeriodKind = field(2).parse().map_err(bad)?;
            kind.get_or_insert(period_kind);
            let event_type: EventType = field(3).parse().map_err(|e: crate::ingest::UnknownEventType| bad(e.to_string()))?;
            let count: u64 = field(4).parse().map_err(|_| bad(format!("bad count `{}`", field(4))))?;
            let exposure: f64 = field(5).parse().map_err(|_| bad(format!("bad exposure `{}`", field(5))))?;
            let x = (FIXED..headers.len())
                .map(|c| {
                    field(c)
                        .parse::<f64>()
                        .map_err(|_| bad(format!("bad covariate `{}`", field(c))))
                })
                .collect::<Result<Vec<_>, _>>()?;
            observations.push(Observation {
                region_id: field(0).to_string(),
                period_start,
                period_kind,
                exposure,
                event_type,
                count,
                x,
            });
        }
        let kind = kind.ok_or(PanelError::EmptyPanel)?;
        Panel::new(feature_names, kind, observations)
    }
}

/// Counts events per (region, period, type) over the complete periods in `span`.
///
/// Events outside the span, of other types, or without a listed region are
/// skipped. Observations are ordered by region (input order), then period,
/// then type (input order).
pub fn aggregate(
    events: &[EventRecord],
    regions: &[String],
    kind: PeriodKind,
    span: TimeSpan,
    types: &[EventType],
    tz: &Tz,
) -> Result<Panel, PanelError> {
    let grid = PeriodGrid::new(kind, span, tz)?;
    Ok(aggregate_on_grid(events, regions, &grid, types))
}

pub fn aggregate_on_grid(
    events: &[EventRecord],
    regions: &[String],
    grid: &PeriodGrid,
    types: &[EventType],
) -> Panel {
    let region_idx: HashMap<&str, usize> = regions
        .iter()
        .enumerate()
        .map(|(i, r)| (r.as_str(), i))
        .collect();
    let type_idx: HashMap<EventType, usize> =
        types.iter().enumerate().map(|(i, t)| (*t, i)).collect();
    let (np, nt) = (grid.len(), types.len());
    let mut counts = vec![0u64; regions.len() * np * nt];
    let mut unassigned = 0usize;
    for e in events {
        let Some(&ti) = type_idx.get(&e.event_type) else {
            continue;
        };
        let Some(pi) = grid.index_of(e.dispatch_time) else {
            continue;
        };
        match e.region_id.as_deref().and_then(|r| region_idx.get(r)) {
            Some(&ri) => counts[(ri * np + pi) * nt + ti] += 1,
            None => unassigned += 1,
        }
    }
    if unassigned > 0 {
        log::warn!("{unassigned} in-span event(s) had no region in the panel");
    }
    let mut observations = Vec::with_capacity(counts.len());
    for (ri, r) in regions.iter().enumerate() {
        for (pi, start) in grid.starts.iter().enumerate() {
            for (ti, t) in types.iter().enumerate() {
                observations.push(Observation {
                    region_id: r.clone(),
                    period_start: *start,
                    period_kind: grid.kind,
                    exposure: 1.0,
                    event_type: *t,
                    count: counts[(ri * np + pi) * nt + ti],
                    x: Vec::new(),
                });
            }
        }
    }
    Panel {
        feature_names: Vec::new(),
        period_kind: grid.kind,
        observations,
    }
}

/// Attaches each region's static covariates. `names` selects and orders a
/// subset of the table's features; `None` takes them all.
pub fn join_features(
    panel: &Panel,
    features: &FeatureTable,
    names: Option<&[String]>,
) -> Result<Panel, PanelError> {
    let names: Vec<String> = names
        .map(<[String]>::to_vec)
        .unwrap_or_else(|| features.feature_names().to_vec());
    let cols: Vec<usize> = names
        .iter()
        .map(|n| {
            features
                .feature_index(n)
                .ok_or_else(|| PanelError::UnknownFeature(n.clone()))
        })
        .collect::<Result<_, _>>()?;
    let mut cache: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut observations = Vec::with_capacity(panel.len());
    for o in &panel.observations {
        let x = match cache.get(o.region_id.as_str()) {
            Some(x) => x.clone(),
            None => {
                let row = features
                    .row_for(&o.region_id)
                    .ok_or_else(|| PanelError::MissingRegionFeatures(o.region_id.clone()))?;
                let x: Vec<f64> = cols.iter().map(|&c| row[c]).collect();
                cache.insert(&o.region_id, x.clone());
                x
            }
        };
        observations.push(Observation { x, ..o.clone() });
    }
    Ok(Panel {
        feature_names: names,
        period_kind: panel.period_kind,
        observations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Panel,
    pub test: Panel,
    pub seed: u64,
    pub train_fraction: f64,
}

/// Random observation-level split; `round(fraction · n)` rows go to training.
pub fn split(panel: &Panel, train_fraction: f64, seed: u64) -> Result<Split, PanelError> {
    if panel.is_empty() {
        return Err(PanelError::EmptyPanel);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(PanelError::BadFraction(train_fraction));
    }
    let n = panel.len();
    let n_train = ((train_fraction * n as f64).round() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; n];
    for i in index::sample(&mut rng, n, n_train) {
        in_train[i] = true;
    }
    let (train, test): (Vec<_>, Vec<_>) = panel
        .observations
        .iter()
        .zip(&in_train)
        .partition(|(_, t)| **t);
    Ok(Split {
        train: panel.with_observations(train.into_iter().map(|(o, _)| o.clone()).collect()),
        test: panel.with_observations(test.into_iter().map(|(o, _)| o.clone()).collect()),
        seed,
        train_fraction,
    })
}

/// Periods starting strictly before `cutoff` vs. the rest.
pub fn split_by_date(panel: &Panel, cutoff: DateTime<Utc>) -> Result<(Panel, Panel), PanelError> {
    let (first, last) = panel.span().ok_or(PanelError::EmptyPanel)?;
    if cutoff <= first || cutoff > last {
        return Err(PanelError::CutoffOutOfSpan { cutoff, first, last });
    }
    let before = panel.filter(|o| o.period_start < cutoff);
    let after = panel.filter(|o| o.period_start >= cutoff);
    Ok((before, after))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn utc(y: i32, m: u32, d: u32, h: u32, mi: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(y, m, d, h, mi, 0).unwrap()
    }

    fn ev(id: &str, t: DateTime<Utc>, ty: EventType, region: &str) -> EventRecord {
        EventRecord {
            event_id: id.into(),
            dispatch_time: t,
            event_type: ty,
            location: None,
            region_id: Some(region.into()),
        }
    }

    fn regions(ids: &[&str]) -> Vec<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    // 2011-01-03 is a Monday
    fn three_weeks() -> TimeSpan {
        TimeSpan {
            start: utc(2011, 1, 3, 0, 0),
            end: utc(2011, 1, 24, 0, 0),
        }
    }

    #[test]
    fn zero_fill() {
        let p = aggregate(
            &[],
            &regions(&["a", "b"]),
            PeriodKind::Weekly,
            three_weeks(),
            &[EventType::FR],
            &Tz::UTC,
        )
        .unwrap();
        assert_eq!(p.len(), 6);
        assert_eq!(p.total_count(), 0);
    }

    #[test]
    fn same_cell_accumulates() {
        let t = utc(2011, 1, 5, 12, 0);
        let evs: Vec<_> = (0..5).map(|i| ev(&i.to_string(), t, EventType::MD, "a")).collect();
        let p = aggregate(
            &evs,
            &regions(&["a", "b"]),
            PeriodKind::Weekly,
            three_weeks(),
            &[EventType::MD],
            &Tz::UTC,
        )
        .unwrap();
        assert_eq!(p.total_count(), 5);
        assert_eq!(p.observations()[0].count, 5);
    }

    #[test]
    fn week_boundary_straddle() {
        // Sunday 23:59 vs Monday 00:00, local Edmonton time
        let tz: Tz = "America/Edmonton".parse().unwrap();
        let sun = tz.with_ymd_and_hms(2011, 1, 9, 23, 59, 0).unwrap().with_timezone(&Utc);
        let mon = tz.with_ymd_and_hms(2011, 1, 10, 0, 0, 0).unwrap().with_timezone(&Utc);
        let span = TimeSpan {
            start: tz.with_ymd_and_hms(2011, 1, 3, 0, 0, 0).unwrap().with_timezone(&Utc),
            end: tz.with_ymd_and_hms(2011, 1, 24, 0, 0, 0).unwrap().with_timezone(&Utc),
        };
        let p = aggregate(
            &[ev("1", sun, EventType::FR, "a"), ev("2", mon, EventType::FR, "a")],
            &regions(&["a"]),
            PeriodKind::Weekly,
            span,
            &[EventType::FR],
            &tz,
        )
        .unwrap();
        let counts: Vec<u64> = p.observations().iter().map(|o| o.count).collect();
        assert_eq!(counts, [1, 1, 0]);
        assert_eq!(p.observations()[0].period_start, utc(2011, 1, 3, 7, 0));
    }

    #[test]
    fn partial_edges_dropped() {
        let span = TimeSpan {
            start: utc(2011, 1, 5, 0, 0),
            end: utc(2011, 1, 27, 0, 0),
        };
        let g = PeriodGrid::new(PeriodKind::Weekly, span, &Tz::UTC).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.dropped_partial, 2);
        let tiny = TimeSpan {
            start: utc(2011, 1, 5, 0, 0),
            end: utc(2011, 1, 6, 0, 0),
        };
        assert!(matches!(
            PeriodGrid::new(PeriodKind::Weekly, tiny, &Tz::UTC),
            Err(PanelError::EmptySpan(_))
        ));
    }

    #[test]
    fn monthly_and_yearly_grids() {
        let span = TimeSpan {
            start: utc(2019, 11, 1, 0, 0),
            end: utc(2020, 3, 1, 0, 0),
        };
        let g = PeriodGrid::new(PeriodKind::Monthly, span, &Tz::UTC).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.bounds(1), (utc(2019, 12, 1, 0, 0), utc(2020, 1, 1, 0, 0)));
        let span = TimeSpan {
            start: utc(2016, 1, 1, 0, 0),
            end: utc(2021, 1, 1, 0, 0),
        };
        assert_eq!(PeriodGrid::new(PeriodKind::Yearly, span, &Tz::UTC).unwrap().len(), 5);
    }

    fn small_panel() -> Panel {
        aggregate(
            &[],
            &regions(&["a"]),
            PeriodKind::Weekly,
            TimeSpan {
                start: utc(2011, 1, 3, 0, 0),
                end: utc(2011, 1, 17, 0, 0),
            },
            &[EventType::FR],
            &Tz::UTC,
        )
        .unwrap()
    }

    #[test]
    fn join_carries_static_features() {
        let ft = FeatureTable::new(
            regions(&["a", "b"]),
            regions(&["f1", "f2"]),
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        let p = join_features(&small_panel(), &ft, None).unwrap();
        assert_eq!(p.observations()[0].x, vec![1.0, 2.0]);
        assert_eq!(p.observations()[0].x, p.observations()[1].x);
        let sub = regions(&["f2", "f1"]);
        let p = join_features(&small_panel(), &ft, Some(&sub)).unwrap();
        assert_eq!(p.observations()[0].x, vec![2.0, 1.0]);
        assert_eq!(p.feature_names(), sub.as_slice());
    }

    #[test]
    fn join_missing_region() {
        let ft = FeatureTable::new(regions(&["b"]), regions(&["f"]), vec![1.0]).unwrap();
        match join_features(&small_panel(), &ft, None) {
            Err(PanelError::MissingRegionFeatures(r)) => assert_eq!(r, "a"),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn ten_obs() -> Panel {
        aggregate(
            &[],
            &regions(&["a", "b"]),
            PeriodKind::Daily,
            TimeSpan {
                start: utc(2011, 1, 3, 0, 0),
                end: utc(2011, 1, 8, 0, 0),
            },
            &[EventType::FR],
            &Tz::UTC,
        )
        .unwrap()
    }

    #[test]
    fn split_cardinality_and_determinism() {
        let p = ten_obs();
        assert_eq!(p.len(), 10);
        let s = split(&p, 0.7, 42).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (7, 3));
        let key = |o: &Observation| (o.region_id.clone(), o.period_start);
        let train: HashSet<_> = s.train.observations().iter().map(key).collect();
        assert!(s.test.observations().iter().all(|o| !train.contains(&key(o))));
        assert_eq!(split(&p, 0.7, 42).unwrap(), s);
        for seed in 0..100 {
            assert_eq!(split(&p, 0.7, seed).unwrap().train.len(), 7);
        }
        assert!(split(&p, 1.0, 1).is_err());
    }

    #[test]
    fn split_by_date_rules() {
        let p = aggregate(
            &[],
            &regions(&["a"]),
            PeriodKind::Monthly,
            TimeSpan {
                start: utc(2019, 11, 1, 0, 0),
                end: utc(2020, 3, 1, 0, 0),
            },
            &[EventType::FR],
            &Tz::UTC,
        )
        .unwrap();
        let (b, a) = split_by_date(&p, utc(2020, 1, 1, 0, 0)).unwrap();
        assert_eq!((b.len(), a.len()), (2, 2));
        assert_eq!(a.periods()[0], utc(2020, 1, 1, 0, 0));
        assert!(matches!(
            split_by_date(&p, utc(2019, 1, 1, 0, 0)),
            Err(PanelError::CutoffOutOfSpan { .. })
        ));
    }

    #[test]
    fn csv_roundtrip() {
        let ft = FeatureTable::new(regions(&["a"]), regions(&["f"]), vec![0.25]).unwrap();
        let p = join_features(&small_panel(), &ft, None).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("region_id,period_start,period_kind,event_type,count,exposure,f\n"));
        assert_eq!(Panel::read_csv(buf.as_slice()).unwrap(), p);
    }
}
