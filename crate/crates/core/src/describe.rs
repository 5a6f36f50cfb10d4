//! Descriptive statistics, feature–event correlation, and residual ECDFs.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::EventType;
use crate::panel::{Panel, PeriodKind};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum DescribeError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least two points, got {0}")]
    TooShort(usize),
    #[error("series has zero variance")]
    ZeroVariance,
    #[error("input is empty")]
    Empty,
    #[error("negative absolute error {0}")]
    NegativeError(f64),
}

/// Denominator used for the standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Deviation {
    /// `n − 1`
    #[default]
    Sample,
    /// `n`
    Population,
}

/// City-wide totals per period, or every (region, period) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    City,
    Region,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveRow<T> {
    pub event_type: EventType,
    pub period_kind: PeriodKind,
    pub level: Level,
    pub mean: T,
    pub stddev: T,
    /// `stddev / mean`; `None` when the mean is zero.
    pub cv: Option<T>,
    pub n_periods: usize,
}

/// Mean and standard deviation of `series`.
pub fn mean_std<T: Scalar>(series: &[T], dev: Deviation) -> (T, T) {
    let n = series.len();
    if n == 0 {
        return (T::nan(), T::nan());
    }
    let nn = T::from_usize_lossy(n);
    let mean = series.iter().copied().sum::<T>() / nn;
    let ss: T = series.iter().map(|v| (*v - mean) * (*v - mean)).sum();
    let denom = match dev {
        Deviation::Sample if n > 1 => T::from_usize_lossy(n - 1),
        Deviation::Sample => return (mean, T::zero()),
        Deviation::Population => nn,
    };
    (mean, (ss / denom).sqrt())
}

pub fn summarize<T: Scalar>(
    series: &[T],
    dev: Deviation,
) -> (T, T, Option<T>) {
    let (m, s) = mean_std(series, dev);
    let cv = (m > T::zero()).then(|| s / m);
    (m, s, cv)
}

/// One row per event type present in `panel`, sorted by type.
pub fn describe<T: Scalar>(panel: &Panel, level: Level, dev: Deviation) -> Vec<DescriptiveRow<T>> {
    let mut rows = Vec::new();
    for t in panel.event_types() {
        let series: Vec<T> = match level {
            Level::City => {
                let mut per: BTreeMap<_, u64> = BTreeMap::new();
                for o in panel.observations().iter().filter(|o| o.event_type == t) {
                    *per.entry(o.period_start).or_default() += o.count;
                }
                per.values().map(|c| T::lit(*c as f64)).collect()
            }
            Level::Region => panel
                .observations()
                .iter()
                .filter(|o| o.event_type == t)
                .map(|o| T::lit(o.count as f64))
                .collect(),
        };
        let (mean, stddev, cv) = summarize(&series, dev);
        rows.push(DescriptiveRow {
            event_type: t,
            period_kind: panel.period_kind(),
            level,
            mean,
            stddev,
            cv,
            n_periods: series.len(),
        });
    }
    rows
}

/// CSV with columns `event_type,interval,mean,stddev,cv`; undefined CV is left blank.
pub fn write_descriptive_csv<T: Scalar, W: Write>(rows: &[DescriptiveRow<T>], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["event_type", "interval", "mean", "stddev", "cv"])?;
    for r in rows {
        w.write_record([
            r.event_type.to_string(),
            r.period_kind.to_string(),
            r.mean.to_string(),
            r.stddev.to_string(),
            r.cv.map(|c| c.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Pearson product-moment correlation.
pub fn pearson<T: Scalar>(x: &[T], y: &[T]) -> Result<T, DescribeError> {
    if x.len() != y.len() {
        return Err(DescribeError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(DescribeError::TooShort(n));
    }
    let nn = T::from_usize_lossy(n);
    let mx = x.iter().copied().sum::<T>() / nn;
    let my = y.iter().copied().sum::<T>() / nn;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (*a - mx, *b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == T::zero() || syy == T::zero() {
        return Err(DescribeError::ZeroVariance);
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    Ok(r.max(-T::one()).min(T::one()))
}

/// What per-region event quantity features are correlated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationBasis {
    /// Event total over the whole span.
    #[default]
    Totals,
    /// Mean count per period.
    MeanRate,
}

/// Feature × event-type correlations; `None` marks undefined cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix<T> {
    pub feature_names: Vec<String>,
    pub event_types: Vec<EventType>,
    /// Row-major `features × event_types`.
    pub values: Vec<Option<T>>,
}

impl<T: Scalar> CorrelationMatrix<T> {
    pub fn get(&self, feature: usize, event: usize) -> Option<T> {
        self.values[feature * self.event_types.len() + event]
    }

    /// `feature,<types>...`; values rounded to `decimals` when given, undefined cells blank.
    pub fn write_csv<W: Write>(&self, writer: W, decimals: Option<usize>) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["feature".to_string()];
        header.extend(self.event_types.iter().map(|t| t.to_string()));
        w.write_record(&header)?;
        for (i, f) in self.feature_names.iter().enumerate() {
            let mut rec = vec![f.clone()];
            for j in 0..self.event_types.len() {
                rec.push(match (self.get(i, j), decimals) {
                    (None, _) => String::new(),
                    (Some(v), Some(d)) => format!("{:.*}", d, v.to_f64_lossy()),
                    (Some(v), None) => v.to_string(),
                });
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-region static feature value vs per-region event quantity, for every
/// (feature, event type) pair of a feature-joined panel.
pub fn correlation_matrix<T: Scalar>(panel: &Panel, basis: CorrelationBasis) -> CorrelationMatrix<T> {
    let regions = panel.regions();
    let types = panel.event_types();
    let idx: BTreeMap<&str, usize> = regions.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
    let p = panel.feature_names().len();
    let mut x = vec![T::zero(); regions.len() * p];
    let mut totals = vec![T::zero(); regions.len() * types.len()];
    let mut cells = vec![0usize; regions.len() * types.len()];
    for o in panel.observations() {
        let r = idx[o.region_id.as_str()];
        for (k, v) in o.x.iter().enumerate() {
            x[r * p + k] = T::lit(*v);
        }
        let t = types.binary_search(&o.event_type).expect("type present");
        totals[r * types.len() + t] += T::lit(o.count as f64);
        cells[r * types.len() + t] += 1;
    }
    if basis == CorrelationBasis::MeanRate {
        for (v, c) in totals.iter_mut().zip(&cells) {
            if *c > 0 {
                *v /= T::from_usize_lossy(*c);
            }
        }
    }
    let mut values = Vec::with_capacity(p * types.len());
    for k in 0..p {
        let xs: Vec<T> = (0..regions.len()).map(|r| x[r * p + k]).collect();
        for t in 0..types.len() {
            let ys: Vec<T> = (0..regions.len()).map(|r| totals[r * types.len() + t]).collect();
            values.push(pearson(&xs, &ys).ok());
        }
    }
    CorrelationMatrix {
        feature_names: panel.feature_names().to_vec(),
        event_types: types,
        values,
    }
}

/// Right-continuous empirical CDF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ecdf<T> {
    /// Sorted distinct sample values.
    pub thresholds: Vec<T>,
    /// Fraction of the sample `≤` each threshold.
    pub cumulative: Vec<T>,
}

impl<T: Scalar> Ecdf<T> {
    pub fn eval(&self, v: T) -> T {
        let k = self.thresholds.partition_point(|t| *t <= v);
        if k == 0 {
            T::zero()
        } else {
            self.cumulative[k - 1]
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["abs_error", "cumulative_fraction"])?;
        for (t, c) in self.thresholds.iter().zip(&self.cumulative) {
            w.write_record([t.to_string(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn residual_ecdf<T: Scalar>(abs_errors: &[T]) -> Result<Ecdf<T>, DescribeError> {
    if abs_errors.is_empty() {
        return Err(DescribeError::Empty);
    }
    if let Some(v) = abs_errors.iter().find(|v| !(**v >= T::zero())) {
        return Err(DescribeError::NegativeError(v.to_f64_lossy()));
    }
    let mut sorted = abs_errors.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = T::from_usize_lossy(sorted.len());
    let mut thresholds = Vec::new();
    let mut cumulative = Vec::new();
    for (i, v) in sorted.iter().enumerate() {
        if i + 1 < sorted.len() && sorted[i + 1] == *v {
            continue;
        }
        thresholds.push(*v);
        cumulative.push(T::from_usize_lossy(i + 1) / n);
    }
    Ok(Ecdf {
        thresholds,
        cumulative,
    })
}
