//! Prediction-error metrics, per-region error summaries, and before/after
//! period comparison.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::EventType;
use crate::nb2::{fit_nb2, CountData, FitOptions, Nb2Error, Nb2Model};
use crate::panel::{split, split_by_date, Panel, PanelError, PeriodKind};
use crate::scalar::Scalar;
use crate::spatial::{regions_geojson, Region};

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error("length mismatch: {actual} actuals vs {predicted} predictions")]
    LengthMismatch { actual: usize, predicted: usize },
    #[error("no observations to evaluate")]
    Empty,
    #[error("panel mixes event types {0:?}; evaluate one type at a time")]
    MixedEventTypes(Vec<EventType>),
    #[error(transparent)]
    Model(#[from] Nb2Error),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("{side} period: {source}")]
    Side {
        side: &'static str,
        #[source]
        source: Box<EvaluateError>,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn check<T>(y: &[T], yhat: &[T]) -> Result<(), EvaluateError> {
    if y.len() != yhat.len() {
        return Err(EvaluateError::LengthMismatch {
            actual: y.len(),
            predicted: yhat.len(),
        });
    }
    if y.is_empty() {
        return Err(EvaluateError::Empty);
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae<T: Scalar>(y: &[T], yhat: &[T]) -> Result<T, EvaluateError> {
    check(y, yhat)?;
    let s: T = y.iter().zip(yhat).map(|(a, b)| (*a - *b).abs()).sum();
    Ok(s / T::from_usize_lossy(y.len()))
}

/// Root mean squared error.
pub fn rmse<T: Scalar>(y: &[T], yhat: &[T]) -> Result<T, EvaluateError> {
    check(y, yhat)?;
    let s: T = y.iter().zip(yhat).map(|(a, b)| (*a - *b) * (*a - *b)).sum();
    Ok((s / T::from_usize_lossy(y.len())).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scope {
    pub event_type: Option<EventType>,
    pub period_kind: PeriodKind,
    /// `neighborhood` or `station`.
    pub granularity: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RegionError<T> {
    pub mean_predicted: T,
    pub mean_actual: T,
    /// `|mean_predicted − mean_actual|`.
    pub absolute_error: T,
    pub mae: T,
    pub rmse: T,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MetricReport<T> {
    pub scope: Scope,
    pub n_obs: usize,
    /// Observation-level MAE.
    pub mae_obs: T,
    pub rmse: T,
    /// Mean over regions of the absolute difference between mean predicted
    /// and mean actual counts.
    pub ae_region_mean: T,
    pub per_region: BTreeMap<String, RegionError<T>>,
    /// Observation-level absolute errors, in panel order.
    #[serde(skip)]
    pub abs_errors: Vec<T>,
}

/// Model means for every observation of `panel`, using each observation's exposure.
pub fn predict_panel<T: Scalar>(model: &Nb2Model<T>, panel: &Panel) -> Result<Vec<T>, Nb2Error> {
    let idx = model
        .feature_names
        .iter()
        .map(|f| {
            panel
                .feature_names()
                .iter()
                .position(|n| n == f)
                .ok_or_else(|| Nb2Error::FeatureNameMismatch(format!("panel lacks `{f}`")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut x = vec![T::zero(); idx.len()];
    panel
        .observations()
        .iter()
        .map(|o| {
            for (dst, &j) in x.iter_mut().zip(&idx) {
                *dst = T::lit(o.x[j]);
            }
            model.mean(&x, T::lit(o.exposure))
        })
        .collect()
}

/// Metrics for precomputed predictions aligned with `panel`'s observations.
pub fn metric_report<T: Scalar>(panel: &Panel, predicted: &[T]) -> Result<MetricReport<T>, EvaluateError> {
    let types = panel.event_types();
    if types.len() > 1 {
        return Err(EvaluateError::MixedEventTypes(types));
    }
    let obs = panel.observations();
    let actual: Vec<T> = obs.iter().map(|o| T::lit(o.count as f64)).collect();
    let mae_obs = mae(&actual, predicted)?;
    let rmse_all = rmse(&actual, predicted)?;
    debug_assert!(rmse_all >= mae_obs * (T::one() - T::epsilon() * T::lit(16.0)));

    let mut sums: BTreeMap<&str, (T, T, T, T, usize)> = BTreeMap::new();
    for ((o, a), p) in obs.iter().zip(&actual).zip(predicted) {
        let z = T::zero();
        let e = sums.entry(o.region_id.as_str()).or_insert((z, z, z, z, 0));
        e.0 += *p;
        e.1 += *a;
        e.2 += (*a - *p).abs();
        e.3 += (*a - *p) * (*a - *p);
        e.4 += 1;
    }
    let per_region: BTreeMap<String, RegionError<T>> = sums
        .into_iter()
        .map(|(id, (sp, sa, sabs, ss, n))| {
            let nt = T::from_usize_lossy(n);
            let (mp, ma) = (sp / nt, sa / nt);
            let r = RegionError {
                mean_predicted: mp,
                mean_actual: ma,
                absolute_error: (mp - ma).abs(),
                mae: sabs / nt,
                rmse: (ss / nt).sqrt(),
                n,
            };
            (id.to_string(), r)
        })
        .collect();
    let ae_region_mean = per_region.values().map(|r| r.absolute_error).sum::<T>()
        / T::from_usize_lossy(per_region.len());
    Ok(MetricReport {
        scope: Scope {
            event_type: types.first().copied(),
            period_kind: panel.period_kind(),
            granularity: "neighborhood".into(),
        },
        n_obs: obs.len(),
        mae_obs,
        rmse: rmse_all,
        ae_region_mean,
        per_region,
        abs_errors: actual.iter().zip(predicted).map(|(a, p)| (*a - *p).abs()).collect(),
    })
}

/// Predicts every observation of a single-event-type test panel and scores it.
pub fn evaluate_model<T: Scalar>(model: &Nb2Model<T>, test: &Panel) -> Result<MetricReport<T>, EvaluateError> {
    let predicted = predict_panel(model, test)?;
    metric_report(test, &predicted)
}

impl<T: Scalar> MetricReport<T> {
    pub fn with_granularity(mut self, granularity: &str) -> Self {
        self.scope.granularity = granularity.into();
        self
    }

    /// Regions with per-region errors, as GeoJSON (`abs_error`, `mean_predicted`, `mean_actual`).
    pub fn error_geojson(&self, regions: &[Region<f64>]) -> geojson::FeatureCollection {
        regions_geojson(regions, |id| {
            let r = self.per_region.get(id)?;
            let mut props = serde_json::Map::new();
            props.insert("abs_error".into(), r.absolute_error.to_f64_lossy().into());
            props.insert("mean_predicted".into(), r.mean_predicted.to_f64_lossy().into());
            props.insert("mean_actual".into(), r.mean_actual.to_f64_lossy().into());
            Some(props)
        })
    }
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MetricRow<T> {
    pub station: String,
    pub model: String,
    pub event_type: String,
    pub mae: T,
    pub rmse: T,
}

pub fn write_metrics_csv<T: Scalar, W: Write>(rows: &[MetricRow<T>], writer: W) -> Result<(), EvaluateError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["station", "model", "event_type", "mae", "rmse"])?;
    for r in rows {
        w.write_record([
            r.station.as_str(),
            r.model.as_str(),
            r.event_type.as_str(),
            &r.mae.to_string(),
            &r.rmse.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PeriodComparison<T> {
    pub before: MetricReport<T>,
    pub after: MetricReport<T>,
    pub cutoff: DateTime<Utc>,
    /// Regions present on both sides: (rmse_before, rmse_after).
    pub per_region_delta: BTreeMap<String, (T, T)>,
}

impl<T: Scalar> PeriodComparison<T> {
    /// `event_type,interval,period,mae,rmse,ae_region_mean,n_obs`, before then after.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), EvaluateError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["event_type", "interval", "period", "mae", "rmse", "ae_region_mean", "n_obs"])?;
        for (label, r) in [("before", &self.before), ("after", &self.after)] {
            w.write_record([
                r.scope.event_type.map_or("ALL", |t| t.code()),
                r.scope.period_kind.as_str(),
                label,
                &r.mae_obs.to_string(),
                &r.rmse.to_string(),
                &r.ae_region_mean.to_string(),
                &r.n_obs.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Splits into train/test, fits NB2 on the training part, scores the test part.
pub fn fit_and_evaluate<T: Scalar>(
    panel: &Panel,
    features: &[String],
    options: &FitOptions,
    train_fraction: f64,
    seed: u64,
) -> Result<(Nb2Model<T>, MetricReport<T>), EvaluateError> {
    let parts = split(panel, train_fraction, seed)?;
    let data = CountData::<T>::from_panel(&parts.train, features)?;
    let model = fit_nb2(&data, features, options)?;
    let report = evaluate_model(&model, &parts.test)?;
    Ok((model, report))
}

/// Independent split/fit/evaluate on each side of `cutoff`, with the same seed.
pub fn compare_periods<T: Scalar>(
    panel: &Panel,
    cutoff: DateTime<Utc>,
    features: &[String],
    options: &FitOptions,
    train_fraction: f64,
    seed: u64,
) -> Result<PeriodComparison<T>, EvaluateError> {
    let (before_panel, after_panel) = split_by_date(panel, cutoff)?;
    let side = |name: &'static str, p: &Panel| {
        fit_and_evaluate::<T>(p, features, options, train_fraction, seed)
            .map(|(_, r)| r)
            .map_err(|e| EvaluateError::Side {
                side: name,
                source: Box::new(e),
            })
    };
    let before = side("before", &before_panel)?;
    let after = side("after", &after_panel)?;
    let per_region_delta = before
        .per_region
        .iter()
        .filter_map(|(id, b)| after.per_region.get(id).map(|a| (id.clone(), (b.rmse, a.rmse))))
        .collect();
    Ok(PeriodComparison {
        before,
        after,
        cutoff,
        per_region_delta,
    })
}
