//! Jenks natural-breaks risk tiers via Fisher's exact dynamic program.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::spatial::{regions_geojson, Region};

pub const DEFAULT_LABELS: [&str; 4] = ["Low", "Medium", "High", "Severe"];

#[derive(Debug, Error, PartialEq)]
pub enum ClassifyError {
    #[error("need at least {k} values for {k} classes, got {n}")]
    TooFewValues { n: usize, k: usize },
    #[error("need at least 2 classes, got {0}")]
    InvalidClassCount(usize),
    #[error("{labels} labels for {k} classes")]
    LabelCount { labels: usize, k: usize },
    #[error("non-finite value for `{0}`")]
    NonFinite(String),
}

/// Within-class sum of squared deviations from the class mean.
///
/// Every cost in this module, and any oracle comparing against it, goes
/// through this function so that equal partitions give bit-equal costs.
pub fn class_ssd<T: Scalar>(class: &[T]) -> T {
    if class.is_empty() {
        return T::zero();
    }
    let m = class.iter().copied().sum::<T>() / T::from_usize_lossy(class.len());
    class.iter().map(|v| (*v - m) * (*v - m)).sum()
}

/// Total cost of splitting sorted values at the exclusive class ends `ends`
/// (the last end is `sorted.len()`), accumulated from the last class down.
pub fn partition_cost<T: Scalar>(sorted: &[T], ends: &[usize]) -> T {
    let mut starts = vec![0];
    starts.extend_from_slice(&ends[..ends.len() - 1]);
    starts
        .iter()
        .zip(ends)
        .rev()
        .fold(T::zero(), |acc, (&s, &e)| class_ssd(&sorted[s..e]) + acc)
}

fn sorted_copy<T: Scalar>(values: &[T]) -> Vec<T> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    v
}

/// Optimal class ends (exclusive indices into the sorted values).
///
/// Among partitions with exactly equal minimal cost, the one with the
/// smallest first break wins, then the smallest second, and so on.
pub fn jenks_partition<T: Scalar>(values: &[T], k: usize) -> Result<Vec<usize>, ClassifyError> {
    if k < 2 {
        return Err(ClassifyError::InvalidClassCount(k));
    }
    let n = values.len();
    if n < k {
        return Err(ClassifyError::TooFewValues { n, k });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(ClassifyError::NonFinite("value".into()));
    }
    let x = sorted_copy(values);
    // ssd[i][j] for the class x[i..j]
    let mut ssd = vec![T::zero(); (n + 1) * (n + 1)];
    for i in 0..n {
        for j in i + 1..=n {
            ssd[i * (n + 1) + j] = class_ssd(&x[i..j]);
        }
    }
    let cost_of = |i: usize, j: usize| ssd[i * (n + 1) + j];
    // best[m][i]: minimal cost of x[i..] in m classes
    let inf = T::infinity();
    let mut best = vec![vec![inf; n + 1]; k + 1];
    for i in 0..n {
        best[1][i] = cost_of(i, n);
    }
    for m in 2..=k {
        for i in 0..=n - m {
            let mut b = inf;
            for e in i + 1..=n - m + 1 {
                let c = cost_of(i, e) + best[m - 1][e];
                if c < b {
                    b = c;
                }
            }
            best[m][i] = b;
        }
    }
    let mut ends = Vec::with_capacity(k);
    let mut start = 0;
    for m in (2..=k).rev() {
        let target = best[m][start];
        let e = (start + 1..=n - m + 1)
            .find(|&e| cost_of(start, e) + best[m - 1][e] == target)
            .expect("optimum is attained");
        ends.push(e);
        start = e;
    }
    ends.push(n);
    Ok(ends)
}

/// The `k − 1` break values: the maximum of each class but the last.
pub fn jenks_breaks<T: Scalar>(values: &[T], k: usize) -> Result<Vec<T>, ClassifyError> {
    let ends = jenks_partition(values, k)?;
    let x = sorted_copy(values);
    Ok(ends[..k - 1].iter().map(|&e| x[e - 1]).collect())
}

/// Class index of `v` under half-open intervals `(−∞, b₁], (b₁, b₂], …, (b_{k−1}, ∞)`.
pub fn class_of<T: Scalar>(breaks: &[T], v: T) -> usize {
    breaks.partition_point(|b| *b < v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RiskClassification<T> {
    pub k: usize,
    pub breaks: Vec<T>,
    pub labels: Vec<String>,
    /// region → class index.
    pub assignment: BTreeMap<String, usize>,
    pub values: BTreeMap<String, T>,
}

impl<T: Scalar> RiskClassification<T> {
    pub fn label(&self, region: &str) -> Option<&str> {
        self.assignment.get(region).map(|c| self.labels[*c].as_str())
    }

    /// `region_id,value,class`, ordered by region id.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["region_id", "value", "class"])?;
        for (id, c) in &self.assignment {
            w.write_record([id.as_str(), &self.values[id].to_string(), &self.labels[*c]])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Regions with `risk_class` and `predicted_mean` properties.
    pub fn geojson(&self, regions: &[Region<f64>]) -> geojson::FeatureCollection {
        regions_geojson(regions, |id| {
            let c = self.assignment.get(id)?;
            let mut props = serde_json::Map::new();
            props.insert("risk_class".into(), self.labels[*c].clone().into());
            props.insert("predicted_mean".into(), self.values[id].to_f64_lossy().into());
            Some(props)
        })
    }
}

/// Jenks tiers over per-region predicted means. `labels` default to
/// Low/Medium/High/Severe when `None` and `k = 4`, else `class_1…class_k`.
pub fn classify_regions<T: Scalar>(
    predictions: &BTreeMap<String, T>,
    k: usize,
    labels: Option<&[String]>,
) -> Result<RiskClassification<T>, ClassifyError> {
    let labels: Vec<String> = match labels {
        Some(l) if l.len() != k => {
            return Err(ClassifyError::LabelCount { labels: l.len(), k });
        }
        Some(l) => l.to_vec(),
        None if k == DEFAULT_LABELS.len() => DEFAULT_LABELS.iter().map(|s| s.to_string()).collect(),
        None => (1..=k).map(|i| format!("class_{i}")).collect(),
    };
    if let Some((id, _)) = predictions.iter().find(|(_, v)| !v.is_finite()) {
        return Err(ClassifyError::NonFinite(id.clone()));
    }
    let values: Vec<T> = predictions.values().copied().collect();
    let breaks = jenks_breaks(&values, k)?;
    let assignment = predictions
        .iter()
        .map(|(id, v)| (id.clone(), class_of(&breaks, *v)))
        .collect();
    Ok(RiskClassification {
        k,
        breaks,
        labels,
        assignment,
        values: predictions.clone(),
    })
}
