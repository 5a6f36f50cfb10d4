//! Conditional-inference-style regression forest and out-of-bag permutation
//! importance.
//!
//! Splits are gated by Monte-Carlo permutation tests of |Pearson r| between
//! each candidate feature and the response: a node is split on the feature
//! with the smallest p-value only when that p-value is at most `alpha_stop`.
//! The split point is then the one that maximises the sum-of-squares
//! reduction.

use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::Panel;
use crate::scalar::Scalar;
use crate::seed::derive_seed;

pub const DEFAULT_THRESHOLD: f64 = 0.05;
/// Rows drawn (without replacement) for each tree.
pub const SUBSAMPLE_FRACTION: f64 = 0.632;

#[derive(Debug, Error)]
pub enum ImportanceError {
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("invalid forest configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Candidate features per node; `None` means ⌈p/3⌉.
    pub mtry: Option<usize>,
    pub min_node: usize,
    pub n_permutations: usize,
    pub alpha_stop: f64,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 1000,
            mtry: None,
            min_node: 5,
            n_permutations: 199,
            alpha_stop: 0.05,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn mtry_for(&self, p: usize) -> usize {
        self.mtry.unwrap_or_else(|| p.div_ceil(3)).max(1)
    }

    pub fn validate(&self, p: usize) -> Result<(), ImportanceError> {
        let bad = |m: String| Err(ImportanceError::InvalidConfig(m));
        if self.n_trees == 0 {
            return bad("n_trees must be ≥ 1".into());
        }
        let m = self.mtry_for(p);
        if m > p {
            return bad(format!("mtry {m} exceeds {p} features"));
        }
        if !(self.alpha_stop > 0.0 && self.alpha_stop < 1.0) {
            return bad(format!("alpha_stop {} not in (0, 1)", self.alpha_stop));
        }
        if self.min_node == 0 {
            return bad("min_node must be ≥ 1".into());
        }
        Ok(())
    }
}

/// Feature matrix (row-major) with a real response.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    feature_names: Vec<String>,
    x: Vec<T>,
    y: Vec<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(feature_names: Vec<String>, rows: Vec<Vec<T>>, y: Vec<T>) -> Result<Self, ImportanceError> {
        let p = feature_names.len();
        if p == 0 {
            return Err(ImportanceError::InvalidData("no features".into()));
        }
        if rows.len() != y.len() {
            return Err(ImportanceError::InvalidData("row and response lengths differ".into()));
        }
        if rows.iter().any(|r| r.len() != p) {
            return Err(ImportanceError::InvalidData("row length differs from feature count".into()));
        }
        if rows.iter().flatten().chain(&y).any(|v| !v.is_finite()) {
            return Err(ImportanceError::InvalidData("non-finite value".into()));
        }
        Ok(Self {
            feature_names,
            x: rows.into_iter().flatten().collect(),
            y,
        })
    }

    /// Response = count per unit exposure; features = the panel's joined covariates.
    pub fn from_panel(panel: &Panel) -> Result<Self, ImportanceError> {
        let obs = panel.observations();
        let rows = obs.iter().map(|o| o.x.iter().map(|v| T::lit(*v)).collect()).collect();
        let y = obs.iter().map(|o| T::lit(o.count as f64 / o.exposure)).collect();
        Self::new(panel.feature_names().to_vec(), rows, y)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn response(&self) -> &[T] {
        &self.y
    }

    #[inline]
    pub fn value(&self, row: usize, feature: usize) -> T {
        self.x[row * self.p() + feature]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let p = self.p();
        &self.x[i * p..(i + 1) * p]
    }

    /// Copy with `y` replaced.
    pub fn with_response(&self, y: Vec<T>) -> Self {
        assert_eq!(y.len(), self.n());
        Self { y, ..self.clone() }
    }

    /// Copy with feature `f` mapped through `g`.
    pub fn map_feature(&self, f: usize, g: impl Fn(T) -> T) -> Self {
        let p = self.p();
        let mut out = self.clone();
        for i in 0..self.n() {
            out.x[i * p + f] = g(out.x[i * p + f]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub enum Node<T> {
    Leaf(T),
    Split {
        feature: usize,
        threshold: T,
        left: usize,
        right: usize,
    },
}

/// Regression tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Tree<T> {
    pub nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tree<T> {
    pub fn predict(&self, row: &[T]) -> T {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => k = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn root_feature(&self) -> Option<usize> {
        match self.nodes.first()? {
            Node::Split { feature, .. } => Some(*feature),
            Node::Leaf(_) => None,
        }
    }

    /// Features used by at least one split.
    pub fn used_features(&self, p: usize) -> Vec<bool> {
        let mut used = vec![false; p];
        for n in &self.nodes {
            if let Node::Split { feature, .. } = n {
                used[*feature] = true;
            }
        }
        used
    }
}

fn mean<T: Scalar>(v: impl Iterator<Item = T>) -> T {
    let (s, n) = v.fold((T::zero(), 0usize), |(s, n), x| (s + x, n + 1));
    s / T::from_usize_lossy(n)
}

/// Monte-Carlo p-value of |r| for each candidate; all candidates share the
/// same response permutations.
fn permutation_pvalues<T: Scalar>(
    data: &Dataset<T>,
    rows: &[usize],
    candidates: &[usize],
    n_perm: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(f64, T)> {
    let ym = mean(rows.iter().map(|&i| data.y[i]));
    let mut yc: Vec<T> = rows.iter().map(|&i| data.y[i] - ym).collect();
    let yss: T = yc.iter().map(|v| *v * *v).sum();
    let centred: Vec<Option<(Vec<T>, T)>> = candidates
        .iter()
        .map(|&f| {
            let xm = mean(rows.iter().map(|&i| data.value(i, f)));
            let xc: Vec<T> = rows.iter().map(|&i| data.value(i, f) - xm).collect();
            let xss: T = xc.iter().map(|v| *v * *v).sum();
            // a feature constant in this node carries no information
            let constant = rows.iter().all(|&i| data.value(i, f) == data.value(rows[0], f));
            (!constant && xss > T::zero()).then_some((xc, xss))
        })
        .collect();
    let dot = |a: &[T], b: &[T]| a.iter().zip(b).map(|(x, y)| *x * *y).sum::<T>();
    let observed: Vec<T> = centred
        .iter()
        .map(|c| c.as_ref().map_or(T::zero(), |(xc, _)| dot(xc, &yc).abs()))
        .collect();
    // relative slack so that exact ties under permutation count as exceedances
    let slack = T::lit(1e-10);
    let mut exceed = vec![0usize; candidates.len()];
    if yss > T::zero() {
        for _ in 0..n_perm {
            yc.shuffle(rng);
            for (k, c) in centred.iter().enumerate() {
                if let Some((xc, _)) = c {
                    if dot(xc, &yc).abs() >= observed[k] * (T::one() - slack) {
                        exceed[k] += 1;
                    }
                }
            }
        }
    }
    centred
        .iter()
        .zip(&observed)
        .zip(&exceed)
        .map(|((c, obs), e)| match c {
            Some((_, xss)) if yss > T::zero() => {
                let p = (1 + e) as f64 / (1 + n_perm) as f64;
                (p, *obs / (*xss * yss).sqrt())
            }
            _ => (1.0, T::zero()),
        })
        .collect()
}

/// Best split of `rows` on feature `f`: (threshold, gain), children ≥ `min_node`.
fn best_split<T: Scalar>(data: &Dataset<T>, rows: &[usize], f: usize, min_node: usize) -> Option<(T, T)> {
    let mut pairs: Vec<(T, T)> = rows.iter().map(|&i| (data.value(i, f), data.y[i])).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite"));
    let n = pairs.len();
    let total: T = pairs.iter().map(|p| p.1).sum();
    let nt = T::from_usize_lossy(n);
    let base = total * total / nt;
    let mut left = T::zero();
    let mut best: Option<(T, T)> = None;
    for i in 1..n {
        left += pairs[i - 1].1;
        if i < min_node || n - i < min_node || pairs[i - 1].0 == pairs[i].0 {
            continue;
        }
        let (nl, nr) = (T::from_usize_lossy(i), T::from_usize_lossy(n - i));
        let right = total - left;
        let gain = left * left / nl + right * right / nr - base;
        if best.map_or(true, |(_, g)| gain > g) {
            let thr = pairs[i - 1].0 + (pairs[i].0 - pairs[i - 1].0) / T::lit(2.0);
            best = Some((thr, gain));
        }
    }
    best
}

/// Grows one tree on `rows`.
pub fn fit_tree<T: Scalar>(
    data: &Dataset<T>,
    rows: &[usize],
    config: &ForestConfig,
    tree_seed: u64,
) -> Result<Tree<T>, ImportanceError> {
    let needed = 2 * config.min_node;
    if rows.len() < needed {
        return Err(ImportanceError::TooFewRows {
            needed,
            got: rows.len(),
        });
    }
    config.validate(data.p())?;
    let mtry = config.mtry_for(data.p());
    let mut rng = ChaCha8Rng::seed_from_u64(tree_seed);
    let mut nodes = vec![Node::Leaf(T::zero())];
    let mut stack = vec![(0usize, rows.to_vec())];
    while let Some((id, rows)) = stack.pop() {
        let leaf = Node::Leaf(mean(rows.iter().map(|&i| data.y[i])));
        if rows.len() < needed {
            nodes[id] = leaf;
            continue;
        }
        let mut cand = index::sample(&mut rng, data.p(), mtry).into_vec();
        cand.sort_unstable();
        let tests = permutation_pvalues(data, &rows, &cand, config.n_permutations, &mut rng);
        // smallest p-value, then strongest |r|, then lowest feature index
        let mut order: Vec<usize> = (0..cand.len()).collect();
        order.sort_by(|&a, &b| {
            tests[a]
                .0
                .partial_cmp(&tests[b].0)
                .unwrap()
                .then(tests[b].1.partial_cmp(&tests[a].1).unwrap())
                .then(cand[a].cmp(&cand[b]))
        });
        let k = order[0];
        if tests[k].0 > config.alpha_stop {
            nodes[id] = leaf;
            continue;
        }
        let f = cand[k];
        let Some((threshold, _)) = best_split(data, &rows, f, config.min_node) else {
            nodes[id] = leaf;
            continue;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| data.value(i, f) <= threshold);
        let (li, ri) = (nodes.len(), nodes.len() + 1);
        nodes.push(Node::Leaf(T::zero()));
        nodes.push(Node::Leaf(T::zero()));
        nodes[id] = Node::Split {
            feature: f,
            threshold,
            left: li,
            right: ri,
        };
        stack.push((ri, r));
        stack.push((li, l));
    }
    Ok(Tree { nodes })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest<T> {
    pub trees: Vec<Tree<T>>,
    /// Out-of-bag row indices per tree.
    pub oob: Vec<Vec<usize>>,
    pub tree_seeds: Vec<u64>,
    pub feature_names: Vec<String>,
}

/// Grows `config.n_trees` trees in parallel, each on a 63.2% subsample.
pub fn fit_forest<T: Scalar>(data: &Dataset<T>, config: &ForestConfig) -> Result<Forest<T>, ImportanceError> {
    config.validate(data.p())?;
    let n = data.n();
    let m = (SUBSAMPLE_FRACTION * n as f64).round() as usize;
    let needed = 2 * config.min_node;
    if m < needed || m >= n {
        return Err(ImportanceError::TooFewRows {
            needed: needed.max(2),
            got: n,
        });
    }
    let seeds: Vec<u64> = (0..config.n_trees)
        .map(|t| derive_seed(config.seed, &[t as u64]))
        .collect();
    let grown: Vec<(Tree<T>, Vec<usize>)> = seeds
        .par_iter()
        .map(|&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            rng.set_stream(1);
            let mut bag = index::sample(&mut rng, n, m).into_vec();
            bag.sort_unstable();
            let mut in_bag = vec![false; n];
            bag.iter().for_each(|&i| in_bag[i] = true);
            let oob = (0..n).filter(|&i| !in_bag[i]).collect();
            fit_tree(data, &bag, config, s).map(|t| (t, oob))
        })
        .collect::<Result<_, _>>()?;
    let (trees, oob) = grown.into_iter().unzip();
    Ok(Forest {
        trees,
        oob,
        tree_seeds: seeds,
        feature_names: data.feature_names.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FeatureScore<T> {
    pub feature: String,
    pub score: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ImportanceReport<T> {
    /// Descending by score; ties by feature name.
    pub ranked: Vec<FeatureScore<T>>,
    pub threshold: T,
    pub selected: Vec<String>,
}

impl<T: Scalar> ImportanceReport<T> {
    /// Builds a report from normalised scores in feature order.
    pub fn from_scores(names: &[String], scores: &[T], threshold: T) -> Self {
        let mut ranked: Vec<FeatureScore<T>> = names
            .iter()
            .zip(scores)
            .map(|(n, s)| FeatureScore {
                feature: n.clone(),
                score: *s,
            })
            .collect();
        ranked.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .expect("finite scores")
                .then_with(|| a.feature.cmp(&b.feature))
        });
        let selected = ranked
            .iter()
            .filter(|f| f.score >= threshold)
            .map(|f| f.feature.clone())
            .collect();
        Self {
            ranked,
            threshold,
            selected,
        }
    }

    pub fn score(&self, feature: &str) -> Option<T> {
        self.ranked.iter().find(|f| f.feature == feature).map(|f| f.score)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ImportanceError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["feature", "score", "selected"])?;
        for f in &self.ranked {
            let sel = self.selected.contains(&f.feature);
            w.write_record([f.feature.as_str(), &f.score.to_string(), if sel { "true" } else { "false" }])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Mean increase in out-of-bag MSE when each feature is permuted, with
/// negative values clipped and the result normalised to sum 1 (when any
/// score is positive).
pub fn permutation_importance<T: Scalar>(
    forest: &Forest<T>,
    data: &Dataset<T>,
    threshold: T,
) -> ImportanceReport<T> {
    let p = data.p();
    let per_tree: Vec<Vec<T>> = forest
        .trees
        .par_iter()
        .zip(&forest.oob)
        .zip(&forest.tree_seeds)
        .map(|((tree, oob), &s)| tree_importance(tree, oob, data, s))
        .collect();
    // fixed-order reduction keeps results independent of the thread pool
    let mut raw = vec![T::zero(); p];
    for v in &per_tree {
        for (r, x) in raw.iter_mut().zip(v) {
            *r += *x;
        }
    }
    let nt = T::from_usize_lossy(forest.trees.len().max(1));
    let clipped: Vec<T> = raw.iter().map(|r| (*r / nt).max(T::zero())).collect();
    let total: T = clipped.iter().copied().sum();
    let scores: Vec<T> = if total > T::zero() {
        clipped.iter().map(|c| *c / total).collect()
    } else {
        clipped
    };
    ImportanceReport::from_scores(&forest.feature_names, &scores, threshold)
}

fn tree_importance<T: Scalar>(tree: &Tree<T>, oob: &[usize], data: &Dataset<T>, seed: u64) -> Vec<T> {
    let p = data.p();
    let mut out = vec![T::zero(); p];
    if oob.is_empty() {
        return out;
    }
    let n = T::from_usize_lossy(oob.len());
    let mse = |rows: &mut dyn Iterator<Item = (T, T)>| rows.map(|(y, f)| (y - f) * (y - f)).sum::<T>() / n;
    let base = mse(&mut oob.iter().map(|&i| (data.y[i], tree.predict(data.row(i)))));
    let used = tree.used_features(p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut buf = vec![T::zero(); p];
    for f in 0..p {
        // unused features cannot change predictions
        if !used[f] {
            continue;
        }
        let mut perm: Vec<usize> = oob.to_vec();
        perm.shuffle(&mut rng);
        let permuted = mse(&mut oob.iter().zip(&perm).map(|(&i, &j)| {
            buf.copy_from_slice(data.row(i));
            buf[f] = data.value(j, f);
            (data.y[i], tree.predict(&buf))
        }));
        out[f] = permuted - base;
    }
    out
}

/// Fits a forest and scores it.
pub fn feature_importance<T: Scalar>(
    data: &Dataset<T>,
    config: &ForestConfig,
    threshold: T,
) -> Result<ImportanceReport<T>, ImportanceError> {
    let forest = fit_forest(data, config)?;
    Ok(permutation_importance(&forest, data, threshold))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub features: Vec<String>,
    /// No feature cleared the threshold; the top-ranked one was kept.
    pub fallback: bool,
}

/// Features scoring at least `threshold`, in rank order; falls back to the
/// top-ranked feature (with a warning) when none qualifies.
pub fn select_features<T: Scalar>(report: &ImportanceReport<T>, threshold: T) -> Selection {
    let features: Vec<String> = report
        .ranked
        .iter()
        .filter(|f| f.score >= threshold)
        .map(|f| f.feature.clone())
        .collect();
    if features.is_empty() {
        let top: Vec<String> = report.ranked.iter().take(1).map(|f| f.feature.clone()).collect();
        log::warn!(
            "no feature scores ≥ {threshold}; falling back to top-ranked {:?}",
            top.first()
        );
        return Selection {
            features: top,
            fallback: true,
        };
    }
    Selection {
        features,
        fallback: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|k| format!("f{k}")).collect()
    }

    fn step_data(n: usize, p: usize, seed: u64) -> Dataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.gen::<f64>()).collect()).collect();
        let y = rows
            .iter()
            .map(|r| if r[0] > 0.5 { 3.0 } else { 0.0 } + 0.3 * rng.gen::<f64>())
            .collect();
        Dataset::new(names(p), rows, y).unwrap()
    }

    fn small_config(seed: u64) -> ForestConfig {
        ForestConfig {
            n_trees: 20,
            seed,
            ..ForestConfig::default()
        }
    }

    #[test]
    fn constant_response_is_single_leaf() {
        let d = step_data(60, 3, 1);
        let d = d.with_response(vec![2.0; 60]);
        let rows: Vec<usize> = (0..60).collect();
        let t = fit_tree(&d, &rows, &small_config(1), 9).unwrap();
        assert_eq!(t.nodes, vec![Node::Leaf(2.0)]);
    }

    #[test]
    fn too_few_rows() {
        let d = step_data(9, 2, 1);
        let rows: Vec<usize> = (0..9).collect();
        assert!(matches!(
            fit_tree(&d, &rows, &small_config(1), 0),
            Err(ImportanceError::TooFewRows { needed: 10, got: 9 })
        ));
    }

    #[test]
    fn step_signal_splits_at_root() {
        let d = step_data(500, 4, 3);
        let rows: Vec<usize> = (0..500).collect();
        let cfg = ForestConfig {
            mtry: Some(4),
            ..small_config(0)
        };
        let t = fit_tree(&d, &rows, &cfg, 11).unwrap();
        assert_eq!(t.root_feature(), Some(0));
        if let Node::Split { threshold, .. } = t.nodes[0] {
            assert!((threshold - 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn single_predictive_feature_gets_full_score() {
        let d = step_data(200, 1, 5);
        let r = feature_importance(&d, &small_config(5), DEFAULT_THRESHOLD).unwrap();
        assert_eq!(r.ranked[0].score, 1.0);
        assert_eq!(r.selected, vec!["f0".to_string()]);
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let d = step_data(150, 3, 8);
        let cfg = small_config(42);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| feature_importance(&d, &cfg, 0.05).unwrap());
        let b = four.install(|| feature_importance(&d, &cfg, 0.05).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn selection_rules() {
        let n = vec!["A".to_string(), "B".to_string(), "C".to_string()];
        let r = ImportanceReport::from_scores(&n, &[0.6, 0.3, 0.04], 0.05);
        assert_eq!(select_features(&r, 0.05).features, vec!["A", "B"]);
        let low = ImportanceReport::from_scores(&n, &[0.01, 0.03, 0.02], 0.05);
        let s = select_features(&low, 0.05);
        assert!(s.fallback);
        assert_eq!(s.features, vec!["B"]);
        let tie = ImportanceReport::from_scores(&n, &[0.05, 0.9, 0.05], 0.05);
        assert_eq!(select_features(&tie, 0.05).features, vec!["B", "A", "C"]);
    }

    #[test]
    fn report_csv_layout() {
        let n = vec!["a".to_string(), "b".to_string()];
        let r = ImportanceReport::from_scores(&n, &[0.25, 0.75], 0.5);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "feature,score,selected\nb,0.75,true\na,0.25,false\n");
    }

    #[test]
    fn config_validation() {
        let c = ForestConfig {
            mtry: Some(5),
            ..ForestConfig::default()
        };
        assert!(c.validate(3).is_err());
        assert_eq!(ForestConfig::default().mtry_for(7), 3);
        let c = ForestConfig {
            alpha_stop: 1.0,
            ..ForestConfig::default()
        };
        assert!(c.validate(3).is_err());
    }
}
