//! Negative binomial (NB2) count regression with exposure offsets.
//!
//! The mean of observation `i` is `μᵢ = tᵢ · exp(b₀ + Σₖ bₖ xₖᵢ)` and its
//! variance `μᵢ + α μᵢ²`. Fitting follows a two-step start (Poisson
//! coefficients, then α from the auxiliary regression of
//! `((y − μ)² − y) / μ` on `μ`) and finishes with a joint Newton ascent on
//! `(b, ln α)` with step halving.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{solve_spd, SpdSolve};
use crate::panel::Panel;
use crate::scalar::Scalar;
use crate::special::{digamma, ln_factorial, ln_gamma, trigamma};

pub const SCHEMA_VERSION: u32 = 1;
/// Coefficients beyond this magnitude are treated as diverging.
pub const SEPARATION_LIMIT: f64 = 30.0;
const LINEAR_PREDICTOR_LIMIT: f64 = 700.0;
/// Counts up to this size use the exact finite sums in the NB2 terms.
const DIRECT_SUM_LIMIT: u64 = 5000;

#[derive(Debug, Error, PartialEq)]
pub enum Nb2Error {
    #[error("linear predictor {0} overflows")]
    Overflow(f64),
    #[error("no convergence after {0} iterations")]
    NonConvergence(usize),
    #[error("coefficients diverging (|b| > {SEPARATION_LIMIT}); likely separation")]
    SeparationDetected,
    #[error("feature names do not match the model: {0}")]
    FeatureNameMismatch(String),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("need at least {needed} observations, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unsupported model schema version {0}")]
    SchemaVersion(u32),
    #[error("model json: {0}")]
    Json(String),
}

fn predictor_limit<T: Scalar>() -> T {
    T::lit(LINEAR_PREDICTOR_LIMIT).min(T::max_value().ln() - T::one())
}

/// Design matrix (without the intercept column), counts, and exposures.
#[derive(Debug, Clone, PartialEq)]
pub struct CountData<T> {
    x: Vec<T>,
    p: usize,
    y: Vec<u64>,
    exposure: Vec<T>,
}

impl<T: Scalar> CountData<T> {
    pub fn new(rows: Vec<Vec<T>>, y: Vec<u64>, exposure: Vec<T>) -> Result<Self, Nb2Error> {
        let n = y.len();
        if rows.len() != n || exposure.len() != n {
            return Err(Nb2Error::InvalidInput("row, count, exposure lengths differ".into()));
        }
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Nb2Error::InvalidInput("ragged design rows".into()));
        }
        if exposure.iter().any(|t| !(*t > T::zero()) || !t.is_finite()) {
            return Err(Nb2Error::InvalidInput("exposure must be positive".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Nb2Error::InvalidInput("non-finite covariate".into()));
        }
        Ok(Self {
            x: rows.into_iter().flatten().collect(),
            p,
            y,
            exposure,
        })
    }

    /// Intercept-only data.
    pub fn intercept_only(y: Vec<u64>, exposure: Vec<T>) -> Result<Self, Nb2Error> {
        let rows = vec![Vec::new(); y.len()];
        Self::new(rows, y, exposure)
    }

    /// Selects `names` (in that order) from a feature-joined panel.
    pub fn from_panel(panel: &Panel, names: &[String]) -> Result<Self, Nb2Error> {
        let idx = names
            .iter()
            .map(|n| {
                panel
                    .feature_names()
                    .iter()
                    .position(|f| f == n)
                    .ok_or_else(|| Nb2Error::UnknownFeature(n.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let obs = panel.observations();
        let rows = obs
            .iter()
            .map(|o| idx.iter().map(|&k| T::lit(o.x[k])).collect())
            .collect();
        Self::new(
            rows,
            obs.iter().map(|o| o.count).collect(),
            obs.iter().map(|o| T::lit(o.exposure)).collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_features(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn counts(&self) -> &[u64] {
        &self.y
    }

    pub fn exposure(&self) -> &[T] {
        &self.exposure
    }

    /// Multiplies every exposure by `c`.
    pub fn with_scaled_exposure(&self, c: T) -> Self {
        Self {
            exposure: self.exposure.iter().map(|t| *t * c).collect(),
            ..self.clone()
        }
    }

    /// `ln t + b₀ + x·b` for row `i`.
    fn eta(&self, i: usize, b: &[T]) -> T {
        let mut eta = b[0] + self.exposure[i].ln();
        for (x, bk) in self.row(i).iter().zip(&b[1..]) {
            eta += *x * *bk;
        }
        eta
    }

    fn means(&self, b: &[T]) -> Result<Vec<T>, Nb2Error> {
        let lim = predictor_limit::<T>();
        (0..self.n())
            .map(|i| {
                let eta = self.eta(i, b);
                if eta > lim || !eta.is_finite() {
                    Err(Nb2Error::Overflow(eta.to_f64_lossy()))
                } else {
                    Ok(eta.exp())
                }
            })
            .collect()
    }
}

/// `μ = t · exp(b₀ + Σ bₖ xₖ)`.
pub fn mean_mu<T: Scalar>(x: &[T], t: T, b: &[T]) -> Result<T, Nb2Error> {
    if b.len() != x.len() + 1 {
        return Err(Nb2Error::InvalidInput(format!(
            "{} coefficients for {} covariates",
            b.len(),
            x.len()
        )));
    }
    if !(t > T::zero()) {
        return Err(Nb2Error::InvalidInput("exposure must be positive".into()));
    }
    let mut lp = b[0];
    for (xk, bk) in x.iter().zip(&b[1..]) {
        lp += *xk * *bk;
    }
    let eta = lp + t.ln();
    if lp > predictor_limit::<T>() || eta > predictor_limit::<T>() || !eta.is_finite() {
        return Err(Nb2Error::Overflow(lp.to_f64_lossy()));
    }
    Ok(eta.exp())
}

/// Per-observation NB2 log-likelihood and derivatives with respect to the
/// linear predictor `η` and `s = ln α`.
#[derive(Debug, Clone, Copy)]
struct Terms<T> {
    ll: T,
    d_eta: T,
    d_s: T,
    h_eta_eta: T,
    h_eta_s: T,
    h_s_s: T,
}

/// `Σ_{j<y} ln(1 + αj)`, `Σ j/(1 + αj)`, `Σ (j/(1 + αj))²`.
fn count_sums<T: Scalar>(y: u64, alpha: T) -> (T, T, T) {
    if y <= DIRECT_SUM_LIMIT {
        let (mut s0, mut s1, mut s2) = (T::zero(), T::zero(), T::zero());
        for j in 1..y {
            let j = T::lit(j as f64);
            let aj = alpha * j;
            let u = j / (T::one() + aj);
            s0 += aj.ln_1p();
            s1 += u;
            s2 += u * u;
        }
        (s0, s1, s2)
    } else {
        let r = alpha.recip();
        let yt = T::lit(y as f64);
        let dpsi = digamma(yt + r) - digamma(r);
        let dpsi1 = trigamma(r) - trigamma(yt + r);
        let s0 = ln_gamma(yt + r) - ln_gamma(r) + yt * alpha.ln();
        let s1 = (yt - r * dpsi) / alpha;
        let s2 = (yt - T::lit(2.0) * r * dpsi + r * r * dpsi1) / (alpha * alpha);
        (s0, s1, s2)
    }
}

fn nb2_terms<T: Scalar>(y: u64, mu: T, alpha: T) -> Terms<T> {
    let yt = T::lit(y as f64);
    let (s0, s1, s2) = count_sums(y, alpha);
    let am = alpha * mu;
    let l = am.ln_1p();
    let q = (T::one() + am).recip();
    let one_ay = T::one() + alpha * yt;
    let ll = s0 - ln_factorial::<T>(y) + yt * mu.ln() - (alpha.recip() + yt) * l;
    let d_eta = (yt - mu) * q;
    let d_s = alpha * s1 + l / alpha - one_ay * mu * q;
    let two = T::lit(2.0);
    let h_eta_eta = -mu * one_ay * q * q;
    let h_eta_s = -am * (yt - mu) * q * q;
    let h_s_s = d_s - alpha * alpha * s2 - two * l / alpha + two * mu * q + alpha * one_ay * mu * mu * q * q;
    Terms {
        ll,
        d_eta,
        d_s,
        h_eta_eta,
        h_eta_s,
        h_s_s,
    }
}

pub fn poisson_log_pmf<T: Scalar>(y: u64, mu: T) -> T {
    let yt = T::lit(y as f64);
    if y == 0 {
        return -mu;
    }
    yt * mu.ln() - mu - ln_factorial::<T>(y)
}

/// `ln P(Y = y | μ, α)`; `α = 0` is the Poisson limit.
pub fn nb2_log_pmf<T: Scalar>(y: u64, mu: T, alpha: T) -> T {
    if alpha == T::zero() {
        return poisson_log_pmf(y, mu);
    }
    let yt = T::lit(y as f64);
    let (s0, _, _) = count_sums(y, alpha);
    let l = (alpha * mu).ln_1p();
    s0 - ln_factorial::<T>(y) + yt * mu.ln() - (alpha.recip() + yt) * l
}

pub fn nb2_pmf<T: Scalar>(y: u64, mu: T, alpha: T) -> T {
    nb2_log_pmf(y, mu, alpha).exp()
}

/// `Σᵢ ln P(yᵢ | μᵢ(b), α)`.
pub fn nb2_loglik<T: Scalar>(data: &CountData<T>, b: &[T], alpha: T) -> Result<T, Nb2Error> {
    let mu = data.means(b)?;
    Ok(data
        .y
        .iter()
        .zip(&mu)
        .map(|(y, m)| nb2_log_pmf(*y, *m, alpha))
        .sum())
}

pub fn poisson_loglik<T: Scalar>(data: &CountData<T>, b: &[T]) -> Result<T, Nb2Error> {
    let mu = data.means(b)?;
    Ok(data
        .y
        .iter()
        .zip(&mu)
        .map(|(y, m)| poisson_log_pmf(*y, *m))
        .sum())
}

/// Gradient of the NB2 log-likelihood over `(b₀, …, b_p, ln α)`.
pub fn loglik_gradient<T: Scalar>(data: &CountData<T>, b: &[T], alpha: T) -> Result<Vec<T>, Nb2Error> {
    Ok(nb2_derivatives(data, b, alpha, false)?.1)
}

/// Log-likelihood, gradient, and (optionally) the Hessian, row-major, over `(b, ln α)`.
fn nb2_derivatives<T: Scalar>(
    data: &CountData<T>,
    b: &[T],
    alpha: T,
    hessian: bool,
) -> Result<(T, Vec<T>, Vec<T>), Nb2Error> {
    let mu = data.means(b)?;
    let k = data.p + 2;
    let s = k - 1;
    let mut ll = T::zero();
    let mut g = vec![T::zero(); k];
    let mut h = if hessian { vec![T::zero(); k * k] } else { Vec::new() };
    let mut xt = vec![T::one(); data.p + 1];
    for i in 0..data.n() {
        let t = nb2_terms(data.y[i], mu[i], alpha);
        ll += t.ll;
        xt[1..].copy_from_slice(data.row(i));
        for (a, xa) in xt.iter().enumerate() {
            g[a] += t.d_eta * *xa;
        }
        g[s] += t.d_s;
        if hessian {
            for (a, xa) in xt.iter().enumerate() {
                for (c, xc) in xt.iter().enumerate().skip(a) {
                    h[a * k + c] += t.h_eta_eta * *xa * *xc;
                }
                h[a * k + s] += t.h_eta_s * *xa;
            }
            h[s * k + s] += t.h_s_s;
        }
    }
    if hessian {
        for a in 0..k {
            for c in 0..a {
                h[a * k + c] = h[c * k + a];
            }
        }
    }
    Ok((ll, g, h))
}

fn poisson_derivatives<T: Scalar>(data: &CountData<T>, b: &[T]) -> Result<(T, Vec<T>, Vec<T>), Nb2Error> {
    let mu = data.means(b)?;
    let k = data.p + 1;
    let mut ll = T::zero();
    let mut g = vec![T::zero(); k];
    let mut h = vec![T::zero(); k * k];
    let mut xt = vec![T::one(); k];
    for i in 0..data.n() {
        let (y, m) = (data.y[i], mu[i]);
        ll += poisson_log_pmf(y, m);
        let r = T::lit(y as f64) - m;
        xt[1..].copy_from_slice(data.row(i));
        for a in 0..k {
            g[a] += r * xt[a];
            for c in a..k {
                h[a * k + c] -= m * xt[a] * xt[c];
            }
        }
    }
    for a in 0..k {
        for c in 0..a {
            h[a * k + c] = h[c * k + a];
        }
    }
    Ok((ll, g, h))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Relative log-likelihood change that ends the iterations.
    pub tol: f64,
    pub max_iter: usize,
    pub alpha_floor: f64,
    /// Relative diagonal jitter for near-singular Hessians.
    pub ridge: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            alpha_floor: 1e-8,
            ridge: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PoissonFit<T> {
    pub coefficients: Vec<T>,
    pub log_likelihood: T,
    pub iterations: usize,
    pub condition_warning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Diagnostics<T> {
    pub log_likelihood: T,
    pub iterations: usize,
    pub converged: bool,
    pub condition_warning: bool,
    /// Dispersion ended at the floor: no overdispersion detected.
    pub effectively_poisson: bool,
    /// Two-step (auxiliary OLS) dispersion estimate used as the starting point.
    pub alpha_initial: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Nb2Model<T> {
    pub schema_version: u32,
    pub feature_names: Vec<String>,
    /// Intercept first.
    pub coefficients: Vec<T>,
    pub alpha: T,
    pub diagnostics: Diagnostics<T>,
}

/// Log-likelihood after each accepted step, starting from the initial point.
pub type LoglikTrace<T> = Vec<T>;

struct StepOutcome<T> {
    theta: Vec<T>,
    ll: T,
    step_max: T,
}

/// Step-halving line search; accepts the first trial that does not lower
/// the objective. `project` clamps trial points into the feasible set.
fn line_search<T: Scalar>(
    theta: &[T],
    dir: &[T],
    ll0: T,
    project: impl Fn(&mut [T]),
    objective: impl Fn(&[T]) -> Option<T>,
) -> Option<StepOutcome<T>> {
    let mut lambda = T::one();
    let half = T::lit(0.5);
    for _ in 0..50 {
        let mut trial: Vec<T> = theta.iter().zip(dir).map(|(t, d)| *t + lambda * *d).collect();
        project(&mut trial);
        if let Some(ll) = objective(&trial) {
            if ll.is_finite() && ll >= ll0 {
                let step_max = trial
                    .iter()
                    .zip(theta)
                    .map(|(a, b)| (*a - *b).abs())
                    .fold(T::zero(), T::max);
                return Some(StepOutcome {
                    theta: trial,
                    ll,
                    step_max,
                });
            }
        }
        lambda *= half;
    }
    None
}

fn ill_conditioned<T: Scalar>(sol: &SpdSolve<T>) -> bool {
    sol.jitter > T::zero() || sol.condition > (T::epsilon() * T::lit(100.0)).recip()
}

fn relative_change<T: Scalar>(new: T, old: T) -> T {
    (new - old).abs() / (old.abs() + T::one())
}

fn step_tolerance<T: Scalar>() -> T {
    T::epsilon().sqrt() * T::lit(1e-2)
}

fn check_len<T: Scalar>(data: &CountData<T>) -> Result<(), Nb2Error> {
    let needed = data.p + 2;
    if data.n() < needed {
        return Err(Nb2Error::InsufficientData {
            needed,
            got: data.n(),
        });
    }
    Ok(())
}

/// Poisson maximum likelihood with offsets, by Newton's method.
pub fn fit_poisson<T: Scalar>(data: &CountData<T>, opts: &FitOptions) -> Result<PoissonFit<T>, Nb2Error> {
    check_len(data)?;
    let total_y: f64 = data.y.iter().map(|y| *y as f64).sum();
    if total_y == 0.0 {
        return Err(Nb2Error::SeparationDetected);
    }
    let total_t: T = data.exposure.iter().copied().sum();
    let mut b = vec![T::zero(); data.p + 1];
    b[0] = (T::lit(total_y) / total_t).ln();
    let ridge = T::lit(opts.ridge);
    let tol = T::lit(opts.tol);
    let limit = T::lit(SEPARATION_LIMIT);
    let mut condition_warning = false;
    let (mut ll, _, _) = poisson_derivatives(data, &b)?;
    for iter in 1..=opts.max_iter {
        let (_, g, h) = poisson_derivatives(data, &b)?;
        let neg: Vec<T> = h.iter().map(|v| -*v).collect();
        let sol = solve_spd(&neg, &g, ridge).ok_or(Nb2Error::NonConvergence(iter))?;
        condition_warning |= ill_conditioned(&sol);
        let Some(step) = line_search(&b, &sol.x, ll, |_| {}, |th| poisson_loglik(data, th).ok()) else {
            // no ascent direction left: at the numerical optimum
            return finish_poisson(b, ll, iter, condition_warning);
        };
        let change = relative_change(step.ll, ll);
        b = step.theta;
        ll = step.ll;
        if b.iter().any(|v| v.abs() > limit) {
            return Err(Nb2Error::SeparationDetected);
        }
        if change < tol && step.step_max < step_tolerance::<T>() {
            return finish_poisson(b, ll, iter, condition_warning);
        }
    }
    Err(Nb2Error::NonConvergence(opts.max_iter))
}

fn finish_poisson<T: Scalar>(b: Vec<T>, ll: T, iterations: usize, condition_warning: bool) -> Result<PoissonFit<T>, Nb2Error> {
    if condition_warning {
        log::warn!("near-singular Poisson information matrix; ridge jitter applied");
    }
    Ok(PoissonFit {
        coefficients: b,
        log_likelihood: ll,
        iterations,
        condition_warning,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AlphaEstimate<T> {
    /// Clamped estimate.
    pub alpha: T,
    /// Slope of the auxiliary regression before clamping.
    pub raw: T,
    pub effectively_poisson: bool,
}

/// No-intercept OLS of `zᵢ = ((yᵢ − μᵢ)² − yᵢ) / μᵢ` on `μᵢ`.
pub fn estimate_alpha_ols<T: Scalar>(y: &[u64], mu: &[T], alpha_floor: T) -> AlphaEstimate<T> {
    assert_eq!(y.len(), mu.len());
    let (mut num, mut den) = (T::zero(), T::zero());
    for (yi, mi) in y.iter().zip(mu) {
        let yt = T::lit(*yi as f64);
        let d = yt - *mi;
        let z = (d * d - yt) / *mi;
        num += z * *mi;
        den += *mi * *mi;
    }
    let raw = num / den;
    if raw > alpha_floor {
        AlphaEstimate {
            alpha: raw,
            raw,
            effectively_poisson: false,
        }
    } else {
        AlphaEstimate {
            alpha: alpha_floor,
            raw,
            effectively_poisson: true,
        }
    }
}

/// Poisson start → auxiliary-OLS α → joint Newton ascent on `(b, ln α)`.
pub fn fit_nb2<T: Scalar>(
    data: &CountData<T>,
    feature_names: &[String],
    opts: &FitOptions,
) -> Result<Nb2Model<T>, Nb2Error> {
    fit_nb2_traced(data, feature_names, opts).map(|(m, _)| m)
}

/// As [`fit_nb2`], also returning the log-likelihood after every accepted step.
pub fn fit_nb2_traced<T: Scalar>(
    data: &CountData<T>,
    feature_names: &[String],
    opts: &FitOptions,
) -> Result<(Nb2Model<T>, LoglikTrace<T>), Nb2Error> {
    if feature_names.len() != data.p {
        return Err(Nb2Error::FeatureNameMismatch(format!(
            "{} names for {} covariates",
            feature_names.len(),
            data.p
        )));
    }
    let pois = fit_poisson(data, opts)?;
    let mu = data.means(&pois.coefficients)?;
    let floor = T::lit(opts.alpha_floor);
    let start = estimate_alpha_ols(&data.y, &mu, floor);
    let s_floor = floor.ln();
    let k = data.p + 2;
    let s = k - 1;
    let mut theta = pois.coefficients.clone();
    theta.push(start.alpha.ln());

    let ridge = T::lit(opts.ridge);
    let tol = T::lit(opts.tol);
    let mut condition_warning = pois.condition_warning;
    let objective = |th: &[T]| nb2_loglik(data, &th[..s], th[s].exp()).ok();
    let project = |th: &mut [T]| {
        if th[s] < s_floor {
            th[s] = s_floor;
        }
    };
    let mut ll = objective(&theta).ok_or(Nb2Error::Overflow(f64::NAN))?;
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    for iter in 1..=opts.max_iter {
        iterations = iter;
        let (_, g, h) = nb2_derivatives(data, &theta[..s], theta[s].exp(), true)?;
        // dispersion pinned at its floor while the gradient pushes it lower
        let pinned = theta[s] <= s_floor && g[s] <= T::zero();
        let free = if pinned { s } else { k };
        let mut neg = vec![T::zero(); free * free];
        for a in 0..free {
            for c in 0..free {
                neg[a * free + c] = -h[a * k + c];
            }
        }
        let sol = solve_spd(&neg, &g[..free], ridge).ok_or(Nb2Error::NonConvergence(iter))?;
        condition_warning |= ill_conditioned(&sol);
        let mut dir = sol.x;
        if pinned {
            dir.push(T::zero());
        }
        let Some(step) = line_search(&theta, &dir, ll, project, objective) else {
            converged = true;
            break;
        };
        debug_assert!(step.ll >= ll, "log-likelihood decreased");
        let change = relative_change(step.ll, ll);
        theta = step.theta;
        ll = step.ll;
        trace.push(ll);
        if change < tol && step.step_max < step_tolerance::<T>() {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Nb2Error::NonConvergence(opts.max_iter));
    }
    if condition_warning {
        log::warn!("near-singular NB2 information matrix; ridge jitter applied");
    }
    let alpha = theta[s].exp().max(floor);
    theta.truncate(s);
    let model = Nb2Model {
        schema_version: SCHEMA_VERSION,
        feature_names: feature_names.to_vec(),
        coefficients: theta,
        alpha,
        diagnostics: Diagnostics {
            log_likelihood: ll,
            iterations,
            converged,
            condition_warning,
            effectively_poisson: alpha <= floor * T::lit(1.000_001),
            alpha_initial: start.alpha,
        },
    };
    Ok((model, trace))
}

impl<T: Scalar> Nb2Model<T> {
    /// Expected count for covariates in model order.
    pub fn mean(&self, x: &[T], exposure: T) -> Result<T, Nb2Error> {
        mean_mu(x, exposure, &self.coefficients)
    }

    /// Expected counts for rows whose columns are named by `names`.
    /// Every model feature must be present; extra columns are ignored.
    pub fn predict(&self, names: &[String], rows: &[Vec<T>], exposure: T) -> Result<Vec<T>, Nb2Error> {
        let idx = self
            .feature_names
            .iter()
            .map(|f| {
                names
                    .iter()
                    .position(|n| n == f)
                    .ok_or_else(|| Nb2Error::FeatureNameMismatch(format!("missing `{f}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut x = vec![T::zero(); idx.len()];
        rows.iter()
            .map(|row| {
                for (dst, &j) in x.iter_mut().zip(&idx) {
                    *dst = row[j];
                }
                self.mean(&x, exposure)
            })
            .collect()
    }

    pub fn log_likelihood(&self, data: &CountData<T>) -> Result<T, Nb2Error> {
        nb2_loglik(data, &self.coefficients, self.alpha)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, Nb2Error> {
        let m: Self = serde_json::from_str(text).map_err(|e| Nb2Error::Json(e.to_string()))?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Nb2Error::SchemaVersion(m.schema_version));
        }
        if m.coefficients.len() != m.feature_names.len() + 1 {
            return Err(Nb2Error::Json("coefficient count does not match features".into()));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_examples() {
        assert_eq!(mean_mu(&[], 1.0, &[0.7f64]).unwrap(), 0.7f64.exp());
        assert!((mean_mu(&[], 2.0, &[0.7f64]).unwrap() - 2.0 * 0.7f64.exp()).abs() < 1e-12);
        let m = mean_mu(&[3.0], 1.0, &[0.0, 2f64.ln()]).unwrap();
        assert!((m - 8.0).abs() < 1e-12);
        assert!(matches!(mean_mu(&[1.0], 1.0, &[0.0, 800.0f64]), Err(Nb2Error::Overflow(_))));
    }

    #[test]
    fn pmf_at_zero() {
        let (mu, a) = (2.5f64, 0.4);
        let expect = (1.0 / (1.0 + a * mu)).powf(1.0 / a);
        assert!((nb2_pmf(0, mu, a) - expect).abs() < 1e-14);
    }

    #[test]
    fn pmf_matches_gamma_form() {
        // direct evaluation with ln Γ
        for &(y, mu, a) in &[(3u64, 2.0f64, 0.5f64), (17, 9.0, 1.3), (0, 0.1, 2.0), (40, 30.0, 0.05)] {
            let r = 1.0 / a;
            let lg = ln_gamma(y as f64 + r) - ln_gamma(y as f64 + 1.0) - ln_gamma(r)
                + r * (1.0 / (1.0 + a * mu)).ln()
                + y as f64 * (a * mu / (1.0 + a * mu)).ln();
            assert!((nb2_log_pmf(y, mu, a) - lg).abs() < 1e-10, "{y} {mu} {a}");
        }
    }

    #[test]
    fn large_count_branch_agrees_with_direct_sum() {
        let (mu, a) = (5200.0f64, 0.3);
        for y in [DIRECT_SUM_LIMIT, DIRECT_SUM_LIMIT + 1] {
            let sums = count_sums(y, a);
            let r = 1.0 / a;
            let yt = y as f64;
            let s0 = ln_gamma(yt + r) - ln_gamma(r) + yt * a.ln();
            assert!((sums.0 - s0).abs() < 1e-8 * s0.abs());
        }
        let lo = nb2_log_pmf(DIRECT_SUM_LIMIT, mu, a);
        let hi = nb2_log_pmf(DIRECT_SUM_LIMIT + 1, mu, a);
        assert!(lo.is_finite() && hi.is_finite());
    }

    #[test]
    fn alpha_zero_is_poisson() {
        assert_eq!(nb2_log_pmf(4, 3.0f64, 0.0), poisson_log_pmf(4, 3.0));
    }

    #[test]
    fn intercept_only_poisson_is_log_mean() {
        let d = CountData::intercept_only(vec![1, 2, 3], vec![1.0f64; 3]).unwrap();
        let f = fit_poisson(&d, &FitOptions::default()).unwrap();
        assert!((f.coefficients[0] - 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn alpha_ols_equidispersed_clamps() {
        let mu = [1.0f64, 2.0, 4.0];
        let y = [1u64, 2, 4];
        let est = estimate_alpha_ols(&y, &mu, 1e-8);
        assert!(est.raw < 0.0);
        assert!(est.effectively_poisson);
        assert_eq!(est.alpha, 1e-8);
        let one = estimate_alpha_ols(&[3], &[3.0f64], 1e-8);
        assert!(one.effectively_poisson && one.raw.is_finite());
    }

    #[test]
    fn intercept_only_nb2_is_sample_mean() {
        let d = CountData::intercept_only(vec![0, 1, 2, 5], vec![1.0f64; 4]).unwrap();
        let m = fit_nb2(&d, &[], &FitOptions::default()).unwrap();
        assert!((m.coefficients[0] - 2f64.ln()).abs() < 1e-8);
        assert!(m.alpha > 0.0);
        let mu = m.mean(&[], 1.0).unwrap();
        assert!((mu - 2.0).abs() < 1e-7);
    }

    #[test]
    fn all_zero_counts_signal_separation() {
        let d = CountData::intercept_only(vec![0, 0, 0], vec![1.0f64; 3]).unwrap();
        assert_eq!(fit_poisson(&d, &FitOptions::default()), Err(Nb2Error::SeparationDetected));
    }

    #[test]
    fn duplicated_constant_column_gets_ridge() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![1.0, 1.0, (i % 5) as f64]).collect();
        let y: Vec<u64> = (0..40).map(|i| (i % 5) as u64 + (i % 3) as u64).collect();
        let d = CountData::new(rows, y, vec![1.0; 40]).unwrap();
        let f = fit_poisson(&d, &FitOptions::default()).unwrap();
        assert!(f.condition_warning);
        assert!(f.coefficients.iter().all(|b| b.is_finite()));
    }

    #[test]
    fn predict_examples() {
        let m = Nb2Model {
            schema_version: 1,
            feature_names: vec![],
            coefficients: vec![3f64.ln()],
            alpha: 0.2,
            diagnostics: Diagnostics {
                log_likelihood: 0.0,
                iterations: 0,
                converged: true,
                condition_warning: false,
                effectively_poisson: false,
                alpha_initial: 0.2,
            },
        };
        let p = m.predict(&[], &[vec![], vec![]], 1.0).unwrap();
        assert!(p.iter().all(|v| (v - 3.0).abs() < 1e-12));
        let p2 = m.predict(&[], &[vec![]], 2.0).unwrap();
        assert!((p2[0] - 6.0).abs() < 1e-12);

        let m = Nb2Model {
            feature_names: vec!["a".into(), "b".into()],
            coefficients: vec![0.5, 0.1, -0.2],
            ..m
        };
        let names = vec!["b".to_string(), "a".to_string()];
        let z = m.predict(&names, &[vec![0.0, 0.0]], 1.0).unwrap();
        assert!((z[0] - 0.5f64.exp()).abs() < 1e-12);
        let swapped = m.predict(&names, &[vec![1.0, 2.0]], 1.0).unwrap();
        assert!((swapped[0] - (0.5 + 0.2 - 0.2f64).exp()).abs() < 1e-12);
        assert!(matches!(
            m.predict(&["a".to_string()], &[vec![1.0]], 1.0),
            Err(Nb2Error::FeatureNameMismatch(_))
        ));
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![(i % 7) as f64 / 3.0]).collect();
        let y: Vec<u64> = (0..30).map(|i| [0u64, 3, 1, 7, 2, 12][i % 6]).collect();
        let d = CountData::new(rows, y, vec![1.5; 30]).unwrap();
        let th = [0.4f64, 0.2, (0.7f64).ln()];
        let (_, _, h) = nb2_derivatives(&d, &th[..2], th[2].exp(), true).unwrap();
        let grad = |t: &[f64]| loglik_gradient(&d, &t[..2], t[2].exp()).unwrap();
        let eps = 1e-6;
        for c in 0..3 {
            let mut up = th;
            let mut dn = th;
            up[c] += eps;
            dn[c] -= eps;
            let (gu, gd) = (grad(&up), grad(&dn));
            for a in 0..3 {
                let fd = (gu[a] - gd[a]) / (2.0 * eps);
                assert!((fd - h[a * 3 + c]).abs() < 1e-5 * (1.0 + fd.abs()), "h[{a}][{c}]");
            }
        }
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let rows: Vec<Vec<f64>> = (0..60).map(|i| vec![(i % 4) as f64 * 0.37]).collect();
        let y: Vec<u64> = (0..60).map(|i| [0u64, 3, 1, 7, 2][i % 5] + (i % 4) as u64).collect();
        let d = CountData::new(rows, y, vec![1.0; 60]).unwrap();
        let m = fit_nb2(&d, &["f".to_string()], &FitOptions::default()).unwrap();
        let back = Nb2Model::<f64>::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        let bad = m.to_json().replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert_eq!(Nb2Model::<f64>::from_json(&bad), Err(Nb2Error::SchemaVersion(2)));
    }

    #[test]
    fn single_precision_fit() {
        let d = CountData::intercept_only(vec![0u64, 1, 2, 5], vec![1.0f32; 4]).unwrap();
        let m = fit_nb2(&d, &[], &FitOptions { tol: 1e-5, ..FitOptions::default() }).unwrap();
        assert!((m.coefficients[0] - 2f32.ln()).abs() < 1e-3);
    }
}
