//! Small dense solvers for the Newton steps. Matrices are row-major `n × n`.

use crate::scalar::Scalar;

/// Outcome of a regularised symmetric positive-definite solve.
#[derive(Debug, Clone)]
pub(crate) struct SpdSolve<T> {
    pub x: Vec<T>,
    /// Diagonal jitter that had to be added before the factorisation succeeded.
    pub jitter: T,
    /// Ratio of largest to smallest squared Cholesky pivot.
    pub condition: T,
}

/// In-place Cholesky factorisation `A = L Lᵀ`; lower triangle holds `L` on success.
fn cholesky<T: Scalar>(a: &mut [T], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

fn cholesky_substitute<T: Scalar>(l: &[T], n: usize, b: &[T]) -> Vec<T> {
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    y
}

/// Solves `A x = b` for symmetric `A` that should be positive definite.
///
/// When the factorisation fails the diagonal is inflated by
/// `ridge · (1 + max|diag|)`, growing tenfold per retry. Returns `None`
/// only if no finite jitter helps (e.g. non-finite input).
pub(crate) fn solve_spd<T: Scalar>(a: &[T], b: &[T], ridge: T) -> Option<SpdSolve<T>> {
    let n = b.len();
    debug_assert_eq!(a.len(), n * n);
    if n == 0 {
        return Some(SpdSolve {
            x: Vec::new(),
            jitter: T::zero(),
            condition: T::one(),
        });
    }
    let scale = T::one()
        + (0..n)
            .map(|i| a[i * n + i].abs())
            .fold(T::zero(), |m, v| if v > m { v } else { m });
    let mut jitter = T::zero();
    let mut step = ridge.max(T::epsilon()) * scale;
    for _ in 0..40 {
        let mut f = a.to_vec();
        for i in 0..n {
            f[i * n + i] += jitter;
        }
        if cholesky(&mut f, n) {
            let pivots: Vec<T> = (0..n).map(|i| f[i * n + i] * f[i * n + i]).collect();
            let max = pivots.iter().copied().fold(T::zero(), T::max);
            let min = pivots.iter().copied().fold(T::infinity(), T::min);
            let x = cholesky_substitute(&f, n, b);
            if x.iter().all(|v| v.is_finite()) {
                return Some(SpdSolve {
                    x,
                    jitter,
                    condition: max / min,
                });
            }
        }
        jitter = step;
        step = step * T::lit(10.0);
    }
    None
}
