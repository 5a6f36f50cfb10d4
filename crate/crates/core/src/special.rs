//! Gamma-family special functions for positive real arguments.

use crate::scalar::Scalar;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos approximation).
pub fn ln_gamma<T: Scalar>(x: T) -> T {
    if x < T::lit(0.5) {
        // Γ(x) = Γ(x + 1) / x
        return ln_gamma(x + T::one()) - x.ln();
    }
    let x = x - T::one();
    let mut a = T::lit(LANCZOS[0]);
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += T::lit(*c) / (x + T::from_usize_lossy(i));
    }
    let t = x + T::lit(LANCZOS_G + 0.5);
    let half_ln_2pi = T::lit(0.918_938_533_204_672_8);
    half_ln_2pi + (x + T::lit(0.5)) * t.ln() - t + a.ln()
}

/// `ln(n!)`.
pub fn ln_factorial<T: Scalar>(n: u64) -> T {
    ln_gamma(T::lit(n as f64 + 1.0))
}

/// Digamma `ψ(x)` for `x > 0`.
pub fn digamma<T: Scalar>(mut x: T) -> T {
    let mut acc = T::zero();
    let six = T::lit(10.0);
    while x < six {
        acc -= x.recip();
        x += T::one();
    }
    let inv = x.recip();
    let inv2 = inv * inv;
    let series = inv2
        * (T::lit(1.0 / 12.0)
            - inv2
                * (T::lit(1.0 / 120.0)
                    - inv2
                        * (T::lit(1.0 / 252.0)
                            - inv2 * (T::lit(1.0 / 240.0) - inv2 * T::lit(1.0 / 132.0)))));
    acc + x.ln() - T::lit(0.5) * inv - series
}

/// Trigamma `ψ₁(x)` for `x > 0`.
pub fn trigamma<T: Scalar>(mut x: T) -> T {
    let mut acc = T::zero();
    let six = T::lit(10.0);
    while x < six {
        acc += (x * x).recip();
        x += T::one();
    }
    let inv = x.recip();
    let inv2 = inv * inv;
    let series = inv
        + inv2 / T::lit(2.0)
        + inv * inv2
            * (T::lit(1.0 / 6.0)
                - inv2
                    * (T::lit(1.0 / 30.0)
                        - inv2
                            * (T::lit(1.0 / 42.0)
                                - inv2 * (T::lit(1.0 / 30.0) - inv2 * T::lit(5.0 / 66.0)))));
    acc + series
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_at_integers() {
        let mut fact = 1.0f64;
        for n in 1..30u32 {
            // Γ(n) = (n − 1)!
            let got: f64 = ln_gamma(n as f64);
            assert!((got - fact.ln()).abs() < 1e-12 * fact.ln().abs().max(1.0), "n={n}");
            fact *= n as f64;
        }
        let half: f64 = ln_gamma(0.5);
        assert!((half - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
    }

    #[test]
    fn digamma_reference_values() {
        // ψ(1) = −γ
        let euler = 0.577_215_664_901_532_9;
        assert!((digamma(1.0f64) + euler).abs() < 1e-13);
        // ψ(x + 1) = ψ(x) + 1/x
        for x in [0.3f64, 2.5, 17.0, 1e4] {
            assert!((digamma(x + 1.0) - digamma(x) - 1.0 / x).abs() < 1e-12);
        }
    }

    #[test]
    fn trigamma_reference_values() {
        // ψ₁(1) = π²/6
        let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
        assert!((trigamma(1.0f64) - pi2_6).abs() < 1e-13);
        for x in [0.3f64, 2.5, 17.0, 1e4] {
            assert!((trigamma(x) - trigamma(x + 1.0) - 1.0 / (x * x)).abs() < 1e-12 / x.min(1.0));
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for x in [0.7f64, 3.0, 40.0] {
            let h = 1e-5;
            let d = (ln_gamma(x + h) - ln_gamma(x - h)) / (2.0 * h);
            assert!((d - digamma(x)).abs() < 1e-8);
            let d2 = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert!((d2 - trigamma(x)).abs() < 1e-7);
        }
    }
}
