//! Special functions used by the kernel zoo and the manufactured solution.

/// Error function.
#[inline]
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Complementary error function, accurate in the far tail.
#[inline]
pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// `ln(n!)`.
pub fn ln_factorial(n: u64) -> f64 {
    libm::lgamma(n as f64 + 1.0)
}

/// Regularized upper incomplete gamma function for integer shape `m + 1`:
/// `e^{-x} * sum_{k=0}^{m} x^k / k!`, i.e. the Erlang survival function
/// evaluated at `x = a t`.
pub fn erlang_survival(m: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    // Summing in scaled form keeps the terms representable for large x.
    let mut term = 1.0_f64;
    let mut sum = 1.0_f64;
    let mut log_scale = -x;
    for k in 1..=m {
        term *= x / k as f64;
        sum += term;
        if sum > 1e280 {
            log_scale += sum.ln();
            term /= sum;
            sum = 1.0;
        }
    }
    (sum.ln() + log_scale).exp().min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Maclaurin series for erf, summed with enough terms to be exact in f64 for |x| <= 3.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0_f64;
        loop {
            n += 1.0;
            term *= -x * x / n;
            let add = term / (2.0 * n + 1.0);
            sum += add;
            if add.abs() < 1e-18 * sum.abs() {
                break;
            }
        }
        2.0 / std::f64::consts::PI.sqrt() * sum
    }

    #[test]
    fn erf_matches_series_oracle() {
        for i in 0..20 {
            let x = -2.5 + 0.26 * i as f64;
            let got = erf(x);
            let want = erf_series(x);
            assert!((got - want).abs() < 1e-14, "x={x} got={got} want={want}");
        }
    }

    #[test]
    fn erfc_tail() {
        // erfc(5) = 1.5374597944280348e-12
        assert!((erfc(5.0) / 1.537_459_794_428_034_8e-12 - 1.0).abs() < 1e-13);
        assert!((erf(1.0) - 0.842_700_792_949_714_9).abs() < 1e-15);
    }

    #[test]
    fn erlang_survival_matches_exponential() {
        assert!((erlang_survival(0, 2.0) - (-2.0_f64).exp()).abs() < 1e-15);
        // order 1: e^{-x}(1+x)
        assert!((erlang_survival(1, 3.0) - 4.0 * (-3.0_f64).exp()).abs() < 1e-15);
        // large argument stays finite and small
        let s = erlang_survival(1000, 800.0);
        assert!(s > 0.99 && s <= 1.0);
    }

    #[test]
    fn ln_factorial_small() {
        assert!((ln_factorial(5) - 120.0_f64.ln()).abs() < 1e-13);
        assert_eq!(ln_factorial(0), 0.0);
    }
}
