//! Delay kernels: Erlang kernels, Erlang mixtures, the Erlang mixture delta
//! family, and the regular kernels used by the benchmark models.
//!
//! All kernel values are immutable after construction and evaluation is
//! reentrant.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::quadrature::{integrate_density_to_infinity, NotConverged, QuadConfig};
use crate::special::{erf, erfc};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("rate parameter must be positive and finite, got {0}")]
    InvalidRate(f64),
    #[error("time must be nonnegative, got {0}")]
    NegativeTime(f64),
    #[error("invalid mixture coefficients: {0}")]
    InvalidCoefficients(String),
    #[error("invalid parameters for kernel '{family}': {reason}")]
    InvalidParameters { family: String, reason: String },
    #[error("unknown kernel family '{0}'")]
    UnknownFamily(String),
    #[error("kernel integral {0} is zero, nonfinite, or outside [1e-8, 1e8]")]
    BadNormalization(f64),
    #[error("kernel is not regular: {0}")]
    NotRegular(String),
    #[error(transparent)]
    Quadrature(#[from] NotConverged<f64>),
}

fn check_rate(a: f64) -> Result<(), KernelError> {
    if a > 0.0 && a.is_finite() {
        Ok(())
    } else {
        Err(KernelError::InvalidRate(a))
    }
}

fn check_time(t: f64) -> Result<(), KernelError> {
    if t >= 0.0 {
        Ok(())
    } else {
        Err(KernelError::NegativeTime(t))
    }
}

/// Above this value of `a t` the leading term `a e^{-a t}` underflows and the
/// recursion is carried out on logarithms instead.
const LOG_PATH_THRESHOLD: f64 = 700.0;

/// Fill `out[m] = l_m(t)` for `m = 0..out.len()`.
///
/// Uses `l_0 = a e^{-a t}` and `l_m = (a t / m) l_{m-1}`. No argument checks.
pub(crate) fn erlang_basis(a: f64, t: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    let at = a * t;
    if at <= LOG_PATH_THRESHOLD {
        let mut value = a * (-at).exp();
        out[0] = value;
        for (m, slot) in out.iter_mut().enumerate().skip(1) {
            value *= at / m as f64;
            *slot = value;
        }
    } else {
        let ln_at = at.ln();
        let mut log_value = a.ln() - at;
        out[0] = log_value.exp();
        for (m, slot) in out.iter_mut().enumerate().skip(1) {
            log_value += ln_at - (m as f64).ln();
            *slot = log_value.exp();
        }
    }
}

/// Value of the `m`'th order Erlang kernel with rate `a` at time `t`.
pub fn erlang_eval(m: usize, a: f64, t: f64) -> Result<f64, KernelError> {
    check_rate(a)?;
    check_time(t)?;
    let mut buf = vec![0.0; m + 1];
    erlang_basis(a, t, &mut buf);
    Ok(buf[m])
}

/// Order of a derivative with respect to the rate parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateDerivative {
    First,
    Second,
}

#[inline]
pub(crate) fn erlang_rate_derivatives(m: usize, a: f64, t: f64, value: f64) -> (f64, f64) {
    let k = (m + 1) as f64 / a - t;
    let d1 = k * value;
    let d2 = k * d1 - (m + 1) as f64 / (a * a) * value;
    (d1, d2)
}

/// First or second derivative of `l_m(t)` with respect to the rate `a`.
pub fn erlang_deriv_a(m: usize, a: f64, t: f64, order: RateDerivative) -> Result<f64, KernelError> {
    let value = erlang_eval(m, a, t)?;
    let (d1, d2) = erlang_rate_derivatives(m, a, t, value);
    Ok(match order {
        RateDerivative::First => d1,
        RateDerivative::Second => d2,
    })
}

/// A single Erlang kernel `l_m(t) = a^{m+1} t^m e^{-a t} / m!`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErlangKernel {
    order: usize,
    rate: f64,
}

impl ErlangKernel {
    pub fn new(order: usize, rate: f64) -> Result<Self, KernelError> {
        check_rate(rate)?;
        Ok(Self { order, rate })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn eval(&self, t: f64) -> Result<f64, KernelError> {
        erlang_eval(self.order, self.rate, t)
    }

    pub fn deriv_rate(&self, t: f64, order: RateDerivative) -> Result<f64, KernelError> {
        erlang_deriv_a(self.order, self.rate, t, order)
    }

    /// Mass beyond `t`.
    pub fn tail(&self, t: f64) -> f64 {
        crate::special::erlang_survival(self.order, self.rate * t)
    }
}

/// Tolerance on the coefficient sum of a mixture built with [`ErlangMixture::new`].
pub const MIXTURE_SUM_TOL: f64 = 1e-12;

/// Erlang mixture kernel `sum_m c_m l_m(t)` with a shared rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ErlangMixture {
    rate: f64,
    coeffs: Vec<f64>,
}

impl ErlangMixture {
    /// Coefficients must lie in `[0, 1]` and sum to one within [`MIXTURE_SUM_TOL`].
    pub fn new(rate: f64, coeffs: Vec<f64>) -> Result<Self, KernelError> {
        Self::with_sum_tolerance(rate, coeffs, MIXTURE_SUM_TOL)
    }

    /// Like [`ErlangMixture::new`] but accepts a coefficient sum within
    /// `sum_tol` of one. Truncated theoretical coefficients sum to `1 - eps`.
    pub fn with_sum_tolerance(rate: f64, coeffs: Vec<f64>, sum_tol: f64) -> Result<Self, KernelError> {
        check_rate(rate)?;
        if coeffs.is_empty() {
            return Err(KernelError::InvalidCoefficients("no coefficients".into()));
        }
        if let Some((m, c)) = coeffs
            .iter()
            .enumerate()
            .find(|(_, c)| !(**c >= 0.0 && **c <= 1.0))
        {
            return Err(KernelError::InvalidCoefficients(format!("c[{m}] = {c} not in [0, 1]")));
        }
        let sum: f64 = coeffs.iter().sum();
        if (sum - 1.0).abs() > sum_tol {
            return Err(KernelError::InvalidCoefficients(format!(
                "coefficients sum to {sum}, expected 1 within {sum_tol:e}"
            )));
        }
        Ok(Self { rate, coeffs })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Mixture order `M` (there are `M + 1` coefficients).
    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeff_sum(&self) -> f64 {
        self.coeffs.iter().sum()
    }

    /// Evaluate at `t >= 0` reusing `buf` for the Erlang basis.
    pub fn eval_with(&self, t: f64, buf: &mut Vec<f64>) -> f64 {
        buf.resize(self.coeffs.len(), 0.0);
        erlang_basis(self.rate, t, buf);
        buf.iter().zip(&self.coeffs).map(|(l, c)| l * c).sum()
    }

    pub fn eval(&self, t: f64) -> f64 {
        let mut buf = Vec::with_capacity(self.coeffs.len());
        self.eval_with(t, &mut buf)
    }

    /// Mass beyond `t`: `sum_m c_m P(Erlang_m > t)`.
    pub fn tail(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return self.coeff_sum();
        }
        let mut basis = vec![0.0; self.coeffs.len()];
        erlang_basis(self.rate, t, &mut basis);
        let mut survival = 0.0;
        let mut total = 0.0;
        for (l, c) in basis.iter().zip(&self.coeffs) {
            survival += l / self.rate;
            total += c * survival.min(1.0);
        }
        total
    }

    /// Laplace transform `sum_m c_m (a / (a + s))^{m+1}` at real or complex `s`.
    pub fn laplace(&self, s: num_complex::Complex64) -> num_complex::Complex64 {
        let ratio = self.rate / (s + self.rate);
        let mut power = ratio;
        let mut total = num_complex::Complex64::new(0.0, 0.0);
        for &c in &self.coeffs {
            total += power * c;
            power *= ratio;
        }
        total
    }

    /// Upper bound of the support that carries all but ~1e-16 of the mass.
    pub fn support_scale(&self) -> f64 {
        let m = self.order() as f64 + 1.0;
        (m + 12.0 * m.sqrt() + 40.0) / self.rate
    }
}

/// Mean and variance of the Erlang mixture delta family at `t`:
/// `t + 1/(2a)` and `t/a + 1/(12 a^2)`.
pub fn delta_family_stats(a: f64, t: f64) -> Result<(f64, f64), KernelError> {
    check_rate(a)?;
    check_time(t)?;
    Ok((t + 0.5 / a, t / a + 1.0 / (12.0 * a * a)))
}

/// Erlang mixture delta family: `delta_a(t, s) = l_m(t)` for `s` in
/// `[m/a, (m+1)/a)`.
#[derive(Debug, Clone, Copy)]
pub struct DeltaFamily {
    rate: f64,
}

impl DeltaFamily {
    pub fn new(rate: f64) -> Result<Self, KernelError> {
        check_rate(rate)?;
        Ok(Self { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Width of the constant pieces, `1/a`.
    pub fn step(&self) -> f64 {
        1.0 / self.rate
    }

    /// Index of the piece containing `s`.
    pub fn piece(&self, s: f64) -> usize {
        (s * self.rate).floor().max(0.0) as usize
    }

    pub fn eval(&self, t: f64, s: f64) -> Result<f64, KernelError> {
        check_time(t)?;
        check_time(s)?;
        erlang_eval(self.piece(s), self.rate, t)
    }

    pub fn stats(&self, t: f64) -> Result<(f64, f64), KernelError> {
        delta_family_stats(self.rate, t)
    }
}

/// Folded normal density `F(t; mu, sigma)`.
pub fn folded_normal(t: f64, mu: f64, sigma: f64) -> f64 {
    let u = (t - mu) / sigma;
    let v = (t + mu) / sigma;
    ((-0.5 * u * u).exp() + (-0.5 * v * v).exp()) / ((2.0 * PI).sqrt() * sigma)
}

/// Mass of `F(.; mu, sigma)` beyond `t >= 0`.
fn folded_normal_tail(t: f64, mu: f64, sigma: f64) -> f64 {
    let s = sigma * SQRT_2;
    0.5 * (erfc((t - mu) / s) + erfc((t + mu) / s))
}

/// Weighted sum of folded normal densities.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedNormalSum {
    weights: Vec<f64>,
    locations: Vec<f64>,
    scales: Vec<f64>,
}

impl FoldedNormalSum {
    pub fn new(weights: Vec<f64>, locations: Vec<f64>, scales: Vec<f64>) -> Result<Self, KernelError> {
        let bad = |reason: String| KernelError::InvalidParameters {
            family: "folded-normal-sum".into(),
            reason,
        };
        if weights.is_empty() || weights.len() != locations.len() || weights.len() != scales.len() {
            return Err(bad("weights, locations and scales must be non-empty and equally long".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && *w <= 1.0)) {
            return Err(bad("weights must lie in [0, 1]".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(bad(format!("weights sum to {sum}, expected 1")));
        }
        if scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) || locations.iter().any(|m| !m.is_finite()) {
            return Err(bad("scales must be positive and locations finite".into()));
        }
        Ok(Self {
            weights,
            locations,
            scales,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn locations(&self) -> &[f64] {
        &self.locations
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn density(&self, t: f64) -> f64 {
        self.components().map(|(w, mu, s)| w * folded_normal(t, mu, s)).sum()
    }

    pub fn tail(&self, t: f64) -> f64 {
        self.components().map(|(w, mu, s)| w * folded_normal_tail(t, mu, s)).sum()
    }

    fn components(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.weights
            .iter()
            .zip(&self.locations)
            .zip(&self.scales)
            .map(|((w, m), s)| (*w, *m, *s))
    }

    fn support_scale(&self) -> f64 {
        self.components()
            .map(|(_, mu, s)| mu.abs() + 12.0 * s)
            .fold(0.0, f64::max)
    }
}

/// Recirculation kernel of one precursor group:
/// `gamma e^{-lambda t} sum_j F(t; mu_j, sigma_j)` with
/// `sigma_{j+1} = 1.5 sigma_j` and `mu_{j+1} = mu_j + sigma_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecursorKernel {
    decay: f64,
    locations: Vec<f64>,
    scales: Vec<f64>,
    normalization: f64,
}

impl PrecursorKernel {
    pub const DEFAULT_TERMS: usize = 7;

    pub fn new(decay: f64, mu1: f64, sigma1: f64, terms: usize) -> Result<Self, KernelError> {
        let bad = |reason: &str| KernelError::InvalidParameters {
            family: "precursor".into(),
            reason: reason.into(),
        };
        if !(decay > 0.0 && decay.is_finite()) {
            return Err(bad("decay rate must be positive"));
        }
        if !(sigma1 > 0.0 && sigma1.is_finite()) || !mu1.is_finite() {
            return Err(bad("scale must be positive and location finite"));
        }
        if terms == 0 {
            return Err(bad("need at least one term"));
        }
        let mut locations = Vec::with_capacity(terms);
        let mut scales = Vec::with_capacity(terms);
        let (mut mu, mut sigma) = (mu1, sigma1);
        for _ in 0..terms {
            locations.push(mu);
            scales.push(sigma);
            mu += sigma;
            sigma *= 1.5;
        }
        let mut kernel = Self {
            decay,
            locations,
            scales,
            normalization: 1.0,
        };
        let mass = kernel.unnormalized_tail(0.0);
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(KernelError::BadNormalization(mass));
        }
        kernel.normalization = 1.0 / mass;
        Ok(kernel)
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn locations(&self) -> &[f64] {
        &self.locations
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Closed-form normalization constant `gamma_i`.
    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    /// `e^{-lambda t} sum_j F(t; mu_j, sigma_j)` without the normalization.
    pub fn unnormalized_density(&self, t: f64) -> f64 {
        let sum: f64 = self
            .locations
            .iter()
            .zip(&self.scales)
            .map(|(mu, s)| folded_normal(t, *mu, *s))
            .sum();
        (-self.decay * t).exp() * sum
    }

    // int_t^inf e^{-lambda s} sum_j F(s; mu_j, sigma_j) ds
    fn unnormalized_tail(&self, t: f64) -> f64 {
        let lam = self.decay;
        self.locations
            .iter()
            .zip(&self.scales)
            .map(|(&mu, &sigma)| {
                let shift = lam * sigma * sigma;
                let s = sigma * SQRT_2;
                let common = 0.5 * lam * lam * sigma * sigma;
                let left = scaled_erfc(common - lam * mu, (t - mu + shift) / s);
                let right = scaled_erfc(common + lam * mu, (t + mu + shift) / s);
                0.5 * (left + right)
            })
            .sum()
    }

    pub fn density(&self, t: f64) -> f64 {
        self.normalization * self.unnormalized_density(t)
    }

    pub fn tail(&self, t: f64) -> f64 {
        self.normalization * self.unnormalized_tail(t)
    }

    fn support_scale(&self) -> f64 {
        let n = self.locations.len() - 1;
        self.locations[n] + 12.0 * self.scales[n]
    }
}

/// `e^{log_factor} erfc(x)` without overflow in the exponential.
fn scaled_erfc(log_factor: f64, x: f64) -> f64 {
    let e = erfc(x);
    if e == 0.0 {
        return 0.0;
    }
    (log_factor + e.ln()).exp()
}

/// User-supplied density, normalized by its quadrature integral.
#[derive(Clone)]
pub struct CustomKernel {
    name: String,
    density: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    normalizer: f64,
    scale: f64,
}

impl fmt::Debug for CustomKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomKernel")
            .field("name", &self.name)
            .field("normalizer", &self.normalizer)
            .field("scale", &self.scale)
            .finish()
    }
}

#[derive(Debug, Clone)]
pub enum KernelFamily {
    /// `(2/sqrt(pi)) e^{-t^2}` with cumulative `erf(t)`.
    GaussianHalfline,
    /// `lambda e^{-lambda t}`.
    Exponential { rate: f64 },
    FoldedNormalSum(FoldedNormalSum),
    Precursor(PrecursorKernel),
    ErlangMixture(ErlangMixture),
    Custom(CustomKernel),
}

/// An evaluatable regular kernel with a declared bound.
#[derive(Debug, Clone)]
pub struct KernelSpec {
    family: KernelFamily,
    bound: f64,
}

/// Number of scan points used to estimate the default bound.
const BOUND_SCAN_POINTS: usize = 10_000;

impl KernelSpec {
    fn from_family(family: KernelFamily) -> Self {
        let mut spec = Self { family, bound: f64::INFINITY };
        let scale = spec.support_scale();
        let peak = (0..=BOUND_SCAN_POINTS)
            .map(|k| spec.density(scale * k as f64 / BOUND_SCAN_POINTS as f64))
            .fold(0.0, f64::max);
        spec.bound = 1.05 * peak;
        spec
    }

    pub fn gaussian_halfline() -> Self {
        Self::from_family(KernelFamily::GaussianHalfline)
    }

    pub fn exponential(rate: f64) -> Result<Self, KernelError> {
        check_rate(rate)?;
        Ok(Self::from_family(KernelFamily::Exponential { rate }))
    }

    pub fn folded_normal_sum(sum: FoldedNormalSum) -> Self {
        Self::from_family(KernelFamily::FoldedNormalSum(sum))
    }

    pub fn precursor(kernel: PrecursorKernel) -> Self {
        Self::from_family(KernelFamily::Precursor(kernel))
    }

    pub fn erlang_mixture(mix: ErlangMixture) -> Self {
        Self::from_family(KernelFamily::ErlangMixture(mix))
    }

    /// Wrap an arbitrary nonnegative density, dividing by its integral over
    /// `[0, inf)`. `scale` is a time scale over which the density varies.
    pub fn custom<F>(name: &str, density: F, scale: f64) -> Result<Self, KernelError>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(KernelError::InvalidParameters {
                family: name.into(),
                reason: "scale must be positive".into(),
            });
        }
        let integral = integrate_density_to_infinity(&density, scale, &QuadConfig::abs(1e-14))?.value;
        if !(integral.is_finite() && (1e-8..=1e8).contains(&integral)) {
            return Err(KernelError::BadNormalization(integral));
        }
        Ok(Self::from_family(KernelFamily::Custom(CustomKernel {
            name: name.into(),
            density: Arc::new(density),
            normalizer: integral,
            scale,
        })))
    }

    /// Replace the default bound with a caller-declared one.
    pub fn with_bound(mut self, bound: f64) -> Result<Self, KernelError> {
        if !(bound > 0.0) {
            return Err(KernelError::NotRegular(format!("bound {bound} must be positive")));
        }
        self.bound = bound;
        Ok(self)
    }

    pub fn family(&self) -> &KernelFamily {
        &self.family
    }

    pub fn name(&self) -> &str {
        match &self.family {
            KernelFamily::GaussianHalfline => "gaussian-halfline",
            KernelFamily::Exponential { .. } => "exponential",
            KernelFamily::FoldedNormalSum(_) => "folded-normal-sum",
            KernelFamily::Precursor(_) => "precursor",
            KernelFamily::ErlangMixture(_) => "erlang-mixture",
            KernelFamily::Custom(c) => &c.name,
        }
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn density(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        match &self.family {
            KernelFamily::GaussianHalfline => 2.0 / PI.sqrt() * (-t * t).exp(),
            KernelFamily::Exponential { rate } => rate * (-rate * t).exp(),
            KernelFamily::FoldedNormalSum(s) => s.density(t),
            KernelFamily::Precursor(p) => p.density(t),
            KernelFamily::ErlangMixture(m) => m.eval(t),
            KernelFamily::Custom(c) => (c.density)(t) / c.normalizer,
        }
    }

    /// Analytic mass beyond `t`, when available.
    pub fn analytic_tail(&self, t: f64) -> Option<f64> {
        let t = t.max(0.0);
        match &self.family {
            KernelFamily::GaussianHalfline => Some(erfc(t)),
            KernelFamily::Exponential { rate } => Some((-rate * t).exp()),
            KernelFamily::FoldedNormalSum(s) => Some(s.tail(t)),
            KernelFamily::Precursor(p) => Some(p.tail(t)),
            KernelFamily::ErlangMixture(m) => Some(m.tail(t)),
            KernelFamily::Custom(_) => None,
        }
    }

    /// Analytic cumulative `beta(t)`, when available.
    pub fn analytic_cumulative(&self, t: f64) -> Option<f64> {
        let t = t.max(0.0);
        match &self.family {
            KernelFamily::GaussianHalfline => Some(erf(t)),
            KernelFamily::Exponential { rate } => Some(-(-rate * t).exp_m1()),
            KernelFamily::ErlangMixture(m) => Some(m.coeff_sum() - m.tail(t)),
            _ => self.analytic_tail(t).map(|tail| 1.0 - tail),
        }
    }

    /// A time beyond which essentially no mass remains. Used to size scans
    /// and quadrature domains.
    pub fn support_scale(&self) -> f64 {
        match &self.family {
            KernelFamily::GaussianHalfline => 6.5,
            KernelFamily::Exponential { rate } => 40.0 / rate,
            KernelFamily::FoldedNormalSum(s) => s.support_scale(),
            KernelFamily::Precursor(p) => p.support_scale(),
            KernelFamily::ErlangMixture(m) => m.support_scale(),
            KernelFamily::Custom(c) => 40.0 * c.scale,
        }
    }

    /// Check `0 <= alpha(t) <= K` on `samples` equally spaced points of the support.
    pub fn check_regularity(&self, samples: usize) -> Result<(), KernelError> {
        let scale = self.support_scale();
        for k in 0..=samples {
            let t = scale * k as f64 / samples.max(1) as f64;
            let v = self.density(t);
            if !(v >= 0.0 && v <= self.bound) {
                return Err(KernelError::NotRegular(format!(
                    "alpha({t}) = {v} outside [0, {}]",
                    self.bound
                )));
            }
        }
        Ok(())
    }

    /// Parse `"family"` or `"family:p1,p2,..."`; see [`make_kernel`].
    pub fn parse(text: &str) -> Result<Self, KernelError> {
        let (name, rest) = match text.split_once(':') {
            Some((n, r)) => (n.trim(), r),
            None => (text.trim(), ""),
        };
        let params = rest
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>().map_err(|_| KernelError::InvalidParameters {
                    family: name.into(),
                    reason: format!("'{s}' is not a number"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        make_kernel(name, &params)
    }
}

/// Build a kernel from a family id and a flat parameter list.
///
/// | id                  | parameters                               |
/// |---------------------|------------------------------------------|
/// | `gaussian-halfline` | none                                     |
/// | `exponential`       | `rate`                                   |
/// | `folded-normal`     | `mu, sigma`                              |
/// | `folded-normal-sum` | `w1, mu1, sigma1, w2, mu2, sigma2, ...`  |
/// | `precursor`         | `lambda, mu1, sigma1[, terms]`           |
/// | `erlang-mixture`    | `a, c0, c1, ...`                         |
pub fn make_kernel(name: &str, params: &[f64]) -> Result<KernelSpec, KernelError> {
    let bad = |reason: &str| KernelError::InvalidParameters {
        family: name.into(),
        reason: reason.into(),
    };
    match name {
        "gaussian-halfline" => {
            if !params.is_empty() {
                return Err(bad("takes no parameters"));
            }
            Ok(KernelSpec::gaussian_halfline())
        }
        "exponential" => match params {
            [rate] => KernelSpec::exponential(*rate),
            _ => Err(bad("expected: rate")),
        },
        "folded-normal" => match params {
            [mu, sigma] => Ok(KernelSpec::folded_normal_sum(FoldedNormalSum::new(
                vec![1.0],
                vec![*mu],
                vec![*sigma],
            )?)),
            _ => Err(bad("expected: mu, sigma")),
        },
        "folded-normal-sum" => {
            if params.is_empty() || !params.len().is_multiple_of(3) {
                return Err(bad("expected triples: weight, mu, sigma"));
            }
            let weights = params.iter().step_by(3).copied().collect();
            let locations = params.iter().skip(1).step_by(3).copied().collect();
            let scales = params.iter().skip(2).step_by(3).copied().collect();
            Ok(KernelSpec::folded_normal_sum(FoldedNormalSum::new(weights, locations, scales)?))
        }
        "precursor" => match params {
            [lambda, mu1, sigma1] => Ok(KernelSpec::precursor(PrecursorKernel::new(
                *lambda,
                *mu1,
                *sigma1,
                PrecursorKernel::DEFAULT_TERMS,
            )?)),
            [lambda, mu1, sigma1, terms] if *terms >= 1.0 && terms.fract() == 0.0 => Ok(KernelSpec::precursor(
                PrecursorKernel::new(*lambda, *mu1, *sigma1, *terms as usize)?,
            )),
            _ => Err(bad("expected: lambda, mu1, sigma1[, terms]")),
        },
        "erlang-mixture" => match params {
            [a, coeffs @ ..] if !coeffs.is_empty() => {
                Ok(KernelSpec::erlang_mixture(ErlangMixture::new(*a, coeffs.to_vec())?))
            }
            _ => Err(bad("expected: a, c0, c1, ...")),
        },
        other => Err(KernelError::UnknownFamily(other.into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::integrate;
    use proptest::prelude::*;

    fn direct_erlang(m: usize, a: f64, t: f64) -> f64 {
        let ln_b = (m as f64 + 1.0) * a.ln() - crate::special::ln_factorial(m as u64);
        if t == 0.0 {
            return if m == 0 { a } else { 0.0 };
        }
        (ln_b + m as f64 * t.ln() - a * t).exp()
    }

    #[test]
    fn erlang_examples() {
        assert_eq!(erlang_eval(0, 2.0, 0.0).unwrap(), 2.0);
        let v = erlang_eval(1, 2.0, 1.0).unwrap();
        assert!((v - 4.0 * (-2.0_f64).exp()).abs() < 1e-15);
        assert!((v - 0.541_341_132_946_451).abs() < 1e-12);
        assert_eq!(erlang_eval(3, 2.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn erlang_domain_errors() {
        assert!(matches!(erlang_eval(1, 0.0, 1.0), Err(KernelError::InvalidRate(_))));
        assert!(matches!(erlang_eval(1, -1.0, 1.0), Err(KernelError::InvalidRate(_))));
        assert!(matches!(erlang_eval(1, 1.0, -0.1), Err(KernelError::NegativeTime(_))));
        assert!(erlang_deriv_a(0, 0.0, 1.0, RateDerivative::First).is_err());
    }

    #[test]
    fn erlang_log_path_is_continuous() {
        // Both sides of the switch between direct and logarithmic recursion.
        let a = 1.0;
        for (m, t) in [(700usize, 699.999), (700, 700.001), (650, 700.5)] {
            let got = erlang_eval(m, a, t).unwrap();
            let want = direct_erlang(m, a, t);
            assert!((got / want - 1.0).abs() < 1e-11, "m={m} t={t} got={got} want={want}");
        }
    }

    #[test]
    fn erlang_recursion_matches_direct_on_grid() {
        for m in 0..=20 {
            for &a in &[0.3, 1.0, 7.5, 50.0] {
                for &t in &[0.01, 0.5, 1.0, 3.0, 10.0] {
                    let r = erlang_eval(m, a, t).unwrap();
                    let d = direct_erlang(m, a, t);
                    if d > 1e-290 {
                        assert!((r / d - 1.0).abs() < 1e-10, "m={m} a={a} t={t}");
                    }
                }
            }
        }
    }

    #[test]
    fn erlang_kernels_integrate_to_one() {
        for &(m, a) in &[(0usize, 1.0), (3, 2.0), (10, 0.5), (40, 20.0)] {
            let k = ErlangKernel::new(m, a).unwrap();
            let upper = (m as f64 + 1.0 + 12.0 * (m as f64 + 1.0).sqrt() + 40.0) / a;
            let q = integrate(|t| k.eval(t).unwrap(), 0.0, upper, &QuadConfig::abs(1e-12)).unwrap();
            assert!((q.value - 1.0).abs() < 1e-8, "m={m} a={a} integral={}", q.value);
            assert!((k.tail(upper)).abs() < 1e-15);
        }
    }

    #[test]
    fn derivative_examples() {
        assert!((erlang_deriv_a(0, 1.0, 0.0, RateDerivative::First).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(erlang_deriv_a(1, 2.0, 1.0, RateDerivative::First).unwrap(), 0.0);
        let h = 1e-5;
        let fd = (erlang_eval(0, 1.0 + h, 0.5).unwrap() - erlang_eval(0, 1.0 - h, 0.5).unwrap()) / (2.0 * h);
        let an = erlang_deriv_a(0, 1.0, 0.5, RateDerivative::First).unwrap();
        assert!((an - fd).abs() <= 1e-7 * an.abs());
    }

    #[test]
    fn derivatives_match_finite_differences_on_grid() {
        for m in [0usize, 1, 4, 12] {
            for &a in &[0.5, 2.0, 9.0] {
                for &t in &[0.1, 0.7, 2.5] {
                    let h = 1e-5 * a;
                    let f = |x: f64| erlang_eval(m, x, t).unwrap();
                    let d1 = erlang_deriv_a(m, a, t, RateDerivative::First).unwrap();
                    let d2 = erlang_deriv_a(m, a, t, RateDerivative::Second).unwrap();
                    let fd1 = (f(a + h) - f(a - h)) / (2.0 * h);
                    let g = |x: f64| erlang_deriv_a(m, x, t, RateDerivative::First).unwrap();
                    let fd2 = (g(a + h) - g(a - h)) / (2.0 * h);
                    let scale1 = d1.abs().max(f(a) / a);
                    let scale2 = d2.abs().max(f(a) / (a * a));
                    assert!((d1 - fd1).abs() <= 1e-6 * scale1, "d1 m={m} a={a} t={t}");
                    assert!((d2 - fd2).abs() <= 1e-6 * scale2, "d2 m={m} a={a} t={t}");
                }
            }
        }
    }

    #[test]
    fn mixture_examples() {
        let mix = ErlangMixture::new(1.0, vec![0.5, 0.5]).unwrap();
        assert!((mix.eval(1.0) - (-1.0_f64).exp()).abs() < 1e-15);
        assert!((mix.eval(1.0) - 0.367_879).abs() < 1e-6);
        let single = ErlangMixture::new(1.0, vec![1.0]).unwrap();
        assert_eq!(single.eval(0.0), 1.0);
        let q = integrate(|t| mix.eval(t), 0.0, 40.0, &QuadConfig::abs(1e-12)).unwrap();
        assert!((q.value - 1.0).abs() < 1e-8);
    }

    #[test]
    fn mixture_rejects_bad_coefficients() {
        assert!(ErlangMixture::new(1.0, vec![0.5, 0.6]).is_err());
        assert!(ErlangMixture::new(1.0, vec![1.2, -0.2]).is_err());
        assert!(ErlangMixture::new(1.0, vec![]).is_err());
        assert!(ErlangMixture::new(0.0, vec![1.0]).is_err());
        assert!(ErlangMixture::with_sum_tolerance(1.0, vec![0.5, 0.5 - 1e-7], 1e-6).is_ok());
    }

    #[test]
    fn mixture_tail_matches_quadrature() {
        let mix = ErlangMixture::new(3.0, vec![0.2, 0.3, 0.5]).unwrap();
        for &t in &[0.0, 0.3, 1.0, 2.5] {
            let q = integrate(|s| mix.eval(s), t, 40.0, &QuadConfig::abs(1e-14)).unwrap();
            assert!((mix.tail(t) - q.value).abs() < 1e-13, "t={t}");
        }
    }

    #[test]
    fn delta_family_examples() {
        let (mean, var) = delta_family_stats(10.0, 1.0).unwrap();
        assert!((mean - 1.05).abs() < 1e-15);
        assert!((var - (0.1 + 1.0 / 1200.0)).abs() < 1e-15);
        assert!((var - 0.100_833).abs() < 1e-6);
        let (mean, var) = delta_family_stats(1e9, 1.0).unwrap();
        assert!((mean - 1.0).abs() < 1e-8 && var < 1e-8);
        assert!(delta_family_stats(0.0, 1.0).is_err());
    }

    #[test]
    fn delta_family_sums_to_one() {
        for &a in &[0.5f64, 3.0, 40.0] {
            for &t in &[0.0, 0.4, 2.0, 7.0] {
                let n = (a * t + 20.0 * (a * t).sqrt() + 60.0) as usize;
                let mut basis = vec![0.0; n];
                erlang_basis(a, t, &mut basis);
                assert!(basis[n - 1] < 1e-16);
                let total: f64 = basis.iter().map(|l| l / a).sum();
                assert!((total - 1.0).abs() < 1e-10, "a={a} t={t} total={total}");
            }
        }
    }

    #[test]
    fn delta_family_monotone_around_t() {
        let delta = DeltaFamily::new(4.0).unwrap();
        let t = 2.3;
        let ds = delta.step();
        for m in 0..40 {
            let s = m as f64 * ds;
            let here = delta.eval(t, s).unwrap();
            let next = delta.eval(t, s + ds).unwrap();
            if s + ds <= t {
                assert!(here <= next, "non-decreasing below t at m={m}");
            } else if s >= t {
                assert!(here >= next, "non-increasing above t at m={m}");
            }
        }
        // t = 0 piece: value a on [0, 1/a), zero beyond
        assert_eq!(delta.eval(0.0, 0.1).unwrap(), 4.0);
        assert_eq!(delta.eval(0.0, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_halfline_values() {
        let k = KernelSpec::gaussian_halfline();
        assert!((k.density(0.0) - std::f64::consts::FRAC_2_SQRT_PI).abs() < 1e-15);
        assert!((k.analytic_cumulative(1.0).unwrap() - 0.842_700_792_949_714_9).abs() < 1e-15);
        assert!((k.bound() - 1.05 * 2.0 / PI.sqrt()).abs() < 1e-12);
        k.check_regularity(1000).unwrap();
    }

    #[test]
    fn folded_normal_at_origin() {
        let k = make_kernel("folded-normal", &[0.0, 1.0]).unwrap();
        assert!((k.density(0.0) - 2.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
        assert!((k.density(0.0) - 0.797_885).abs() < 1e-6);
    }

    #[test]
    fn precursor_closed_form_matches_quadrature() {
        let p = PrecursorKernel::new(0.0124, 2.0, 0.1, 7).unwrap();
        let upper = p.support_scale();
        let q = integrate(
            |t| p.unnormalized_density(t),
            0.0,
            upper,
            &QuadConfig::abs(1e-13),
        )
        .unwrap();
        let gamma_quad = 1.0 / q.value;
        assert!((p.normalization() - gamma_quad).abs() <= 1e-6 * gamma_quad);
        // scale and location recursion
        assert!((p.scales()[1] - 0.15).abs() < 1e-15);
        assert!((p.locations()[1] - 2.1).abs() < 1e-15);
    }

    #[test]
    fn every_family_is_normalized() {
        let kernels = vec![
            KernelSpec::gaussian_halfline(),
            KernelSpec::exponential(0.7).unwrap(),
            KernelSpec::parse("folded-normal-sum:0.5,0.35,0.06,0.5,0.45,0.12").unwrap(),
            KernelSpec::parse("precursor:3.0,2,0.1").unwrap(),
            KernelSpec::parse("precursor:0.0124,2,0.1").unwrap(),
            KernelSpec::parse("erlang-mixture:3,0.2,0.3,0.5").unwrap(),
            KernelSpec::custom("bump", |t: f64| t * t * (-t).exp(), 1.0).unwrap(),
        ];
        for k in kernels {
            let upper = k.support_scale();
            let q = integrate(|t| k.density(t), 0.0, upper, &QuadConfig::abs(1e-13)).unwrap();
            assert!(q.value > 1.0 - 1e-6 && q.value <= 1.0 + 1e-12, "{}: {}", k.name(), q.value);
            if let Some(tail) = k.analytic_tail(0.0) {
                assert!((tail - 1.0).abs() < 1e-12, "{} tail(0) = {tail}", k.name());
            }
            k.check_regularity(2000).unwrap();
        }
    }

    #[test]
    fn custom_kernel_normalization_guards() {
        assert!(matches!(
            KernelSpec::custom("zero", |_| 0.0, 1.0),
            Err(KernelError::BadNormalization(_))
        ));
        assert!(matches!(
            KernelSpec::custom("huge", |t: f64| 1e12 * (-t).exp(), 1.0),
            Err(KernelError::BadNormalization(_))
        ));
        let k = KernelSpec::custom("scaled", |t: f64| 5.0 * (-t).exp(), 1.0).unwrap();
        assert!((k.density(0.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(KernelSpec::parse("nope"), Err(KernelError::UnknownFamily(_))));
        assert!(KernelSpec::parse("exponential").is_err());
        assert!(KernelSpec::parse("exponential:x").is_err());
        assert!(KernelSpec::parse("folded-normal-sum:0.5,0.3").is_err());
    }

    proptest! {
        #[test]
        fn mixture_integrates_to_one(a in 0.2f64..20.0, raw in proptest::collection::vec(0.0f64..1.0, 1..12)) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-3);
            let coeffs: Vec<f64> = raw.iter().map(|c| c / total).collect();
            let mix = ErlangMixture::with_sum_tolerance(a, coeffs, 1e-10).unwrap();
            let q = integrate(|t| mix.eval(t), 0.0, 40.0 / a + mix.support_scale(), &QuadConfig::abs(1e-12)).unwrap();
            prop_assert!((q.value - mix.coeff_sum()).abs() < 1e-8);
        }
    }
}
