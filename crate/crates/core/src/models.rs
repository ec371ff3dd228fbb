//! Benchmark systems and the error metrics used to compare trajectories.
//!
//! * the modified logistic equation `x' = σx(1 - z/κ) + Q(t)` with `h(x) = x`,
//!   either forced by a manufactured solution or unforced with a bimodal
//!   folded normal kernel;
//! * a point reactor kinetics model of a molten salt reactor, where the
//!   precursors recirculate through an external loop.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::integrate::Trajectory;
use crate::kernels::{FoldedNormalSum, KernelError, KernelSpec, PrecursorKernel};
use crate::lct::Model;
use crate::special::erf;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown model id '{0}' (expected logistic-manufactured, logistic-bifurcation or fission)")]
    UnknownModel(String),
    #[error("model '{model}' has no parameter '{key}'")]
    UnknownParameter { model: String, key: String },
    #[error("invalid parameter {key} = {value}: {reason}")]
    InvalidParameter { key: String, value: f64, reason: String },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("trajectory does not cover t = {0}")]
    OutOfRange(f64),
    #[error("time grids differ at index {index}: {a} vs {b} (enable interpolation to compare)")]
    GridMismatch { index: usize, a: f64, b: f64 },
    #[error("component {component} out of range for dimension {dim}")]
    Component { component: usize, dim: usize },
}

fn positive(key: &str, value: f64) -> Result<f64, ModelError> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(ModelError::InvalidParameter {
            key: key.into(),
            value,
            reason: "must be positive and finite".into(),
        })
    }
}

fn nonnegative(key: &str, value: f64) -> Result<f64, ModelError> {
    if value.is_finite() && value >= 0.0 {
        Ok(value)
    } else {
        Err(ModelError::InvalidParameter {
            key: key.into(),
            value,
            reason: "must be nonnegative and finite".into(),
        })
    }
}

/// The manufactured solution `x*`, its memory state `z*` under the kernel
/// `(2/√π) e^{-t²}`, and the forcing `Q` that makes `x*` exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManufacturedPoint {
    pub x: f64,
    pub z: f64,
    pub q: f64,
}

/// `x*(t) = 1 + e^{-(t/γ)²}` and the matching `z*`, `Q` for the logistic
/// parameters `σ`, `κ`.
pub fn manufactured_truth(gamma: f64, sigma: f64, kappa: f64, t: f64) -> ManufacturedPoint {
    let x = manufactured_x(gamma, t);
    let z = manufactured_z(gamma, t);
    let q = manufactured_dx(gamma, t) - sigma * x * (1.0 - z / kappa);
    ManufacturedPoint { x, z, q }
}

pub fn manufactured_x(gamma: f64, t: f64) -> f64 {
    1.0 + (-(t / gamma).powi(2)).exp()
}

pub fn manufactured_dx(gamma: f64, t: f64) -> f64 {
    -2.0 * t / (gamma * gamma) * (-(t / gamma).powi(2)).exp()
}

pub fn manufactured_z(gamma: f64, t: f64) -> f64 {
    let g2 = gamma * gamma + 1.0;
    let s = g2.sqrt();
    1.0 + gamma / s * (-t * t / g2).exp() * (1.0 + erf(t / (gamma * s)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogisticVariant {
    /// Forced so that `x*` solves the problem; history `x*(t)` for `t <= 0`.
    Manufactured { gamma: f64 },
    /// Unforced, constant history `x0`.
    Bifurcation { x0: f64 },
}

/// `x' = σx(1 - z/κ) + Q(t)`, `z = ∫ α(t - s) x(s) ds`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticModel {
    pub sigma: f64,
    pub kappa: f64,
    pub variant: LogisticVariant,
}

impl LogisticModel {
    pub fn manufactured(sigma: f64, kappa: f64, gamma: f64) -> Self {
        Self {
            sigma,
            kappa,
            variant: LogisticVariant::Manufactured { gamma },
        }
    }

    pub fn bifurcation(sigma: f64, kappa: f64, x0: f64) -> Self {
        Self {
            sigma,
            kappa,
            variant: LogisticVariant::Bifurcation { x0 },
        }
    }

    pub fn forcing(&self, t: f64) -> f64 {
        match self.variant {
            LogisticVariant::Manufactured { gamma } => manufactured_truth(gamma, self.sigma, self.kappa, t).q,
            LogisticVariant::Bifurcation { .. } => 0.0,
        }
    }
}

impl Model for LogisticModel {
    fn nx(&self) -> usize {
        1
    }

    fn nz(&self) -> usize {
        1
    }

    fn f(&self, t: f64, x: &[f64], z: &[f64], out: &mut [f64]) {
        out[0] = self.sigma * x[0] * (1.0 - z[0] / self.kappa) + self.forcing(t);
    }

    fn h(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = x[0];
    }

    fn jac_x(&self, _t: f64, _x: &[f64], z: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.sigma * (1.0 - z[0] / self.kappa))
    }

    fn jac_z(&self, _t: f64, x: &[f64], _z: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, -self.sigma * x[0] / self.kappa)
    }

    fn jac_h(&self, _t: f64, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(1, 1)
    }

    fn history(&self, t: f64, out: &mut [f64]) {
        out[0] = match self.variant {
            LogisticVariant::Manufactured { gamma } => manufactured_x(gamma, t),
            LogisticVariant::Bifurcation { x0 } => x0,
        };
    }

    fn constant_history(&self) -> bool {
        matches!(self.variant, LogisticVariant::Bifurcation { .. })
    }
}

/// Parameters of the logistic benchmarks, including the kernel and interval.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticParams {
    pub sigma: f64,
    pub kappa: f64,
    /// Dilation of the manufactured solution.
    pub gamma: f64,
    pub x0: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub t0: f64,
    pub tf: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self {
            sigma: 4.0,
            kappa: 1.0,
            gamma: 10.0,
            x0: 0.9,
            gamma1: 0.5,
            gamma2: 0.5,
            mu1: 0.35,
            mu2: 0.45,
            sigma1: 0.06,
            sigma2: 0.12,
            t0: 0.0,
            tf: 24.0,
        }
    }
}

impl LogisticParams {
    pub const KEYS: [&'static str; 11] = [
        "sigma", "kappa", "gamma", "x0", "gamma1", "gamma2", "mu1", "mu2", "sigma1", "sigma2", "tf",
    ];

    fn slot(&mut self, key: &str) -> Option<&mut f64> {
        Some(match key {
            "sigma" => &mut self.sigma,
            "kappa" => &mut self.kappa,
            "gamma" => &mut self.gamma,
            "x0" => &mut self.x0,
            "gamma1" => &mut self.gamma1,
            "gamma2" => &mut self.gamma2,
            "mu1" => &mut self.mu1,
            "mu2" => &mut self.mu2,
            "sigma1" => &mut self.sigma1,
            "sigma2" => &mut self.sigma2,
            "tf" => &mut self.tf,
            _ => return None,
        })
    }

    /// Defaults with `key = value` overrides applied, validated.
    pub fn with_overrides(overrides: &[(String, f64)]) -> Result<Self, ModelError> {
        let mut p = Self::default();
        for (key, value) in overrides {
            *p.slot(key).ok_or_else(|| ModelError::UnknownParameter {
                model: "logistic".into(),
                key: key.clone(),
            })? = *value;
        }
        p.validate()?;
        Ok(p)
    }

    /// The bimodal kernel `γ₁F(t; μ₁, σ₁) + γ₂F(t; μ₂, σ₂)`.
    pub fn bimodal_kernel(&self) -> Result<KernelSpec, ModelError> {
        Ok(KernelSpec::folded_normal_sum(FoldedNormalSum::new(
            vec![self.gamma1, self.gamma2],
            vec![self.mu1, self.mu2],
            vec![self.sigma1, self.sigma2],
        )?))
    }

    fn validate(&self) -> Result<(), ModelError> {
        positive("sigma", self.sigma)?;
        positive("kappa", self.kappa)?;
        positive("gamma", self.gamma)?;
        if !(self.tf > self.t0) {
            return Err(ModelError::InvalidParameter {
                key: "tf".into(),
                value: self.tf,
                reason: "must exceed t0".into(),
            });
        }
        Ok(())
    }
}

/// Point reactor kinetics with recirculating precursors.
///
/// State `(C_1..C_G, C_n, ρ)`, memory `C_in,i = ∫ α_i(t - s) C_i(s) ds`:
///
/// ```text
/// C_i' = (C_in,i - C_i) D + R_i,  C_n' = R_n,  ρ' = -κ H C_n,  R = Sᵀ r
/// ```
///
/// with `r = (λ_1 C_1, .., λ_G C_G, C_n/Λ)`, so
/// `R_i = -λ_i C_i + β_i C_n/Λ` and `R_n = Σ λ_i C_i + (ρ - β) C_n/Λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FissionModel {
    pub decay: Vec<f64>,
    pub fractions: Vec<f64>,
    pub generation_time: f64,
    pub kappa: f64,
    pub heat: f64,
    pub dilution: f64,
    /// Constant history: precursor and neutron concentrations, and `ρ`.
    pub c0: f64,
    pub rho0: f64,
}

impl FissionModel {
    pub fn groups(&self) -> usize {
        self.decay.len()
    }

    pub fn beta(&self) -> f64 {
        self.fractions.iter().sum()
    }

    /// Rows of the stoichiometric matrix `S` (one per reaction).
    pub fn stoichiometry(&self, rho: f64) -> DMatrix<f64> {
        let g = self.groups();
        let n = g + 1;
        let mut s = DMatrix::zeros(n, n);
        for i in 0..g {
            s[(i, i)] = -1.0;
            s[(i, g)] = 1.0;
            s[(g, i)] = self.fractions[i];
        }
        s[(g, g)] = rho - self.beta();
        s
    }

    /// Reaction rates `r`.
    pub fn rates(&self, x: &[f64]) -> Vec<f64> {
        let g = self.groups();
        let mut r: Vec<f64> = (0..g).map(|i| self.decay[i] * x[i]).collect();
        r.push(x[g] / self.generation_time);
        r
    }

    /// Production rates `R = Sᵀ r` for the precursors and neutrons.
    pub fn production(&self, x: &[f64]) -> Vec<f64> {
        let g = self.groups();
        let s = self.stoichiometry(x[g + 1]);
        let r = nalgebra::DVector::from_vec(self.rates(x));
        (s.transpose() * r).as_slice().to_vec()
    }
}

impl Model for FissionModel {
    fn nx(&self) -> usize {
        self.groups() + 2
    }

    fn nz(&self) -> usize {
        self.groups()
    }

    fn f(&self, _t: f64, x: &[f64], z: &[f64], out: &mut [f64]) {
        let g = self.groups();
        let (cn, rho) = (x[g], x[g + 1]);
        let neutron = cn / self.generation_time;
        let mut rn = (rho - self.beta()) * neutron;
        for i in 0..g {
            let decay = self.decay[i] * x[i];
            out[i] = (z[i] - x[i]) * self.dilution - decay + self.fractions[i] * neutron;
            rn += decay;
        }
        out[g] = rn;
        out[g + 1] = -self.kappa * self.heat * cn;
    }

    fn h(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&x[..self.groups()]);
    }

    fn jac_x(&self, _t: f64, x: &[f64], _z: &[f64]) -> DMatrix<f64> {
        let g = self.groups();
        let n = g + 2;
        let inv = 1.0 / self.generation_time;
        let mut jac = DMatrix::zeros(n, n);
        for i in 0..g {
            jac[(i, i)] = -self.dilution - self.decay[i];
            jac[(i, g)] = self.fractions[i] * inv;
            jac[(g, i)] = self.decay[i];
        }
        jac[(g, g)] = (x[g + 1] - self.beta()) * inv;
        jac[(g, g + 1)] = x[g] * inv;
        jac[(g + 1, g)] = -self.kappa * self.heat;
        jac
    }

    fn jac_z(&self, _t: f64, _x: &[f64], _z: &[f64]) -> DMatrix<f64> {
        let g = self.groups();
        let mut jac = DMatrix::zeros(g + 2, g);
        for i in 0..g {
            jac[(i, i)] = self.dilution;
        }
        jac
    }

    fn jac_h(&self, _t: f64, _x: &[f64]) -> DMatrix<f64> {
        let g = self.groups();
        let mut jac = DMatrix::zeros(g, g + 2);
        for i in 0..g {
            jac[(i, i)] = 1.0;
        }
        jac
    }

    fn history(&self, _t: f64, out: &mut [f64]) {
        let g = self.groups();
        out[..=g].fill(self.c0);
        out[g + 1] = self.rho0;
    }
}

/// Parameters of the reactor benchmark; `rho0 = None` means `1.1 β`.
#[derive(Debug, Clone, PartialEq)]
pub struct FissionParams {
    pub decay: [f64; 6],
    pub fractions: [f64; 6],
    pub generation_time: f64,
    pub kappa: f64,
    pub heat: f64,
    pub dilution: f64,
    pub mu1: f64,
    pub sigma1: f64,
    pub terms: usize,
    pub c0: f64,
    pub rho0: Option<f64>,
    pub t0: f64,
    pub tf: f64,
}

impl Default for FissionParams {
    // Six-group precursor decay constants (1/s); 0.3010 is data, not log10(2).
    #[allow(clippy::approx_constant)]
    fn default() -> Self {
        Self {
            decay: [0.0124, 0.0305, 0.1110, 0.3010, 1.1300, 3.0000],
            fractions: [0.00021, 0.00141, 0.00127, 0.00255, 0.00074, 0.00027],
            generation_time: 5e-5,
            kappa: 3e-4,
            heat: 0.05,
            dilution: 2.0,
            mu1: 2.0,
            sigma1: 0.1,
            terms: 7,
            c0: 1.0,
            rho0: None,
            t0: 0.0,
            tf: 2.0,
        }
    }
}

impl FissionParams {
    pub const KEYS: [&'static str; 22] = [
        "lambda1", "lambda2", "lambda3", "lambda4", "lambda5", "lambda6", "beta1", "beta2", "beta3", "beta4",
        "beta5", "beta6", "generation_time", "kappa", "heat", "dilution", "mu1", "sigma1", "terms", "c0", "rho0",
        "tf",
    ];

    fn set(&mut self, key: &str, value: f64) -> Result<bool, ModelError> {
        let indexed = |prefix: &str| {
            key.strip_prefix(prefix)
                .and_then(|d| d.parse::<usize>().ok())
                .filter(|d| (1..=6).contains(d))
        };
        if let Some(i) = indexed("lambda") {
            self.decay[i - 1] = nonnegative(key, value)?;
            return Ok(true);
        }
        if let Some(i) = indexed("beta") {
            self.fractions[i - 1] = nonnegative(key, value)?;
            return Ok(true);
        }
        match key {
            "generation_time" => self.generation_time = positive(key, value)?,
            "kappa" => self.kappa = value,
            "heat" => self.heat = value,
            "dilution" => self.dilution = nonnegative(key, value)?,
            "mu1" => self.mu1 = value,
            "sigma1" => self.sigma1 = positive(key, value)?,
            "terms" => {
                if value.fract() != 0.0 || !(1.0..=64.0).contains(&value) {
                    return Err(ModelError::InvalidParameter {
                        key: key.into(),
                        value,
                        reason: "must be an integer in 1..=64".into(),
                    });
                }
                self.terms = value as usize;
            }
            "c0" => self.c0 = value,
            "rho0" => self.rho0 = Some(value),
            "tf" => self.tf = value,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn with_overrides(overrides: &[(String, f64)]) -> Result<Self, ModelError> {
        let mut p = Self::default();
        for (key, value) in overrides {
            if !p.set(key, *value)? {
                return Err(ModelError::UnknownParameter {
                    model: "fission".into(),
                    key: key.clone(),
                });
            }
        }
        Ok(p)
    }

    pub fn model(&self) -> FissionModel {
        let beta: f64 = self.fractions.iter().sum();
        FissionModel {
            decay: self.decay.to_vec(),
            fractions: self.fractions.to_vec(),
            generation_time: self.generation_time,
            kappa: self.kappa,
            heat: self.heat,
            dilution: self.dilution,
            c0: self.c0,
            rho0: self.rho0.unwrap_or(1.1 * beta),
        }
    }

    /// One precursor kernel per group.
    pub fn kernels(&self) -> Result<Vec<KernelSpec>, ModelError> {
        self.decay
            .iter()
            .map(|&l| Ok(KernelSpec::precursor(PrecursorKernel::new(l, self.mu1, self.sigma1, self.terms)?)))
            .collect()
    }
}

/// A registered benchmark: the model, its delay kernels and interval.
pub struct ModelInstance {
    pub id: String,
    pub model: Box<dyn Model>,
    pub kernels: Vec<KernelSpec>,
    pub t0: f64,
    pub tf: f64,
}

impl std::fmt::Debug for ModelInstance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelInstance")
            .field("id", &self.id)
            .field("kernels", &self.kernels.iter().map(KernelSpec::name).collect::<Vec<_>>())
            .field("t0", &self.t0)
            .field("tf", &self.tf)
            .finish()
    }
}

pub const MODEL_IDS: [&str; 3] = ["logistic-manufactured", "logistic-bifurcation", "fission"];

/// Parameter keys accepted by [`build_model`] for `id`.
pub fn parameter_keys(id: &str) -> Result<&'static [&'static str], ModelError> {
    match id {
        "logistic-manufactured" | "logistic-bifurcation" => Ok(&LogisticParams::KEYS),
        "fission" => Ok(&FissionParams::KEYS),
        _ => Err(ModelError::UnknownModel(id.into())),
    }
}

/// Instantiate a benchmark by id with `key = value` overrides of the defaults.
pub fn build_model(id: &str, overrides: &[(String, f64)]) -> Result<ModelInstance, ModelError> {
    let rename = |e: ModelError| match e {
        ModelError::UnknownParameter { key, .. } => ModelError::UnknownParameter { model: id.into(), key },
        e => e,
    };
    match id {
        "logistic-manufactured" | "logistic-bifurcation" => {
            let p = LogisticParams::with_overrides(overrides).map_err(rename)?;
            let (model, kernel) = if id == "logistic-manufactured" {
                (LogisticModel::manufactured(p.sigma, p.kappa, p.gamma), KernelSpec::gaussian_halfline())
            } else {
                (LogisticModel::bifurcation(p.sigma, p.kappa, p.x0), p.bimodal_kernel()?)
            };
            Ok(ModelInstance {
                id: id.into(),
                model: Box::new(model),
                kernels: vec![kernel],
                t0: p.t0,
                tf: p.tf,
            })
        }
        "fission" => {
            let p = FissionParams::with_overrides(overrides)?;
            Ok(ModelInstance {
                id: id.into(),
                model: Box::new(p.model()),
                kernels: p.kernels()?,
                t0: p.t0,
                tf: p.tf,
            })
        }
        _ => Err(ModelError::UnknownModel(id.into())),
    }
}

/// Whether trajectories are evaluated off their own time grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    /// Times must coincide with the samples (relative tolerance `1e-9`).
    Exact,
    /// Cubic Hermite interpolation to the requested times.
    Interpolate,
}

fn values_at(traj: &Trajectory, times: &[f64], align: Alignment) -> Result<Vec<Vec<f64>>, ModelError> {
    match align {
        Alignment::Interpolate => times
            .iter()
            .map(|&t| traj.sample(t).ok_or(ModelError::OutOfRange(t)))
            .collect(),
        Alignment::Exact => {
            let mut k = 0;
            times
                .iter()
                .enumerate()
                .map(|(index, &t)| {
                    let tol = 1e-9 * (1.0 + t.abs());
                    while k < traj.len() && traj.times[k] < t - tol {
                        k += 1;
                    }
                    match traj.times.get(k) {
                        Some(&s) if (s - t).abs() <= tol => Ok(traj.states[k].clone()),
                        Some(&s) => Err(ModelError::GridMismatch { index, a: s, b: t }),
                        None => Err(ModelError::OutOfRange(t)),
                    }
                })
                .collect()
        }
    }
}

/// `E_x = Σ_{n<K} (x̂(t_{n+1}) - x*(t_{n+1}))² Δt` for one state component on
/// the grid `t_n = t0 + nΔt`, `Δt = (tf - t0)/K`.
pub fn state_error<F: Fn(f64) -> f64>(
    traj: &Trajectory,
    component: usize,
    truth: F,
    t0: f64,
    tf: f64,
    points: usize,
    align: Alignment,
) -> Result<f64, ModelError> {
    if component >= traj.dim() {
        return Err(ModelError::Component {
            component,
            dim: traj.dim(),
        });
    }
    let dt = (tf - t0) / points as f64;
    let times: Vec<f64> = (1..=points).map(|n| t0 + n as f64 * dt).collect();
    let values = values_at(traj, &times, align)?;
    Ok(times
        .iter()
        .zip(&values)
        .map(|(&t, v)| (v[component] - truth(t)).powi(2) * dt)
        .sum())
}

/// `E_r,i(t_n) = |x̂_i - x_i| / (1 + |x_i|)` for the first `components`
/// states, where `reference` supplies `x`. One row per time.
pub fn relative_diff(
    approx: &Trajectory,
    reference: &Trajectory,
    times: &[f64],
    components: usize,
    align: Alignment,
) -> Result<Vec<Vec<f64>>, ModelError> {
    for traj in [approx, reference] {
        if components > traj.dim() {
            return Err(ModelError::Component {
                component: components - 1,
                dim: traj.dim(),
            });
        }
    }
    let a = values_at(approx, times, align)?;
    let b = values_at(reference, times, align)?;
    Ok(a.iter()
        .zip(&b)
        .map(|(xa, xb)| (0..components).map(|i| (xa[i] - xb[i]).abs() / (1.0 + xb[i].abs())).collect())
        .collect())
}

/// Largest entry of a [`relative_diff`] table.
pub fn max_relative_diff(rows: &[Vec<f64>]) -> f64 {
    rows.iter().flatten().copied().fold(0.0, f64::max)
}

/// The manufactured kernel `(2/√π) e^{-t²}` as a plain function.
pub fn manufactured_kernel(t: f64) -> f64 {
    2.0 / PI.sqrt() * (-t * t).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{integrate_with_breaks, QuadConfig};

    #[test]
    fn manufactured_values() {
        let p = manufactured_truth(10.0, 4.0, 1.0, 0.0);
        assert_eq!(p.x, 2.0);
        assert!((p.z - (1.0 + 10.0 / 101f64.sqrt())).abs() < 1e-15);
        assert!((p.z - 1.995037).abs() < 1e-6);
    }

    #[test]
    fn manufactured_memory_matches_convolution() {
        let gamma = 10.0;
        for &t in &[0.0, 1.5, 7.0, 24.0] {
            let lo = t - 10.0 * gamma;
            let breaks: Vec<f64> = (0..=200).map(|k| lo + (t - lo) * k as f64 / 200.0).collect();
            let cfg = QuadConfig {
                abs_tol: 1e-13,
                rel_tol: 1e-13,
                max_intervals: 20_000,
            };
            let q: f64 = integrate_with_breaks(
                |s: f64| manufactured_kernel(t - s) * manufactured_x(gamma, s),
                &breaks,
                &cfg,
            )
            .unwrap()
            .value;
            assert!((q - manufactured_z(gamma, t)).abs() < 1e-8, "t = {t}: {q}");
        }
    }

    #[test]
    fn manufactured_forcing_is_consistent() {
        let m = LogisticModel::manufactured(4.0, 1.0, 10.0);
        let mut out = [0.0];
        for k in 0..=240 {
            let t = k as f64 * 0.1;
            m.f(t, &[manufactured_x(10.0, t)], &[manufactured_z(10.0, t)], &mut out);
            let h = 1e-5;
            let fd = (manufactured_x(10.0, t + h) - manufactured_x(10.0, t - h)) / (2.0 * h);
            assert!((out[0] - manufactured_dx(10.0, t)).abs() < 1e-12);
            assert!((out[0] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn logistic_defaults_and_jacobians() {
        let p = LogisticParams::default();
        assert_eq!(
            [p.sigma, p.kappa, p.gamma1, p.gamma2, p.mu1, p.mu2, p.sigma1, p.sigma2, p.t0, p.tf, p.x0],
            [4.0, 1.0, 0.5, 0.5, 0.35, 0.45, 0.06, 0.12, 0.0, 24.0, 0.9]
        );
        let m = LogisticModel::bifurcation(4.0, 1.0, 0.9);
        assert_eq!(m.jac_z(0.0, &[1.0], &[1.0])[(0, 0)], -4.0);
        assert_eq!(m.jac_x(0.0, &[1.0], &[1.0])[(0, 0)], 0.0);
        assert_eq!(m.initial_state(), vec![0.9]);
        assert!(m.constant_history());
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn fission_defaults() {
        let p = FissionParams::default();
        let m = p.model();
        assert_eq!(m.decay, vec![0.0124, 0.0305, 0.1110, 0.3010, 1.1300, 3.0000]);
        assert_eq!(m.fractions, vec![0.00021, 0.00141, 0.00127, 0.00255, 0.00074, 0.00027]);
        assert_eq!((m.generation_time, m.kappa, m.heat, m.dilution), (5e-5, 3e-4, 0.05, 2.0));
        assert_eq!((p.mu1, p.sigma1, p.terms), (2.0, 0.1, 7));
        let x = m.initial_state();
        assert_eq!(&x[..7], &[1.0; 7]);
        assert!((x[7] - 1.1 * 0.00645).abs() < 1e-15);
        assert_eq!(p.kernels().unwrap().len(), 6);
    }

    #[test]
    fn fission_rhs_is_stoichiometric() {
        let m = FissionParams::default().model();
        let x = [0.9, 1.1, 1.3, 0.7, 1.0, 1.2, 2.0, 0.004];
        let z = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
        let mut out = [0.0; 8];
        m.f(0.0, &x, &z, &mut out);
        let r = m.production(&x);
        for i in 0..6 {
            assert!((out[i] - ((z[i] - x[i]) * m.dilution + r[i])).abs() < 1e-9);
        }
        assert!((out[6] - r[6]).abs() < 1e-6 * r[6].abs().max(1.0));
        assert!((out[7] + m.kappa * m.heat * x[6]).abs() < 1e-18);
        // Precursor decay only moves mass between groups and neutrons, so the
        // total production is the net fission source ρ C_n / Λ.
        let mut xb = x;
        xb[7] = m.beta();
        let rb = m.production(&xb);
        let source = m.beta() * x[6] / m.generation_time;
        assert!((rb.iter().sum::<f64>() - source).abs() < 1e-12 * source);
    }

    #[test]
    fn registry() {
        let inst = build_model("fission", &[("kappa".into(), 2e-4), ("beta3".into(), 0.001)]).unwrap();
        assert_eq!(inst.model.nx(), 8);
        assert_eq!(inst.kernels.len(), 6);
        assert!(matches!(
            build_model("fission", &[("nope".into(), 1.0)]),
            Err(ModelError::UnknownParameter { .. })
        ));
        assert!(matches!(build_model("lotka", &[]), Err(ModelError::UnknownModel(_))));
        let inst = build_model("logistic-bifurcation", &[("sigma".into(), 12.0)]).unwrap();
        assert_eq!(inst.kernels[0].name(), "folded-normal-sum");
        assert!(build_model("logistic-manufactured", &[("kappa".into(), -1.0)]).is_err());
    }

    fn trajectory(times: &[f64], f: impl Fn(f64) -> f64) -> Trajectory {
        let mut traj = Trajectory::default();
        for &t in times {
            traj.push(t, vec![f(t)], vec![0.0]);
        }
        traj
    }

    #[test]
    fn metrics() {
        let times: Vec<f64> = (0..=100).map(|k| k as f64 * 0.1).collect();
        let a = trajectory(&times, |t| t.sin());
        assert_eq!(state_error(&a, 0, f64::sin, 0.0, 10.0, 100, Alignment::Exact).unwrap(), 0.0);
        let shifted = trajectory(&times, |t| t.sin() + 0.5);
        let e = state_error(&shifted, 0, f64::sin, 0.0, 10.0, 100, Alignment::Exact).unwrap();
        assert!((e - 0.25 * 10.0).abs() < 1e-12);
        let rows = relative_diff(&a, &a, &times, 1, Alignment::Exact).unwrap();
        assert_eq!(max_relative_diff(&rows), 0.0);
        let one = trajectory(&[0.0, 1.0], |_| 1.0);
        let onehalf = trajectory(&[0.0, 1.0], |_| 1.5);
        let rows = relative_diff(&onehalf, &one, &[1.0], 1, Alignment::Exact).unwrap();
        assert_eq!(rows[0][0], 0.25);
        assert!(matches!(
            state_error(&a, 0, f64::sin, 0.0, 10.0, 300, Alignment::Exact),
            Err(ModelError::GridMismatch { .. })
        ));
        assert!(state_error(&a, 0, f64::sin, 0.0, 10.0, 300, Alignment::Interpolate).is_ok());
    }
}
