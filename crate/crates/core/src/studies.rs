//! The numerical experiments: the manufactured-solution convergence study,
//! the logistic bifurcation scan, and the reactor cross-method comparison and
//! Monte Carlo simulation. Shared by the command-line tool and the acceptance
//! tests, so every tolerance and grid is an explicit field.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::approx::{
    fit_least_squares, fit_theoretical, horizon, kernel_error, ApproxError, FitMethod, FitProblem, FitResult,
    HorizonResult,
};
use crate::ddesolve::{dde_solve, multiple_of, DdeError, DdeGrid, DdeMethod};
use crate::integrate::{solve, IntegrateError, IntegratorConfig, Method, Output, Trajectory};
use crate::kernels::{ErlangMixture, KernelSpec};
use crate::lct::{LctError, LctOde, LctSystem, Model};
use crate::models::{
    manufactured_x, max_relative_diff, relative_diff, state_error, Alignment, FissionParams, LogisticModel,
    LogisticParams, ModelError,
};
use crate::stability::{scan_parameter, ScanPoint, ScanSetup, StabilityError};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error(transparent)]
    Lct(#[from] LctError),
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error(transparent)]
    Dde(#[from] DdeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error("{what}: the approximate state became nonpositive ({value:e} at t = {t}); the manufactured problem is only meaningful for x > 0")]
    Positivity { what: String, t: f64, value: f64 },
    #[error("invalid study configuration: {0}")]
    Config(String),
}

/// Options of the kernel fit: samples `N`, horizon threshold `ε` and the
/// tolerance of its bisection, KKT tolerance and iteration cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitSettings {
    /// `None` picks `max(100, 4(M+1))`.
    pub samples: Option<usize>,
    pub epsilon: f64,
    pub horizon_tol: f64,
    pub kkt_tol: f64,
    pub max_iterations: usize,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            samples: None,
            epsilon: 1e-14,
            horizon_tol: 1e-15,
            kkt_tol: 1e-10,
            max_iterations: 500,
        }
    }
}

impl FitSettings {
    pub fn problem(&self, kernel: &KernelSpec, order: usize, t_h: f64) -> Result<FitProblem, StudyError> {
        let problem = match self.samples {
            Some(n) => FitProblem::with_samples(kernel.clone(), order, t_h, n)?,
            None => FitProblem::new(kernel.clone(), order, t_h)?,
        };
        Ok(problem.with_tolerance(self.kkt_tol, self.max_iterations))
    }
}

/// Horizon plus fit of one kernel.
pub fn fit_kernel(
    kernel: &KernelSpec,
    order: usize,
    method: FitMethod,
    settings: &FitSettings,
) -> Result<(HorizonResult, FitResult), StudyError> {
    let h = horizon(kernel, settings.epsilon, settings.horizon_tol)?;
    let problem = settings.problem(kernel, order, h.t_h)?;
    let fit = match method {
        FitMethod::LeastSquares => fit_least_squares(&problem, None)?,
        FitMethod::Theoretical => fit_theoretical(&problem)?,
    };
    Ok((h, fit))
}

fn check_positive(traj: &Trajectory, what: &str) -> Result<(), StudyError> {
    for (t, s) in traj.times.iter().zip(&traj.states) {
        if !(s[0] > 0.0) {
            return Err(StudyError::Positivity {
                what: what.into(),
                t: *t,
                value: s[0],
            });
        }
    }
    Ok(())
}

/// The manufactured-solution study.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceConfig {
    pub params: LogisticParams,
    pub orders: Vec<usize>,
    pub methods: Vec<FitMethod>,
    pub fit: FitSettings,
    /// Tolerance of the explicit integrator for the chain ODE.
    pub ode_tol: f64,
    /// `K_x`: points of the state error for the chain simulations.
    pub state_points: usize,
    /// `K_α`: points of the kernel error.
    pub kernel_points: usize,
    pub dde_steps: Vec<f64>,
    pub dde_methods: Vec<DdeMethod>,
    /// `Δt_h`; `None` means the whole interval `t_f - t_0`.
    pub dde_horizon: Option<f64>,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            params: LogisticParams::default(),
            orders: vec![4, 8, 16],
            methods: vec![FitMethod::LeastSquares, FitMethod::Theoretical],
            fit: FitSettings {
                samples: Some(100),
                ..FitSettings::default()
            },
            ode_tol: 1e-12,
            state_points: 24_000,
            kernel_points: 10_000,
            dde_steps: vec![0.04, 0.02, 0.01],
            dde_methods: vec![DdeMethod::Explicit, DdeMethod::Implicit],
            dde_horizon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitRow {
    pub order: usize,
    pub method: FitMethod,
    pub rate: f64,
    pub horizon: f64,
    pub kernel_error: f64,
    pub state_error: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdeRow {
    pub dt: f64,
    pub method: DdeMethod,
    pub state_error: f64,
}

#[derive(Debug, Default)]
pub struct ConvergenceReport {
    pub fits: Vec<FitRow>,
    pub dde: Vec<DdeRow>,
    /// Stages that failed; the remaining stages still ran.
    pub failures: Vec<String>,
}

impl ConvergenceReport {
    /// `E_x(Δt) / E_x(Δt/2)` for successive rows of one method.
    pub fn dde_ratios(&self, method: DdeMethod) -> Vec<f64> {
        let rows: Vec<&DdeRow> = self.dde.iter().filter(|r| r.method == method).collect();
        rows.windows(2).map(|w| w[0].state_error / w[1].state_error).collect()
    }
}

/// Simulate the chain ODE of the manufactured problem with `mixture` and
/// return `E_x` on `K_x` points.
pub fn manufactured_lct_error(
    params: &LogisticParams,
    mixture: ErlangMixture,
    ode_tol: f64,
    state_points: usize,
) -> Result<f64, StudyError> {
    let model = LogisticModel::manufactured(params.sigma, params.kappa, params.gamma);
    let lct = LctSystem::new(vec![mixture])?;
    let ode = LctOde::new(&model, &lct)?;
    let y0 = ode.initial_state()?;
    let cfg = IntegratorConfig::new(Method::ExplicitRk, ode_tol);
    let traj = solve(
        &ode,
        &y0,
        params.t0,
        params.tf,
        &cfg,
        &Output::uniform(params.t0, params.tf, state_points),
    )?;
    check_positive(&traj, "chain simulation")?;
    let gamma = params.gamma;
    Ok(state_error(
        &traj,
        0,
        |t| manufactured_x(gamma, t),
        params.t0,
        params.tf,
        state_points,
        Alignment::Exact,
    )?)
}

/// Run the manufactured DDE with step `dt` and return `E_x` on the step grid.
pub fn manufactured_dde_error(
    params: &LogisticParams,
    dt: f64,
    dt_h: f64,
    method: DdeMethod,
) -> Result<f64, StudyError> {
    let model = LogisticModel::manufactured(params.sigma, params.kappa, params.gamma);
    let grid = DdeGrid::new(vec![KernelSpec::gaussian_halfline()], dt, dt_h)?;
    let traj = dde_solve(&model, &grid, params.tf, method)?;
    check_positive(&traj, "DDE simulation")?;
    let points = ((params.tf - params.t0) / dt).round() as usize;
    let gamma = params.gamma;
    Ok(state_error(
        &traj,
        0,
        |t| manufactured_x(gamma, t),
        params.t0,
        params.tf,
        points,
        Alignment::Exact,
    )?)
}

pub fn run_convergence(cfg: &ConvergenceConfig) -> ConvergenceReport {
    let mut report = ConvergenceReport::default();
    let kernel = KernelSpec::gaussian_halfline();
    for &order in &cfg.orders {
        for &method in &cfg.methods {
            let row = (|| -> Result<FitRow, StudyError> {
                let (h, fit) = fit_kernel(&kernel, order, method, &cfg.fit)?;
                let e_alpha = kernel_error(&fit.mixture, &kernel, cfg.kernel_points, h.t_h);
                let e_x = manufactured_lct_error(&cfg.params, fit.mixture.clone(), cfg.ode_tol, cfg.state_points)?;
                Ok(FitRow {
                    order,
                    method,
                    rate: fit.mixture.rate(),
                    horizon: h.t_h,
                    kernel_error: e_alpha,
                    state_error: e_x,
                    converged: fit.report.converged,
                    iterations: fit.report.iterations,
                })
            })();
            match row {
                Ok(r) => report.fits.push(r),
                Err(e) => report.failures.push(format!("fit M={order} {method:?}: {e}")),
            }
        }
    }
    let dt_h = cfg.dde_horizon.unwrap_or(cfg.params.tf - cfg.params.t0);
    for &method in &cfg.dde_methods {
        for &dt in &cfg.dde_steps {
            match manufactured_dde_error(&cfg.params, dt, dt_h, method) {
                Ok(e) => report.dde.push(DdeRow {
                    dt,
                    method,
                    state_error: e,
                }),
                Err(e) => report.failures.push(format!("DDE {method:?} dt={dt}: {e}")),
            }
        }
    }
    report
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let rx = ranks(x);
    let ry = ranks(y);
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = 0.5 * (i + j) as f64 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanParameter {
    Sigma,
    Mu2,
}

impl std::str::FromStr for ScanParameter {
    type Err = StudyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sigma" => Ok(Self::Sigma),
            "mu2" => Ok(Self::Mu2),
            _ => Err(StudyError::Config(format!("scan parameter '{s}' (expected sigma or mu2)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BifurcationConfig {
    pub params: LogisticParams,
    pub parameter: ScanParameter,
    pub grid: Vec<f64>,
    pub order: usize,
    pub fit: FitSettings,
    pub keep_spectrum: bool,
    /// Parameter values at which to run a time simulation.
    pub simulate: Vec<f64>,
    pub dde_steps: usize,
    /// `None` means the whole interval.
    pub dde_horizon: Option<f64>,
}

impl Default for BifurcationConfig {
    fn default() -> Self {
        Self {
            params: LogisticParams::default(),
            parameter: ScanParameter::Sigma,
            grid: (0..40).map(|k| 1.0 + k as f64).collect(),
            order: 32,
            fit: FitSettings {
                samples: Some(100),
                ..FitSettings::default()
            },
            keep_spectrum: false,
            simulate: vec![2.0, 8.0],
            dde_steps: 10_000,
            dde_horizon: None,
        }
    }
}

/// A time simulation at one parameter value, summarised by how far it
/// strays from the steady state `κ` at the start and at the end.
#[derive(Debug, Clone)]
pub struct BifurcationRun {
    pub parameter: f64,
    pub trajectory: Trajectory,
    /// `|x(t0) - κ|`.
    pub initial_deviation: f64,
    /// `max |x - κ|` over the final fifth of the interval.
    pub final_deviation: f64,
}

impl BifurcationRun {
    pub fn decays(&self) -> bool {
        self.final_deviation < 0.1 * self.initial_deviation
    }

    pub fn departs(&self) -> bool {
        self.final_deviation > self.initial_deviation
    }
}

#[derive(Debug, Default)]
pub struct BifurcationReport {
    pub points: Vec<ScanPoint>,
    pub runs: Vec<BifurcationRun>,
    pub failures: Vec<String>,
}

impl BifurcationReport {
    /// Number of sign changes of the largest real part along the grid,
    /// skipping failed points.
    pub fn sign_changes(&self) -> usize {
        let signs: Vec<bool> = self.points.iter().filter_map(|p| p.max_real).map(|r| r > 0.0).collect();
        signs.windows(2).filter(|w| w[0] != w[1]).count()
    }
}

fn with_parameter(params: &LogisticParams, which: ScanParameter, value: f64) -> LogisticParams {
    let mut p = params.clone();
    match which {
        ScanParameter::Sigma => p.sigma = value,
        ScanParameter::Mu2 => p.mu2 = value,
    }
    p
}

pub fn run_bifurcation(cfg: &BifurcationConfig) -> Result<BifurcationReport, StudyError> {
    let mut report = BifurcationReport::default();
    // The kernel does not depend on σ: fit it once.
    let shared = match cfg.parameter {
        ScanParameter::Sigma => {
            let (_, fit) = fit_kernel(&cfg.params.bimodal_kernel()?, cfg.order, FitMethod::LeastSquares, &cfg.fit)?;
            Some(fit.mixture)
        }
        ScanParameter::Mu2 => None,
    };
    let build = |value: f64| -> Result<ScanSetup, StabilityError> {
        let p = with_parameter(&cfg.params, cfg.parameter, value);
        let mixture = match &shared {
            Some(m) => m.clone(),
            None => {
                let kernel = p.bimodal_kernel().map_err(|e| StabilityError::Model(e.to_string()))?;
                fit_kernel(&kernel, cfg.order, FitMethod::LeastSquares, &cfg.fit)
                    .map_err(|e| StabilityError::Model(e.to_string()))?
                    .1
                    .mixture
            }
        };
        Ok(ScanSetup {
            model: Box::new(LogisticModel::bifurcation(p.sigma, p.kappa, p.x0)),
            lct: LctSystem::new(vec![mixture])?,
            guess: vec![p.kappa],
            t: p.t0,
        })
    };
    report.points = scan_parameter(&cfg.grid, build, cfg.keep_spectrum);
    for point in &report.points {
        if let Some(e) = &point.error {
            report.failures.push(format!("scan point {}: {e}", point.parameter));
        }
    }
    let dt = (cfg.params.tf - cfg.params.t0) / cfg.dde_steps as f64;
    let dt_h = cfg.dde_horizon.unwrap_or(cfg.params.tf - cfg.params.t0);
    for &value in &cfg.simulate {
        match simulate_logistic(&with_parameter(&cfg.params, cfg.parameter, value), dt, dt_h) {
            Ok(mut run) => {
                run.parameter = value;
                report.runs.push(run);
            }
            Err(e) => report.failures.push(format!("simulation at {value}: {e}")),
        }
    }
    Ok(report)
}

/// Explicit DDE simulation of the unforced logistic problem with the exact kernel.
pub fn simulate_logistic(p: &LogisticParams, dt: f64, dt_h: f64) -> Result<BifurcationRun, StudyError> {
    let model = LogisticModel::bifurcation(p.sigma, p.kappa, p.x0);
    let grid = DdeGrid::new(vec![p.bimodal_kernel()?], dt, dt_h)?;
    let trajectory = dde_solve(&model, &grid, p.tf, DdeMethod::Explicit)?;
    let t_tail = p.tf - 0.2 * (p.tf - p.t0);
    let final_deviation = trajectory
        .times
        .iter()
        .zip(&trajectory.states)
        .filter(|(t, _)| **t >= t_tail)
        .map(|(_, s)| (s[0] - p.kappa).abs())
        .fold(0.0, f64::max);
    Ok(BifurcationRun {
        parameter: p.sigma,
        initial_deviation: (p.x0 - p.kappa).abs(),
        final_deviation,
        trajectory,
    })
}

/// The reactor studies: kernel fits, the chain simulation, and the
/// reference DDE runs.
#[derive(Debug, Clone, PartialEq)]
pub struct FissionConfig {
    pub params: FissionParams,
    pub order: usize,
    pub fit: FitSettings,
    pub ode_tol: f64,
    pub method: Method,
    /// Intervals of the comparison grid over `[t0, tf]`.
    pub output_intervals: usize,
    pub dde_steps: Vec<f64>,
    /// `None` picks the horizon of each kernel at the default threshold.
    pub dde_horizon: Option<f64>,
}

impl Default for FissionConfig {
    fn default() -> Self {
        Self {
            params: FissionParams::default(),
            order: 200,
            fit: FitSettings {
                samples: None,
                epsilon: 1e-13,
                horizon_tol: 1e-14,
                ..FitSettings::default()
            },
            ode_tol: 1e-8,
            method: Method::TrBdf2,
            output_intervals: 1000,
            dde_steps: vec![2e-4, 1e-4],
            dde_horizon: None,
        }
    }
}

impl FissionConfig {
    pub fn output_times(&self) -> Vec<f64> {
        let (t0, tf) = (self.params.t0, self.params.tf);
        let n = self.output_intervals;
        let mut times: Vec<f64> = (0..=n).map(|k| t0 + (tf - t0) * k as f64 / n as f64).collect();
        times[n] = tf;
        times
    }
}

/// Least-squares fits of the precursor kernels, one per group.
pub fn fit_fission_kernels(cfg: &FissionConfig) -> Result<Vec<(HorizonResult, FitResult)>, StudyError> {
    cfg.params
        .kernels()?
        .par_iter()
        .map(|k| fit_kernel(k, cfg.order, FitMethod::LeastSquares, &cfg.fit))
        .collect()
}

/// Chain simulation of the reactor with the given precursor mixtures.
pub fn simulate_fission_lct(
    cfg: &FissionConfig,
    params: &FissionParams,
    mixtures: &[ErlangMixture],
) -> Result<Trajectory, StudyError> {
    let model = params.model();
    let lct = LctSystem::new(mixtures.to_vec())?;
    let ode = LctOde::new(&model, &lct)?;
    let y0 = ode.initial_state()?;
    let icfg = IntegratorConfig::new(cfg.method, cfg.ode_tol);
    Ok(solve(&ode, &y0, params.t0, params.tf, &icfg, &Output::Times(cfg.output_times()))?)
}

/// Which kernels the reference DDE solver uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceKernel {
    /// The true precursor kernels.
    Exact,
    /// The same Erlang mixtures as the chain simulation, so that the
    /// difference measures discretisation error only.
    Fitted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub dt: f64,
    pub kernel: ReferenceKernel,
    pub max_relative_diff: f64,
    /// `max_t E_r,i(t)` per state.
    pub per_state: Vec<f64>,
    /// `E_r,i(t)` at every output time.
    pub rows: Vec<Vec<f64>>,
}

/// Implicit DDE runs at each step size against the chain trajectory `lct`.
pub fn compare_fission(
    cfg: &FissionConfig,
    lct: &Trajectory,
    mixtures: &[ErlangMixture],
    kernel: ReferenceKernel,
) -> Result<Vec<ComparisonRow>, StudyError> {
    let model = cfg.params.model();
    let kernels = match kernel {
        ReferenceKernel::Exact => cfg.params.kernels()?,
        ReferenceKernel::Fitted => mixtures.iter().cloned().map(KernelSpec::erlang_mixture).collect(),
    };
    let nx = model.nx();
    let times = cfg.output_times();
    cfg.dde_steps
        .iter()
        .map(|&dt| {
            let grid = match cfg.dde_horizon {
                Some(h) => DdeGrid::new(kernels.clone(), dt, h)?,
                None => DdeGrid::with_default_horizon(kernels.clone(), dt)?,
            };
            let reference = dde_solve(&model, &grid, cfg.params.tf, DdeMethod::Implicit)?;
            // Compare at the steps themselves when the output grid lies on
            // the step grid, otherwise through the dense interpolant.
            let spacing = (cfg.params.tf - cfg.params.t0) / cfg.output_intervals as f64;
            let align = if multiple_of(spacing, dt).is_some() {
                Alignment::Exact
            } else {
                Alignment::Interpolate
            };
            let rows = relative_diff(lct, &reference, &times, nx, align)?;
            let per_state = (0..nx).map(|i| rows.iter().map(|r| r[i]).fold(0.0, f64::max)).collect();
            Ok(ComparisonRow {
                dt,
                kernel,
                max_relative_diff: max_relative_diff(&rows),
                per_state,
                rows,
            })
        })
        .collect()
}

/// `n` draws from `N(mean, sd²)` by the Box–Muller transform.
pub fn normal_samples<R: Rng>(rng: &mut R, n: usize, mean: f64, sd: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        // 1 - U lies in (0, 1], so the logarithm is finite.
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(mean + sd * r * theta.cos());
        out.push(mean + sd * r * theta.sin());
    }
    out.truncate(n);
    out
}

/// Percentile `p ∈ [0, 100]` of sorted data by linear interpolation between
/// order statistics.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let h = (sorted.len() - 1) as f64 * (p / 100.0).clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloConfig {
    pub samples: usize,
    pub seed: u64,
    pub kappa_mean: f64,
    pub kappa_sd: f64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            samples: 50,
            seed: 2024,
            kappa_mean: 3e-4,
            kappa_sd: 7.5e-5,
        }
    }
}

/// Pointwise statistics of one state over the samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub mean: Vec<f64>,
    pub p025: Vec<f64>,
    pub p975: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MonteCarloReport {
    pub times: Vec<f64>,
    pub kappas: Vec<f64>,
    /// Neutron concentration `C_n`.
    pub neutrons: Band,
    pub reactivity: Band,
    /// Sample index and error of the failed runs, excluded from the bands.
    pub failures: Vec<(usize, String)>,
}

fn band(runs: &[&Trajectory], component: usize, len: usize) -> Band {
    let mut b = Band {
        mean: Vec::with_capacity(len),
        p025: Vec::with_capacity(len),
        p975: Vec::with_capacity(len),
        min: Vec::with_capacity(len),
        max: Vec::with_capacity(len),
    };
    for k in 0..len {
        let mut v: Vec<f64> = runs.iter().map(|r| r.states[k][component]).collect();
        v.sort_by(f64::total_cmp);
        b.mean.push(v.iter().sum::<f64>() / v.len() as f64);
        b.p025.push(percentile(&v, 2.5));
        b.p975.push(percentile(&v, 97.5));
        b.min.push(v[0]);
        b.max.push(v[v.len() - 1]);
    }
    b
}

/// Chain simulations for normally distributed `κ`, in parallel; the
/// statistics are formed in sample order, so the result depends only on the
/// seed.
pub fn run_monte_carlo(
    cfg: &FissionConfig,
    mc: &MonteCarloConfig,
    mixtures: &[ErlangMixture],
) -> Result<MonteCarloReport, StudyError> {
    if mc.samples == 0 {
        return Err(StudyError::Config("at least one Monte Carlo sample is needed".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
    let kappas = normal_samples(&mut rng, mc.samples, mc.kappa_mean, mc.kappa_sd);
    let results: Vec<Result<Trajectory, StudyError>> = kappas
        .par_iter()
        .map(|&kappa| {
            let mut params = cfg.params.clone();
            params.kappa = kappa;
            simulate_fission_lct(cfg, &params, mixtures)
        })
        .collect();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.iter().enumerate() {
        match r {
            Ok(t) => runs.push(t),
            Err(e) => failures.push((i, e.to_string())),
        }
    }
    if runs.is_empty() {
        return Err(StudyError::Config(format!("all {} Monte Carlo samples failed", mc.samples)));
    }
    let g = cfg.params.decay.len();
    let len = runs[0].len();
    Ok(MonteCarloReport {
        times: runs[0].times.clone(),
        kappas,
        neutrons: band(&runs, g, len),
        reactivity: band(&runs, g + 1, len),
        failures,
    })
}

/// Eigenvalues with the largest real part first.
pub fn sorted_spectrum(mut eig: Vec<Complex64>) -> Vec<Complex64> {
    eig.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    eig
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 0.0]) + 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 4.0, 9.0, 1e6]) - 1.0).abs() < 1e-15);
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn percentiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 5.0);
        assert_eq!(percentile(&v, 50.0), 3.0);
        assert!((percentile(&v, 2.5) - 1.1).abs() < 1e-12);
        assert_eq!(percentile(&[7.0], 97.5), 7.0);
    }

    #[test]
    fn box_muller_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = normal_samples(&mut rng, 200_000, 3.0, 0.5);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        assert!((mean - 3.0).abs() < 5e-3);
        assert!((var.sqrt() - 0.5).abs() < 5e-3);
        let mut again = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(normal_samples(&mut again, 5, 3.0, 0.5), v[..5].to_vec());
    }
}
