//! ODE integrators: Dormand-Prince 5(4) for non-stiff problems and the
//! L-stable TR-BDF2 / implicit Euler schemes with modified Newton for stiff
//! ones. Both produce a [`Trajectory`] of observed quantities.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// A first-order system `y' = rhs(t, y)`.
///
/// Implementations must be reentrant; integrators may be run concurrently.
pub trait OdeSystem {
    fn dim(&self) -> usize;

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]);

    /// Number of observed quantities recorded in trajectories.
    fn observed_dim(&self) -> usize {
        self.dim()
    }

    /// Linear observation map applied to states and, for dense output, to
    /// derivatives. Defaults to the identity.
    fn observe(&self, y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(y);
    }
}

/// A system whose Newton matrices `I - gamma J` can be formed and solved.
pub trait StiffSystem: OdeSystem {
    type Jacobian;
    type Factor;

    fn jacobian(&self, t: f64, y: &[f64]) -> Self::Jacobian;

    /// Factor `I - gamma J`; `None` when singular.
    fn factor(&self, jac: &Self::Jacobian, gamma: f64) -> Option<Self::Factor>;

    /// Overwrite `rhs` with `(I - gamma J)^{-1} rhs`.
    fn solve(&self, factor: &Self::Factor, rhs: &mut [f64]);
}

/// Adapter giving any system a dense analytic Jacobian.
pub struct DenseJacobian<S, J> {
    pub system: S,
    pub jacobian: J,
}

impl<S, J> OdeSystem for DenseJacobian<S, J>
where
    S: OdeSystem,
{
    fn dim(&self) -> usize {
        self.system.dim()
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        self.system.rhs(t, y, dy)
    }

    fn observed_dim(&self) -> usize {
        self.system.observed_dim()
    }

    fn observe(&self, y: &[f64], out: &mut [f64]) {
        self.system.observe(y, out)
    }
}

impl<S, J> StiffSystem for DenseJacobian<S, J>
where
    S: OdeSystem,
    J: Fn(f64, &[f64]) -> DMatrix<f64>,
{
    type Jacobian = DMatrix<f64>;
    type Factor = nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>;

    fn jacobian(&self, t: f64, y: &[f64]) -> DMatrix<f64> {
        (self.jacobian)(t, y)
    }

    fn factor(&self, jac: &DMatrix<f64>, gamma: f64) -> Option<Self::Factor> {
        dense_newton_factor(jac, gamma)
    }

    fn solve(&self, factor: &Self::Factor, rhs: &mut [f64]) {
        dense_newton_solve(factor, rhs)
    }
}

/// LU factor of `I - gamma J`.
pub fn dense_newton_factor(jac: &DMatrix<f64>, gamma: f64) -> Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    let n = jac.nrows();
    let m = DMatrix::identity(n, n) - jac * gamma;
    let lu = m.lu();
    lu.is_invertible().then_some(lu)
}

pub fn dense_newton_solve(factor: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, rhs: &mut [f64]) {
    let mut b = DVector::from_column_slice(rhs);
    if factor.solve_mut(&mut b) {
        rhs.copy_from_slice(b.as_slice());
    } else {
        rhs.fill(f64::NAN);
    }
}

/// A plain closure as an [`OdeSystem`].
pub struct FnSystem<F> {
    pub dim: usize,
    pub rhs: F,
}

impl<F> OdeSystem for FnSystem<F>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        (self.rhs)(t, y, dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Dormand-Prince 5(4).
    ExplicitRk,
    ImplicitEuler,
    TrBdf2,
}

impl Method {
    pub fn is_implicit(self) -> bool {
        !matches!(self, Method::ExplicitRk)
    }
}

#[derive(Debug, Clone)]
pub struct IntegratorConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Chosen automatically when `None`.
    pub initial_step: Option<f64>,
    pub min_step: f64,
    pub max_step: f64,
    pub max_steps: usize,
    pub method: Method,
    /// Disable step-size control and take steps of exactly this size
    /// (the last one may be shorter).
    pub fixed_step: Option<f64>,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-8,
            rel_tol: 1e-8,
            initial_step: None,
            min_step: 1e-14,
            max_step: f64::INFINITY,
            max_steps: 10_000_000,
            method: Method::ExplicitRk,
            fixed_step: None,
        }
    }
}

impl IntegratorConfig {
    pub fn new(method: Method, tol: f64) -> Self {
        Self {
            abs_tol: tol,
            rel_tol: tol,
            method,
            ..Self::default()
        }
    }

    pub fn fixed(method: Method, step: f64) -> Self {
        Self {
            method,
            fixed_step: Some(step),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), IntegrateError> {
        let bad = |msg: String| Err(IntegrateError::InvalidConfig(msg));
        if !(self.abs_tol >= 1e-14 && self.rel_tol >= 1e-14) {
            return bad(format!(
                "tolerances must be at least 1e-14 (abs {}, rel {})",
                self.abs_tol, self.rel_tol
            ));
        }
        if !(self.min_step > 0.0 && self.min_step < self.max_step) {
            return bad(format!(
                "need 0 < min_step < max_step, got {} and {}",
                self.min_step, self.max_step
            ));
        }
        if let Some(h) = self.initial_step {
            if !(h > 0.0 && h.is_finite()) {
                return bad(format!("initial step {h} must be positive"));
            }
        }
        if let Some(h) = self.fixed_step {
            if !(h > 0.0 && h.is_finite()) {
                return bad(format!("fixed step {h} must be positive"));
            }
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum IntegrateError {
    #[error("invalid integrator configuration: {0}")]
    InvalidConfig(String),
    #[error("step size {step:.3e} fell below the minimum at t = {t} (problem may be stiff)")]
    StiffnessSuspected { t: f64, step: f64 },
    #[error("maximum number of steps ({0}) exhausted at t = {1}")]
    MaxSteps(usize, f64),
    #[error("Newton iteration failed at t = {t} after a Jacobian refresh and {halvings} step halvings")]
    NewtonFailure { t: f64, halvings: usize },
    #[error("non-finite state at t = {0}")]
    NonFinite(f64),
    #[error("invalid time span [{0}, {1}]")]
    InvalidSpan(f64, f64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evaluations: usize,
    pub jacobian_evaluations: usize,
    pub factorizations: usize,
    pub newton_failures: usize,
}

/// Samples of the observed quantities together with their time derivatives,
/// which makes cubic Hermite interpolation between samples possible.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub derivatives: Vec<Vec<f64>>,
    pub stats: StepStats,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn last(&self) -> Option<&[f64]> {
        self.states.last().map(Vec::as_slice)
    }

    pub fn push(&mut self, t: f64, state: Vec<f64>, derivative: Vec<f64>) {
        self.times.push(t);
        self.states.push(state);
        self.derivatives.push(derivative);
    }

    /// Column `i` over time.
    pub fn component(&self, i: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[i]).collect()
    }

    /// Cubic Hermite interpolation at `t`; `None` outside the sampled span.
    pub fn sample(&self, t: f64) -> Option<Vec<f64>> {
        let n = self.times.len();
        if n == 0 || t < self.times[0] || t > self.times[n - 1] {
            return None;
        }
        let k = match self.times.binary_search_by(|probe| probe.total_cmp(&t)) {
            Ok(k) => return Some(self.states[k].clone()),
            Err(k) => k,
        };
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        Some(hermite(
            t0,
            t1,
            &self.states[k - 1],
            &self.states[k],
            &self.derivatives[k - 1],
            &self.derivatives[k],
            t,
        ))
    }

    /// Check the structural invariants: increasing times, finite samples.
    pub fn is_well_formed(&self) -> bool {
        self.times.windows(2).all(|w| w[1] > w[0])
            && self.states.iter().flatten().all(|v| v.is_finite())
            && self.states.len() == self.times.len()
    }
}

fn hermite(t0: f64, t1: f64, y0: &[f64], y1: &[f64], f0: &[f64], f1: &[f64], t: f64) -> Vec<f64> {
    let h = t1 - t0;
    let s = (t - t0) / h;
    let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
    let h10 = s * (1.0 - s) * (1.0 - s);
    let h01 = s * s * (3.0 - 2.0 * s);
    let h11 = s * s * (s - 1.0);
    (0..y0.len())
        .map(|i| h00 * y0[i] + h10 * h * f0[i] + h01 * y1[i] + h11 * h * f1[i])
        .collect()
}

/// Where a trajectory records samples.
#[derive(Debug, Clone)]
pub enum Output {
    /// Every accepted step (and the initial point).
    Steps,
    /// The given increasing times within `[t0, tf]`, by dense output.
    Times(Vec<f64>),
}

impl Output {
    /// `n + 1` equally spaced times over `[t0, tf]`.
    pub fn uniform(t0: f64, tf: f64, n: usize) -> Self {
        let n = n.max(1);
        let mut times: Vec<f64> = (0..=n).map(|k| t0 + (tf - t0) * k as f64 / n as f64).collect();
        times[n] = tf;
        Output::Times(times)
    }
}

struct Recorder<'a, S: OdeSystem + ?Sized> {
    system: &'a S,
    output: &'a Output,
    next: usize,
    traj: Trajectory,
    obs_y0: Vec<f64>,
    obs_y1: Vec<f64>,
    obs_f0: Vec<f64>,
    obs_f1: Vec<f64>,
}

impl<'a, S: OdeSystem + ?Sized> Recorder<'a, S> {
    fn new(system: &'a S, output: &'a Output) -> Self {
        let m = system.observed_dim();
        Self {
            system,
            output,
            next: 0,
            traj: Trajectory::default(),
            obs_y0: vec![0.0; m],
            obs_y1: vec![0.0; m],
            obs_f0: vec![0.0; m],
            obs_f1: vec![0.0; m],
        }
    }

    fn start(&mut self, t0: f64, y0: &[f64], f0: &[f64]) {
        match self.output {
            Output::Steps => self.push(t0, y0, f0),
            Output::Times(times) => {
                while self.next < times.len() && times[self.next] < t0 {
                    self.next += 1;
                }
                if self.next < times.len() && times[self.next] == t0 {
                    self.push(t0, y0, f0);
                    self.next += 1;
                }
            }
        }
    }

    fn push(&mut self, t: f64, y: &[f64], f: &[f64]) {
        self.system.observe(y, &mut self.obs_y1);
        self.system.observe(f, &mut self.obs_f1);
        self.traj.push(t, self.obs_y1.clone(), self.obs_f1.clone());
    }

    /// Record the step `(t0, y0, f0) -> (t1, y1, f1)`.
    fn step(&mut self, t0: f64, y0: &[f64], f0: &[f64], t1: f64, y1: &[f64], f1: &[f64]) {
        match self.output {
            Output::Steps => self.push(t1, y1, f1),
            Output::Times(times) => {
                if self.next >= times.len() || times[self.next] > t1 {
                    return;
                }
                self.system.observe(y0, &mut self.obs_y0);
                self.system.observe(f0, &mut self.obs_f0);
                self.system.observe(y1, &mut self.obs_y1);
                self.system.observe(f1, &mut self.obs_f1);
                while self.next < times.len() && times[self.next] <= t1 {
                    let t = times[self.next];
                    let (y, f) = if t == t1 {
                        (self.obs_y1.clone(), self.obs_f1.clone())
                    } else {
                        let y = hermite(t0, t1, &self.obs_y0, &self.obs_y1, &self.obs_f0, &self.obs_f1, t);
                        // Derivative of the Hermite cubic.
                        let h = t1 - t0;
                        let s = (t - t0) / h;
                        let d00 = 6.0 * s * (s - 1.0) / h;
                        let d10 = (1.0 - s) * (1.0 - 3.0 * s);
                        let d11 = s * (3.0 * s - 2.0);
                        let f = (0..y.len())
                            .map(|i| {
                                d00 * (self.obs_y0[i] - self.obs_y1[i]) + d10 * self.obs_f0[i] + d11 * self.obs_f1[i]
                            })
                            .collect();
                        (y, f)
                    };
                    self.traj.push(t, y, f);
                    self.next += 1;
                }
            }
        }
    }
}

fn check_span(t0: f64, tf: f64, y0: &[f64], dim: usize) -> Result<(), IntegrateError> {
    if !(tf > t0) || !t0.is_finite() || !tf.is_finite() {
        return Err(IntegrateError::InvalidSpan(t0, tf));
    }
    assert_eq!(y0.len(), dim, "initial state has the wrong dimension");
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(IntegrateError::NonFinite(t0));
    }
    Ok(())
}

/// Error weights `1 / (abs + rel * max(|y0|, |y1|))`, combined with the max norm.
fn error_norm(err: &[f64], y0: &[f64], y1: &[f64], cfg: &IntegratorConfig) -> f64 {
    err.iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| (e / (cfg.abs_tol + cfg.rel_tol * a.abs().max(b.abs()))).abs())
        .fold(0.0, f64::max)
}

fn initial_step(system: &impl OdeSystem, t0: f64, tf: f64, y0: &[f64], f0: &[f64], order: i32, cfg: &IntegratorConfig) -> f64 {
    let scale = |y: f64| cfg.abs_tol + cfg.rel_tol * y.abs();
    let d0 = y0.iter().map(|y| (y / scale(*y)).abs()).fold(0.0, f64::max);
    let d1 = f0.iter().zip(y0).map(|(f, y)| (f / scale(*y)).abs()).fold(0.0, f64::max);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(tf - t0);
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, f)| y + h0 * f).collect();
    let mut f1 = vec![0.0; y0.len()];
    system.rhs(t0 + h0, &y1, &mut f1);
    let d2 = f1
        .iter()
        .zip(f0)
        .zip(y0)
        .map(|((a, b), y)| ((a - b) / scale(*y)).abs())
        .fold(0.0, f64::max)
        / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / (order as f64 + 1.0))
    };
    (100.0 * h0).min(h1).min(tf - t0).min(cfg.max_step).max(cfg.min_step)
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// Difference between the 5th- and 4th-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Adaptive Dormand-Prince 5(4) with a PI step-size controller.
pub fn solve_explicit<S: OdeSystem>(
    system: &S,
    y0: &[f64],
    t0: f64,
    tf: f64,
    cfg: &IntegratorConfig,
    output: &Output,
) -> Result<Trajectory, IntegrateError> {
    cfg.validate()?;
    let n = system.dim();
    check_span(t0, tf, y0, n)?;
    let mut rec = Recorder::new(system, output);
    let mut stats = StepStats::default();
    let mut y = y0.to_vec();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    system.rhs(t0, &y, &mut k[0]);
    stats.rhs_evaluations += 1;
    rec.start(t0, &y, &k[0]);
    let mut t = t0;
    let mut h = match (cfg.fixed_step, cfg.initial_step) {
        (Some(h), _) | (None, Some(h)) => h,
        (None, None) => {
            stats.rhs_evaluations += 1;
            initial_step(system, t0, tf, &y, &k[0], 5, cfg)
        }
    };
    let mut err_prev: f64 = 1e-4;
    let mut last_rejected = false;
    let mut stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut err = vec![0.0; n];
    let fixed = cfg.fixed_step.is_some();
    while t < tf {
        if stats.accepted + stats.rejected >= cfg.max_steps {
            return Err(IntegrateError::MaxSteps(cfg.max_steps, t));
        }
        let last = t + h >= tf || (tf - (t + h)) < 1e-12 * tf.abs().max(1.0);
        let h_step = if last { tf - t } else { h };
        for s in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..s {
                    acc += A[s][j] * k[j][i];
                }
                stage[i] = y[i] + h_step * acc;
            }
            system.rhs(t + C[s] * h_step, &stage, &mut k[s]);
        }
        stats.rhs_evaluations += 6;
        // Stage 6 is evaluated at the 5th-order solution (FSAL).
        y_new.copy_from_slice(&stage);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..7 {
                acc += E[j] * k[j][i];
            }
            err[i] = h_step * acc;
        }
        let finite = y_new.iter().chain(&k[6]).all(|v| v.is_finite());
        let en = if finite { error_norm(&err, &y, &y_new, cfg) } else { f64::INFINITY };
        if fixed || en <= 1.0 {
            if !finite {
                return Err(IntegrateError::NonFinite(t + h_step));
            }
            let t_new = if last { tf } else { t + h_step };
            rec.step(t, &y, &k[0], t_new, &y_new, &k[6]);
            std::mem::swap(&mut y, &mut y_new);
            k.swap(0, 6);
            t = t_new;
            stats.accepted += 1;
            if !fixed {
                // PI controller (Hairer's DOPRI5 constants).
                let en = en.max(1e-10);
                let mut factor = 0.9 * en.powf(-0.7 / 5.0) * err_prev.powf(0.4 / 5.0);
                factor = factor.clamp(0.2, 10.0);
                if last_rejected {
                    factor = factor.min(1.0);
                }
                err_prev = en.max(1e-4);
                h = (h_step * factor).min(cfg.max_step);
            }
            last_rejected = false;
        } else {
            stats.rejected += 1;
            let factor = if en.is_finite() { (0.9 * en.powf(-0.2)).max(0.2) } else { 0.2 };
            h = h_step * factor;
            last_rejected = true;
            if h < cfg.min_step {
                return Err(IntegrateError::StiffnessSuspected { t, step: h });
            }
        }
    }
    let mut traj = rec.traj;
    traj.stats = stats;
    Ok(traj)
}

/// Newton state for one implicit stage `y = base + gamma f(t, y)`.
enum NewtonOutcome {
    Converged,
    /// Slow or divergent convergence, or a singular matrix.
    Failed,
}

struct Implicit<'a, S: StiffSystem> {
    system: &'a S,
    jac: Option<S::Jacobian>,
    jac_fresh: bool,
    factor: Option<(f64, S::Factor)>,
    stats: StepStats,
}

impl<'a, S: StiffSystem> Implicit<'a, S> {
    fn ensure_factor(&mut self, t: f64, y: &[f64], gamma: f64) -> bool {
        if self.jac.is_none() {
            self.jac = Some(self.system.jacobian(t, y));
            self.jac_fresh = true;
            self.stats.jacobian_evaluations += 1;
            self.factor = None;
        }
        let refactor = match &self.factor {
            Some((g, _)) => *g != gamma,
            None => true,
        };
        if refactor {
            let jac = self.jac.as_ref().expect("jacobian present");
            self.stats.factorizations += 1;
            match self.system.factor(jac, gamma) {
                Some(f) => self.factor = Some((gamma, f)),
                None => {
                    self.factor = None;
                    return false;
                }
            }
        }
        true
    }

    /// Solve `y - gamma f(t, y) = base` by modified Newton from `y`.
    fn stage(&mut self, t: f64, gamma: f64, base: &[f64], y: &mut [f64], f: &mut [f64], scale: &[f64]) -> NewtonOutcome {
        if !self.ensure_factor(t, y, gamma) {
            return NewtonOutcome::Failed;
        }
        let n = y.len();
        let mut delta = vec![0.0; n];
        let mut previous: Option<f64> = None;
        let mut theta: f64 = 0.5;
        for iter in 0..10 {
            self.system.rhs(t, y, f);
            self.stats.rhs_evaluations += 1;
            for i in 0..n {
                delta[i] = base[i] + gamma * f[i] - y[i];
            }
            let (_, factor) = self.factor.as_ref().expect("factor present");
            self.system.solve(factor, &mut delta);
            let norm = delta
                .iter()
                .zip(scale)
                .map(|(d, s)| (d / s).abs())
                .fold(0.0, f64::max);
            if !norm.is_finite() {
                return NewtonOutcome::Failed;
            }
            for i in 0..n {
                y[i] += delta[i];
            }
            if let Some(prev) = previous {
                theta = norm / prev;
                if theta >= 0.9 {
                    return NewtonOutcome::Failed;
                }
            }
            // Stop when the predicted remaining error is well below the
            // tolerance (Hairer-Wanner criterion); a tiny update also counts.
            let eta = theta / (1.0 - theta);
            if (iter > 0 && eta * norm <= 0.03) || norm <= 1e-3 {
                self.system.rhs(t, y, f);
                self.stats.rhs_evaluations += 1;
                if f.iter().all(|v| v.is_finite()) {
                    return NewtonOutcome::Converged;
                }
                return NewtonOutcome::Failed;
            }
            previous = Some(norm);
        }
        NewtonOutcome::Failed
    }
}

/// Adaptive L-stable integration with modified Newton (TR-BDF2 or implicit
/// Euler per `cfg.method`). The Jacobian is reused across steps until Newton
/// struggles; then it is refreshed once before the step is halved, at most
/// four times in a row.
pub fn solve_implicit<S: StiffSystem>(
    system: &S,
    y0: &[f64],
    t0: f64,
    tf: f64,
    cfg: &IntegratorConfig,
    output: &Output,
) -> Result<Trajectory, IntegrateError> {
    cfg.validate()?;
    if !cfg.method.is_implicit() {
        return Err(IntegrateError::InvalidConfig("solve_implicit needs an implicit method".into()));
    }
    let n = system.dim();
    check_span(t0, tf, y0, n)?;
    let mut rec = Recorder::new(system, output);
    let mut imp = Implicit {
        system,
        jac: None,
        jac_fresh: false,
        factor: None,
        stats: StepStats::default(),
    };
    let trbdf2 = cfg.method == Method::TrBdf2;
    // TR-BDF2 constants.
    let gam = 2.0 - std::f64::consts::SQRT_2;
    let d = gam / 2.0;
    let w = std::f64::consts::SQRT_2 / 4.0;
    let order = if trbdf2 { 2.0 } else { 1.0 };

    let mut y = y0.to_vec();
    let mut f0 = vec![0.0; n];
    system.rhs(t0, &y, &mut f0);
    imp.stats.rhs_evaluations += 1;
    rec.start(t0, &y, &f0);
    let fixed = cfg.fixed_step.is_some();
    let mut t = t0;
    let mut h = match (cfg.fixed_step, cfg.initial_step) {
        (Some(h), _) | (None, Some(h)) => h,
        (None, None) => initial_step(system, t0, tf, &y, &f0, order as i32, cfg),
    };
    let mut halvings = 0;
    let mut y_g = vec![0.0; n];
    let mut f_g = vec![0.0; n];
    let mut y1 = vec![0.0; n];
    let mut f1 = vec![0.0; n];
    let mut base = vec![0.0; n];
    let mut scale = vec![0.0; n];
    let mut err = vec![0.0; n];
    while t < tf {
        if imp.stats.accepted + imp.stats.rejected >= cfg.max_steps {
            return Err(IntegrateError::MaxSteps(cfg.max_steps, t));
        }
        let last = t + h >= tf || (tf - (t + h)) < 1e-12 * tf.abs().max(1.0);
        let h_step = if last { tf - t } else { h };
        for i in 0..n {
            scale[i] = cfg.abs_tol + cfg.rel_tol * y[i].abs();
        }
        let outcome = if trbdf2 {
            // Trapezoidal stage to t + gam h, then BDF2 to t + h; both
            // stages share the matrix I - d h J.
            for i in 0..n {
                base[i] = y[i] + d * h_step * f0[i];
                y_g[i] = y[i] + gam * h_step * f0[i];
            }
            match imp.stage(t + gam * h_step, d * h_step, &base, &mut y_g, &mut f_g, &scale) {
                NewtonOutcome::Converged => {
                    for i in 0..n {
                        base[i] = y[i] + w * h_step * (f0[i] + f_g[i]);
                        // Extrapolate through (t, y) and (t + gam h, y_g).
                        y1[i] = y[i] + (y_g[i] - y[i]) / gam;
                    }
                    imp.stage(t + h_step, d * h_step, &base, &mut y1, &mut f1, &scale)
                }
                NewtonOutcome::Failed => NewtonOutcome::Failed,
            }
        } else {
            for i in 0..n {
                base[i] = y[i];
                y1[i] = y[i] + h_step * f0[i];
            }
            imp.stage(t + h_step, h_step, &base, &mut y1, &mut f1, &scale)
        };
        if let NewtonOutcome::Failed = outcome {
            imp.stats.newton_failures += 1;
            if !imp.jac_fresh {
                imp.jac = None;
                continue;
            }
            halvings += 1;
            if halvings > 4 || fixed {
                return Err(IntegrateError::NewtonFailure { t, halvings: halvings.min(4) });
            }
            h = h_step * 0.5;
            imp.jac = None;
            continue;
        }
        halvings = 0;
        // Local error estimate, filtered through (I - d h J)^{-1} so that it
        // stays bounded on stiff components.
        let en = if fixed {
            0.0
        } else {
            if trbdf2 {
                let c0 = (1.0 - 4.0 * w) / 3.0;
                let c1 = 1.0 / 3.0;
                let c2 = -2.0 * d / 3.0;
                for i in 0..n {
                    err[i] = h_step * (c0 * f0[i] + c1 * f_g[i] + c2 * f1[i]);
                }
                let (_, factor) = imp.factor.as_ref().expect("factor present");
                system.solve(factor, &mut err);
            } else {
                for i in 0..n {
                    err[i] = 0.5 * h_step * (f1[i] - f0[i]);
                }
                let (_, factor) = imp.factor.as_ref().expect("factor present");
                system.solve(factor, &mut err);
            }
            error_norm(&err, &y, &y1, cfg)
        };
        if !en.is_finite() {
            imp.stats.rejected += 1;
            h = h_step * 0.2;
            imp.jac = None;
            if h < cfg.min_step {
                return Err(IntegrateError::StiffnessSuspected { t, step: h });
            }
            continue;
        }
        if fixed || en <= 1.0 {
            let t_new = if last { tf } else { t + h_step };
            rec.step(t, &y, &f0, t_new, &y1, &f1);
            std::mem::swap(&mut y, &mut y1);
            std::mem::swap(&mut f0, &mut f1);
            t = t_new;
            imp.stats.accepted += 1;
            imp.jac_fresh = false;
            if !fixed {
                let factor = (0.9 * en.max(1e-10).powf(-1.0 / (order + 1.0))).clamp(0.2, 5.0);
                // Small changes are not worth a refactorization.
                if !(1.0..=1.2).contains(&factor) {
                    h = (h_step * factor).min(cfg.max_step);
                } else {
                    h = h_step;
                }
            }
        } else {
            imp.stats.rejected += 1;
            let factor = (0.9 * en.powf(-1.0 / (order + 1.0))).clamp(0.2, 0.9);
            h = h_step * factor;
            if h < cfg.min_step {
                return Err(IntegrateError::StiffnessSuspected { t, step: h });
            }
        }
    }
    let mut traj = rec.traj;
    traj.stats = imp.stats;
    Ok(traj)
}

/// Dispatch on `cfg.method`.
pub fn solve<S: StiffSystem>(
    system: &S,
    y0: &[f64],
    t0: f64,
    tf: f64,
    cfg: &IntegratorConfig,
    output: &Output,
) -> Result<Trajectory, IntegrateError> {
    if cfg.method.is_implicit() {
        solve_implicit(system, y0, t0, tf, cfg, output)
    } else {
        solve_explicit(system, y0, t0, tf, cfg, output)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay() -> DenseJacobian<FnSystem<impl Fn(f64, &[f64], &mut [f64])>, impl Fn(f64, &[f64]) -> DMatrix<f64>> {
        DenseJacobian {
            system: FnSystem {
                dim: 1,
                rhs: |_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = -y[0],
            },
            jacobian: |_t: f64, _y: &[f64]| DMatrix::from_element(1, 1, -1.0),
        }
    }

    #[test]
    fn linear_test_equation() {
        let sys = decay();
        let cfg = IntegratorConfig::new(Method::ExplicitRk, 1e-10);
        let traj = solve_explicit(&sys, &[1.0], 0.0, 1.0, &cfg, &Output::Steps).unwrap();
        let y = traj.last().unwrap()[0];
        assert!((y - (-1.0f64).exp()).abs() < 10.0 * 1e-10, "{y}");
        assert!(traj.is_well_formed());
    }

    #[test]
    fn constant_solution_has_no_rejections() {
        let sys = FnSystem {
            dim: 2,
            rhs: |_t: f64, _y: &[f64], dy: &mut [f64]| dy.fill(0.0),
        };
        let cfg = IntegratorConfig::new(Method::ExplicitRk, 1e-8);
        let traj = solve_explicit(&sys, &[1.0, -2.0], 0.0, 5.0, &cfg, &Output::Steps).unwrap();
        assert_eq!(traj.stats.rejected, 0);
        assert!(traj.states.iter().all(|s| s == &[1.0, -2.0]));
    }

    #[test]
    fn implicit_euler_single_step_closed_form() {
        let lambda = -3.0;
        let sys = DenseJacobian {
            system: FnSystem {
                dim: 1,
                rhs: move |_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = lambda * y[0],
            },
            jacobian: move |_t: f64, _y: &[f64]| DMatrix::from_element(1, 1, lambda),
        };
        let dt = 0.1;
        let cfg = IntegratorConfig::fixed(Method::ImplicitEuler, dt);
        let traj = solve_implicit(&sys, &[2.0], 0.0, dt, &cfg, &Output::Steps).unwrap();
        let want = 2.0 / (1.0 - lambda * dt);
        assert!((traj.last().unwrap()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn l_stability_smoke() {
        for method in [Method::ImplicitEuler, Method::TrBdf2] {
            let sys = DenseJacobian {
                system: FnSystem {
                    dim: 1,
                    rhs: |_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = -1e6 * y[0],
                },
                jacobian: |_t: f64, _y: &[f64]| DMatrix::from_element(1, 1, -1e6),
            };
            let cfg = IntegratorConfig::fixed(method, 1.0);
            let traj = solve_implicit(&sys, &[1.0], 0.0, 1.0, &cfg, &Output::Steps).unwrap();
            assert!(traj.last().unwrap()[0].abs() <= 1.0);
        }
    }

    #[test]
    fn stiff_cosine_tracking() {
        let sys = DenseJacobian {
            system: FnSystem {
                dim: 1,
                rhs: |t: f64, y: &[f64], dy: &mut [f64]| dy[0] = -1e6 * (y[0] - t.cos()),
            },
            jacobian: |_t: f64, _y: &[f64]| DMatrix::from_element(1, 1, -1e6),
        };
        let cfg = IntegratorConfig {
            method: Method::TrBdf2,
            abs_tol: 1e-6,
            rel_tol: 1e-6,
            ..IntegratorConfig::default()
        };
        let traj = solve_implicit(&sys, &[0.0], 0.0, 2.0, &cfg, &Output::Steps).unwrap();
        let y = traj.last().unwrap()[0];
        assert!((y - 2f64.cos()).abs() < 1e-5, "{y}");
        assert!(traj.stats.accepted < 2000, "{:?}", traj.stats);
        let largest = traj.times.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        assert!(largest > 1e-3);
    }

    fn fixed_step_error(method: Method, h: f64) -> f64 {
        let sys = decay();
        let cfg = IntegratorConfig::fixed(method, h);
        let traj = solve(&sys, &[1.0], 0.0, 1.0, &cfg, &Output::Steps).unwrap();
        (traj.last().unwrap()[0] - (-1.0f64).exp()).abs()
    }

    #[test]
    fn observed_orders() {
        for (method, order, h) in [
            (Method::ExplicitRk, 5.0, 0.1),
            (Method::ImplicitEuler, 1.0, 0.01),
            (Method::TrBdf2, 2.0, 0.01),
        ] {
            let e1 = fixed_step_error(method, h);
            let e2 = fixed_step_error(method, h / 2.0);
            let p = (e1 / e2).log2();
            assert!((p - order).abs() < 0.15, "{method:?}: observed order {p}");
        }
    }

    #[test]
    fn tolerance_proportionality() {
        let sys = FnSystem {
            dim: 2,
            rhs: |_t: f64, y: &[f64], dy: &mut [f64]| {
                dy[0] = y[1];
                dy[1] = -y[0];
            },
        };
        let run = |tol: f64| {
            let cfg = IntegratorConfig::new(Method::ExplicitRk, tol);
            let traj = solve_explicit(&sys, &[1.0, 0.0], 0.0, 10.0, &cfg, &Output::Steps).unwrap();
            (traj.last().unwrap()[0] - 10f64.cos()).abs()
        };
        let e1 = run(1e-7);
        let e2 = run(5e-8);
        assert!(e1 / e2 >= 1.5, "{e1} {e2}");
    }

    #[test]
    fn dense_output_matches_steps() {
        let sys = decay();
        let cfg = IntegratorConfig::new(Method::ExplicitRk, 1e-10);
        let out = Output::uniform(0.0, 2.0, 40);
        let traj = solve_explicit(&sys, &[1.0], 0.0, 2.0, &cfg, &out).unwrap();
        assert_eq!(traj.len(), 41);
        for (t, y) in traj.times.iter().zip(&traj.states) {
            assert!((y[0] - (-t).exp()).abs() < 1e-7, "t={t}");
        }
        let mid = traj.sample(1.025).unwrap()[0];
        assert!((mid - (-1.025f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn invalid_configuration_rejected() {
        let cfg = IntegratorConfig {
            abs_tol: 1e-16,
            ..IntegratorConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = IntegratorConfig {
            min_step: 1.0,
            max_step: 0.5,
            ..IntegratorConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn step_underflow_reports_stiffness() {
        // Finite-time blow-up: y' = y^2, y(0) = 1 explodes at t = 1.
        let sys = FnSystem {
            dim: 1,
            rhs: |_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = y[0] * y[0],
        };
        let cfg = IntegratorConfig {
            min_step: 1e-10,
            ..IntegratorConfig::new(Method::ExplicitRk, 1e-8)
        };
        let err = solve_explicit(&sys, &[1.0], 0.0, 2.0, &cfg, &Output::Steps).unwrap_err();
        assert!(matches!(err, IntegrateError::StiffnessSuspected { .. } | IntegrateError::NonFinite(_)), "{err}");
    }
}
