//! Direct fixed-step integration of distributed-delay DDEs with the
//! convolution truncated at a memory horizon `Δt_h = N_h Δt` and discretised
//! by rectangle rules:
//!
//! * explicit: `x_{n+1} = x_n + f(x_n, z_n) Δt`, `z_{n+1} = Σ_{j=1}^{N_h} α(jΔt) r_{n+1-j} Δt`;
//! * implicit: `x_{n+1} = x_n + f(x_{n+1}, z_{n+1}) Δt`,
//!   `z_{n+1} = Σ_{j=0}^{N_h-1} α(jΔt) r_{n+1-j} Δt`, solved by Newton.
//!
//! Samples before `t0` come from the model's history. With a constant
//! history, the history part of each sum is a suffix sum of the weights, so a
//! step costs `O(n)` rather than `O(N_h)`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::approx::{horizon, ApproxError};
use crate::integrate::Trajectory;
use crate::kernels::KernelSpec;
use crate::lct::Model;
use crate::quadrature::{integrate_with_breaks, QuadConfig};

#[derive(Debug, Error)]
pub enum DdeError {
    #[error("invalid DDE grid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Horizon(#[from] ApproxError),
    #[error("model has {model} memory channels but {given} kernels were given")]
    ChannelMismatch { model: usize, given: usize },
    #[error("solution diverged (non-finite state) at step {step}, t = {t}")]
    Divergence { step: usize, t: f64 },
    #[error("Newton iteration did not converge in step {step} (t = {t}), residual {residual:.3e}")]
    Newton { step: usize, t: f64, residual: f64 },
    #[error("initial memory quadrature failed: {0}")]
    Quadrature(String),
}

/// Tail mass defining the default memory horizon.
pub const DEFAULT_HORIZON_EPSILON: f64 = 1e-12;

/// Time step, memory horizon and precomputed kernel weights `α_i(jΔt)Δt`.
#[derive(Debug, Clone)]
pub struct DdeGrid {
    dt: f64,
    n_h: usize,
    kernels: Vec<KernelSpec>,
    /// `weights[i][j] = α_i(jΔt)Δt` for `j = 0..=N_h`.
    weights: Vec<Vec<f64>>,
    /// `suffix[i][j] = Σ_{k>=j} weights[i][k]`, with `suffix[i][N_h+1] = 0`.
    suffix: Vec<Vec<f64>>,
}

impl DdeGrid {
    /// `dt_h` must be an integer multiple of `dt` (up to rounding).
    pub fn new(kernels: Vec<KernelSpec>, dt: f64, dt_h: f64) -> Result<Self, DdeError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(DdeError::InvalidGrid(format!("step {dt} must be positive")));
        }
        if kernels.is_empty() {
            return Err(DdeError::InvalidGrid("need at least one kernel".into()));
        }
        let n_h = multiple_of(dt_h, dt)
            .filter(|n| *n >= 1)
            .ok_or_else(|| DdeError::InvalidGrid(format!("memory horizon {dt_h} is not a positive multiple of {dt}")))?;
        let weights: Vec<Vec<f64>> = kernels
            .iter()
            .map(|k| (0..=n_h).map(|j| k.density(j as f64 * dt) * dt).collect())
            .collect();
        let suffix = weights
            .iter()
            .map(|w| {
                let mut s = vec![0.0; n_h + 2];
                for j in (0..=n_h).rev() {
                    s[j] = s[j + 1] + w[j];
                }
                s
            })
            .collect();
        Ok(Self {
            dt,
            n_h,
            kernels,
            weights,
            suffix,
        })
    }

    /// Horizon where every kernel's tail mass drops below 1e-12, rounded up
    /// to a multiple of `dt`.
    pub fn with_default_horizon(kernels: Vec<KernelSpec>, dt: f64) -> Result<Self, DdeError> {
        let mut t_h: f64 = 0.0;
        for k in &kernels {
            t_h = t_h.max(horizon(k, DEFAULT_HORIZON_EPSILON, 1e-14)?.t_h);
        }
        let n = (t_h / dt).ceil().max(1.0);
        Self::new(kernels, dt, n * dt)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn horizon_steps(&self) -> usize {
        self.n_h
    }

    pub fn horizon(&self) -> f64 {
        self.n_h as f64 * self.dt
    }

    pub fn nz(&self) -> usize {
        self.kernels.len()
    }

    pub fn weight(&self, channel: usize, j: usize) -> f64 {
        self.weights[channel][j]
    }

    /// `Σ_{j=from}^{to} α_i(jΔt)Δt`, empty when `from > to`.
    pub fn weight_sum(&self, channel: usize, from: usize, to: usize) -> f64 {
        if from > to || from > self.n_h {
            return 0.0;
        }
        let to = to.min(self.n_h);
        self.suffix[channel][from] - self.suffix[channel][to + 1]
    }
}

/// `Some(n)` when `x ≈ n·step` to within a relative 1e-9.
pub fn multiple_of(x: f64, step: f64) -> Option<usize> {
    if !(x >= 0.0 && x.is_finite()) {
        return None;
    }
    let n = (x / step).round();
    ((n * step - x).abs() <= 1e-9 * x.max(step)).then_some(n as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdeMethod {
    Explicit,
    Implicit,
}

/// The samples `r_k = h(x(t_0 + kΔt))` for `k <= 0` and computed ones.
struct Memory<'a> {
    grid: &'a DdeGrid,
    constant: Option<Vec<f64>>,
    /// `past[j-1] = r(t0 - jΔt)` for `j = 1..=N_h`, non-constant histories only.
    past: Vec<Vec<f64>>,
    /// `r_k` for `k = 0..`.
    present: Vec<Vec<f64>>,
}

impl<'a> Memory<'a> {
    fn new(model: &dyn Model, grid: &'a DdeGrid) -> Self {
        let t0 = model.t0();
        let mut x = vec![0.0; model.nx()];
        let mut r = vec![0.0; model.nz()];
        model.history(t0, &mut x);
        model.h(t0, &x, &mut r);
        let (constant, past) = if model.constant_history() {
            (Some(r.clone()), Vec::new())
        } else {
            let past = (1..=grid.n_h)
                .map(|j| {
                    let t = t0 - j as f64 * grid.dt;
                    let mut x = vec![0.0; model.nx()];
                    let mut r = vec![0.0; model.nz()];
                    model.history(t, &mut x);
                    model.h(t, &x, &mut r);
                    r
                })
                .collect();
            (None, past)
        };
        Self {
            grid,
            constant,
            past,
            present: vec![r],
        }
    }

    /// `Σ_{j=lo}^{hi} w_j r_{n-j}` for every channel, where `n` is the index of
    /// the step being formed (`r_n` itself is only used when `lo = 0`).
    fn sum(&self, n: usize, lo: usize, hi: usize, out: &mut [f64]) {
        let g = self.grid;
        for (i, o) in out.iter_mut().enumerate() {
            let w = &g.weights[i];
            let mut acc = 0.0;
            // Indices with n - j >= 0 use computed samples.
            let known_hi = hi.min(n);
            for j in lo.max(1)..=known_hi {
                acc += w[j] * self.present[n - j][i];
            }
            if lo == 0 && n < self.present.len() {
                acc += w[0] * self.present[n][i];
            }
            // History part: j in (n, hi].
            if hi > n {
                let from = (n + 1).max(lo);
                match &self.constant {
                    Some(r0) => acc += r0[i] * g.weight_sum(i, from, hi),
                    None => {
                        for j in from..=hi {
                            acc += w[j] * self.past[j - n - 1][i];
                        }
                    }
                }
            }
            *o = acc;
        }
    }
}

/// `z(t0) = ∫_0^{Δt_h} α_i(s) h_i(x(t0 - s)) ds`, exact for constant histories.
fn initial_memory(model: &dyn Model, grid: &DdeGrid) -> Result<Vec<f64>, DdeError> {
    let t0 = model.t0();
    let nz = model.nz();
    let mut x = vec![0.0; model.nx()];
    let mut r = vec![0.0; nz];
    let t_h = grid.horizon();
    let mut out = vec![0.0; nz];
    if model.constant_history() {
        model.history(t0, &mut x);
        model.h(t0, &x, &mut r);
        for i in 0..nz {
            out[i] = r[i] * (1.0 - crate::approx::tail_mass(&grid.kernels[i], t_h)?);
        }
        return Ok(out);
    }
    let pieces = 64;
    let breaks: Vec<f64> = (0..=pieces).map(|k| t_h * k as f64 / pieces as f64).collect();
    let cfg = QuadConfig {
        abs_tol: 1e-13,
        rel_tol: 1e-13,
        max_intervals: 20_000,
    };
    let q = integrate_with_breaks(
        |s: f64| {
            model.history(t0 - s, &mut x);
            model.h(t0 - s, &x, &mut r);
            DVector::from_iterator(nz, (0..nz).map(|i| grid.kernels[i].density(s) * r[i]))
        },
        &breaks,
        &cfg,
    )
    .map_err(|e| DdeError::Quadrature(e.to_string()))?;
    out.copy_from_slice(q.value.as_slice());
    Ok(out)
}

fn steps_between(t0: f64, tf: f64, dt: f64) -> Result<usize, DdeError> {
    multiple_of(tf - t0, dt)
        .filter(|n| *n >= 1)
        .ok_or_else(|| DdeError::InvalidGrid(format!("interval [{t0}, {tf}] is not a positive multiple of {dt}")))
}

fn check_channels(model: &dyn Model, grid: &DdeGrid) -> Result<(), DdeError> {
    if model.nz() != grid.nz() {
        return Err(DdeError::ChannelMismatch {
            model: model.nz(),
            given: grid.nz(),
        });
    }
    Ok(())
}

/// Trajectory with samples `[x_n; z_n]` at every step.
fn finish(model: &dyn Model, dt: f64, t0: f64, xs: Vec<Vec<f64>>, zs: Vec<Vec<f64>>) -> Trajectory {
    let n = xs.len();
    let mut traj = Trajectory::default();
    let mut fx = vec![0.0; model.nx()];
    for k in 0..n {
        let t = t0 + k as f64 * dt;
        model.f(t, &xs[k], &zs[k], &mut fx);
        let mut state = xs[k].clone();
        state.extend_from_slice(&zs[k]);
        let mut deriv = fx.clone();
        // Memory derivatives by finite differences on the grid.
        let (lo, hi) = (k.saturating_sub(1), (k + 1).min(n - 1));
        let span = (hi - lo) as f64 * dt;
        deriv.extend(zs[hi].iter().zip(&zs[lo]).map(|(a, b)| if span > 0.0 { (a - b) / span } else { 0.0 }));
        traj.push(t, state, deriv);
    }
    traj.stats.accepted = n.saturating_sub(1);
    traj
}

/// Explicit Euler with left-rectangle convolution.
pub fn dde_explicit(model: &dyn Model, grid: &DdeGrid, tf: f64) -> Result<Trajectory, DdeError> {
    check_channels(model, grid)?;
    let t0 = model.t0();
    let dt = grid.dt;
    let steps = steps_between(t0, tf, dt)?;
    let nx = model.nx();
    let nz = model.nz();
    let mut mem = Memory::new(model, grid);
    let mut xs = vec![model.initial_state()];
    let mut zs = vec![initial_memory(model, grid)?];
    let mut fx = vec![0.0; nx];
    for n in 0..steps {
        let t = t0 + n as f64 * dt;
        model.f(t, &xs[n], &zs[n], &mut fx);
        let x: Vec<f64> = xs[n].iter().zip(&fx).map(|(x, f)| x + f * dt).collect();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DdeError::Divergence { step: n + 1, t: t + dt });
        }
        let mut r = vec![0.0; nz];
        model.h(t + dt, &x, &mut r);
        mem.present.push(r);
        let mut z = vec![0.0; nz];
        mem.sum(n + 1, 1, grid.n_h, &mut z);
        xs.push(x);
        zs.push(z);
    }
    Ok(finish(model, dt, t0, xs, zs))
}

/// Implicit Euler with right-rectangle convolution; each step solves
/// `x - x_n - f(x, z(x)) Δt = 0` by Newton with the Jacobian
/// `I - (F + G diag(α(0)Δt) H) Δt`.
pub fn dde_implicit(model: &dyn Model, grid: &DdeGrid, tf: f64) -> Result<Trajectory, DdeError> {
    check_channels(model, grid)?;
    let t0 = model.t0();
    let dt = grid.dt;
    let steps = steps_between(t0, tf, dt)?;
    let nx = model.nx();
    let nz = model.nz();
    let w0: Vec<f64> = (0..nz).map(|i| grid.weights[i][0]).collect();
    let mut mem = Memory::new(model, grid);
    let mut xs = vec![model.initial_state()];
    let mut zs = vec![initial_memory(model, grid)?];
    let mut rest = vec![0.0; nz];
    let mut fx = vec![0.0; nx];
    let mut r = vec![0.0; nz];
    let mut newton_iterations = 0;
    for n in 0..steps {
        let t = t0 + (n + 1) as f64 * dt;
        // Everything but the j = 0 term is fixed during the step.
        mem.sum(n + 1, 1, grid.n_h - 1, &mut rest);
        let xn = DVector::from_column_slice(&xs[n]);
        let mut x = xn.clone();
        let memory_of = |x: &[f64], r: &mut [f64]| -> Vec<f64> {
            model.h(t, x, r);
            (0..nz).map(|i| rest[i] + w0[i] * r[i]).collect()
        };
        let mut converged = false;
        let mut residual = f64::INFINITY;
        for _ in 0..50 {
            newton_iterations += 1;
            let z = memory_of(x.as_slice(), &mut r);
            model.f(t, x.as_slice(), &z, &mut fx);
            let res = &x - &xn - DVector::from_column_slice(&fx) * dt;
            residual = res.norm();
            if !residual.is_finite() {
                return Err(DdeError::Divergence { step: n + 1, t });
            }
            if residual <= 1e-12 * (1.0 + x.norm()) {
                converged = true;
                break;
            }
            let jf = model.jac_x(t, x.as_slice(), &z);
            let jg = model.jac_z(t, x.as_slice(), &z);
            let jh = model.jac_h(t, x.as_slice());
            let coupling = jg * DMatrix::from_diagonal(&DVector::from_column_slice(&w0)) * jh;
            let jac = DMatrix::identity(nx, nx) - (jf + coupling) * dt;
            let step = jac.lu().solve(&res).ok_or(DdeError::Newton { step: n + 1, t, residual })?;
            x -= &step;
            if step.norm() <= 4.0 * f64::EPSILON * (1.0 + x.norm()) {
                // No further progress is possible in floating point.
                let z = memory_of(x.as_slice(), &mut r);
                model.f(t, x.as_slice(), &z, &mut fx);
                residual = (&x - &xn - DVector::from_column_slice(&fx) * dt).norm();
                converged = residual <= 1e-10 * (1.0 + x.norm());
                break;
            }
        }
        if !converged {
            return Err(DdeError::Newton { step: n + 1, t, residual });
        }
        let z = memory_of(x.as_slice(), &mut r);
        mem.present.push(r.clone());
        xs.push(x.as_slice().to_vec());
        zs.push(z);
    }
    let mut traj = finish(model, dt, t0, xs, zs);
    traj.stats.rhs_evaluations = newton_iterations;
    Ok(traj)
}

pub fn dde_solve(model: &dyn Model, grid: &DdeGrid, tf: f64, method: DdeMethod) -> Result<Trajectory, DdeError> {
    match method {
        DdeMethod::Explicit => dde_explicit(model, grid, tf),
        DdeMethod::Implicit => dde_implicit(model, grid, tf),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `x' = -k x + g z`, `h(x) = x`, constant or exponential history.
    struct Linear {
        k: f64,
        g: f64,
        x0: f64,
        growing_history: bool,
    }

    impl Model for Linear {
        fn nx(&self) -> usize {
            1
        }
        fn nz(&self) -> usize {
            1
        }
        fn f(&self, _t: f64, x: &[f64], z: &[f64], out: &mut [f64]) {
            out[0] = -self.k * x[0] + self.g * z[0];
        }
        fn h(&self, _t: f64, x: &[f64], out: &mut [f64]) {
            out[0] = x[0];
        }
        fn jac_x(&self, _t: f64, _x: &[f64], _z: &[f64]) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, -self.k)
        }
        fn jac_z(&self, _t: f64, _x: &[f64], _z: &[f64]) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, self.g)
        }
        fn jac_h(&self, _t: f64, _x: &[f64]) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, 1.0)
        }
        fn history(&self, t: f64, out: &mut [f64]) {
            out[0] = if self.growing_history { self.x0 * (0.3 * t).exp() } else { self.x0 };
        }
        fn constant_history(&self) -> bool {
            !self.growing_history
        }
    }

    fn exp_grid(dt: f64, dt_h: f64) -> DdeGrid {
        DdeGrid::new(vec![KernelSpec::exponential(1.0).unwrap()], dt, dt_h).unwrap()
    }

    #[test]
    fn horizon_must_be_multiple() {
        assert!(DdeGrid::new(vec![KernelSpec::gaussian_halfline()], 0.1, 0.25).is_err());
        let g = DdeGrid::new(vec![KernelSpec::gaussian_halfline()], 0.1, 0.3).unwrap();
        assert_eq!(g.horizon_steps(), 3);
    }

    #[test]
    fn default_horizon_is_multiple_and_covers_tail() {
        let g = DdeGrid::with_default_horizon(vec![KernelSpec::exponential(1.0).unwrap()], 0.1).unwrap();
        assert!(g.horizon() >= -(1e-12f64).ln());
        assert!(multiple_of(g.horizon(), 0.1).is_some());
    }

    #[test]
    fn zero_rhs_keeps_state() {
        let model = Linear {
            k: 0.0,
            g: 0.0,
            x0: 1.7,
            growing_history: false,
        };
        let grid = exp_grid(0.1, 5.0);
        for method in [DdeMethod::Explicit, DdeMethod::Implicit] {
            let traj = dde_solve(&model, &grid, 3.0, method).unwrap();
            assert_eq!(traj.len(), 31);
            assert!(traj.states.iter().all(|s| s[0] == 1.7));
        }
    }

    #[test]
    fn constant_history_memory_is_left_rule_mass() {
        let model = Linear {
            k: 0.0,
            g: 0.0,
            x0: 2.0,
            growing_history: false,
        };
        let grid = exp_grid(0.05, 4.0);
        let traj = dde_explicit(&model, &grid, 1.0).unwrap();
        let mass: f64 = (1..=grid.horizon_steps()).map(|j| grid.weight(0, j)).sum();
        for s in traj.states.iter().skip(1) {
            assert!((s[1] - 2.0 * mass).abs() < 1e-13);
        }
    }

    #[test]
    fn implicit_decay_closed_form() {
        let k = 3.0;
        let model = Linear {
            k,
            g: 0.0,
            x0: 1.0,
            growing_history: false,
        };
        let dt = 0.1;
        let traj = dde_implicit(&model, &exp_grid(dt, 2.0), 1.0).unwrap();
        for (n, s) in traj.states.iter().enumerate() {
            let want = (1.0 + k * dt).powi(-(n as i32));
            assert!((s[0] - want).abs() < 1e-12 * want.max(1.0));
        }
    }

    /// Direct evaluation of the memory sums, for comparison with the
    /// suffix-sum and history shortcuts.
    fn direct_memory(model: &Linear, grid: &DdeGrid, xs: &[f64], n: usize, lo: usize, hi: usize) -> f64 {
        (lo..=hi)
            .map(|j| {
                let k = n as isize - j as isize;
                let x = if k >= 0 {
                    xs[k as usize]
                } else {
                    let mut h = [0.0];
                    model.history(k as f64 * grid.dt(), &mut h);
                    h[0]
                };
                grid.weight(0, j) * x
            })
            .sum()
    }

    #[test]
    fn memory_matches_direct_sum() {
        for growing_history in [false, true] {
            let model = Linear {
                k: 0.5,
                g: 0.8,
                x0: 1.0,
                growing_history,
            };
            let grid = exp_grid(0.1, 3.0);
            let ex = dde_explicit(&model, &grid, 5.0).unwrap();
            let xs = ex.component(0);
            for n in 1..xs.len() {
                let want = direct_memory(&model, &grid, &xs, n, 1, grid.horizon_steps());
                assert!((ex.states[n][1] - want).abs() < 1e-13, "n={n}");
            }
            let im = dde_implicit(&model, &grid, 5.0).unwrap();
            let xs = im.component(0);
            for n in 1..xs.len() {
                let want = direct_memory(&model, &grid, &xs, n, 0, grid.horizon_steps() - 1);
                assert!((im.states[n][1] - want).abs() < 1e-13, "n={n}");
            }
        }
    }

    #[test]
    fn explicit_and_implicit_converge_together() {
        let model = Linear {
            k: 1.0,
            g: 0.5,
            x0: 1.0,
            growing_history: true,
        };
        let gap = |dt: f64| {
            let grid = exp_grid(dt, 30.0);
            let a = dde_explicit(&model, &grid, 4.0).unwrap();
            let b = dde_implicit(&model, &grid, 4.0).unwrap();
            a.component(0)
                .iter()
                .zip(b.component(0))
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        let g1 = gap(0.02);
        let g2 = gap(0.01);
        let ratio = g1 / g2;
        assert!((1.7..2.3).contains(&ratio), "ratio {ratio}");
    }
}
