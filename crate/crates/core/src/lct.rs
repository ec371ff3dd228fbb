//! The linear chain trick: a DDE whose memory states are Erlang mixture
//! convolutions `z_i = ∫ α̂_i(t - s) h_i(x(s)) ds` is equivalent to an ODE in
//! `x` and the chain states `Z`:
//!
//! ```text
//! x' = f(t, x, C Z),    Z' = A Z + B h(x)
//! ```
//!
//! where each channel contributes a lower-bidiagonal block
//! `A_i = a_i (L - I)`, `b_i = a_i e_1` and the coefficient row `c_i`.
//! The blocks are never stored densely; products and solves use the
//! bidiagonal structure directly, and dense matrices are assembled only on
//! request.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::integrate::{dense_newton_factor, dense_newton_solve, OdeSystem, StiffSystem};
use crate::kernels::{erlang_basis, ErlangMixture};
use crate::quadrature::{integrate_with_breaks, QuadConfig};

/// A DDE with distributed delays,
/// `x' = f(t, x, z)`, `z_i(t) = ∫_{-∞}^t α_i(t - s) h_i(x(s)) ds`.
///
/// Implementations must be reentrant.
pub trait Model: Send + Sync {
    fn nx(&self) -> usize;
    fn nz(&self) -> usize;

    fn f(&self, t: f64, x: &[f64], z: &[f64], out: &mut [f64]);
    fn h(&self, t: f64, x: &[f64], out: &mut [f64]);

    /// `F = ∂f/∂x`, `nx × nx`.
    fn jac_x(&self, t: f64, x: &[f64], z: &[f64]) -> DMatrix<f64>;
    /// `G = ∂f/∂z`, `nx × nz`.
    fn jac_z(&self, t: f64, x: &[f64], z: &[f64]) -> DMatrix<f64>;
    /// `H = ∂h/∂x`, `nz × nx`.
    fn jac_h(&self, t: f64, x: &[f64]) -> DMatrix<f64>;

    /// The state for `t <= t0`; constant unless overridden.
    fn history(&self, t: f64, out: &mut [f64]);

    /// Whether [`Model::history`] is constant in time.
    fn constant_history(&self) -> bool {
        true
    }

    /// Start of the simulation interval.
    fn t0(&self) -> f64 {
        0.0
    }

    fn initial_state(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.nx()];
        self.history(self.t0(), &mut x);
        x
    }
}

#[derive(Debug, Error)]
pub enum LctError {
    #[error("an LCT system needs at least one channel")]
    NoChannels,
    #[error("model has {model} memory channels but {given} mixtures were given")]
    ChannelMismatch { model: usize, given: usize },
    #[error("steady-state Newton iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    SteadyState { iterations: usize, residual: f64 },
    #[error("singular steady-state Jacobian F + G H at iteration {0}")]
    SingularJacobian(usize),
    #[error("history quadrature failed for channel {channel}: {reason}")]
    History { channel: usize, reason: String },
}

#[derive(Debug, Clone)]
struct Channel {
    mixture: ErlangMixture,
    offset: usize,
}

/// Chain blocks for one Erlang mixture per memory channel.
#[derive(Debug, Clone)]
pub struct LctSystem {
    channels: Vec<Channel>,
    dim: usize,
}

impl LctSystem {
    pub fn new(mixtures: Vec<ErlangMixture>) -> Result<Self, LctError> {
        if mixtures.is_empty() {
            return Err(LctError::NoChannels);
        }
        let mut offset = 0;
        let channels = mixtures
            .into_iter()
            .map(|mixture| {
                let ch = Channel { offset, mixture };
                offset += ch.mixture.order() + 1;
                ch
            })
            .collect();
        Ok(Self { channels, dim: offset })
    }

    /// Total number of chain states, `M + n_z`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nz(&self) -> usize {
        self.channels.len()
    }

    pub fn mixture(&self, i: usize) -> &ErlangMixture {
        &self.channels[i].mixture
    }

    pub fn mixtures(&self) -> impl Iterator<Item = &ErlangMixture> {
        self.channels.iter().map(|c| &c.mixture)
    }

    /// Index range of channel `i` within `Z`.
    pub fn block(&self, i: usize) -> std::ops::Range<usize> {
        let ch = &self.channels[i];
        ch.offset..ch.offset + ch.mixture.order() + 1
    }

    /// `out = A Z + B r`.
    pub fn chain_rhs(&self, zs: &[f64], r: &[f64], out: &mut [f64]) {
        for (i, ch) in self.channels.iter().enumerate() {
            let a = ch.mixture.rate();
            let z = &zs[self.block(i)];
            let o = &mut out[self.block(i)];
            o[0] = a * (r[i] - z[0]);
            for m in 1..z.len() {
                o[m] = a * (z[m - 1] - z[m]);
            }
        }
    }

    /// Memory outputs `z = C Z`.
    pub fn memory(&self, zs: &[f64], out: &mut [f64]) {
        for (i, ch) in self.channels.iter().enumerate() {
            out[i] = ch.mixture.coeffs().iter().zip(&zs[self.block(i)]).map(|(c, z)| c * z).sum();
        }
    }

    /// `A^{-1} v` by forward substitution on each bidiagonal block.
    pub fn solve_a(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, ch) in self.channels.iter().enumerate() {
            let a = ch.mixture.rate();
            let range = self.block(i);
            let (src, dst) = (&v[range.clone()], &mut out[range]);
            // a (z_{m-1} - z_m) = v_m with z_{-1} = 0.
            let mut prev = 0.0;
            for m in 0..src.len() {
                let z = prev - src[m] / a;
                dst[m] = z;
                prev = z;
            }
        }
        out
    }

    /// `(I - g A)^{-1} v` in place, block by block.
    fn solve_shifted(&self, g: f64, v: &mut [f64]) {
        for i in 0..self.channels.len() {
            let a = self.channels[i].mixture.rate();
            let d = 1.0 + g * a;
            let block = &mut v[self.block(i)];
            let mut prev = 0.0;
            for value in block.iter_mut() {
                let z = (*value + g * a * prev) / d;
                *value = z;
                prev = z;
            }
        }
    }

    /// `k_i = c_i (I - g A_i)^{-1} b_i`.
    fn shifted_gains(&self, g: f64) -> Vec<f64> {
        self.channels
            .iter()
            .map(|ch| {
                let a = ch.mixture.rate();
                let d = 1.0 + g * a;
                let mut z = a / d;
                let mut sum = 0.0;
                for c in ch.mixture.coeffs() {
                    sum += c * z;
                    z *= g * a / d;
                }
                sum
            })
            .collect()
    }

    pub fn a_matrix(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.channels.len() {
            let rate = self.channels[i].mixture.rate();
            let range = self.block(i);
            for k in range.clone() {
                a[(k, k)] = -rate;
                if k > range.start {
                    a[(k, k - 1)] = rate;
                }
            }
        }
        a
    }

    pub fn b_matrix(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.dim, self.nz());
        for (i, ch) in self.channels.iter().enumerate() {
            b[(ch.offset, i)] = ch.mixture.rate();
        }
        b
    }

    pub fn c_matrix(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.nz(), self.dim);
        for (i, ch) in self.channels.iter().enumerate() {
            for (m, v) in ch.mixture.coeffs().iter().enumerate() {
                c[(i, ch.offset + m)] = *v;
            }
        }
        c
    }

    /// `-C A^{-1} B`, which is the identity for mixtures summing to one.
    pub fn steady_gain(&self) -> DMatrix<f64> {
        let b = self.b_matrix();
        let mut out = DMatrix::zeros(self.nz(), self.nz());
        for j in 0..self.nz() {
            let col: Vec<f64> = b.column(j).iter().copied().collect();
            let x = self.solve_a(&col);
            let mut z = vec![0.0; self.nz()];
            self.memory(&x, &mut z);
            for i in 0..self.nz() {
                out[(i, j)] = -z[i];
            }
        }
        out
    }

    /// `c_i A_i^{-1} b_i` for channel `i` (equal to `-Σ c_m`).
    pub fn block_gain(&self, i: usize) -> f64 {
        let ch = &self.channels[i];
        let a = ch.mixture.rate();
        let range = self.block(i);
        let mut v = vec![0.0; self.dim];
        v[range.start] = a;
        let x = self.solve_a(&v);
        ch.mixture.coeffs().iter().zip(&x[range]).map(|(c, z)| c * z).sum()
    }

    /// Chain states at a steady input `r`: every state of channel `i` equals `r_i`.
    pub fn steady_memory(&self, r: &[f64]) -> Vec<f64> {
        let mut zs = vec![0.0; self.dim];
        for i in 0..self.nz() {
            zs[self.block(i)].fill(r[i]);
        }
        zs
    }
}

/// `(x', Z')` of the augmented ODE, with `y = [x; Z]`.
pub fn augmented_rhs(model: &dyn Model, lct: &LctSystem, t: f64, y: &[f64], dy: &mut [f64]) {
    let nx = model.nx();
    let (x, zs) = y.split_at(nx);
    let (dx, dz) = dy.split_at_mut(nx);
    let mut z = vec![0.0; lct.nz()];
    lct.memory(zs, &mut z);
    model.f(t, x, &z, dx);
    let mut r = vec![0.0; lct.nz()];
    model.h(t, x, &mut r);
    lct.chain_rhs(zs, &r, dz);
}

/// Chain states for a constant history: channel `i` filled with `h_i(x0)`.
pub fn initial_memory(model: &dyn Model, lct: &LctSystem) -> Vec<f64> {
    let mut r = vec![0.0; model.nz()];
    let t0 = model.t0();
    model.h(t0, &model.initial_state(), &mut r);
    lct.steady_memory(&r)
}

/// Chain states for a general history,
/// `Z_{i,m}(t0) = ∫_0^∞ ℓ_m(u) h_i(x(t0 - u)) du`,
/// by adaptive quadrature. Reduces to [`initial_memory`] for constant histories.
pub fn initial_memory_from_history(model: &dyn Model, lct: &LctSystem) -> Result<Vec<f64>, LctError> {
    if model.constant_history() {
        return Ok(initial_memory(model, lct));
    }
    let t0 = model.t0();
    let mut zs = vec![0.0; lct.dim()];
    let mut x = vec![0.0; model.nx()];
    let mut r = vec![0.0; model.nz()];
    for i in 0..lct.nz() {
        let mix = lct.mixture(i);
        let a = mix.rate();
        let p = mix.order() + 1;
        let end = mix.support_scale();
        let breaks: Vec<f64> = (0..=16).map(|k| end * k as f64 / 16.0).collect();
        let mut basis = vec![0.0; p];
        let q = integrate_with_breaks(
            |u: f64| {
                model.history(t0 - u, &mut x);
                model.h(t0 - u, &x, &mut r);
                erlang_basis(a, u, &mut basis);
                DVector::from_iterator(p, basis.iter().map(|l| l * r[i]))
            },
            &breaks,
            &QuadConfig {
                abs_tol: 1e-13,
                rel_tol: 1e-13,
                max_intervals: 20_000,
            },
        )
        .map_err(|e| LctError::History {
            channel: i,
            reason: e.to_string(),
        })?;
        zs[lct.block(i)].copy_from_slice(q.value.as_slice());
    }
    Ok(zs)
}

/// Result of [`steady_state`].
#[derive(Debug, Clone)]
pub struct SteadyState {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Solve `f(t, x, h(x)) = 0` by damped Newton with Armijo backtracking on
/// `‖g‖²`, using the Jacobian `F + G H`.
pub fn steady_state(model: &dyn Model, guess: &[f64], t: f64) -> Result<SteadyState, LctError> {
    let nx = model.nx();
    let nz = model.nz();
    let residual_of = |x: &[f64]| {
        let mut r = vec![0.0; nz];
        model.h(t, x, &mut r);
        let mut g = vec![0.0; nx];
        model.f(t, x, &r, &mut g);
        (DVector::from_vec(g), r)
    };
    let mut x = DVector::from_column_slice(guess);
    let (mut g, mut r) = residual_of(x.as_slice());
    let mut norm = g.norm();
    for iter in 0..100 {
        if norm <= 1e-12 * (1.0 + x.norm()) {
            return Ok(SteadyState {
                x: x.as_slice().to_vec(),
                iterations: iter,
                residual: norm,
            });
        }
        let jac = model.jac_x(t, x.as_slice(), &r) + model.jac_z(t, x.as_slice(), &r) * model.jac_h(t, x.as_slice());
        let step = jac.lu().solve(&(-&g)).ok_or(LctError::SingularJacobian(iter))?;
        let mut lambda = 1.0;
        loop {
            let trial = &x + &step * lambda;
            let (gt, rt) = residual_of(trial.as_slice());
            let nt = gt.norm();
            if nt.is_finite() && (nt * nt <= (1.0 - 1e-4 * lambda) * norm * norm || lambda < 1e-10) {
                x = trial;
                g = gt;
                r = rt;
                norm = nt;
                break;
            }
            lambda *= 0.5;
            if lambda < 1e-10 {
                // Accept the tiny step anyway; the outer loop reports failure.
                x += &step * lambda;
                let (gt, rt) = residual_of(x.as_slice());
                g = gt;
                r = rt;
                norm = g.norm();
                break;
            }
        }
    }
    if norm <= 1e-12 * (1.0 + x.norm()) {
        return Ok(SteadyState {
            x: x.as_slice().to_vec(),
            iterations: 100,
            residual: norm,
        });
    }
    Err(LctError::SteadyState {
        iterations: 100,
        residual: norm,
    })
}

/// Dimension at and below which Newton systems are solved densely.
pub const DENSE_THRESHOLD: usize = 200;

/// The augmented ODE as an integrable system. Trajectories observe
/// `[x; z]` with `z = C Z` rather than the full chain.
pub struct LctOde<'a> {
    pub model: &'a dyn Model,
    pub lct: &'a LctSystem,
}

impl<'a> LctOde<'a> {
    pub fn new(model: &'a dyn Model, lct: &'a LctSystem) -> Result<Self, LctError> {
        if model.nz() != lct.nz() {
            return Err(LctError::ChannelMismatch {
                model: model.nz(),
                given: lct.nz(),
            });
        }
        Ok(Self { model, lct })
    }

    /// `[x0; Z0]` from the model's history.
    pub fn initial_state(&self) -> Result<Vec<f64>, LctError> {
        let mut y = self.model.initial_state();
        y.extend(initial_memory_from_history(self.model, self.lct)?);
        Ok(y)
    }

    /// Dense augmented Jacobian `[[F, G C], [B H, A]]` at `y`.
    pub fn dense_jacobian(&self, t: f64, y: &[f64]) -> DMatrix<f64> {
        let jac = self.jacobian(t, y);
        assemble_jacobian(self.lct, &jac.f, &jac.g, &jac.h)
    }
}

/// `[[F, G C], [B H, A]]`.
pub fn assemble_jacobian(lct: &LctSystem, f: &DMatrix<f64>, g: &DMatrix<f64>, h: &DMatrix<f64>) -> DMatrix<f64> {
    let nx = f.nrows();
    let n = nx + lct.dim();
    let mut j = DMatrix::zeros(n, n);
    j.view_mut((0, 0), (nx, nx)).copy_from(f);
    j.view_mut((0, nx), (nx, lct.dim())).copy_from(&(g * lct.c_matrix()));
    j.view_mut((nx, 0), (lct.dim(), nx)).copy_from(&(lct.b_matrix() * h));
    j.view_mut((nx, nx), (lct.dim(), lct.dim())).copy_from(&lct.a_matrix());
    j
}

/// Model Jacobians at one point of the augmented state.
pub struct LctJacobian {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

pub enum LctFactor {
    Dense(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
    /// Schur complement on the `x` block for `I - g J`; see [`LctOde`]'s
    /// `StiffSystem::solve`.
    Structured {
        gamma: f64,
        schur: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
        g: DMatrix<f64>,
        h: DMatrix<f64>,
    },
}

impl OdeSystem for LctOde<'_> {
    fn dim(&self) -> usize {
        self.model.nx() + self.lct.dim()
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        augmented_rhs(self.model, self.lct, t, y, dy)
    }

    fn observed_dim(&self) -> usize {
        self.model.nx() + self.lct.nz()
    }

    fn observe(&self, y: &[f64], out: &mut [f64]) {
        let nx = self.model.nx();
        out[..nx].copy_from_slice(&y[..nx]);
        self.lct.memory(&y[nx..], &mut out[nx..]);
    }
}

impl StiffSystem for LctOde<'_> {
    type Jacobian = LctJacobian;
    type Factor = LctFactor;

    fn jacobian(&self, t: f64, y: &[f64]) -> LctJacobian {
        let nx = self.model.nx();
        let x = &y[..nx];
        let mut z = vec![0.0; self.lct.nz()];
        self.lct.memory(&y[nx..], &mut z);
        LctJacobian {
            f: self.model.jac_x(t, x, &z),
            g: self.model.jac_z(t, x, &z),
            h: self.model.jac_h(t, x),
        }
    }

    fn factor(&self, jac: &LctJacobian, gamma: f64) -> Option<LctFactor> {
        if self.dim() <= DENSE_THRESHOLD {
            let dense = assemble_jacobian(self.lct, &jac.f, &jac.g, &jac.h);
            return dense_newton_factor(&dense, gamma).map(LctFactor::Dense);
        }
        // Eliminating v = (I - gA)^{-1}(q + g B H u) from
        //   (I - gF) u - g G C v = p,  -g B H u + (I - gA) v = q
        // leaves S u = p + g G C (I - gA)^{-1} q with
        //   S = I - gF - g² G diag(k) H,  k_i = c_i (I - gA_i)^{-1} b_i.
        let nx = self.model.nx();
        let k = DMatrix::from_diagonal(&DVector::from_vec(self.lct.shifted_gains(gamma)));
        let s = DMatrix::identity(nx, nx) - &jac.f * gamma - &jac.g * k * &jac.h * (gamma * gamma);
        let schur = s.lu();
        schur.is_invertible().then(|| LctFactor::Structured {
            gamma,
            schur,
            g: jac.g.clone(),
            h: jac.h.clone(),
        })
    }

    fn solve(&self, factor: &LctFactor, rhs: &mut [f64]) {
        match factor {
            LctFactor::Dense(lu) => dense_newton_solve(lu, rhs),
            LctFactor::Structured { gamma, schur, g, h } => {
                let nx = self.model.nx();
                let (p, q) = rhs.split_at_mut(nx);
                self.lct.solve_shifted(*gamma, q);
                let mut cq = vec![0.0; self.lct.nz()];
                self.lct.memory(q, &mut cq);
                let rhs_u = DVector::from_column_slice(p) + g * DVector::from_vec(cq) * *gamma;
                let u = match schur.solve(&rhs_u) {
                    Some(u) => u,
                    None => {
                        rhs.fill(f64::NAN);
                        return;
                    }
                };
                // v = (I - gA)^{-1} q + g (I - gA)^{-1} B H u; the first term
                // is already in q.
                let hu = h * &u;
                let mut w = vec![0.0; self.lct.dim()];
                for i in 0..self.lct.nz() {
                    let start = self.lct.block(i).start;
                    w[start] = self.lct.mixture(i).rate() * hu[i] * *gamma;
                }
                self.lct.solve_shifted(*gamma, &mut w);
                for (qi, wi) in q.iter_mut().zip(&w) {
                    *qi += wi;
                }
                p.copy_from_slice(u.as_slice());
            }
        }
    }
}
