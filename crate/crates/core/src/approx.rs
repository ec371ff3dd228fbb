//! Erlang mixture approximation of a regular kernel: approximation horizon,
//! constrained least-squares fit of coefficients and rate, and the
//! theoretical-coefficient reference fit.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::kernels::{erlang_basis, erlang_rate_derivatives, ErlangMixture, KernelError, KernelSpec};
use crate::linalg::PivotedQr;
use crate::quadrature::{integrate, integrate_density_to_infinity, NotConverged, QuadConfig};

#[derive(Debug, Error)]
pub enum ApproxError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Quadrature(#[from] NotConverged<f64>),
    #[error("kernel tail never falls below {epsilon:e} within {doublings} bracket doublings")]
    BracketExpansion { epsilon: f64, doublings: usize },
    #[error("invalid fit problem: {0}")]
    InvalidProblem(String),
}

/// Cumulative kernel mass `beta(t) = int_0^t alpha(s) ds`.
pub fn beta(kernel: &KernelSpec, t: f64) -> Result<f64, ApproxError> {
    if t <= 0.0 {
        return Ok(0.0);
    }
    if let Some(b) = kernel.analytic_cumulative(t) {
        return Ok(b);
    }
    Ok(integrate(|s| kernel.density(s), 0.0, t, &QuadConfig::abs(1e-13))?.value)
}

/// Tail mass `1 - beta(t)`, computed without cancellation when possible.
pub fn tail_mass(kernel: &KernelSpec, t: f64) -> Result<f64, ApproxError> {
    if t <= 0.0 {
        return Ok(1.0);
    }
    if let Some(tail) = kernel.analytic_tail(t) {
        return Ok(tail);
    }
    let scale = 0.05 * kernel.support_scale();
    Ok(integrate_density_to_infinity(|u| kernel.density(t + u), scale, &QuadConfig::abs(1e-16))?.value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonResult {
    pub t_h: f64,
    pub epsilon: f64,
    pub iterations: usize,
    /// `|1 - beta(t_h) - epsilon|`.
    pub residual: f64,
    /// False when the bracket collapsed to floating-point resolution before
    /// the residual target was met.
    pub converged: bool,
}

const MAX_DOUBLINGS: usize = 200;

/// Bisection for `1 - beta(t_h) = epsilon`.
///
/// An invalid bracket is repaired first: the lower end is halved towards
/// zero and the upper end is pushed out by doubling the width.
pub fn find_horizon(
    kernel: &KernelSpec,
    epsilon: f64,
    bracket: (f64, f64),
    tol: f64,
) -> Result<HorizonResult, ApproxError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(ApproxError::InvalidProblem(format!("epsilon {epsilon} not in (0, 1)")));
    }
    let (mut lo, mut hi) = (bracket.0.max(0.0), bracket.1);
    if !(hi > lo) {
        hi = lo + 1.0;
    }
    let mut lo_tail = tail_mass(kernel, lo)?;
    while lo_tail <= epsilon && lo > 0.0 {
        lo = if lo < 1e-300 { 0.0 } else { 0.5 * lo };
        lo_tail = tail_mass(kernel, lo)?;
    }
    let mut doublings = 0;
    while tail_mass(kernel, hi)? >= epsilon {
        if doublings == MAX_DOUBLINGS {
            return Err(ApproxError::BracketExpansion {
                epsilon,
                doublings,
            });
        }
        let width = hi - lo;
        lo = hi;
        hi += 2.0 * width;
        doublings += 1;
    }

    let mut iterations = 0;
    loop {
        let mid = 0.5 * (lo + hi);
        iterations += 1;
        let residual = tail_mass(kernel, mid)? - epsilon;
        if residual.abs() < tol {
            return Ok(HorizonResult {
                t_h: mid,
                epsilon,
                iterations,
                residual: residual.abs(),
                converged: true,
            });
        }
        if !(mid > lo && mid < hi) {
            return Ok(HorizonResult {
                t_h: mid,
                epsilon,
                iterations,
                residual: residual.abs(),
                converged: false,
            });
        }
        if residual < 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
}

/// Horizon with a default bracket `[0, support scale]`.
pub fn horizon(kernel: &KernelSpec, epsilon: f64, tol: f64) -> Result<HorizonResult, ApproxError> {
    find_horizon(kernel, epsilon, (0.0, kernel.support_scale()), tol)
}

/// Least-squares fitting problem on the left-rectangle grid `t_k = k t_h / N`.
#[derive(Debug, Clone)]
pub struct FitProblem {
    kernel: KernelSpec,
    order: usize,
    t_h: f64,
    samples: usize,
    a_min: f64,
    kkt_tol: f64,
    max_iterations: usize,
    target: Vec<f64>,
}

impl FitProblem {
    /// Problem with `N = max(100, 4(M+1))` samples and `a_min = 1e-6 / t_h`.
    pub fn new(kernel: KernelSpec, order: usize, t_h: f64) -> Result<Self, ApproxError> {
        let samples = (4 * (order + 1)).max(100);
        Self::with_samples(kernel, order, t_h, samples)
    }

    pub fn with_samples(kernel: KernelSpec, order: usize, t_h: f64, samples: usize) -> Result<Self, ApproxError> {
        if !(t_h > 0.0 && t_h.is_finite()) {
            return Err(ApproxError::InvalidProblem(format!("horizon {t_h} must be positive")));
        }
        if samples < order + 1 {
            return Err(ApproxError::InvalidProblem(format!(
                "need at least M+1 = {} samples, got {samples}",
                order + 1
            )));
        }
        let dt = t_h / samples as f64;
        let target = (0..samples).map(|k| kernel.density(k as f64 * dt)).collect();
        Ok(Self {
            kernel,
            order,
            t_h,
            samples,
            a_min: 1e-6 / t_h,
            kkt_tol: 1e-10,
            max_iterations: 500,
            target,
        })
    }

    pub fn with_a_min(mut self, a_min: f64) -> Result<Self, ApproxError> {
        if !(a_min > 0.0) {
            return Err(ApproxError::InvalidProblem("a_min must be positive".into()));
        }
        self.a_min = a_min;
        Ok(self)
    }

    pub fn with_tolerance(mut self, kkt_tol: f64, max_iterations: usize) -> Self {
        self.kkt_tol = kkt_tol;
        self.max_iterations = max_iterations.max(1);
        self
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn horizon(&self) -> f64 {
        self.t_h
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn a_min(&self) -> f64 {
        self.a_min
    }

    pub fn dt(&self) -> f64 {
        self.t_h / self.samples as f64
    }

    pub fn grid(&self) -> impl Iterator<Item = f64> + '_ {
        let dt = self.dt();
        (0..self.samples).map(move |k| k as f64 * dt)
    }

    /// `1/2 sum alpha(t_k)^2 dt`, the objective of the zero kernel.
    fn reference_scale(&self) -> f64 {
        0.5 * self.target.iter().map(|v| v * v).sum::<f64>() * self.dt()
    }

    /// Basis matrix `L[k][m] = l_m(t_k)`.
    fn basis(&self, a: f64) -> DMatrix<f64> {
        let p = self.order + 1;
        let mut l = DMatrix::zeros(self.samples, p);
        let mut row = vec![0.0; p];
        for (k, t) in self.grid().enumerate() {
            erlang_basis(a, t, &mut row);
            for (m, v) in row.iter().enumerate() {
                l[(k, m)] = *v;
            }
        }
        l
    }

    /// `(phi, dphi/da, d2phi/da2)` at fixed coefficients.
    fn rate_profile(&self, a: f64, c: &[f64]) -> (f64, f64, f64) {
        let dt = self.dt();
        let mut row = vec![0.0; c.len()];
        let (mut phi, mut d1, mut d2) = (0.0, 0.0, 0.0);
        for (k, t) in self.grid().enumerate() {
            erlang_basis(a, t, &mut row);
            let (mut fit, mut fit_a, mut fit_aa) = (0.0, 0.0, 0.0);
            for (m, (&l, &cm)) in row.iter().zip(c).enumerate() {
                let (la, laa) = erlang_rate_derivatives(m, a, t, l);
                fit += cm * l;
                fit_a += cm * la;
                fit_aa += cm * laa;
            }
            let e = self.target[k] - fit;
            phi += e * e;
            d1 -= e * fit_a;
            d2 += fit_a * fit_a - e * fit_aa;
        }
        (0.5 * phi * dt, d1 * dt, d2 * dt)
    }
}

/// Objective value, gradient and Hessian over `(c_0, ..., c_M, a)`.
#[derive(Debug, Clone)]
pub struct Objective {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// `phi = 1/2 sum_k (alpha(t_k) - alpha_hat(t_k))^2 dt` with analytic
/// derivatives. The rate is the last variable.
pub fn objective(problem: &FitProblem, mixture: &ErlangMixture) -> Result<Objective, ApproxError> {
    if mixture.order() != problem.order {
        return Err(ApproxError::InvalidProblem(format!(
            "mixture order {} differs from problem order {}",
            mixture.order(),
            problem.order
        )));
    }
    let a = mixture.rate();
    let c = mixture.coeffs();
    let p = c.len();
    let dt = problem.dt();
    let mut value = 0.0;
    let mut gradient = DVector::zeros(p + 1);
    let mut hessian = DMatrix::zeros(p + 1, p + 1);
    let mut l = vec![0.0; p];
    let mut la = vec![0.0; p];
    for (k, t) in problem.grid().enumerate() {
        erlang_basis(a, t, &mut l);
        let (mut fit, mut fit_a, mut fit_aa) = (0.0, 0.0, 0.0);
        for m in 0..p {
            let (d1, d2) = erlang_rate_derivatives(m, a, t, l[m]);
            la[m] = d1;
            fit += c[m] * l[m];
            fit_a += c[m] * d1;
            fit_aa += c[m] * d2;
        }
        let e = problem.target[k] - fit;
        value += e * e;
        for m in 0..p {
            gradient[m] -= e * l[m];
            for n in m..p {
                hessian[(m, n)] += l[m] * l[n];
            }
            hessian[(m, p)] += l[m] * fit_a - e * la[m];
        }
        gradient[p] -= e * fit_a;
        hessian[(p, p)] += fit_a * fit_a - e * fit_aa;
    }
    for m in 0..=p {
        for n in m..=p {
            hessian[(m, n)] *= dt;
            hessian[(n, m)] = hessian[(m, n)];
        }
    }
    Ok(Objective {
        value: 0.5 * value * dt,
        gradient: gradient * dt,
        hessian,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMethod {
    LeastSquares,
    Theoretical,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitReport {
    /// KKT residual below tolerance, or the rate pinned to working precision.
    pub converged: bool,
    pub iterations: usize,
    /// First-order optimality residual relative to the objective of the zero kernel.
    pub kkt_residual: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub mixture: ErlangMixture,
    pub objective: f64,
    pub kernel_error: f64,
    pub method: FitMethod,
    pub report: FitReport,
}

/// Default number of points in the kernel error `E_alpha`.
pub const DEFAULT_KERNEL_ERROR_POINTS: usize = 10_000;

/// `E_alpha = sum_{k<K} (alpha_hat(t_k) - alpha(t_k))^2 dt` on a uniform grid over `[0, t_h]`.
pub fn kernel_error(mixture: &ErlangMixture, kernel: &KernelSpec, points: usize, t_h: f64) -> f64 {
    assert!(points >= 2, "kernel error needs at least two points");
    let dt = t_h / points as f64;
    let mut buf = Vec::new();
    (0..points)
        .map(|k| {
            let t = k as f64 * dt;
            let e = mixture.eval_with(t, &mut buf) - kernel.density(t);
            e * e
        })
        .sum::<f64>()
        * dt
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = v.iter().map(|x| if x.is_finite() { *x } else { 0.0 }).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - 1.0) / (i + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    let mut out: Vec<f64> = v
        .iter()
        .map(|x| if x.is_finite() { (x - theta).max(0.0) } else { 0.0 })
        .collect();
    // Remove the last rounding error in the sum from the largest entry.
    let sum: f64 = out.iter().sum();
    if let Some(big) = out.iter_mut().max_by(|a, b| a.total_cmp(b)) {
        *big = (*big + 1.0 - sum).clamp(0.0, 1.0);
    }
    out
}

/// Reduced form of `min 1/2 ||W (L c - alpha)||^2` for a fixed rate:
/// `1/2 ||R c - d||^2 + residual`.
struct CoefficientProblem {
    r: DMatrix<f64>,
    d: DVector<f64>,
    residual: f64,
}

impl CoefficientProblem {
    fn new(problem: &FitProblem, a: f64) -> Self {
        let w = problem.dt().sqrt();
        let l = problem.basis(a) * w;
        let p = l.ncols();
        let b = DVector::from_iterator(problem.samples, problem.target.iter().map(|v| v * w));
        let qr = l.qr();
        let mut qtb = b;
        qr.q_tr_mul(&mut qtb);
        let residual = 0.5 * qtb.rows(p, qtb.len() - p).norm_squared();
        Self {
            r: qr.r(),
            d: qtb.rows(0, p).into_owned(),
            residual,
        }
    }

    fn value(&self, c: &[f64]) -> f64 {
        let c = DVector::from_column_slice(c);
        0.5 * (&self.r * c - &self.d).norm_squared() + self.residual
    }

    fn gradient(&self, c: &[f64]) -> DVector<f64> {
        let c = DVector::from_column_slice(c);
        self.r.tr_mul(&(&self.r * c - &self.d))
    }

    /// Least squares over the free set with `sum c = 1`, eliminating the
    /// pivot coefficient.
    fn solve_free(&self, free: &[usize], pivot: usize) -> Vec<f64> {
        let p = self.r.ncols();
        let mut y = vec![0.0; p];
        let others: Vec<usize> = free.iter().copied().filter(|&j| j != pivot).collect();
        if others.is_empty() {
            y[pivot] = 1.0;
            return y;
        }
        let rp = self.r.column(pivot);
        let mut m = DMatrix::zeros(p, others.len());
        for (col, &j) in others.iter().enumerate() {
            m.set_column(col, &(self.r.column(j) - rp));
        }
        let rhs = &self.d - rp;
        let x = PivotedQr::new(m, 1e-13).solve(&rhs);
        let mut sum = 0.0;
        for (col, &j) in others.iter().enumerate() {
            y[j] = x[col];
            sum += x[col];
        }
        y[pivot] = 1.0 - sum;
        y
    }

    /// KKT residual of the simplex-constrained problem at `c`, together with
    /// the most violated inactive index.
    fn multipliers(&self, c: &[f64], free: &[bool]) -> (f64, Option<usize>) {
        let g = self.gradient(c);
        let n_free = free.iter().filter(|f| **f).count().max(1);
        let nu = -free
            .iter()
            .zip(g.iter())
            .filter(|(f, _)| **f)
            .map(|(_, g)| *g)
            .sum::<f64>()
            / n_free as f64;
        let mut residual: f64 = 0.0;
        let mut worst: Option<(usize, f64)> = None;
        for (j, gj) in g.iter().enumerate() {
            let mu = gj + nu;
            if free[j] {
                residual = residual.max(mu.abs());
            } else if mu < 0.0 {
                residual = residual.max(-mu);
                if worst.is_none_or(|(_, w)| mu < w) {
                    worst = Some((j, mu));
                }
            }
        }
        (residual, worst.map(|(j, _)| j))
    }

    /// Active-set solve of `min 1/2 ||R c - d||^2` on the simplex, warm
    /// started from a feasible `start`.
    fn solve(&self, start: &[f64], mult_tol: f64) -> Vec<f64> {
        let p = self.r.ncols();
        let mut c = project_simplex(start);
        let mut free: Vec<bool> = c.iter().map(|v| *v > 0.0).collect();
        let mut blocked = vec![false; p];
        let start_value = self.value(&c);
        let max_iter = 20 * p + 100;
        for _ in 0..max_iter {
            let free_idx: Vec<usize> = (0..p).filter(|&j| free[j]).collect();
            let pivot = *free_idx
                .iter()
                .max_by(|&&i, &&j| c[i].total_cmp(&c[j]))
                .expect("free set is never empty");
            let y = self.solve_free(&free_idx, pivot);
            let negative: Vec<usize> = free_idx.iter().copied().filter(|&j| y[j] < 0.0).collect();
            if !negative.is_empty() {
                // Step towards y until the first coefficient hits zero.
                let (mut step, mut hit) = (1.0, negative[0]);
                for &j in &negative {
                    let s = c[j] / (c[j] - y[j]);
                    if s < step {
                        step = s;
                        hit = j;
                    }
                }
                let mut changed = false;
                for &j in &free_idx {
                    let v = c[j] + step * (y[j] - c[j]);
                    changed |= v != c[j];
                    c[j] = v;
                }
                c[hit] = 0.0;
                free[hit] = false;
                for &j in &free_idx {
                    if c[j] <= 0.0 {
                        c[j] = 0.0;
                        free[j] = false;
                    }
                }
                if !free.iter().any(|f| *f) {
                    free[pivot] = true;
                    c[pivot] = 1.0;
                }
                if step == 0.0 && !changed {
                    // The index just added cannot enter; keep it out.
                    blocked[hit] = true;
                } else {
                    blocked.iter_mut().for_each(|b| *b = false);
                }
                renormalize(&mut c);
                continue;
            }
            for &j in &free_idx {
                c[j] = y[j];
            }
            renormalize(&mut c);
            blocked.iter_mut().for_each(|b| *b = false);
            let (_, worst) = self.multipliers(&c, &free);
            let candidate = worst.filter(|&j| !blocked[j] && self.violation(&c, &free, j) > mult_tol);
            match candidate {
                Some(j) => free[j] = true,
                None => break,
            }
        }
        if self.value(&c) > start_value {
            let fallback = project_simplex(start);
            if self.value(&fallback) <= self.value(&c) {
                return fallback;
            }
        }
        c
    }

    fn violation(&self, c: &[f64], free: &[bool], j: usize) -> f64 {
        let g = self.gradient(c);
        let n_free = free.iter().filter(|f| **f).count().max(1);
        let nu = -free
            .iter()
            .zip(g.iter())
            .filter(|(f, _)| **f)
            .map(|(_, g)| *g)
            .sum::<f64>()
            / n_free as f64;
        -(g[j] + nu)
    }
}

fn renormalize(c: &mut [f64]) {
    for v in c.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let sum: f64 = c.iter().sum();
    if sum > 0.0 {
        c.iter_mut().for_each(|v| *v /= sum);
    }
}

struct Iterate {
    a: f64,
    c: Vec<f64>,
    phi: f64,
    slope: f64,
    curvature: f64,
    c_residual: f64,
}

fn evaluate(problem: &FitProblem, a: f64, warm: &[f64], mult_tol: f64) -> Iterate {
    let sub = CoefficientProblem::new(problem, a);
    let c = sub.solve(warm, mult_tol);
    let free: Vec<bool> = c.iter().map(|v| *v > 0.0).collect();
    let (c_residual, _) = sub.multipliers(&c, &free);
    let (phi, slope, curvature) = problem.rate_profile(a, &c);
    Iterate {
        a,
        c,
        phi,
        slope,
        curvature,
        c_residual,
    }
}

fn kkt(problem: &FitProblem, it: &Iterate, scale: f64) -> f64 {
    let a_residual = if it.a <= problem.a_min {
        (-it.slope).max(0.0) * it.a
    } else {
        it.slope.abs() * it.a
    };
    it.c_residual.max(a_residual) / scale
}

/// Constrained least-squares fit of coefficients and rate.
///
/// Each iteration solves the convex coefficient problem exactly for the
/// current rate (active set on the simplex) and then updates the rate with a
/// safeguarded secant/Newton step on the reduced objective, whose slope is
/// `dphi/da` at the optimal coefficients.
///
/// Without `init` the start is the theoretical fit, unless a coarse scan of
/// rates `2^{k/2} (M+1)/t_h`, `k = -2..=10`, finds a lower reduced objective;
/// the objective is multimodal in the rate when the kernel is much narrower
/// than the horizon. An infeasible `init` is projected onto the simplex.
pub fn fit_least_squares(problem: &FitProblem, init: Option<&ErlangMixture>) -> Result<FitResult, ApproxError> {
    let (a0, c0) = match init {
        Some(mix) => {
            if mix.order() != problem.order {
                return Err(ApproxError::InvalidProblem("initial mixture has the wrong order".into()));
            }
            (mix.rate(), mix.coeffs().to_vec())
        }
        None => {
            let a = (problem.order + 1) as f64 / problem.t_h;
            let theory = theoretical_coefficients(&problem.kernel, a, problem.order)?;
            let mult_tol = multiplier_tolerance(problem);
            let mut best = evaluate(problem, a, &theory, mult_tol);
            let mut warm = best.c.clone();
            for k in (-2..=10).filter(|k| *k != 0) {
                let candidate = (a * 2f64.powf(0.5 * k as f64)).max(problem.a_min);
                let it = evaluate(problem, candidate, &warm, mult_tol);
                warm = it.c.clone();
                if it.phi < best.phi {
                    best = it;
                }
            }
            (best.a, best.c)
        }
    };
    fit_from(problem, a0.max(problem.a_min), &c0)
}

fn multiplier_tolerance(problem: &FitProblem) -> f64 {
    1e-3 * problem.kkt_tol * problem.reference_scale().max(f64::MIN_POSITIVE)
}

/// Like [`fit_least_squares`] with a raw, possibly infeasible start.
pub fn fit_least_squares_from(problem: &FitProblem, a0: f64, c0: &[f64]) -> Result<FitResult, ApproxError> {
    if c0.len() != problem.order + 1 {
        return Err(ApproxError::InvalidProblem("initial coefficients have the wrong length".into()));
    }
    if !(a0 > 0.0 && a0.is_finite()) {
        return Err(KernelError::InvalidRate(a0).into());
    }
    fit_from(problem, a0.max(problem.a_min), c0)
}

fn fit_from(problem: &FitProblem, a0: f64, c0: &[f64]) -> Result<FitResult, ApproxError> {
    let scale = problem.reference_scale().max(f64::MIN_POSITIVE);
    let mult_tol = multiplier_tolerance(problem);
    let mut current = evaluate(problem, a0, &project_simplex(c0), mult_tol);
    // Rates known to enclose a local minimizer together with `current.a`:
    // every accepted step decreases the reduced objective, and a rejected
    // trial bounds the search on its side.
    let mut lower: Option<f64> = None;
    let mut upper: Option<f64> = None;
    let mut previous: Option<(f64, f64)> = None;
    let mut iterations = 0;
    let mut residual = kkt(problem, &current, scale);
    let mut stalled = false;
    while residual > problem.kkt_tol && iterations < problem.max_iterations {
        iterations += 1;
        let a = current.a;
        if current.slope == 0.0 {
            break;
        }
        let forward = current.slope < 0.0;
        let bound = if forward { upper } else { lower };
        let secant = previous.and_then(|(ap, sp)| {
            let ds = current.slope - sp;
            (ds != 0.0 && ap != a).then(|| a - current.slope * (a - ap) / ds)
        });
        let model = match (secant, previous) {
            (Some(x), _) if (x > a) == forward => Some(x),
            // Negative secant curvature: the fixed-coefficient curvature
            // overestimates the reduced one, so expand instead.
            (_, Some((ap, _))) => Some(if forward { a + 2.0 * (a - ap).abs() } else { a - 2.0 * (a - ap).abs() }),
            _ => (current.curvature > 0.0).then(|| a - current.slope / current.curvature),
        };
        let proposal = match bound {
            Some(b) => {
                let (near, far) = (a + 0.05 * (b - a), a + 0.95 * (b - a));
                match model {
                    Some(x) => x.clamp(near.min(far), near.max(far)),
                    None => 0.5 * (a + b),
                }
            }
            None => model.unwrap_or(if forward { 2.0 * a } else { 0.5 * a }).clamp(0.5 * a, 2.0 * a),
        }
        .max(problem.a_min);
        if proposal == a || (proposal - a).abs() <= 1e-15 * a {
            break;
        }
        let trial = evaluate(problem, proposal, &current.c, mult_tol);
        if trial.phi < current.phi {
            if forward {
                lower = Some(a);
            } else {
                upper = Some(a);
            }
            previous = Some((a, current.slope));
            current = trial;
            residual = kkt(problem, &current, scale);
        } else {
            if forward {
                upper = Some(trial.a);
            } else {
                lower = Some(trial.a);
            }
            previous = Some((trial.a, trial.slope));
            // A rejected step whose predicted decrease is below rounding of
            // the objective: the minimizer is resolved to working precision
            // (typically a kink where the active set changes).
            if (current.slope * (trial.a - a)).abs() <= 1e-14 * current.phi {
                stalled = true;
                break;
            }
        }
        if current.a <= problem.a_min && current.slope >= 0.0 {
            break;
        }
        if let (Some(l), Some(u)) = (lower, upper) {
            if u - l <= 1e-12 * current.a {
                // The rate is pinned to working precision: the objective
                // cannot resolve a further change.
                if current.slope.abs() * (u - l) <= 1e-14 * current.phi.max(scale) {
                    stalled = true;
                }
                break;
            }
        }
    }
    let mixture = ErlangMixture::with_sum_tolerance(current.a, current.c.clone(), 1e-10)?;
    let kernel_error = kernel_error(&mixture, &problem.kernel, DEFAULT_KERNEL_ERROR_POINTS, problem.t_h);
    Ok(FitResult {
        objective: current.phi,
        kernel_error,
        method: FitMethod::LeastSquares,
        report: FitReport {
            converged: residual <= problem.kkt_tol || stalled,
            iterations,
            kkt_residual: residual,
        },
        mixture,
    })
}

/// Coefficients `c_m = beta((m+1)/a) - beta(m/a)` for `m = 0..=M`.
pub fn theoretical_coefficients(kernel: &KernelSpec, a: f64, order: usize) -> Result<Vec<f64>, ApproxError> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(KernelError::InvalidRate(a).into());
    }
    let mut tails = Vec::with_capacity(order + 2);
    for m in 0..=order + 1 {
        tails.push(tail_mass(kernel, m as f64 / a)?);
    }
    Ok(tails.windows(2).map(|w| (w[0] - w[1]).max(0.0)).collect())
}

/// Reference fit with `a = (M+1)/t_h` and unscaled theoretical coefficients.
pub fn fit_theoretical(problem: &FitProblem) -> Result<FitResult, ApproxError> {
    let a = (problem.order + 1) as f64 / problem.t_h;
    let coeffs = theoretical_coefficients(&problem.kernel, a, problem.order)?;
    let deficit = (1.0 - coeffs.iter().sum::<f64>()).abs();
    let mixture = ErlangMixture::with_sum_tolerance(a, coeffs, deficit + 1e-12)?;
    let (phi, _, _) = problem.rate_profile(a, mixture.coeffs());
    let kernel_error = kernel_error(&mixture, &problem.kernel, DEFAULT_KERNEL_ERROR_POINTS, problem.t_h);
    Ok(FitResult {
        mixture,
        objective: phi,
        kernel_error,
        method: FitMethod::Theoretical,
        report: FitReport {
            converged: true,
            iterations: 0,
            kkt_residual: f64::NAN,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::make_kernel;
    use crate::special::erfc;
    use proptest::prelude::*;

    #[test]
    fn beta_examples() {
        let g = KernelSpec::gaussian_halfline();
        assert!((beta(&g, 1.0).unwrap() - 0.842_701).abs() < 1e-6);
        assert_eq!(beta(&g, 0.0).unwrap(), 0.0);
        let e = KernelSpec::exponential(1.0).unwrap();
        assert!((beta(&e, 2.0).unwrap() - 0.864_665).abs() < 1e-6);
        // quadrature path agrees with the analytic one
        let custom = KernelSpec::custom("exp", |t: f64| (-t).exp(), 1.0).unwrap();
        assert!((beta(&custom, 2.0).unwrap() - (1.0 - (-2.0_f64).exp())).abs() < 1e-12);
        assert!((tail_mass(&custom, 10.0).unwrap() / (-10.0_f64).exp() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn horizon_examples() {
        let e = KernelSpec::exponential(1.0).unwrap();
        let h = find_horizon(&e, 1e-6, (0.0, 100.0), 1e-12).unwrap();
        assert!((h.t_h - 13.815_511).abs() < 1e-5, "{}", h.t_h);
        assert!(h.converged);

        let g = KernelSpec::gaussian_halfline();
        let tol = 1e-17;
        let h = find_horizon(&g, 1e-14, (0.0, 10.0), tol).unwrap();
        let tail = erfc(h.t_h);
        assert!((tail - 1e-14).abs() <= tol, "tail {tail}");

        let repaired = find_horizon(&e, 1e-6, (5.0, 6.0), 1e-12).unwrap();
        assert!((repaired.t_h - 13.815_511).abs() < 1e-5);
    }

    #[test]
    fn horizon_iteration_count_is_logarithmic() {
        let e = KernelSpec::exponential(1.0).unwrap();
        // tol in t of 1e-6 corresponds to tail tol 1e-12 near the root
        let h = find_horizon(&e, 1e-6, (0.0, 32.0), 1e-12).unwrap();
        let bound = (32.0_f64 / 1e-6).log2().ceil() as usize + 3;
        assert!(h.iterations <= bound, "{} > {bound}", h.iterations);
    }

    #[test]
    fn horizon_bracket_failure() {
        // Tail e^{-1e-200 t} needs t ~ 1e201, beyond 200 doublings of a unit bracket.
        let slow = KernelSpec::exponential(1e-200).unwrap();
        assert!(matches!(
            find_horizon(&slow, 1e-10, (0.0, 1.0), 1e-12),
            Err(ApproxError::BracketExpansion { .. })
        ));
        assert!(matches!(
            find_horizon(&KernelSpec::gaussian_halfline(), 0.0, (0.0, 1.0), 1e-3),
            Err(ApproxError::InvalidProblem(_))
        ));
    }

    fn gaussian_problem(order: usize, samples: usize) -> FitProblem {
        let g = KernelSpec::gaussian_halfline();
        let h = horizon(&g, 1e-14, 1e-15).unwrap();
        FitProblem::with_samples(g, order, h.t_h, samples).unwrap()
    }

    #[test]
    fn theoretical_exponential_coefficient() {
        let e = KernelSpec::exponential(1.0).unwrap();
        let c = theoretical_coefficients(&e, 1.0, 5).unwrap();
        assert!((c[0] - 0.632_121).abs() < 1e-6);
        assert!((c[0] - (1.0 - (-1.0_f64).exp())).abs() < 1e-15);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn theoretical_sum_is_one_minus_epsilon() {
        for kernel in [
            KernelSpec::gaussian_halfline(),
            make_kernel("folded-normal-sum", &[0.5, 0.35, 0.06, 0.5, 0.45, 0.12]).unwrap(),
            make_kernel("precursor", &[0.3010, 2.0, 0.1]).unwrap(),
        ] {
            let eps = 1e-10;
            let h = horizon(&kernel, eps, 1e-16).unwrap();
            let problem = FitProblem::new(kernel, 20, h.t_h).unwrap();
            let fit = fit_theoretical(&problem).unwrap();
            let sum: f64 = fit.mixture.coeffs().iter().sum();
            assert!((sum - (1.0 - eps)).abs() < 1e-10 + 1e-13, "sum {sum}");
            assert!(fit.mixture.coeffs().iter().all(|c| *c >= 0.0));
        }
    }

    #[test]
    fn objective_is_zero_for_exact_target() {
        let mix = ErlangMixture::new(3.0, vec![0.2, 0.3, 0.5]).unwrap();
        let k = KernelSpec::erlang_mixture(mix.clone());
        let problem = FitProblem::new(k, 2, 12.0).unwrap();
        let obj = objective(&problem, &mix).unwrap();
        assert_eq!(obj.value, 0.0);
        assert!(obj.gradient.amax() == 0.0);
    }

    #[test]
    fn objective_derivatives_match_finite_differences() {
        let problem = gaussian_problem(6, 60);
        let mix = ErlangMixture::new(2.3, vec![0.05, 0.2, 0.25, 0.2, 0.15, 0.1, 0.05]).unwrap();
        let obj = objective(&problem, &mix).unwrap();
        let p = 7;
        let eval = |c: &[f64], a: f64| {
            // objective without simplex checks for perturbed points
            let (phi, _, _) = problem.rate_profile(a, c);
            phi
        };
        let grad_at = |c: &[f64], a: f64| {
            let m = ErlangMixture::with_sum_tolerance(a, c.to_vec(), 1.0).unwrap();
            objective(&problem, &m).unwrap().gradient
        };
        let c0 = mix.coeffs().to_vec();
        let a0 = mix.rate();
        for v in 0..=p {
            let h = if v == p { 1e-5 * a0 } else { 1e-6 };
            let (mut cp, mut cm) = (c0.clone(), c0.clone());
            let (mut ap, mut am) = (a0, a0);
            if v == p {
                ap += h;
                am -= h;
            } else {
                cp[v] += h;
                cm[v] -= h;
            }
            let fd = (eval(&cp, ap) - eval(&cm, am)) / (2.0 * h);
            let scale = obj.gradient.amax();
            assert!((obj.gradient[v] - fd).abs() <= 1e-6 * scale, "grad {v}");
            let fd_row = (grad_at(&cp, ap) - grad_at(&cm, am)) / (2.0 * h);
            let hscale = obj.hessian.amax();
            for w in 0..=p {
                assert!((obj.hessian[(v, w)] - fd_row[w]).abs() <= 1e-6 * hscale, "hess {v},{w}");
            }
        }
        // c-c block is a Gram matrix: symmetric positive semidefinite
        let block = obj.hessian.view((0, 0), (p, p)).into_owned();
        assert!((&block - block.transpose()).amax() == 0.0);
        let eig = block.symmetric_eigenvalues();
        assert!(eig.iter().all(|l| *l >= -1e-14 * hscale_of(&block)));
    }

    fn hscale_of(m: &DMatrix<f64>) -> f64 {
        m.amax()
    }

    #[test]
    fn self_recovery_of_known_mixture() {
        let mix = ErlangMixture::new(3.0, vec![0.2, 0.3, 0.5]).unwrap();
        let k = KernelSpec::erlang_mixture(mix.clone());
        let h = horizon(&k, 1e-14, 1e-16).unwrap();
        let problem = FitProblem::new(k, 2, h.t_h).unwrap();
        let fit = fit_least_squares(&problem, None).unwrap();
        assert!(fit.objective <= 1e-18, "phi = {}", fit.objective);
        for (got, want) in fit.mixture.coeffs().iter().zip(mix.coeffs()) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
        assert!((fit.mixture.rate() - 3.0).abs() < 1e-6);
    }

    #[test]
    fn least_squares_beats_theoretical() {
        let problem = gaussian_problem(16, 100);
        let theory = fit_theoretical(&problem).unwrap();
        let ls = fit_least_squares(&problem, None).unwrap();
        assert!(ls.objective < theory.objective);
        assert!(ls.kernel_error <= theory.kernel_error);
        assert!(ls.report.kkt_residual <= 1e-8, "{:?}", ls.report);
    }

    #[test]
    fn infeasible_start_is_projected() {
        let problem = gaussian_problem(4, 40);
        let fit = fit_least_squares_from(&problem, 2.0, &[2.0, -1.0, 0.3, 0.0, 5.0]).unwrap();
        let c = fit.mixture.coeffs();
        assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn kernel_error_refines_and_decreases_with_order() {
        let mix = ErlangMixture::new(3.0, vec![0.2, 0.3, 0.5]).unwrap();
        let exact = KernelSpec::erlang_mixture(mix.clone());
        assert_eq!(kernel_error(&mix, &exact, 100, 5.0), 0.0);

        let mut errors = Vec::new();
        for m in [4usize, 8, 16] {
            let problem = gaussian_problem(m, 4 * (m + 1));
            let fit = fit_least_squares(&problem, None).unwrap();
            let e1 = kernel_error(&fit.mixture, problem.kernel(), 10_000, problem.horizon());
            let e2 = kernel_error(&fit.mixture, problem.kernel(), 20_000, problem.horizon());
            assert!((e1 - e2).abs() < 0.05 * e2, "grid refinement M={m}: {e1} vs {e2}");
            errors.push(e1);
        }
        assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
    }

    #[test]
    fn simplex_projection() {
        let p = project_simplex(&[0.5, 0.5]);
        assert_eq!(p, vec![0.5, 0.5]);
        let p = project_simplex(&[3.0, 0.0, -1.0]);
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
        let p = project_simplex(&[0.4, 0.4, 0.4]);
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fitted_coefficients_stay_on_simplex(order in 1usize..8, a_scale in 0.3f64..3.0) {
            let problem = gaussian_problem(order, 4 * (order + 1)).with_tolerance(1e-8, 20);
            let a0 = a_scale * (order + 1) as f64 / problem.horizon();
            let start = vec![1.0 / (order + 1) as f64; order + 1];
            let fit = fit_least_squares_from(&problem, a0, &start).unwrap();
            let c = fit.mixture.coeffs();
            prop_assert!(c.iter().all(|v| *v >= 0.0 && *v <= 1.0));
            prop_assert!((c.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            prop_assert!(fit.objective >= 0.0);
        }

        #[test]
        fn coefficient_step_never_increases_objective(order in 1usize..10, a_scale in 0.5f64..2.0, seed in 0u64..1000) {
            let problem = gaussian_problem(order, 4 * (order + 1));
            let a = a_scale * (order + 1) as f64 / problem.horizon();
            let sub = CoefficientProblem::new(&problem, a);
            let raw: Vec<f64> = (0..=order).map(|m| ((seed as usize * 31 + m * 17) % 11) as f64 + 0.1).collect();
            let start = project_simplex(&raw.iter().map(|v| v / raw.iter().sum::<f64>()).collect::<Vec<_>>());
            let before = sub.value(&start);
            let after = sub.value(&sub.solve(&start, 1e-14));
            prop_assert!(after <= before * (1.0 + 1e-12) + 1e-300);
        }
    }
}
