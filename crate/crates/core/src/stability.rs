//! Linear stability of LCT systems: the augmented Jacobian, its spectrum, and
//! the reduced characteristic function `det(F - λI + G Q(λ) H)` with
//! `Q_ii(λ) = Σ_m c_m (a_i / (a_i + λ))^{m+1}`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

use crate::kernels::KernelSpec;
use crate::lct::{assemble_jacobian, steady_state, LctError, LctSystem, Model};
use crate::linalg::{complex_det, complex_norm_inf};
use crate::quadrature::{integrate_with_breaks, QuadConfig};

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error("QR iteration failed to converge for eigenvalue index {0}")]
    NoConvergence(usize),
    #[error("non-finite matrix entry")]
    NonFinite,
    #[error("λ = {lambda} is within 1e-12·a of the pole -a = {pole}")]
    Pole { lambda: Complex64, pole: f64 },
    #[error("quadrature failed: {0}")]
    Quadrature(String),
    #[error("dimension {0} exceeds the dense eigensolver limit {MAX_DENSE_DIM}; lower the approximation order")]
    TooLarge(usize),
    #[error(transparent)]
    Lct(#[from] LctError),
    #[error("{0}")]
    Model(String),
}

/// Largest matrix the dense eigensolver accepts in scans.
pub const MAX_DENSE_DIM: usize = 2000;

/// Model Jacobians at a point, the data of the linearised DDE.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

impl Linearization {
    /// Jacobians at `x` with `z = h(x)`, i.e. at a steady state.
    pub fn at_steady_state(model: &dyn Model, t: f64, x: &[f64]) -> Self {
        let mut z = vec![0.0; model.nz()];
        model.h(t, x, &mut z);
        Self::at(model, t, x, &z)
    }

    pub fn at(model: &dyn Model, t: f64, x: &[f64], z: &[f64]) -> Self {
        Self {
            f: model.jac_x(t, x, z),
            g: model.jac_z(t, x, z),
            h: model.jac_h(t, x),
        }
    }
}

/// `J = [[F, G C], [B H, A]]` at `(x, Z)` with `z = C Z`.
pub fn augmented_jacobian(model: &dyn Model, lct: &LctSystem, t: f64, x: &[f64], zs: &[f64]) -> DMatrix<f64> {
    let mut z = vec![0.0; lct.nz()];
    lct.memory(zs, &mut z);
    let lin = Linearization::at(model, t, x, &z);
    assemble_jacobian(lct, &lin.f, &lin.g, &lin.h)
}

/// Diagonal similarity scaling by powers of two so that row and column
/// norms are comparable (the classic balancing step).
fn balance(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    let radix = 2.0;
    let sqrdx = radix * radix;
    loop {
        let mut done = true;
        for i in 0..n {
            let mut c = 0.0;
            let mut r = 0.0;
            for j in 0..n {
                if j != i {
                    c += a[(j, i)].abs();
                    r += a[(i, j)].abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut g = r / radix;
            while c < g {
                f *= radix;
                c *= sqrdx;
            }
            g = r * radix;
            while c > g {
                f /= radix;
                c /= sqrdx;
            }
            if (c + r) / f < 0.95 * s {
                done = false;
                let g = 1.0 / f;
                for j in 0..n {
                    a[(i, j)] *= g;
                }
                for j in 0..n {
                    a[(j, i)] *= f;
                }
            }
        }
        if done {
            break;
        }
    }
}

/// Eigenvalues of an upper Hessenberg matrix by the Francis double-shift QR
/// iteration (destroys `a`).
fn hessenberg_qr(a: &mut DMatrix<f64>) -> Result<Vec<Complex64>, StabilityError> {
    let n = a.nrows() as isize;
    let mut out = vec![Complex64::new(0.0, 0.0); n as usize];
    let mut anorm = 0.0;
    for i in 0..n as usize {
        for j in i.saturating_sub(1)..n as usize {
            anorm += a[(i, j)].abs();
        }
    }
    macro_rules! at {
        ($i:expr, $j:expr) => {
            a[($i as usize, $j as usize)]
        };
    }
    let mut nn = n - 1;
    let mut t = 0.0;
    let mut its = 0;
    while nn >= 0 {
        let mut l = nn;
        while l >= 1 {
            let mut s = at!(l - 1, l - 1).abs() + at!(l, l).abs();
            if s == 0.0 {
                s = anorm;
            }
            if at!(l, l - 1).abs() <= f64::EPSILON * s {
                at!(l, l - 1) = 0.0;
                break;
            }
            l -= 1;
        }
        let mut x = at!(nn, nn);
        if l == nn {
            out[nn as usize] = Complex64::new(x + t, 0.0);
            nn -= 1;
            its = 0;
            continue;
        }
        let mut y = at!(nn - 1, nn - 1);
        let mut w = at!(nn, nn - 1) * at!(nn - 1, nn);
        if l == nn - 1 {
            let p = 0.5 * (y - x);
            let q = p * p + w;
            let z = q.abs().sqrt();
            x += t;
            if q >= 0.0 {
                let z = p + z.copysign(p);
                let hi = x + z;
                let lo = if z != 0.0 { x - w / z } else { hi };
                out[(nn - 1) as usize] = Complex64::new(hi, 0.0);
                out[nn as usize] = Complex64::new(lo, 0.0);
            } else {
                out[(nn - 1) as usize] = Complex64::new(x + p, z);
                out[nn as usize] = Complex64::new(x + p, -z);
            }
            nn -= 2;
            its = 0;
            continue;
        }
        if its >= 60 {
            return Err(StabilityError::NoConvergence(nn as usize));
        }
        if its > 0 && its % 10 == 0 {
            // Exceptional shift.
            t += x;
            for i in 0..=nn {
                at!(i, i) -= x;
            }
            let s = at!(nn, nn - 1).abs() + at!(nn - 1, nn - 2).abs();
            x = 0.75 * s;
            y = x;
            w = -0.4375 * s * s;
        }
        its += 1;
        let (mut p, mut q, mut r) = (0.0, 0.0, 0.0);
        let mut m = nn - 2;
        while m >= l {
            let z = at!(m, m);
            let rr = x - z;
            let ss = y - z;
            p = (rr * ss - w) / at!(m + 1, m) + at!(m, m + 1);
            q = at!(m + 1, m + 1) - z - rr - ss;
            r = at!(m + 2, m + 1);
            let s = p.abs() + q.abs() + r.abs();
            p /= s;
            q /= s;
            r /= s;
            if m == l {
                break;
            }
            let u = at!(m, m - 1).abs() * (q.abs() + r.abs());
            let v = p.abs() * (at!(m - 1, m - 1).abs() + z.abs() + at!(m + 1, m + 1).abs());
            if u <= f64::EPSILON * v {
                break;
            }
            m -= 1;
        }
        for i in m + 2..=nn {
            at!(i, i - 2) = 0.0;
            if i != m + 2 {
                at!(i, i - 3) = 0.0;
            }
        }
        let mut k = m;
        while k < nn {
            if k != m {
                p = at!(k, k - 1);
                q = at!(k + 1, k - 1);
                r = if k != nn - 1 { at!(k + 2, k - 1) } else { 0.0 };
                x = p.abs() + q.abs() + r.abs();
                if x != 0.0 {
                    p /= x;
                    q /= x;
                    r /= x;
                }
            }
            let s = (p * p + q * q + r * r).sqrt().copysign(p);
            if s != 0.0 {
                if k == m {
                    if l != m {
                        at!(k, k - 1) = -at!(k, k - 1);
                    }
                } else {
                    at!(k, k - 1) = -s * x;
                }
                p += s;
                x = p / s;
                y = q / s;
                let z = r / s;
                q /= p;
                r /= p;
                for j in k..=nn {
                    let mut pp = at!(k, j) + q * at!(k + 1, j);
                    if k != nn - 1 {
                        pp += r * at!(k + 2, j);
                        at!(k + 2, j) -= pp * z;
                    }
                    at!(k + 1, j) -= pp * y;
                    at!(k, j) -= pp * x;
                }
                let mmin = if nn < k + 3 { nn } else { k + 3 };
                for i in l..=mmin {
                    let mut pp = x * at!(i, k) + y * at!(i, k + 1);
                    if k != nn - 1 {
                        pp += z * at!(i, k + 2);
                        at!(i, k + 2) -= pp * r;
                    }
                    at!(i, k + 1) -= pp * q;
                    at!(i, k) -= pp;
                }
            }
            k += 1;
        }
    }
    Ok(out)
}

/// All eigenvalues of a real square matrix: balancing, Householder reduction
/// to Hessenberg form, then shifted QR.
pub fn eigenvalues(j: &DMatrix<f64>) -> Result<Vec<Complex64>, StabilityError> {
    assert!(j.is_square(), "eigenvalues of a non-square matrix");
    if j.iter().any(|v| !v.is_finite()) {
        return Err(StabilityError::NonFinite);
    }
    if j.nrows() == 0 {
        return Ok(Vec::new());
    }
    let mut a = j.clone();
    balance(&mut a);
    let mut h = a.hessenberg().h();
    hessenberg_qr(&mut h)
}

/// Eigenvalues with unit eigenvectors from inverse iteration.
pub fn eigenpairs(j: &DMatrix<f64>) -> Result<Vec<(Complex64, DVector<Complex64>)>, StabilityError> {
    let n = j.nrows();
    let values = eigenvalues(j)?;
    let jc = j.map(|v| Complex64::new(v, 0.0));
    let scale = crate::linalg::norm_inf(j).max(f64::MIN_POSITIVE);
    Ok(values
        .into_iter()
        .map(|lambda| {
            // Perturb the shift slightly so that the matrix is invertible.
            let shift = lambda + Complex64::new(scale * 1e-10, scale * 1e-10);
            let m = &jc - DMatrix::identity(n, n) * shift;
            let lu = m.lu();
            let mut v = DVector::from_fn(n, |i, _| Complex64::new(1.0 + 0.1 * i as f64, 0.3));
            for _ in 0..3 {
                if let Some(w) = lu.solve(&v) {
                    let norm = w.norm();
                    if norm.is_finite() && norm > 0.0 {
                        v = w / Complex64::new(norm, 0.0);
                    }
                }
            }
            (lambda, v)
        })
        .collect())
}

/// `Q(λ)`: diagonal, `Q_ii = Σ_m c_m (a_i / (a_i + λ))^{m+1}`.
pub fn q_matrix(lct: &LctSystem, lambda: Complex64) -> Result<DMatrix<Complex64>, StabilityError> {
    let nz = lct.nz();
    let mut q = DMatrix::from_element(nz, nz, Complex64::new(0.0, 0.0));
    for (i, mix) in lct.mixtures().enumerate() {
        let a = mix.rate();
        if (lambda + a).norm() < 1e-12 * a {
            return Err(StabilityError::Pole { lambda, pole: -a });
        }
        q[(i, i)] = mix.laplace(lambda);
    }
    Ok(q)
}

/// `det(F - λI + G Q(λ) H)` by complex LU.
pub fn reduced_char(lin: &Linearization, lct: &LctSystem, lambda: Complex64) -> Result<Complex64, StabilityError> {
    let q = q_matrix(lct, lambda)?;
    Ok(complex_det(reduced_matrix(lin, &q, lambda)))
}

fn reduced_matrix(lin: &Linearization, q: &DMatrix<Complex64>, lambda: Complex64) -> DMatrix<Complex64> {
    let n = lin.f.nrows();
    let f = lin.f.map(|v| Complex64::new(v, 0.0)) - DMatrix::identity(n, n) * lambda;
    let g = lin.g.map(|v| Complex64::new(v, 0.0));
    let h = lin.h.map(|v| Complex64::new(v, 0.0));
    f + g * q * h
}

/// `|reduced_char(λ)| / ‖F - λI‖_∞^{n_x}`, the scale-free residual.
pub fn reduced_char_residual(lin: &Linearization, lct: &LctSystem, lambda: Complex64) -> Result<f64, StabilityError> {
    let n = lin.f.nrows();
    let shifted = lin.f.map(|v| Complex64::new(v, 0.0)) - DMatrix::identity(n, n) * lambda;
    let scale = complex_norm_inf(&shifted).powi(n as i32);
    Ok(reduced_char(lin, lct, lambda)?.norm() / scale)
}

/// `∫_0^{t_h} e^{-λs} α(s) ds` by adaptive quadrature (tolerance 1e-10).
pub fn char_integral(kernel: &KernelSpec, lambda: Complex64, t_h: f64) -> Result<Complex64, StabilityError> {
    let pieces = 64;
    let breaks: Vec<f64> = (0..=pieces).map(|k| t_h * k as f64 / pieces as f64).collect();
    let cfg = QuadConfig {
        abs_tol: 1e-10,
        rel_tol: 0.0,
        max_intervals: 20_000,
    };
    integrate_with_breaks(|s: f64| (-lambda * s).exp() * kernel.density(s), &breaks, &cfg)
        .map(|q| q.value)
        .map_err(|e| StabilityError::Quadrature(e.to_string()))
}

/// Eigenvalues of the augmented Jacobian, classified into chain eigenvalues
/// (within `1e-3·a_i` of some `-a_i`) and the rest, which should be roots of
/// the reduced characteristic equation.
#[derive(Debug, Clone)]
pub struct SpectrumReport {
    pub eigenvalues: Vec<Complex64>,
    pub max_real: f64,
    pub chain: Vec<bool>,
    /// Scale-free reduced residual at every non-chain eigenvalue, `None` for
    /// chain eigenvalues.
    pub residuals: Vec<Option<f64>>,
}

impl SpectrumReport {
    pub fn chain_count(&self) -> usize {
        self.chain.iter().filter(|c| **c).count()
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().flatten().copied().fold(0.0, f64::max)
    }
}

/// Relative distance to a rate below which an eigenvalue counts as a chain eigenvalue.
pub const CHAIN_DELTA: f64 = 1e-3;

pub fn spectrum(lin: &Linearization, lct: &LctSystem) -> Result<SpectrumReport, StabilityError> {
    let j = assemble_jacobian(lct, &lin.f, &lin.g, &lin.h);
    let eigenvalues = eigenvalues(&j)?;
    let max_real = eigenvalues.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
    let rates: Vec<f64> = lct.mixtures().map(|m| m.rate()).collect();
    let chain: Vec<bool> = eigenvalues
        .iter()
        .map(|l| rates.iter().any(|a| (l + a).norm() < CHAIN_DELTA * a))
        .collect();
    let residuals = eigenvalues
        .iter()
        .zip(&chain)
        .map(|(l, c)| if *c { Ok(None) } else { reduced_char_residual(lin, lct, *l).map(Some) })
        .collect::<Result<_, _>>()?;
    Ok(SpectrumReport {
        eigenvalues,
        max_real,
        chain,
        residuals,
    })
}

/// One grid point of [`scan_parameter`].
#[derive(Debug, Clone)]
pub struct ScanPoint {
    pub parameter: f64,
    pub steady_state: Option<Vec<f64>>,
    pub max_real: Option<f64>,
    pub eigenvalues: Option<Vec<Complex64>>,
    pub error: Option<String>,
}

/// What a scan needs at each parameter value.
pub struct ScanSetup {
    pub model: Box<dyn Model>,
    pub lct: LctSystem,
    pub guess: Vec<f64>,
    pub t: f64,
}

/// Steady state and spectrum over a parameter grid, in parallel. Failures
/// are recorded per point and the scan continues.
pub fn scan_parameter<B>(grid: &[f64], build: B, keep_spectrum: bool) -> Vec<ScanPoint>
where
    B: Fn(f64) -> Result<ScanSetup, StabilityError> + Sync,
{
    grid.par_iter()
        .map(|&p| {
            let mut point = ScanPoint {
                parameter: p,
                steady_state: None,
                max_real: None,
                eigenvalues: None,
                error: None,
            };
            let run = || -> Result<(Vec<f64>, Vec<Complex64>), StabilityError> {
                let setup = build(p)?;
                let dim = setup.model.nx() + setup.lct.dim();
                if dim > MAX_DENSE_DIM {
                    return Err(StabilityError::TooLarge(dim));
                }
                let ss = steady_state(setup.model.as_ref(), &setup.guess, setup.t)?;
                let lin = Linearization::at_steady_state(setup.model.as_ref(), setup.t, &ss.x);
                let j = assemble_jacobian(&setup.lct, &lin.f, &lin.g, &lin.h);
                Ok((ss.x, eigenvalues(&j)?))
            };
            match run() {
                Ok((x, eig)) => {
                    point.max_real = Some(eig.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max));
                    point.steady_state = Some(x);
                    if keep_spectrum {
                        point.eigenvalues = Some(eig);
                    }
                }
                Err(e) => point.error = Some(e.to_string()),
            }
            point
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::ErlangMixture;

    fn sorted(mut v: Vec<Complex64>) -> Vec<Complex64> {
        v.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        v
    }

    #[test]
    fn diagonal_matrix() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -2.0]));
        let e = sorted(eigenvalues(&m).unwrap());
        assert!((e[0] - Complex64::new(-2.0, 0.0)).norm() < 1e-14);
        assert!((e[1] - Complex64::new(1.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn companion_of_lambda_squared_plus_one() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let e = sorted(eigenvalues(&m).unwrap());
        assert!((e[0] - Complex64::new(0.0, -1.0)).norm() < 1e-10);
        assert!((e[1] - Complex64::new(0.0, 1.0)).norm() < 1e-10);
    }

    #[test]
    fn chain_block_alone() {
        let lct = LctSystem::new(vec![ErlangMixture::new(3.0, vec![0.2, 0.3, 0.5]).unwrap()]).unwrap();
        let e = eigenvalues(&lct.a_matrix()).unwrap();
        assert_eq!(e.len(), 3);
        for l in e {
            assert!((l + 3.0).norm() < 1e-12);
        }
    }

    #[test]
    fn random_matrix_eigenpairs_have_small_backward_error() {
        let n = 30;
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let m = DMatrix::from_fn(n, n, |_, _| next());
        let pairs = eigenpairs(&m).unwrap();
        assert_eq!(pairs.len(), n);
        let mc = m.map(|v| Complex64::new(v, 0.0));
        let scale = crate::linalg::norm_inf(&m);
        for (l, v) in pairs {
            let r = &mc * &v - &v * l;
            assert!(r.norm() <= 1e-8 * scale, "residual {}", r.norm());
        }
        // trace check
        let sum: Complex64 = eigenvalues(&m).unwrap().iter().sum();
        assert!((sum.re - m.trace()).abs() < 1e-10);
    }

    #[test]
    fn q_of_zero_and_known_value() {
        let lct = LctSystem::new(vec![
            ErlangMixture::new(2.0, vec![0.3, 0.7]).unwrap(),
            ErlangMixture::new(5.0, vec![1.0]).unwrap(),
        ])
        .unwrap();
        let q = q_matrix(&lct, Complex64::new(0.0, 0.0)).unwrap();
        assert!((q - DMatrix::identity(2, 2)).norm() < 1e-12);
        let single = LctSystem::new(vec![ErlangMixture::new(4.0, vec![1.0]).unwrap()]).unwrap();
        let q = q_matrix(&single, Complex64::new(4.0, 0.0)).unwrap();
        assert!((q[(0, 0)] - 0.5).norm() < 1e-15);
        assert!(q_matrix(&single, Complex64::new(-4.0, 0.0)).is_err());
    }

    #[test]
    fn scalar_logistic_reduced_char() {
        let sigma = 4.0;
        let lin = Linearization {
            f: DMatrix::zeros(1, 1),
            g: DMatrix::from_element(1, 1, -sigma),
            h: DMatrix::from_element(1, 1, 1.0),
        };
        let lct = LctSystem::new(vec![ErlangMixture::new(3.0, vec![0.5, 0.25, 0.25]).unwrap()]).unwrap();
        let lambda = Complex64::new(0.3, 0.7);
        let got = reduced_char(&lin, &lct, lambda).unwrap();
        let q = q_matrix(&lct, lambda).unwrap()[(0, 0)];
        assert!((got - (-lambda - sigma * q)).norm() < 1e-13);
    }

    #[test]
    fn zero_eigenvalue_when_f_plus_gh_singular() {
        let lin = Linearization {
            f: DMatrix::from_element(1, 1, 1.0),
            g: DMatrix::from_element(1, 1, -1.0),
            h: DMatrix::from_element(1, 1, 1.0),
        };
        let lct = LctSystem::new(vec![ErlangMixture::new(2.0, vec![0.5, 0.5]).unwrap()]).unwrap();
        assert!(reduced_char(&lin, &lct, Complex64::new(0.0, 0.0)).unwrap().norm() < 1e-15);
    }

    #[test]
    fn decoupled_spectrum() {
        let lin = Linearization {
            f: DMatrix::from_element(1, 1, -0.5),
            g: DMatrix::zeros(1, 1),
            h: DMatrix::from_element(1, 1, 1.0),
        };
        let lct = LctSystem::new(vec![ErlangMixture::new(2.0, vec![1.0]).unwrap()]).unwrap();
        let e = sorted(spectrum(&lin, &lct).unwrap().eigenvalues);
        assert!((e[0] + 2.0).norm() < 1e-14 && (e[1] + 0.5).norm() < 1e-14);
    }

    #[test]
    fn char_integral_of_erlang_kernel() {
        let m = 3;
        let a = 2.0;
        let kernel = KernelSpec::erlang_mixture(ErlangMixture::new(a, vec![0.0, 0.0, 0.0, 1.0]).unwrap());
        let lambda = Complex64::new(0.7, 0.0);
        let got = char_integral(&kernel, lambda, 60.0).unwrap();
        let want = (a / (a + 0.7f64)).powi(m + 1);
        assert!((got.re - want).abs() < 1e-10);
    }

    #[test]
    fn erlang_transform_approaches_delay() {
        // (a/(a+λ))^{m+1} -> e^{-λ s} with s = m/a fixed.
        let s = 1.5;
        let lambda = 0.5f64;
        let mut prev = f64::INFINITY;
        for a in [2.0, 4.0, 8.0, 16.0, 32.0] {
            let m = (s * a) as i32;
            let err = ((a / (a + lambda)).powi(m + 1) - (-lambda * s).exp()).abs();
            assert!(err < prev);
            prev = err;
        }
    }
}
