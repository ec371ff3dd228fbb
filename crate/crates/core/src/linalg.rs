//! Small dense linear-algebra helpers not covered by nalgebra.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Householder QR with column pivoting by remaining column norm (rank
/// revealing), stored compactly.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    qr: DMatrix<f64>,
    tau: Vec<f64>,
    perm: Vec<usize>,
    rank: usize,
}

impl PivotedQr {
    /// Factor `a` and truncate the rank where `|R_kk| <= rcond * |R_00|`.
    pub fn new(mut a: DMatrix<f64>, rcond: f64) -> Self {
        let (m, n) = a.shape();
        let steps = m.min(n);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut tau = vec![0.0; steps];
        let data = a.as_mut_slice();
        let col_sq = |d: &[f64], j: usize, k: usize| d[j * m + k..(j + 1) * m].iter().map(|v| v * v).sum::<f64>();
        let mut norms: Vec<f64> = (0..n).map(|j| col_sq(data, j, 0)).collect();
        // Norms at the last exact recomputation, for the downdating guard.
        let mut fresh = norms.clone();
        let mut rank = steps;
        let mut r00 = 0.0;
        for k in 0..steps {
            let p = (k..n)
                .max_by(|&i, &j| norms[i].total_cmp(&norms[j]))
                .expect("non-empty range");
            if p != k {
                for i in 0..m {
                    data.swap(k * m + i, p * m + i);
                }
                norms.swap(k, p);
                fresh.swap(k, p);
                perm.swap(k, p);
            }
            let alpha = col_sq(data, k, k).sqrt();
            if k == 0 {
                r00 = alpha;
            }
            if alpha == 0.0 || alpha <= rcond * r00 {
                rank = k;
                break;
            }
            let (head, tail) = data.split_at_mut((k + 1) * m);
            let v = &mut head[k * m + k..(k + 1) * m];
            let x0 = v[0];
            let beta = if x0 >= 0.0 { -alpha } else { alpha };
            // v = x - beta e1, normalised so v[0] = 1
            let v0 = x0 - beta;
            for vi in v[1..].iter_mut() {
                *vi /= v0;
            }
            let t = (beta - x0) / beta;
            tau[k] = t;
            v[0] = beta;
            let v = &v[1..];
            for j in k + 1..n {
                let col = &mut tail[(j - k - 1) * m + k..(j - k) * m];
                let (top, rest) = col.split_first_mut().expect("k < m");
                let mut s = *top;
                for (x, vi) in rest.iter().zip(v) {
                    s += vi * x;
                }
                s *= t;
                *top -= s;
                for (x, vi) in rest.iter_mut().zip(v) {
                    *x -= s * vi;
                }
                // Downdate the trailing norm; recompute when cancellation
                // has eaten most of it.
                norms[j] -= *top * *top;
                if norms[j] <= 1e-4 * fresh[j] || norms[j] < 0.0 {
                    norms[j] = rest.iter().map(|x| x * x).sum();
                    fresh[j] = norms[j];
                }
            }
        }
        Self { qr: a, tau, perm, rank }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Apply `Q^T` to `b` in place.
    pub fn q_tr_mul(&self, b: &mut DVector<f64>) {
        let m = self.qr.nrows();
        for k in 0..self.rank {
            let mut s = b[k];
            for i in k + 1..m {
                s += self.qr[(i, k)] * b[i];
            }
            s *= self.tau[k];
            b[k] -= s;
            for i in k + 1..m {
                b[i] -= s * self.qr[(i, k)];
            }
        }
    }

    /// The leading `rank x n` block of `R` (columns in pivoted order).
    pub fn r(&self) -> DMatrix<f64> {
        let n = self.qr.ncols();
        DMatrix::from_fn(self.rank, n, |i, j| if j >= i { self.qr[(i, j)] } else { 0.0 })
    }

    /// Basic least-squares solution: dependent columns (beyond the numerical
    /// rank) are set to zero.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.qr.ncols();
        let mut qtb = b.clone();
        self.q_tr_mul(&mut qtb);
        let mut y = vec![0.0; n];
        for i in (0..self.rank).rev() {
            let mut s = qtb[i];
            for j in i + 1..self.rank {
                s -= self.qr[(i, j)] * y[j];
            }
            y[i] = s / self.qr[(i, i)];
        }
        let mut x = DVector::zeros(n);
        for (k, &p) in self.perm.iter().enumerate() {
            x[p] = y[k];
        }
        x
    }
}

/// Least squares `min ||A x - b||` with rank truncation at `rcond`.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>, rcond: f64) -> (DVector<f64>, usize) {
    let qr = PivotedQr::new(a.clone(), rcond);
    (qr.solve(b), qr.rank())
}

/// Determinant of a complex matrix via LU with partial pivoting after
/// scaling every row by its largest modulus.
pub fn complex_det(mut m: DMatrix<Complex64>) -> Complex64 {
    let mut scale = Complex64::new(1.0, 0.0);
    for i in 0..m.nrows() {
        let row_max = m.row(i).iter().map(|z| z.norm()).fold(0.0, f64::max);
        if row_max == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        for z in m.row_mut(i).iter_mut() {
            *z /= row_max;
        }
        scale *= row_max;
    }
    m.lu().determinant() * scale
}

/// Infinity norm (maximum absolute row sum).
pub fn norm_inf(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Infinity norm of a complex matrix.
pub fn complex_norm_inf(m: &DMatrix<Complex64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}
