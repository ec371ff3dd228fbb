//! Globally adaptive Gauss-Kronrod (7/15) quadrature.
//!
//! The integrand may be real, complex, or vector valued; anything that
//! supports the vector-space operations in [`QuadValue`] works. Subintervals
//! are kept in a max-heap keyed by their error estimate and the worst one is
//! bisected until the summed estimate meets the requested tolerance.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, Mul, Sub};

use nalgebra::DVector;
use num_complex::Complex64;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];

// Gauss weights for the nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Values that can be integrated.
pub trait QuadValue:
    Clone + Add<Output = Self> + Sub<Output = Self> + Mul<f64, Output = Self>
{
    fn norm(&self) -> f64;
}

impl QuadValue for f64 {
    fn norm(&self) -> f64 {
        self.abs()
    }
}

impl QuadValue for Complex64 {
    fn norm(&self) -> f64 {
        Complex64::norm(*self)
    }
}

impl QuadValue for DVector<f64> {
    fn norm(&self) -> f64 {
        self.amax()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QuadConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-13,
            rel_tol: 0.0,
            max_intervals: 4000,
        }
    }
}

impl QuadConfig {
    pub fn abs(abs_tol: f64) -> Self {
        Self {
            abs_tol,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Quad<T> {
    pub value: T,
    pub abs_error: f64,
    pub evaluations: usize,
}

/// Budget exhausted before the tolerance was met. Carries the partial estimate.
#[derive(Debug, Clone)]
pub struct NotConverged<T> {
    pub partial: T,
    pub abs_error: f64,
    pub intervals: usize,
}

impl<T: fmt::Debug> fmt::Display for NotConverged<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "quadrature did not converge after {} subintervals (estimate {:?}, error {:.3e})",
            self.intervals, self.partial, self.abs_error
        )
    }
}

impl<T: fmt::Debug> std::error::Error for NotConverged<T> {}

struct Segment<T> {
    lo: f64,
    hi: f64,
    value: T,
    error: f64,
}

impl<T> PartialEq for Segment<T> {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl<T> Eq for Segment<T> {}
impl<T> PartialOrd for Segment<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T> Ord for Segment<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn gauss_kronrod<T, F>(f: &mut F, lo: f64, hi: f64) -> (T, f64)
where
    T: QuadValue,
    F: FnMut(f64) -> T,
{
    let center = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let fc = f(center);
    let mut kronrod = fc.clone() * WGK[7];
    let mut gauss = fc * WG[3];
    for (j, (&x, &w)) in XGK.iter().zip(WGK.iter()).take(7).enumerate() {
        let dx = half * x;
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        let pair = f1 + f2;
        kronrod = kronrod + pair.clone() * w;
        if j % 2 == 1 {
            gauss = gauss + pair * WG[j / 2];
        }
    }
    let kronrod = kronrod * half;
    let gauss = gauss * half;
    let err = (kronrod.clone() - gauss).norm();
    (kronrod, err)
}

/// Integrate `f` over `[a, b]`.
pub fn integrate<T, F>(f: F, a: f64, b: f64, cfg: &QuadConfig) -> Result<Quad<T>, NotConverged<T>>
where
    T: QuadValue,
    F: FnMut(f64) -> T,
{
    integrate_with_breaks(f, &[a, b], cfg)
}

/// Integrate over consecutive intervals separated by `points` (sorted).
/// Break points let the caller place kinks and jumps on interval boundaries.
pub fn integrate_with_breaks<T, F>(
    mut f: F,
    points: &[f64],
    cfg: &QuadConfig,
) -> Result<Quad<T>, NotConverged<T>>
where
    T: QuadValue,
    F: FnMut(f64) -> T,
{
    assert!(points.len() >= 2, "need at least one interval");
    let mut heap = BinaryHeap::new();
    let mut total: Option<T> = None;
    let mut total_err = 0.0;
    let mut evaluations = 0;
    for w in points.windows(2) {
        let (value, error) = gauss_kronrod(&mut f, w[0], w[1]);
        evaluations += 15;
        total = Some(match total {
            None => value.clone(),
            Some(t) => t + value.clone(),
        });
        total_err += error;
        heap.push(Segment {
            lo: w[0],
            hi: w[1],
            value,
            error,
        });
    }
    let mut total = total.expect("at least one interval");

    loop {
        let tol = cfg.abs_tol.max(cfg.rel_tol * total.norm());
        if total_err <= tol {
            return Ok(Quad {
                value: total,
                abs_error: total_err,
                evaluations,
            });
        }
        if heap.len() >= cfg.max_intervals {
            break;
        }
        let worst = heap.pop().expect("heap is never empty here");
        let mid = 0.5 * (worst.lo + worst.hi);
        if !(mid > worst.lo && mid < worst.hi) {
            // Interval can no longer be split in floating point.
            heap.push(worst);
            break;
        }
        let (left, el) = gauss_kronrod(&mut f, worst.lo, mid);
        let (right, er) = gauss_kronrod(&mut f, mid, worst.hi);
        evaluations += 30;
        total = total - worst.value + left.clone() + right.clone();
        total_err += el + er - worst.error;
        heap.push(Segment {
            lo: worst.lo,
            hi: mid,
            value: left,
            error: el,
        });
        heap.push(Segment {
            lo: mid,
            hi: worst.hi,
            value: right,
            error: er,
        });
    }
    // Re-sum to drop accumulated cancellation in the running totals.
    let mut iter = heap.iter();
    let first = iter.next().expect("non-empty");
    let mut value = first.value.clone();
    let mut err = first.error;
    for seg in iter {
        value = value + seg.value.clone();
        err += seg.error;
    }
    let tol = cfg.abs_tol.max(cfg.rel_tol * value.norm());
    if err <= tol {
        return Ok(Quad {
            value,
            abs_error: err,
            evaluations,
        });
    }
    Err(NotConverged {
        partial: value,
        abs_error: err,
        intervals: heap.len(),
    })
}

/// Integrate a nonnegative density over `[0, inf)`.
///
/// Doubling segments `[0, s], [s, 2s], [2s, 4s], ...` are added until a
/// segment contributes less than `1e-16` of the running total and the
/// integrand at its right end has fallen below `1e-16` of the largest value
/// seen.
pub fn integrate_density_to_infinity<F>(
    mut f: F,
    scale: f64,
    cfg: &QuadConfig,
) -> Result<Quad<f64>, NotConverged<f64>>
where
    F: FnMut(f64) -> f64,
{
    let peak = std::cell::Cell::new(0.0_f64);
    let mut g = |t: f64| {
        let v = f(t);
        peak.set(peak.get().max(v.abs()));
        v
    };
    let mut total = 0.0;
    let mut err = 0.0;
    let mut evals = 0;
    let mut lo = 0.0;
    let mut hi = scale;
    for _ in 0..200 {
        let seg = integrate(&mut g, lo, hi, cfg)?;
        total += seg.value;
        err += seg.abs_error;
        evals += seg.evaluations;
        let end = g(hi).abs();
        if seg.value.abs() <= 1e-16 * total.abs() && end <= 1e-16 * peak.get() {
            return Ok(Quad {
                value: total,
                abs_error: err,
                evaluations: evals,
            });
        }
        lo = hi;
        hi *= 2.0;
    }
    Err(NotConverged {
        partial: total,
        abs_error: err,
        intervals: 200,
    })
}
