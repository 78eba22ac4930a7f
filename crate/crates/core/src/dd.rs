//! Double-double arithmetic for kernel state.
//!
//! A [`Dd`] is an unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`,
//! carrying about 106 significant bits. Kernel states accumulate in `Dd` and
//! round to `f64` once, on readout. Two evaluation orders of the same sums
//! (serial recurrence, scan tree, brute-force oracle) then agree to within
//! an ulp of every output entry, including entries that cancel to far below
//! the scale of their row.
//!
//! The error-free transforms follow Dekker and Knuth; products of two `f64`
//! are exact.

use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

#[inline(always)]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Requires `|a| >= |b|` or `a == 0`.
#[inline(always)]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

/// Veltkamp split into two 26-bit halves.
#[inline(always)]
fn split(a: f64) -> (f64, f64) {
    const SPLITTER: f64 = 134_217_729.0; // 2^27 + 1
    let t = SPLITTER * a;
    let hi = t - (t - a);
    (hi, a - hi)
}

/// Exact product `a * b = p + e`.
#[inline(always)]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    (p, ((ah * bh - p) + ah * bl + al * bh) + al * bl)
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    #[inline(always)]
    pub const fn new(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    /// Exact product of two doubles.
    #[inline(always)]
    pub fn prod(a: f64, b: f64) -> Self {
        let (hi, lo) = two_prod(a, b);
        Dd { hi, lo }
    }

    /// The nearest `f64`.
    #[inline(always)]
    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn parts(self) -> (f64, f64) {
        (self.hi, self.lo)
    }

    #[inline(always)]
    pub fn mul_f64(self, b: f64) -> Self {
        let (p, e) = two_prod(self.hi, b);
        let (hi, lo) = quick_two_sum(p, e + self.lo * b);
        Dd { hi, lo }
    }

    pub fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    pub fn is_one(self) -> bool {
        self.hi == 1.0 && self.lo == 0.0
    }
}

impl From<f64> for Dd {
    fn from(x: f64) -> Self {
        Dd::new(x)
    }
}

impl Add for Dd {
    type Output = Dd;

    #[inline(always)]
    fn add(self, b: Dd) -> Dd {
        let (s1, s2) = two_sum(self.hi, b.hi);
        let (t1, t2) = two_sum(self.lo, b.lo);
        let (s1, s2) = quick_two_sum(s1, s2 + t1);
        let (hi, lo) = quick_two_sum(s1, s2 + t2);
        Dd { hi, lo }
    }
}

impl Add<f64> for Dd {
    type Output = Dd;

    #[inline(always)]
    fn add(self, b: f64) -> Dd {
        let (s1, s2) = two_sum(self.hi, b);
        let (hi, lo) = quick_two_sum(s1, s2 + self.lo);
        Dd { hi, lo }
    }
}

impl Neg for Dd {
    type Output = Dd;

    #[inline(always)]
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;

    #[inline(always)]
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Mul for Dd {
    type Output = Dd;

    #[inline(always)]
    fn mul(self, b: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, b.hi);
        let (hi, lo) = quick_two_sum(p, e + (self.hi * b.lo + self.lo * b.hi));
        Dd { hi, lo }
    }
}

impl Mul<f64> for Dd {
    type Output = Dd;

    #[inline(always)]
    fn mul(self, b: f64) -> Dd {
        self.mul_f64(b)
    }
}

impl Div for Dd {
    type Output = Dd;

    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b * q1;
        let q2 = r.hi / b.hi;
        let r = r - b * q2;
        let q3 = r.hi / b.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + q3
    }
}

impl AddAssign for Dd {
    #[inline(always)]
    fn add_assign(&mut self, b: Dd) {
        *self = *self + b;
    }
}

impl SubAssign for Dd {
    #[inline(always)]
    fn sub_assign(&mut self, b: Dd) {
        *self = *self - b;
    }
}

impl Sum for Dd {
    fn sum<I: Iterator<Item = Dd>>(iter: I) -> Dd {
        iter.fold(Dd::ZERO, Add::add)
    }
}

/// A scalar that can multiply into a [`Dd`]: plain `f64` inputs or
/// double-double intermediates.
pub trait Factor: Copy + Send + Sync {
    fn widen(self) -> Dd;

    /// `x * self`.
    fn scale(self, x: Dd) -> Dd;

    fn is_one(self) -> bool {
        self.widen().is_one()
    }
}

impl Factor for f64 {
    #[inline(always)]
    fn widen(self) -> Dd {
        Dd::new(self)
    }

    #[inline(always)]
    fn scale(self, x: Dd) -> Dd {
        x.mul_f64(self)
    }

    fn is_one(self) -> bool {
        self == 1.0
    }
}

impl Factor for Dd {
    #[inline(always)]
    fn widen(self) -> Dd {
        self
    }

    #[inline(always)]
    fn scale(self, x: Dd) -> Dd {
        x * self
    }
}

#[inline(always)]
fn times<A: Factor, B: Factor>(a: A, b: B) -> Dd {
    b.scale(a.widen())
}

pub fn dot<A: Factor, B: Factor>(a: &[A], b: &[B]) -> Dd {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| times(x, y)).sum()
}

/// `y += alpha * x`.
pub fn axpy<A: Factor, X: Factor>(alpha: A, x: &[X], y: &mut [Dd]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += times(xi, alpha);
    }
}

/// `y = gamma * y + alpha * x`.
pub fn decay_axpy<G: Factor, A: Factor, X: Factor>(gamma: G, alpha: A, x: &[X], y: &mut [Dd]) {
    if !gamma.is_one() {
        y.iter_mut().for_each(|yi| *yi = gamma.scale(*yi));
    }
    axpy(alpha, x, y);
}

pub fn widen_vec(x: &[f64]) -> Vec<Dd> {
    x.iter().map(|&v| Dd::new(v)).collect()
}

pub fn round_vec(x: &[Dd]) -> Vec<f64> {
    x.iter().map(|v| v.to_f64()).collect()
}

/// Row-major double-double matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DdMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Dd>,
}

impl DdMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DdMatrix {
            rows,
            cols,
            data: vec![Dd::ZERO; rows * cols],
        }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        DdMatrix {
            rows: m.rows(),
            cols: m.cols(),
            data: widen_vec(m.as_slice()),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[Dd] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[Dd] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [Dd] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Entrywise rounding to `f64`.
    pub fn round(&self) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, round_vec(&self.data)).expect("finite state")
    }

    pub fn transpose(&self) -> DdMatrix {
        let mut out = DdMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.to_f64().abs()))
    }

    /// `self = gamma * self + a b^T`.
    pub fn decay_add_outer<G: Factor, A: Factor, B: Factor>(&mut self, gamma: G, a: &[A], b: &[B]) {
        debug_assert_eq!((a.len(), b.len()), self.shape());
        let decay = !gamma.is_one();
        for (i, &ai) in a.iter().enumerate() {
            let ai = ai.widen();
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (e, &bj) in row.iter_mut().zip(b) {
                let base = if decay { gamma.scale(*e) } else { *e };
                *e = base + bj.scale(ai);
            }
        }
    }

    pub fn scale_in_place<G: Factor>(&mut self, gamma: G) {
        if !gamma.is_one() {
            self.data.iter_mut().for_each(|e| *e = gamma.scale(*e));
        }
    }

    pub fn scaled<G: Factor>(&self, gamma: G) -> Self {
        let mut out = self.clone();
        out.scale_in_place(gamma);
        out
    }

    /// `self += alpha * other`.
    pub fn add_scaled<G: Factor>(&mut self, alpha: G, other: &DdMatrix) {
        debug_assert_eq!(self.shape(), other.shape());
        let unit = alpha.is_one();
        for (e, &o) in self.data.iter_mut().zip(&other.data) {
            *e += if unit { o } else { alpha.scale(o) };
        }
    }

    /// Row vector times matrix, `x^T M`.
    pub fn vec_mul<X: Factor>(&self, x: &[X]) -> Vec<Dd> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![Dd::ZERO; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            let row = self.row(i);
            for (o, &e) in out.iter_mut().zip(row) {
                *o += xi.scale(e);
            }
        }
        out
    }

    /// Matrix times column vector, `M x`.
    pub fn mul_vec<X: Factor>(&self, x: &[X]) -> Vec<Dd> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(&e, &xj)| xj.scale(e)).sum())
            .collect()
    }

    pub fn matmul(&self, other: &DdMatrix) -> DdMatrix {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        let mut out = DdMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for (l, &a) in self.row(i).iter().enumerate() {
                let src = other.row(l);
                for (o, &b) in out.data[i * other.cols..(i + 1) * other.cols]
                    .iter_mut()
                    .zip(src)
                {
                    *o += a * b;
                }
            }
        }
        out
    }
}

impl Index<(usize, usize)> for DdMatrix {
    type Output = Dd;

    fn index(&self, (i, j): (usize, usize)) -> &Dd {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DdMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Dd {
        &mut self.data[i * self.cols + j]
    }
}
