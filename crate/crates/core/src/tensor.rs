//! Dense row-major matrices and the handful of kernels the encoder and head need.
//!
//! Every output element is accumulated in a fixed order regardless of how
//! rows are scheduled across threads, so results are bitwise reproducible.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Row count above which kernels fan out across the rayon pool.
const PAR_ROWS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape does not match buffer length");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// `self += other`
    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|x| *x *= k);
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) {
        assert_eq!(bias.len(), self.cols);
        for r in 0..self.rows {
            for (x, b) in self.row_mut(r).iter_mut().zip(bias) {
                *x += b;
            }
        }
    }

    /// Column sums, the gradient of a broadcast row bias.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, x) in out.iter_mut().zip(self.row(r)) {
                *o += x;
            }
        }
        out
    }

    /// Copies rows `start..start + n` into a new matrix.
    pub fn slice_rows(&self, start: usize, n: usize) -> Mat {
        Mat::from_vec(
            n,
            self.cols,
            self.data[start * self.cols..(start + n) * self.cols].to_vec(),
        )
    }

    /// Copies columns `start..start + n` into a new matrix.
    pub fn slice_cols(&self, start: usize, n: usize) -> Mat {
        Mat::from_fn(self.rows, n, |r, c| self.get(r, start + c))
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }
}

fn row_kernel_ab(a_row: &[f64], b: &Mat, out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for (k, &av) in a_row.iter().enumerate() {
        if av == 0.0 {
            continue;
        }
        for (o, bv) in out.iter_mut().zip(b.row(k)) {
            *o += av * bv;
        }
    }
}

/// `a · b`
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dimensions differ");
    let mut out = Mat::zeros(a.rows, b.cols);
    if b.cols == 0 {
        return out;
    }
    if a.rows >= PAR_ROWS {
        out.data
            .par_chunks_mut(b.cols)
            .enumerate()
            .for_each(|(r, o)| row_kernel_ab(a.row(r), b, o));
    } else {
        for r in 0..a.rows {
            let cols = b.cols;
            row_kernel_ab(a.row(r), b, &mut out.data[r * cols..(r + 1) * cols]);
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `a · bᵀ`
pub fn matmul_bt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_bt inner dimensions differ");
    let mut out = Mat::zeros(a.rows, b.rows);
    if b.rows == 0 {
        return out;
    }
    let fill = |r: usize, o: &mut [f64]| {
        let ar = a.row(r);
        for (j, x) in o.iter_mut().enumerate() {
            *x = dot(ar, b.row(j));
        }
    };
    if a.rows >= PAR_ROWS {
        out.data
            .par_chunks_mut(b.rows)
            .enumerate()
            .for_each(|(r, o)| fill(r, o));
    } else {
        let n = b.rows;
        for r in 0..a.rows {
            fill(r, &mut out.data[r * n..(r + 1) * n]);
        }
    }
    out
}

/// `aᵀ · b`, the weight-gradient product. Each output row sums over the
/// shared row index in ascending order.
pub fn matmul_at(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows, "matmul_at outer dimensions differ");
    let mut out = Mat::zeros(a.cols, b.cols);
    if b.cols == 0 {
        return out;
    }
    let fill = |i: usize, o: &mut [f64]| {
        for k in 0..a.rows {
            let av = a.get(k, i);
            if av == 0.0 {
                continue;
            }
            for (x, bv) in o.iter_mut().zip(b.row(k)) {
                *x += av * bv;
            }
        }
    };
    if a.cols >= PAR_ROWS && a.rows >= PAR_ROWS {
        out.data
            .par_chunks_mut(b.cols)
            .enumerate()
            .for_each(|(i, o)| fill(i, o));
    } else {
        let n = b.cols;
        for i in 0..a.cols {
            fill(i, &mut out.data[i * n..(i + 1) * n]);
        }
    }
    out
}

/// Numerically stable softmax in place; `-inf` entries become exact zeros.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return;
    }
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
