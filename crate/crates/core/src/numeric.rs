//! Dense row-major `f64` matrices and the handful of kernels the recurrent
//! layers need: matrix products, elementwise maps, stable activations, a
//! row-wise softmax and seeded uniform initialization.
//!
//! Every kernel fixes its summation order (ascending inner index), so results
//! are bit-reproducible across runs on the same platform. In checked builds
//! (`debug_assertions`) every public operation asserts that its output is
//! finite.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from row-major data. Panics if the length is wrong.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        let m = Matrix { rows, cols, data };
        m.debug_check_finite();
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Standard matrix product; inner summation runs over k ascending.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows, other.cols);
        matmul_into(&mut out, self, other, other.cols, false);
        out.debug_check_finite();
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.zip(other, |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul_elem(&self, other: &Matrix) -> Matrix {
        self.zip(other, |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let out = Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        };
        out.debug_check_finite();
        out
    }

    pub fn sigmoid(&self) -> Matrix {
        self.map(sigmoid)
    }

    pub fn tanh(&self) -> Matrix {
        self.map(f64::tanh)
    }

    /// Row-wise softmax with max-shift so large logits cannot overflow.
    pub fn softmax_rows(&self) -> Matrix {
        assert!(self.cols >= 1, "softmax needs at least one column");
        let mut out = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..self.cols {
                let e = (row[c] - max).exp();
                out.data[r * self.cols + c] = e;
                sum += e;
            }
            for c in 0..self.cols {
                out.data[r * self.cols + c] /= sum;
            }
        }
        out.debug_check_finite();
        out
    }

    fn zip(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "shape mismatch: {}x{} vs {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        let out = Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        };
        out.debug_check_finite();
        out
    }

    #[inline]
    pub(crate) fn debug_check_finite(&self) {
        debug_assert!(
            self.data.iter().all(|x| x.is_finite()),
            "matrix contains a non-finite entry"
        );
    }
}

/// Numerically stable logistic function (branches on the sign of `x`).
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out[.., 0..jcount] = a * b` (or `+=` with `accumulate`), only touching the
/// first `jcount` columns. Strides come from each matrix's own width, so the
/// same kernel serves full products and active-prefix products over wider
/// buffers. Summation runs over k ascending.
pub fn matmul_into(out: &mut Matrix, a: &Matrix, b: &Matrix, jcount: usize, accumulate: bool) {
    assert_eq!(a.cols, b.rows, "inner dimensions disagree");
    assert_eq!(out.rows, a.rows, "output rows disagree");
    assert!(jcount <= b.cols && jcount <= out.cols, "column limit too wide");
    let (oc, bc, ac) = (out.cols, b.cols, a.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * oc..i * oc + jcount];
        if !accumulate {
            orow.fill(0.0);
        }
        for k in 0..ac {
            let aik = a.data[i * ac + k];
            let brow = &b.data[k * bc..k * bc + jcount];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[.., 0..a.cols] (+)= a^T * b`, reading only the first `jcount` columns
/// of `b` (and writing the first `jcount` of `out`). Inner sum over i ascending.
pub fn matmul_at_into(out: &mut Matrix, a: &Matrix, b: &Matrix, jcount: usize, accumulate: bool) {
    assert_eq!(a.rows, b.rows, "inner dimensions disagree");
    assert_eq!(out.rows, a.cols, "output rows disagree");
    assert!(jcount <= b.cols && jcount <= out.cols, "column limit too wide");
    let (oc, bc, ac) = (out.cols, b.cols, a.cols);
    for k in 0..a.cols {
        let orow = &mut out.data[k * oc..k * oc + jcount];
        if !accumulate {
            orow.fill(0.0);
        }
        for i in 0..a.rows {
            let aik = a.data[i * ac + k];
            let brow = &b.data[i * bc..i * bc + jcount];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out (+)= a * b^T` over the first `jcount` shared columns of `a` and `b`;
/// both operands are row-major with per-matrix strides. Inner sum over j
/// ascending.
pub fn matmul_bt_into(out: &mut Matrix, a: &Matrix, b: &Matrix, jcount: usize, accumulate: bool) {
    assert_eq!(out.rows, a.rows, "output rows disagree");
    assert_eq!(out.cols, b.rows, "output cols disagree");
    assert!(jcount <= a.cols && jcount <= b.cols, "column limit too wide");
    let (oc, bc, ac) = (out.cols, b.cols, a.cols);
    for i in 0..a.rows {
        let arow = &a.data[i * ac..i * ac + jcount];
        for k in 0..b.rows {
            let brow = &b.data[k * bc..k * bc + jcount];
            let mut sum = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                sum += av * bv;
            }
            let slot = &mut out.data[i * oc + k];
            if accumulate {
                *slot += sum;
            } else {
                *slot = sum;
            }
        }
    }
}

/// Deterministic generator used everywhere randomness is needed. ChaCha8 is
/// seedable, portable and identical across platforms for a given seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Matrix of i.i.d. uniform draws from `[lo, hi)`. Panics unless `lo < hi`.
pub fn seeded_uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Matrix {
    assert!(lo < hi, "uniform range is empty: lo={lo}, hi={hi}");
    let data = (0..rows * cols)
        .map(|_| rng.random_range(lo..hi))
        .collect();
    let m = Matrix { rows, cols, data };
    m.debug_check_finite();
    m
}
