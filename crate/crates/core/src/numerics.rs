//! Dense row-major matrices, the leading singular triple, and keyed random
//! streams.
//!
//! Every reduction here sums in a fixed loop order so that results are
//! bitwise reproducible for identical inputs.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `rows x cols` matrix stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
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

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Wraps `data` (row-major). Rejects a wrong length or non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "Matrix::from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows in Matrix::from_rows"));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    /// Outer product `u v^T`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        let mut data = Vec::with_capacity(u.len() * v.len());
        for &a in u {
            data.extend(v.iter().map(|&b| a * b));
        }
        Matrix {
            rows: u.len(),
            cols: v.len(),
            data,
        }
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Contiguous block of rows `[start, end)`.
    #[inline]
    pub fn row_block(&self, start: usize, end: usize) -> &[f64] {
        &self.data[start * self.cols..end * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    /// `self * x` for a vector `x` of length `cols`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "mul_vec length");
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `self^T * y` for a vector `y` of length `rows`.
    pub fn tr_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows, "tr_mul_vec length");
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            axpy(yr, self.row(r), &mut out);
        }
        out
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    /// `||self - other||_F`; panics on shape mismatch.
    pub fn frobenius_distance(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "frobenius_distance shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Sequential dot product.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Standard matrix product with a fixed i-k-j summation order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            axpy(a.data[i * a.cols + k], b.row(k), out_row);
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("matmul overflowed".into()));
    }
    Ok(out)
}

/// Leading singular triple `m ~ s u v^T` plus convergence diagnostics.
#[derive(Clone, Debug)]
pub struct SingularTriple {
    pub u: Vec<f64>,
    pub s: f64,
    pub v: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl SingularTriple {
    pub fn reconstruct(&self) -> Matrix {
        let scaled: Vec<f64> = self.u.iter().map(|x| x * self.s).collect();
        Matrix::outer(&scaled, &self.v)
    }
}

/// Leading singular triple by power iteration on the smaller Gram matrix.
///
/// When the iteration budget runs out the best iterate is returned with
/// `converged = false`.
pub fn top_singular_pair(m: &Matrix, iters: usize, tol: f64) -> Result<SingularTriple> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::contract("top_singular_pair on an empty matrix"));
    }
    if iters == 0 {
        return Err(Error::contract("top_singular_pair needs iters >= 1"));
    }
    // Work on the side with the smaller Gram matrix.
    let left_side = m.rows <= m.cols;
    let gram = if left_side {
        matmul(m, &m.transpose())?
    } else {
        matmul(&m.transpose(), m)?
    };
    let n = gram.rows;

    let start = (0..n)
        .max_by(|&a, &b| gram.get(a, a).total_cmp(&gram.get(b, b)).then(b.cmp(&a)))
        .unwrap_or(0);
    let mut x = gram.row(start).to_vec();
    let x_norm = norm(&x);
    if x_norm == 0.0 {
        let e1 = |len: usize| {
            let mut e = vec![0.0; len];
            e[0] = 1.0;
            e
        };
        return Ok(SingularTriple {
            u: e1(m.rows),
            s: 0.0,
            v: e1(m.cols),
            converged: true,
            iterations: 0,
        });
    }
    x.iter_mut().for_each(|xi| *xi /= x_norm);

    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=iters {
        iterations = it;
        let mut y = gram.mul_vec(&x);
        let y_norm = norm(&y);
        if y_norm == 0.0 {
            converged = true;
            break;
        }
        y.iter_mut().for_each(|yi| *yi /= y_norm);
        let delta = y
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        x = y;
        if delta <= tol {
            converged = true;
            break;
        }
    }

    // Recover the other singular vector directly from m for accuracy.
    let (u, v, s) = if left_side {
        let mut v = m.tr_mul_vec(&x);
        let s = norm(&v);
        if s > 0.0 {
            v.iter_mut().for_each(|vi| *vi /= s);
        }
        (x, v, s)
    } else {
        let mut u = m.mul_vec(&x);
        let s = norm(&u);
        if s > 0.0 {
            u.iter_mut().for_each(|ui| *ui /= s);
        }
        (u, x, s)
    };
    Ok(SingularTriple {
        u,
        s,
        v,
        converged,
        iterations,
    })
}

/// Deterministic random stream keyed by `(seed, stream id)`.
///
/// Backed by ChaCha8, whose stream parameter gives independent sequences for
/// the same seed. Child streams are derived by hashing a label into the id.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Fresh stream whose id depends only on this stream's id and `label`.
    /// The parent's position is irrelevant.
    pub fn derive(&self, label: &str) -> RngStream {
        RngStream::new(self.seed, splitmix64(self.stream ^ fnv1a(label.as_bytes())))
    }

    pub fn derive_index(&self, index: u64) -> RngStream {
        RngStream::new(
            self.seed,
            splitmix64(self.stream.wrapping_add(splitmix64(index ^ 0x9e37_79b9_7f4a_7c15))),
        )
    }

    /// Uniform index in `[0, n)`.
    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `n` i.i.d. standard normal draws.
pub fn normal_sample(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.standard_normal()).collect()
}
