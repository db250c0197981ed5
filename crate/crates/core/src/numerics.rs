//! Dense row-major matrices, a handful of numerically careful kernels, and the
//! project RNG.
//!
//! Every matrix product goes through a strided `dgemm`, so transposed operands
//! and column slices of a wider matrix (one attention head of a projection)
//! never need to be copied.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of length {} cannot hold a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!("row {i} has {} entries, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Entries drawn i.i.d. from `N(0, std^2)`.
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
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
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    /// Copy of the rows listed in `idx`, in that order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    /// Copy of columns `start..start + width`.
    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, width);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..start + width]);
        }
        out
    }

    pub fn set_column_block(&mut self, start: usize, block: &Matrix) {
        for i in 0..self.rows {
            self.row_mut(i)[start..start + block.cols].copy_from_slice(block.row(i));
        }
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows > 0 && row.len() != self.cols {
            return Err(Error::Shape(format!("pushing row of width {} onto {} columns", row.len(), self.cols)));
        }
        if self.rows == 0 {
            self.cols = row.len();
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Stack `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows == 0 {
            return Ok(other.clone());
        }
        if other.rows == 0 {
            return Ok(self.clone());
        }
        if self.cols != other.cols {
            return Err(Error::Shape(format!("vstack of widths {} and {}", self.cols, other.cols)));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Matrix { rows: self.rows + other.rows, cols: self.cols, data })
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(s);
        m
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!("add of {:?} and {:?}", self.shape(), other.shape())));
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += s * b);
        Ok(())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        let mut m = self.clone();
        m.add_scaled(other, -1.0)?;
        Ok(m)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Column means (a row vector of length `cols`).
    pub fn column_mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in self.iter_rows() {
            out.iter_mut().zip(r).for_each(|(o, x)| *o += x);
        }
        let n = self.rows.max(1) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// A read-only strided view: element `(i, j)` lives at `ptr[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub struct View<'a> {
    data: &'a [f64],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> View<'a> {
    pub fn of(m: &'a Matrix) -> Self {
        View { data: &m.data, offset: 0, rows: m.rows, cols: m.cols, rs: m.cols as isize, cs: 1 }
    }

    /// Columns `start..start + width` of `m`.
    pub fn columns(m: &'a Matrix, start: usize, width: usize) -> Self {
        assert!(start + width <= m.cols, "column view out of range");
        View { data: &m.data, offset: start, rows: m.rows, cols: width, rs: m.cols as isize, cs: 1 }
    }

    pub fn t(self) -> Self {
        View { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// `c = beta * c + alpha * a · b` with `c` written through a column block of
/// width `b.cols()` starting at column `c_col`.
pub fn gemm_into(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: &mut Matrix, c_col: usize) -> Result<()> {
    if a.cols != b.rows || c.rows != a.rows || c_col + b.cols > c.cols {
        return Err(Error::Shape(format!(
            "gemm of {}x{} by {}x{} into {}x{} at column {c_col}",
            a.rows, a.cols, b.rows, b.cols, c.rows, c.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return Ok(());
    }
    if k == 0 {
        for i in 0..m {
            c.row_mut(i)[c_col..c_col + n].iter_mut().for_each(|x| *x *= beta);
        }
        return Ok(());
    }
    let rsc = c.cols as isize;
    // SAFETY: the shape checks above keep every strided access inside the
    // three buffers; `c` is exclusively borrowed and cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs,
            a.cs,
            b.data.as_ptr().add(b.offset),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr().add(c_col),
            rsc,
            1,
        );
    }
    Ok(())
}

/// `a · b` over strided views.
pub fn gemm(a: View<'_>, b: View<'_>) -> Result<Matrix> {
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm_into(1.0, a, b, 0.0, &mut c, 0)?;
    Ok(c)
}

/// Standard matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm(View::of(a), View::of(b))
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm(View::of(a).t(), View::of(b))
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm(View::of(a), View::of(b).t())
}

/// In-place max-subtracted softmax of one row at temperature `t`.
pub fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // fully masked row; leave it to the caller
        return;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = ((*x - max) / temperature).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

/// Row-wise softmax at the given temperature.
pub fn softmax_rows(m: &Matrix, temperature: f64) -> Result<Matrix> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Parameter(format!("softmax temperature must be positive, got {temperature}")));
    }
    let mut out = m.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i), temperature);
    }
    Ok(out)
}

/// Given `p = softmax(s / t)` and `dL/dp`, returns `dL/ds`.
pub fn softmax_backward(p: &[f64], dp: &[f64], temperature: f64, ds: &mut [f64]) {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    for ((d, &pi), &gi) in ds.iter_mut().zip(p).zip(dp) {
        *d = pi * (gi - dot) / temperature;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Indices of the `k` largest values, larger value first, ties toward the
/// smaller index. NaN never wins.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let key = |i: usize| if values[i].is_nan() { f64::NEG_INFINITY } else { values[i] };
    idx.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    idx.truncate(k.min(values.len()));
    idx
}

/// Project RNG: xoshiro256** seeded through SplitMix64, with explicit
/// conversions so sample streams are reproducible outside Rust.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: Xoshiro256StarStar,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { inner: Xoshiro256StarStar::seed_from_u64(seed) }
    }

    /// Independent child stream derived from this generator's seed lineage.
    pub fn fork(&mut self, stream: u64) -> Rng {
        let s = self.next_u64() ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Rng::new(s)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (rejection sampling, no modulo bias).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return (x % n) as usize;
            }
        }
    }

    /// Standard normal via Box–Muller (one draw per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Uniformly random `k`-subset of `0..n`, returned sorted.
    pub fn subset(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let k = k.min(n);
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx.sort_unstable();
        idx
    }
}

pub const GUMBEL_CLAMP: f64 = 1e-12;

/// Gumbel(0, 1) transform of a uniform draw, clamped away from 0 and 1.
#[inline]
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP);
    -(-u.ln()).ln()
}

pub fn gumbel_noise(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| gumbel_from_uniform(rng.uniform())).collect()
}

/// Random matrix with orthonormal rows (`rows <= cols`), by Gram–Schmidt on a
/// Gaussian draw (equivalent to the Q factor of its QR decomposition).
pub fn random_orthonormal_rows(rows: usize, cols: usize, rng: &mut Rng) -> Result<Matrix> {
    if rows > cols {
        return Err(Error::Parameter(format!("cannot fit {rows} orthonormal rows in dimension {cols}")));
    }
    let mut m = Matrix::gaussian(rows, cols, 1.0, rng);
    for i in 0..rows {
        // two passes of modified Gram-Schmidt for stability
        for _ in 0..2 {
            for j in 0..i {
                let dot: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
                let prev = m.row(j).to_vec();
                m.row_mut(i).iter_mut().zip(&prev).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        m.row_mut(i).iter_mut().for_each(|x| *x /= norm);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                c[(i, j)] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_hand_cases() {
        let i = Matrix::identity(2);
        let b = Matrix::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap(), b);
        let r = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let c = Matrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().as_slice(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(7);
        let a = Matrix::gaussian(7, 5, 1.0, &mut rng);
        let b = Matrix::gaussian(5, 3, 1.0, &mut rng);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive(&a, &b)) < 1e-12);
        assert!(matmul_tn(&a.transpose(), &b).unwrap().max_abs_diff(&naive(&a, &b)) < 1e-12);
        assert!(matmul_nt(&a, &b.transpose()).unwrap().max_abs_diff(&naive(&a, &b)) < 1e-12);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn column_views_multiply_like_copies() {
        let mut rng = Rng::new(3);
        let a = Matrix::gaussian(6, 8, 1.0, &mut rng);
        let b = Matrix::gaussian(6, 8, 1.0, &mut rng);
        let got = gemm(View::columns(&a, 4, 4), View::columns(&b, 4, 4).t()).unwrap();
        let want = naive(&a.column_block(4, 4), &b.column_block(4, 4).transpose());
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0, 0.0], vec![2f64.ln(), 0.0, f64::NEG_INFINITY]]).unwrap();
        let s = softmax_rows(&m, 1.0).unwrap();
        for j in 0..3 {
            assert!((s[(0, j)] - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((s[(1, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s[(1, 1)] - 1.0 / 3.0).abs() < 1e-15);
        let big = softmax_rows(&Matrix::from_rows(&[vec![1000.0, 0.0]]).unwrap(), 1.0).unwrap();
        assert_eq!(big[(0, 0)], 1.0);
        assert!(big[(0, 1)] < 1e-300 && big.is_finite());
        assert!(matches!(softmax_rows(&m, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(softmax_rows(&m, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn gumbel_fixed_point_and_determinism() {
        assert!(gumbel_from_uniform((-1.0f64).exp()).abs() < 1e-15);
        let a = gumbel_noise(&mut Rng::new(42), 4);
        let b = gumbel_noise(&mut Rng::new(42), 4);
        assert_eq!(a, b);
        assert!(gumbel_from_uniform(0.0).is_finite() && gumbel_from_uniform(1.0).is_finite());
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        let xs = gumbel_noise(&mut Rng::new(11), 100_000);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((mean - 0.577_215_664_901_532_9).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn softmax_grad_matches_finite_difference() {
        let s = [0.3, -1.2, 2.0, 0.1];
        let w = [1.0, -2.0, 0.5, 3.0];
        let f = |s: &[f64]| {
            let mut p = s.to_vec();
            softmax_in_place(&mut p, 0.7);
            p.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut p = s.to_vec();
        softmax_in_place(&mut p, 0.7);
        let mut ds = [0.0; 4];
        softmax_backward(&p, &w, 0.7, &mut ds);
        for i in 0..4 {
            let (mut hi, mut lo) = (s, s);
            hi[i] += 1e-6;
            lo[i] -= 1e-6;
            let fd = (f(&hi) - f(&lo)) / 2e-6;
            assert!((fd - ds[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn top_k_tie_breaks_toward_smaller_index() {
        assert_eq!(top_k_indices(&[0.3, 0.3, 0.3, 0.1], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[0.1, 0.4, 0.4, 0.1], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[1.0], 5), vec![0]);
    }

    #[test]
    fn orthonormal_rows_are_orthonormal() {
        let m = random_orthonormal_rows(6, 8, &mut Rng::new(1)).unwrap();
        let g = matmul_nt(&m, &m).unwrap();
        assert!(g.max_abs_diff(&Matrix::identity(6)) < 1e-12);
        assert!(random_orthonormal_rows(9, 8, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn rng_subset_and_below() {
        let mut rng = Rng::new(5);
        let s = rng.subset(10, 4);
        assert_eq!(s.len(), 4);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!((0..1000).all(|_| rng.below(3) < 3));
    }

    mod props {
        use super::super::{matmul, softmax_rows, Matrix, Rng};
        use proptest::prelude::{any, prop, prop_assert, proptest};

        proptest! {
            #[test]
            fn softmax_shift_invariant(row in prop::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0, t in 0.05f64..5.0) {
                let a = Matrix::from_vec(1, row.len(), row.clone()).unwrap();
                let b = Matrix::from_vec(1, row.len(), row.iter().map(|x| x + c).collect()).unwrap();
                let sa = softmax_rows(&a, t).unwrap();
                let sb = softmax_rows(&b, t).unwrap();
                prop_assert!(sa.max_abs_diff(&sb) < 1e-12);
                let sum: f64 = sa.as_slice().iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(sa.as_slice().iter().all(|&x| x >= 0.0));
            }

            #[test]
            fn matmul_agrees_with_oracle(m in 1usize..9, k in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
                let mut rng = Rng::new(seed);
                let a = Matrix::gaussian(m, k, 1.0, &mut rng);
                let b = Matrix::gaussian(k, n, 1.0, &mut rng);
                let c = matmul(&a, &b).unwrap();
                prop_assert!(c.max_abs_diff(&super::naive(&a, &b)) < 1e-12);
                prop_assert!(c.is_finite());
            }
        }
    }
}
