//! Dense linear algebra, activations, the seeded generator and the
//! central-difference gradient oracle shared by the learning modules.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`; matrices are row-major [`Mat`].
//! Everything is 64-bit: gradient checks at 1e-4 relative tolerance need it.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

/// Row-major dense matrix; serialized as an array of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure_dim("Mat::from_vec", rows * cols, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entry".into()));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            ensure_dim("Mat::from_rows", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Mat::from_vec(rows.len(), cols, data)
    }

    /// Uniform entries in `[-r, r]`.
    pub fn uniform(rows: usize, cols: usize, r: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.uniform(-r, r)).collect();
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    /// `out += self · v` without shape checks; callers validate once up front.
    pub(crate) fn matvec_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(self.cols, v.len());
        debug_assert_eq!(self.rows, out.len());
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols.max(1))) {
            *o += dot(row, v);
        }
    }

    /// `out += selfᵀ · v`.
    pub(crate) fn matvec_t_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(self.rows, v.len());
        debug_assert_eq!(self.cols, out.len());
        for (vi, row) in v.iter().zip(self.data.chunks_exact(self.cols.max(1))) {
            if *vi != 0.0 {
                axpy(*vi, row, out);
            }
        }
    }

    /// `self += a ⊗ b` (outer product).
    pub(crate) fn outer_acc(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(self.rows, a.len());
        debug_assert_eq!(self.cols, b.len());
        let cols = self.cols;
        for (ai, row) in a.iter().zip(self.data.chunks_exact_mut(cols.max(1))) {
            if *ai != 0.0 {
                axpy(*ai, b, row);
            }
        }
    }
}

impl From<Mat> for Vec<Vec<f64>> {
    fn from(m: Mat) -> Self {
        m.to_rows()
    }
}

impl TryFrom<Vec<Vec<f64>>> for Mat {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Mat::from_rows(&rows)
    }
}

/// Matrix-vector product with shape validation.
pub fn matvec(m: &Mat, v: &[f64]) -> Result<Vec<f64>> {
    ensure_dim("matvec", m.cols, v.len())?;
    let mut out = vec![0.0; m.rows];
    m.matvec_acc(v, &mut out);
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a·x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// `log Σ exp(v_i)`, stable for any finite input.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Lowest index of the maximum entry.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Central-difference gradient `(f(p+εe_i) − f(p−εe_i)) / 2ε`.
pub fn finite_diff_grad<F>(mut f: F, p: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("eps must be positive, got {eps}")));
    }
    let mut probe = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe);
        probe[i] = orig - eps;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i}: f(p+e)={plus}, f(p-e)={minus}"
            )));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Named parameter blocks of a model, in a fixed order.
///
/// The flat vector of a model is the concatenation of its blocks; optimizers,
/// gradient checks and checkpoints all go through this view.
pub trait Parameters {
    fn blocks(&self) -> Vec<(String, &[f64])>;
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.blocks()
            .into_iter()
            .flat_map(|(_, b)| b.iter().copied())
            .collect()
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        ensure_dim("Parameters::set_flat", self.num_params(), flat.len())?;
        let mut offset = 0;
        for block in self.blocks_mut() {
            let n = block.len();
            block.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn fill(&mut self, value: f64) {
        for block in self.blocks_mut() {
            block.fill(value);
        }
    }

    fn all_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }
}

/// Seeded deterministic generator.
///
/// Backed by ChaCha8 (`rand_chacha::ChaCha8Rng`), whose output stream is
/// specified bit-for-bit and independent of platform and word size. Normal
/// draws use the ziggurat sampler from `rand_distr`.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child generator, e.g. one per fold.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.inner.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn gaussian(&mut self, mean: f64, sigma: f64) -> f64 {
        mean + sigma * self.normal()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Rng;
    use proptest::prelude::*;

    #[test]
    fn matvec_examples() {
        assert_eq!(
            matvec(&Mat::identity(3), &[1.0, 2.0, 3.0]).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        assert_eq!(
            matvec(&Mat::zeros(2, 3), &[5.0, 5.0, 5.0]).unwrap(),
            vec![0.0, 0.0]
        );
        let m = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matvec(&m, &[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn matvec_rejects_mismatch() {
        let err = matvec(&Mat::zeros(2, 3), &[1.0, 2.0]).unwrap_err();
        assert!(err.to_string().contains("expected 3, got 2"), "{err}");
    }

    #[test]
    fn transpose_and_outer_kernels() {
        let m = Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let mut out = vec![0.0; 3];
        m.matvec_t_acc(&[1.0, -1.0], &mut out);
        assert_eq!(out, vec![-3.0, -3.0, -3.0]);
        let mut acc = Mat::zeros(2, 2);
        acc.outer_acc(&[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(acc.as_slice(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&[0.0; 5]).unwrap();
        assert!(u.iter().all(|p| (p - 0.2).abs() < 1e-15));
        // Reference values from a 30-digit evaluation of exp(i)/Σexp.
        let s = softmax(&[1.0, 2.0, 3.0]).unwrap();
        let expected = [0.090_030_573_170_380_46, 0.244_728_471_054_797_6, 0.665_240_955_774_821_9];
        for (a, b) in s.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(softmax(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|p| p.iter().map(|x| x * x).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 3.5, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        let g = finite_diff_grad(|p| p[0] * p[1], &[3.0, 5.0], 1e-5).unwrap();
        assert!((g[0] - 5.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
        assert!(finite_diff_grad(|p| 1.0 / p[0], &[1e-5], 1e-5).is_err());
        assert!(finite_diff_grad(|_| 0.0, &[1.0], 0.0).is_err());
    }

    #[test]
    fn rng_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::new(43);
        assert_ne!(Rng::new(42).next_u64(), c.next_u64());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.2; 5]), 0);
    }

    proptest! {
        #[test]
        fn softmax_normalized(v in prop::collection::vec(-1e3f64..1e3, 1..20)) {
            let s = softmax(&v).unwrap();
            let sum: f64 = s.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(s.iter().all(|p| *p >= 0.0));
        }

        #[test]
        fn softmax_shift_invariant(
            v in prop::collection::vec(-1e3f64..1e3, 1..20),
            c in -50.0f64..50.0,
        ) {
            let a = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
