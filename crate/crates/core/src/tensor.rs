//! Dense vectors, matrices, the image–text similarity matrix and the seeded
//! random stream shared by every stage.
//!
//! All arithmetic is `f64`. Nothing here allocates beyond the values it
//! returns, and every function is pure on its inputs.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Norms below this are treated as zero by [`l2_normalize`].
pub const MIN_NORM: f64 = 1e-12;

/// Raw input features: an image proxy or the feature form of a text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("feature vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature vector"));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    /// Multiplies every entry by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }
}

impl TryFrom<Vec<f64>> for FeatureVector {
    type Error = Error;
    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<FeatureVector> for Vec<f64> {
    fn from(v: FeatureVector) -> Self {
        v.0
    }
}

/// A unit-norm encoded vector.
///
/// Only constructible through [`l2_normalize`] or by validating an existing
/// unit vector, so `‖e‖₂ = 1 ± 1e-9` always holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Accepts a vector that is already unit-norm (within 1e-9).
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("embedding"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        let n = norm(&values);
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "embedding norm {n} is not within 1e-9 of 1"
            )));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;
    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::from_unit(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales a raw slice to unit L2 norm.
pub fn normalize_slice(v: &[f64]) -> Result<Embedding> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("vector to normalize"));
    }
    let n = norm(v);
    if n < MIN_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(Embedding(v.iter().map(|x| x / n).collect()))
}

/// `v / ‖v‖₂`, failing with [`Error::ZeroVector`] when `‖v‖ < 1e-12`.
pub fn l2_normalize(v: &FeatureVector) -> Result<Embedding> {
    normalize_slice(v.as_slice())
}

/// Cosine of two unit vectors, clamped into `[-1, 1]` against rounding.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(dot(&a.0, &b.0).clamp(-1.0, 1.0))
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_flat(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                left: data.len(),
                right: rows * cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for row in rows {
            if row.len() != n_cols {
                return Err(Error::DimMismatch {
                    expected: n_cols,
                    got: row.len(),
                });
            }
            data.extend(row);
        }
        Ok(Self {
            rows: n_rows,
            cols: n_cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `Mᵀ x`: maps a length-`rows` input to a length-`cols` output.
    pub fn transpose_mul(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::DimMismatch {
                expected: self.rows,
                got: x.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (r, xr) in x.iter().enumerate() {
            if *xr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += xr * w;
            }
        }
        Ok(out)
    }

    /// `M x`: maps a length-`cols` input to a length-`rows` output.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimMismatch {
                expected: self.cols,
                got: x.len(),
            });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.to_rows()
    }
}

/// `S[i][j]` = cosine between image `i` and text `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl SimilarityMatrix {
    /// Wraps an arbitrary square grid; entries need not be cosines.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut entries = Vec::with_capacity(n * n);
        for row in rows {
            if row.len() != n {
                return Err(Error::DimMismatch {
                    expected: n,
                    got: row.len(),
                });
            }
            entries.extend(row);
        }
        Ok(Self { n, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
}

/// Builds the `N × N` image–text cosine matrix.
pub fn similarity_matrix(images: &[Embedding], texts: &[Embedding]) -> Result<SimilarityMatrix> {
    if images.is_empty() || texts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if images.len() != texts.len() {
        return Err(Error::LengthMismatch {
            left: images.len(),
            right: texts.len(),
        });
    }
    let n = images.len();
    let mut entries = Vec::with_capacity(n * n);
    for img in images {
        for txt in texts {
            entries.push(cosine_similarity(img, txt)?);
        }
    }
    Ok(SimilarityMatrix { n, entries })
}

/// Seeded random stream.
///
/// Uniforms come from ChaCha8 (53 high bits of each `u64`); Gaussians use the
/// Box–Muller transform evaluated with `libm`, so a given seed yields the same
/// bits on every platform. Not `Sync`: one owner per stream.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Independent stream keyed by `(seed, label)`.
    pub fn derive(seed: u64, label: &str) -> Self {
        let mut bytes = seed.to_le_bytes().to_vec();
        bytes.extend_from_slice(label.as_bytes());
        Self::new(stable_hash(&bytes))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)`; `bound` must be nonzero.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "below() needs a positive bound");
        // Rejection sampling keeps the draw unbiased.
        let bound = bound as u64;
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % bound) as usize;
            }
        }
    }

    /// Standard normal draw.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = libm::sqrt(-2.0 * libm::log(u1));
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * libm::sin(angle));
        radius * libm::cos(angle)
    }

    pub fn gaussian_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }

    /// Fisher–Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// First eight bytes of SHA-256, little-endian.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

/// Sum in a fixed pairwise tree order, independent of how the terms were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n if n <= 8 => values.iter().sum(),
        n => {
            let (l, r) = values.split_at(n / 2);
            pairwise_sum(l) + pairwise_sum(r)
        }
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(-t))` without overflow.
pub fn softplus_neg(t: f64) -> f64 {
    if t > 0.0 {
        (-t).exp().ln_1p()
    } else {
        -t + t.exp().ln_1p()
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn normalize_three_four() {
        let e = l2_normalize(&fv(&[3.0, 4.0])).unwrap();
        assert!((e.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((e.as_slice()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_unit_is_unchanged() {
        let e = l2_normalize(&fv(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(e.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_zero_fails() {
        assert_eq!(l2_normalize(&fv(&[0.0, 0.0])), Err(Error::ZeroVector));
        assert_eq!(
            l2_normalize(&fv(&[1e-13, 0.0])),
            Err(Error::ZeroVector)
        );
    }

    #[test]
    fn feature_vector_rejects_non_finite() {
        assert!(FeatureVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(FeatureVector::new(vec![]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let v = l2_normalize(&fv(&[0.3, -1.2, 2.0])).unwrap();
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        let a = l2_normalize(&fv(&[1.0, 0.0])).unwrap();
        let b = l2_normalize(&fv(&[0.0, 1.0])).unwrap();
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
        let a = l2_normalize(&fv(&[1.0, 2.0])).unwrap();
        let b = l2_normalize(&fv(&[2.0, 1.0])).unwrap();
        assert!((cosine_similarity(&a, &b).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn cosine_dim_mismatch() {
        let a = l2_normalize(&fv(&[1.0, 0.0])).unwrap();
        let b = l2_normalize(&fv(&[1.0, 0.0, 0.0])).unwrap();
        assert!(matches!(
            cosine_similarity(&a, &b),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn similarity_matrix_examples() {
        let e = |v: &[f64]| l2_normalize(&fv(v)).unwrap();
        let s = similarity_matrix(&[e(&[1.0, 0.0]), e(&[0.0, 1.0])], &[e(&[1.0, 0.0]), e(&[0.0, 1.0])])
            .unwrap();
        assert_eq!(s.entries(), &[1.0, 0.0, 0.0, 1.0]);

        let s = similarity_matrix(&[e(&[1.0, 1.0])], &[e(&[1.0, 0.0])]).unwrap();
        assert_eq!(s.n(), 1);
        assert!((s.get(0, 0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);

        assert_eq!(similarity_matrix(&[], &[]), Err(Error::EmptyBatch));
        assert!(matches!(
            similarity_matrix(&[e(&[1.0, 0.0])], &[e(&[1.0, 0.0]), e(&[0.0, 1.0])]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.gaussian().to_bits(), b.gaussian().to_bits());
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
        let mut c = SeededRng::derive(42, "x");
        let mut d = SeededRng::derive(42, "y");
        assert_ne!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = SeededRng::new(7);
        let n = 200_000;
        let xs = rng.gaussian_vec(n);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = SeededRng::new(3);
        let mut v: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64 * 0.5).collect();
        assert_eq!(pairwise_sum(&v), v.iter().sum::<f64>());
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus_neg(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus_neg(800.0) >= 0.0);
        assert!((softplus_neg(-800.0) - 800.0).abs() < 1e-9);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
    }

    fn nonzero_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, 1..12)
            .prop_filter("nonzero", |v| norm(v) > 1e-6)
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(v in nonzero_vec()) {
            let once = normalize_slice(&v).unwrap();
            let twice = normalize_slice(once.as_slice()).unwrap();
            for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!((norm(once.as_slice()) - 1.0).abs() < 1e-9);
        }

        #[test]
        fn normalize_ignores_positive_scale(v in nonzero_vec(), c in 1e-3f64..1e3) {
            let a = normalize_slice(&v).unwrap();
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            let b = normalize_slice(&scaled).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_is_symmetric((a, b) in (2usize..10).prop_flat_map(|d| (
            prop::collection::vec(-10.0f64..10.0, d),
            prop::collection::vec(-10.0f64..10.0, d),
        )).prop_filter("nonzero", |(a, b)| norm(a) > 1e-6 && norm(b) > 1e-6)) {
            let a = normalize_slice(&a).unwrap();
            let b = normalize_slice(&b).unwrap();
            let ab = cosine_similarity(&a, &b).unwrap();
            let ba = cosine_similarity(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn self_similarity_is_symmetric_with_unit_diagonal(
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..8)
                .prop_filter("nonzero", |rs| rs.iter().all(|r| norm(r) > 1e-6))
        ) {
            let embs: Vec<_> = rows.iter().map(|r| normalize_slice(r).unwrap()).collect();
            let s = similarity_matrix(&embs, &embs).unwrap();
            for i in 0..s.n() {
                prop_assert!((s.get(i, i) - 1.0).abs() < 1e-12);
                for j in 0..s.n() {
                    prop_assert!((s.get(i, j) - s.get(j, i)).abs() < 1e-12);
                }
            }
        }
    }
}
