//! Minimal deterministic numeric kernels.
//!
//! Everything else in the crate is built on these: a row-major `f32` matrix,
//! a counter-based RNG (splitmix64) that produces the same draw sequence on
//! every platform, and a handful of vector kernels. Model math stays in
//! `f32`; dot products, reductions and normalizers accumulate in `f64`.

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from explicit row-major data. Errors if the length disagrees.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch(format!(
                "matrix {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::DimMismatch("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(Self { rows: r, cols: c, data })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Fill with i.i.d. Gaussian entries, `std` scale.
    pub fn randn(rows: usize, cols: usize, std: f32, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.next_gaussian() as f32 * std).collect();
        Self { rows, cols, data }
    }

    /// Transposed copy.
    pub fn transposed(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }
}

/// Matrix product with `f64` accumulation.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimMismatch(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let mut acc = vec![0.0f64; b.cols];
    for i in 0..a.rows {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = a.row(i);
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = b.row(k);
            let aik = aik as f64;
            for (j, &bkj) in brow.iter().enumerate() {
                acc[j] += aik * bkj as f64;
            }
        }
        let orow = out.row_mut(i);
        for (j, &v) in acc.iter().enumerate() {
            orow[j] = v as f32;
        }
    }
    Ok(out)
}

/// `x @ w` for a single row vector `x` (len = w.rows), `f64` accumulation.
pub fn vec_matmul(x: &[f32], w: &Matrix) -> Result<Vec<f32>> {
    if x.len() != w.rows {
        return Err(Error::DimMismatch(format!(
            "vec_matmul len {} by {}x{}",
            x.len(),
            w.rows,
            w.cols
        )));
    }
    let mut acc = vec![0.0f64; w.cols];
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        let wrow = w.row(k);
        let xk = xk as f64;
        for (j, &wkj) in wrow.iter().enumerate() {
            acc[j] += xk * wkj as f64;
        }
    }
    Ok(acc.iter().map(|&v| v as f32).collect())
}

/// Dot product with `f64` accumulation.
#[inline]
pub fn dot(u: &[f32], v: &[f32]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let mut acc = 0.0f64;
    for (a, b) in u.iter().zip(v) {
        acc += *a as f64 * *b as f64;
    }
    acc
}

// ---------------------------------------------------------------------------
// Vector kernels
// ---------------------------------------------------------------------------

/// Numerically stable softmax with temperature. Probability vectors are kept
/// in `f64` so they normalize tightly.
pub fn softmax(v: &[f32], temperature: f32) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
    }
    if v.is_empty() {
        return Err(Error::InvalidArgument("softmax of empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("softmax input must be finite".into()));
    }
    let t = temperature as f64;
    let max = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut exps = vec![0.0f64; v.len()];
    let mut sum = 0.0f64;
    for (e, &x) in exps.iter_mut().zip(v) {
        *e = ((x as f64 - max) / t).exp();
        sum += *e;
    }
    for e in exps.iter_mut() {
        *e /= sum;
    }
    Ok(exps)
}

/// RMS normalization: `out[i] = gain[i] * v[i] / sqrt(mean(v^2) + eps)`.
pub fn rmsnorm(v: &[f32], gain: &[f32], eps: f32) -> Result<Vec<f32>> {
    if v.len() != gain.len() {
        return Err(Error::DimMismatch(format!(
            "rmsnorm value len {} vs gain len {}",
            v.len(),
            gain.len()
        )));
    }
    let ms = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>() / v.len() as f64;
    let inv = 1.0 / (ms + eps as f64).sqrt();
    Ok(v.iter().zip(gain).map(|(&x, &g)| (x as f64 * inv) as f32 * g).collect())
}

/// Cosine similarity of two nonzero vectors.
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f32> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch(format!("cosine lens {} vs {}", u.len(), v.len())));
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::InvalidArgument("cosine similarity of zero vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)) as f32)
}

/// Index of the maximum entry (first on ties).
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &x) in v.iter().enumerate() {
        if x > best_v {
            best_v = x;
            best = i;
        }
    }
    best
}

/// Draw an index from a probability vector. The distribution must sum to 1
/// within 1e-6.
pub fn sample_categorical(p: &[f64], rng: &mut Rng) -> Result<usize> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution("empty".into()));
    }
    let mut sum = 0.0f64;
    for &x in p {
        if !(x >= 0.0) || !x.is_finite() {
            return Err(Error::InvalidDistribution(format!("entry {x}")));
        }
        sum += x;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidDistribution(format!("sums to {sum}")));
    }
    let u = rng.next_f64() * sum;
    let mut cdf = 0.0f64;
    for (i, &x) in p.iter().enumerate() {
        cdf += x;
        if u < cdf {
            return Ok(i);
        }
    }
    // Tail guard for rounding: last entry with nonzero mass.
    Ok(p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1))
}

// ---------------------------------------------------------------------------
// Rng
// ---------------------------------------------------------------------------

/// Counter-based deterministic RNG (splitmix64).
///
/// The state advances by the fixed golden-gamma increment and each output is
/// a finalizing hash of the state, so the draw sequence for a seed is
/// identical on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Derive an independent stream for a labelled sub-task.
    pub fn fork(&self, label: u64) -> Rng {
        let mut r = Rng::new(self.state ^ label.wrapping_mul(0xA24BAED4963EE407));
        r.next_u64();
        Rng::new(r.next_u64())
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [0, n).
    #[inline]
    pub fn next_below(&mut self, n: usize) -> usize {
        (self.next_f64() * n as f64) as usize % n.max(1)
    }

    /// Standard normal via Box-Muller.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let u2 = self.next_f64();
        let u1 = u1.max(1e-300);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};

    #[test]
    fn splitmix64_reference_vectors() {
        let mut r = Rng::new(0);
        assert_eq!(r.next_u64(), 0xe220a8397b1dcdaf);
        assert_eq!(r.next_u64(), 0x6e789e6aa1b965f4);
        assert_eq!(r.next_u64(), 0x06c45d188009454f);
        let mut r = Rng::new(0x123456789abcdef);
        assert_eq!(r.next_u64(), 0x157a3807a48faa9d);
        assert_eq!(r.next_u64(), 0xd573529b34a1d093);
        assert_eq!(r.next_u64(), 0x2f90b72e996dccbe);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut rng = Rng::new(7);
        let a = Matrix::randn(3, 4, 1.0, &mut rng);
        let id = Matrix::identity(4);
        assert_eq!(matmul(&a, &id).unwrap(), a);
        let z = Matrix::zeros(4, 2);
        let az = matmul(&a, &z).unwrap();
        assert!(az.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_small_oracle() {
        // [[1,2],[3,4]] x [[5],[6]] = [[17],[39]] (naive triple loop by hand)
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![5.0, 6.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data, vec![17.0, 39.0]);
    }

    #[test]
    fn matmul_dim_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn softmax_symmetry_and_oracle() {
        let p = softmax(&[0.0, 0.0], 1.0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-9 && (p[1] - 0.5).abs() < 1e-9);
        // High-precision scalar oracle for [1,2,3].
        let p = softmax(&[1.0, 2.0, 3.0], 1.0).unwrap();
        let expect = [0.09003057, 0.24472847, 0.66524096];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let v = [0.3f32, -1.2, 4.0, 2.2];
        let shifted: Vec<f32> = v.iter().map(|x| x + 13.5).collect();
        let a = softmax(&v, 1.0).unwrap();
        let b = softmax(&shifted, 1.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[1.0, f32::NAN], 1.0).is_err());
        assert!(softmax(&[1.0, 2.0], 0.0).is_err());
        assert!(softmax(&[1.0, 2.0], -1.0).is_err());
    }

    #[test]
    fn rmsnorm_unit_and_oracle() {
        let out = rmsnorm(&[1.0, 1.0, 1.0, 1.0], &[1.0; 4], 0.0).unwrap();
        assert_eq!(out, vec![1.0; 4]);
        let out = rmsnorm(&[3.0, 4.0], &[1.0, 1.0], 0.0).unwrap();
        assert!((out[0] - 0.84853).abs() < 1e-5);
        assert!((out[1] - 1.13137).abs() < 1e-5);
        assert!(rmsnorm(&[1.0], &[1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn rmsnorm_scale_invariance() {
        let v = [0.5f32, -2.0, 3.25, 0.75];
        let g = [1.1f32, 0.9, 1.0, 1.3];
        let scaled: Vec<f32> = v.iter().map(|x| x * 7.0).collect();
        let a = rmsnorm(&v, &g, 0.0).unwrap();
        let b = rmsnorm(&scaled, &g, 0.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-6);
        assert!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-9);
        assert!((cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.70711).abs() < 1e-5);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn categorical_degenerate_and_determinism() {
        let mut rng = Rng::new(3);
        for _ in 0..32 {
            assert_eq!(sample_categorical(&[1.0, 0.0, 0.0], &mut rng).unwrap(), 0);
        }
        let draws = |seed: u64| -> Vec<usize> {
            let mut rng = Rng::new(seed);
            (0..64).map(|_| sample_categorical(&[0.25; 4], &mut rng).unwrap()).collect()
        };
        assert_eq!(draws(11), draws(11));
        assert_ne!(draws(11), draws(12));
    }

    #[test]
    fn categorical_rejects_non_distribution() {
        let mut rng = Rng::new(1);
        assert!(sample_categorical(&[0.5, 0.6], &mut rng).is_err());
        assert!(sample_categorical(&[-0.1, 1.1], &mut rng).is_err());
        assert!(sample_categorical(&[], &mut rng).is_err());
    }

    #[test]
    fn categorical_monte_carlo_frequencies() {
        // Empirical frequencies over 1e5 draws within +/-0.01 of p (vocab 8).
        let p = [0.05f64, 0.2, 0.1, 0.25, 0.03, 0.07, 0.13, 0.17];
        let mut rng = Rng::new(99);
        let n = 100_000;
        let mut counts = [0usize; 8];
        for _ in 0..n {
            counts[sample_categorical(&p, &mut rng).unwrap()] += 1;
        }
        for (c, &pi) in counts.iter().zip(&p) {
            let freq = *c as f64 / n as f64;
            assert!(
                (freq - pi).abs() < 0.01,
                "freq {freq} far from p {pi}"
            );
        }
    }

    proptest! {
        #[test]
        fn matmul_associative(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let a = Matrix::randn(3, 4, 0.5, &mut rng);
            let b = Matrix::randn(4, 5, 0.5, &mut rng);
            let c = Matrix::randn(5, 2, 0.5, &mut rng);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in left.data.iter().zip(&right.data) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn softmax_sums_to_one(v in proptest::collection::vec(-50.0f32..50.0, 1..32)) {
            let p = softmax(&v, 1.0).unwrap();
            let sum: f64 = p.iter().map(|&x| x as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&x| x > 0.0));
        }
    }
}
