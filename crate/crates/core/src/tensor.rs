//! Dense row-major `f32` tensors, a seeded random source, and a
//! central-difference gradient oracle.
//!
//! Reductions accumulate in `f64` and round once at the end.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that every extent is positive, that the
    /// buffer length matches the shape, and that every element is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::invalid(format!("shape {shape:?} has a zero or missing extent")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("element {i} is not finite")));
        }
        Ok(Tensor { shape, data })
    }

    /// One-dimensional tensor over `data`.
    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        assert!(n > 0, "zero-sized tensor");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite tensor element");
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix whose trailing extents form a row.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Length of one row (product of all extents after the first).
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.row_len())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Stacks equal-length rows into an `n x d` tensor.
    pub fn stack_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero rows"))?
            .as_ref()
            .len();
        let mut data = Vec::with_capacity(rows.len() * first);
        for r in rows {
            let r = r.as_ref();
            if r.len() != first {
                return Err(Error::invalid(format!(
                    "row length {} differs from {first}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), first], data)
    }

    /// Selects rows by index into a new `k x d` tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let n = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor::from_parts_unchecked(shape, data)
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts_unchecked(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f32) -> Self {
        self.map(|v| v * k)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Tensor::from_parts_unchecked(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Adds `v` to every row of a matrix-shaped tensor.
    pub fn add_row(&self, v: &[f32]) -> Result<Self> {
        if v.len() != self.row_len() {
            return Err(Error::invalid(format!(
                "row vector of length {} does not match row length {}",
                v.len(),
                self.row_len()
            )));
        }
        let data = self
            .data
            .chunks_exact(v.len())
            .flat_map(|r| r.iter().zip(v).map(|(&a, &b)| a + b))
            .collect();
        Ok(Tensor::from_parts_unchecked(self.shape.clone(), data))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

/// Elementwise sign with `sign(0) = 0`.
pub fn signum(t: &Tensor) -> Tensor {
    t.map(sign_f32)
}

#[inline]
pub fn sign_f32(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Seeded ChaCha8 stream. The same seed yields the same stream on every
/// platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    /// Standard normal draw by the Box-Muller transform; the second value of
    /// each pair is cached for the next call.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] keeps ln(u1) finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Child generator whose seed is derived from this one's seed and `stream`.
    /// Does not advance `self`.
    pub fn derive(&self, stream: u64) -> SeededRng {
        SeededRng::new(derive_seed(self.seed, stream))
    }
}

/// SplitMix64 mix of a base seed and a stream id.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// I.i.d. Gaussian tensor with the given mean and standard deviation.
pub fn sample_gaussian(rng: &mut SeededRng, shape: &[usize], mean: f32, std: f32) -> Result<Tensor> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::invalid(format!("standard deviation must be >= 0, got {std}")));
    }
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| (mean as f64 + std as f64 * rng.standard_normal()) as f32)
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Central-difference gradient of `loss` at `at`.
///
/// The denominator is the step actually realised in `f32`, not `2h`, so
/// rounding of `x +/- h` does not bias the estimate.
pub fn fd_gradient<F>(loss: F, at: &Tensor, h: f32) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let mut probe = at.clone();
    let mut grad = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let x = at.data[i];
        let (xp, xm) = (x + h, x - h);
        probe.data[i] = xp;
        let up = loss(&probe);
        probe.data[i] = xm;
        let down = loss(&probe);
        probe.data[i] = x;
        grad.push(((up - down) / (xp as f64 - xm as f64)) as f32);
    }
    Tensor::from_parts_unchecked(at.shape.clone(), grad)
}

/// Largest componentwise error relative to the largest reference magnitude.
/// Used by the gradient checks throughout the test suites.
pub fn max_relative_error(analytic: &[f32], reference: &[f32]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let scale = reference
        .iter()
        .chain(analytic)
        .fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| (a as f64 - r as f64).abs())
        .fold(0.0, f64::max)
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_std_gives_mean() {
        let mut rng = SeededRng::new(1);
        let t = sample_gaussian(&mut rng, &[3], 0.0, 0.0).unwrap();
        assert_eq!(t.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn negative_std_rejected() {
        let mut rng = SeededRng::new(1);
        assert!(matches!(
            sample_gaussian(&mut rng, &[3], 0.0, -1.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn same_seed_same_stream() {
        let a = sample_gaussian(&mut SeededRng::new(42), &[257], 0.5, 2.0).unwrap();
        let b = sample_gaussian(&mut SeededRng::new(42), &[257], 0.5, 2.0).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = SeededRng::new(7);
        let t = sample_gaussian(&mut rng, &[100_000], 0.0, 1.0).unwrap();
        let mean = t.mean();
        let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn signum_examples() {
        let t = Tensor::from_vec(vec![-5.0, 0.0, 0.3]).unwrap();
        assert_eq!(signum(&t).data(), &[-1.0, 0.0, 1.0]);
        let z = Tensor::zeros(&[4]);
        assert_eq!(signum(&z).data(), z.data());
    }

    #[test]
    fn fd_quadratic() {
        let at = Tensor::from_vec(vec![1.0, 2.0]).unwrap();
        let g = fd_gradient(|x| x.data().iter().map(|&v| (v as f64).powi(2)).sum(), &at, 1e-3);
        assert!((g.data()[0] - 2.0).abs() < 1e-5);
        assert!((g.data()[1] - 4.0).abs() < 1e-5);
    }

    #[test]
    fn fd_constant_is_zero() {
        let at = Tensor::from_vec(vec![0.3, -2.0, 9.0]).unwrap();
        let g = fd_gradient(|_| 4.2, &at, 1e-3);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fd_exponential() {
        let at = Tensor::from_vec(vec![0.0, 0.0]).unwrap();
        let g = fd_gradient(|x| x.data().iter().map(|&v| (v as f64).exp()).sum(), &at, 1e-3);
        // d/dx e^x at 0 is 1
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-5, "{v}");
        }
    }

    #[test]
    fn rejects_non_finite_and_bad_shapes() {
        assert!(Tensor::from_vec(vec![1.0, f32::NAN]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    proptest! {
        #[test]
        fn signum_is_ternary_and_idempotent(v in proptest::collection::vec(-1e6f32..1e6, 1..64)) {
            let t = Tensor::from_vec(v).unwrap();
            let s = signum(&t);
            prop_assert!(s.data().iter().all(|&x| x == -1.0 || x == 0.0 || x == 1.0));
            prop_assert_eq!(signum(&s), s);
        }
    }
}
