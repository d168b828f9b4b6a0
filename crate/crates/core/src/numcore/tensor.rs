use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::NumError;

/// Dense row-major array of `f64` with an optional gradient buffer.
///
/// A tensor "requires grad" exactly when it carries a gradient buffer; the
/// buffer always has the same length as `values`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, NumError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(NumError::Dimension(format!("invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(NumError::Dimension(format!("shape {shape:?} needs {n} values, got {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NumError::NonFinite("tensor construction".into()));
        }
        Ok(Self { shape, values, grad: None })
    }

    /// Skips the finiteness scan; the tape checks every node it records.
    pub(crate) fn matrix_unchecked(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, values.len());
        Self { shape: vec![rows, cols], values, grad: None }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, NumError> {
        Self::new(vec![rows, cols], values)
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumError::Dimension("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, values: vec![0.0; n], grad: None }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, values: vec![value; n], grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1, 1], values: vec![value], grad: None }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    /// Seeded Gaussian draws with mean zero and standard deviation `std`.
    pub fn randn<R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let values = (0..n).map(|_| normal.sample(rng)).collect();
        Self { shape, values, grad: None }
    }

    /// Attaches a zeroed gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.grad = Some(vec![0.0; self.values.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    /// Adds `delta` into the gradient buffer. No-op for tensors without one.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<(), NumError> {
        let Some(g) = self.grad.as_mut() else {
            return Ok(());
        };
        if g.len() != delta.len() {
            return Err(NumError::Dimension(format!("gradient length {} vs tensor length {}", delta.len(), g.len())));
        }
        for (a, d) in g.iter_mut().zip(delta) {
            *a += d;
        }
        Ok(())
    }

    /// Rows and columns of a rank-1 or rank-2 tensor. Vectors read as 1×n.
    pub fn dims2(&self) -> Result<(usize, usize), NumError> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(NumError::Dimension(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map(|d| d.0).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map(|d| d.1).unwrap_or(0)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    /// Same data, new shape with an equal element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, NumError> {
        let n: usize = shape.iter().product();
        if n != self.values.len() || shape.contains(&0) {
            return Err(NumError::Dimension(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Detached copy: same shape and values, no gradient buffer.
    pub fn detached(&self) -> Self {
        Self { shape: self.shape.clone(), values: self.values.clone(), grad: None }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Hex SHA-256 over the shape manifest and little-endian values.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for &e in &self.shape {
            h.update((e as u64).to_le_bytes());
        }
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Square root of the sum of squared entries.
pub fn frobenius_norm(m: &Tensor) -> Result<f64, NumError> {
    if m.is_empty() {
        return Err(NumError::Dimension("empty matrix".into()));
    }
    Ok(m.values().iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// `m / (‖m‖_F + eps)`.
pub fn normalize_frobenius(m: &Tensor, eps: f64) -> Result<Tensor, NumError> {
    if !(eps > 0.0) {
        return Err(NumError::Parameter(format!("eps must be positive, got {eps}")));
    }
    let denom = frobenius_norm(m)? + eps;
    let values = m.values().iter().map(|v| v / denom).collect();
    Tensor::new(m.shape().to_vec(), values)
}

/// Unbiased covariance of a B×d batch (divisor B−1).
pub fn batch_covariance(f: &Tensor) -> Result<Tensor, NumError> {
    let (b, d) = f.dims2()?;
    if b < 2 {
        return Err(NumError::DegenerateBatch(b));
    }
    let mut mean = vec![0.0; d];
    for r in 0..b {
        for (m, v) in mean.iter_mut().zip(f.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= b as f64);
    let mut cov = vec![0.0; d * d];
    for r in 0..b {
        let row: Vec<f64> = f.row(r).iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += row[i] * row[j];
            }
        }
    }
    let scale = 1.0 / (b as f64 - 1.0);
    cov.iter_mut().for_each(|c| *c *= scale);
    Tensor::matrix(d, d, cov)
}

/// Max-shifted softmax of `scores / tau`.
pub fn softmax_temperature(scores: &[f64], tau: f64) -> Result<Vec<f64>, NumError> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(NumError::Parameter(format!("temperature must be positive, got {tau}")));
    }
    if scores.is_empty() {
        return Err(NumError::Dimension("empty score vector".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_shape_value_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn frobenius_examples() {
        let m = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 4.0]]).unwrap();
        assert_eq!(frobenius_norm(&m).unwrap(), 5.0);
        assert_eq!(frobenius_norm(&Tensor::zeros(vec![2, 2])).unwrap(), 0.0);
        assert!((frobenius_norm(&Tensor::identity(3)).unwrap() - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn normalize_examples() {
        let m = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let n = normalize_frobenius(&m, 1e-300).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15 && (n.get(1, 1) - 0.8).abs() < 1e-15);
        let z = normalize_frobenius(&Tensor::zeros(vec![2, 2]), 1e-8).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = Tensor::randn(vec![4, 6], 1.0, &mut rng);
        let n = normalize_frobenius(&r, 1e-8).unwrap();
        assert!((frobenius_norm(&n).unwrap() - 1.0).abs() < 1e-7);
        assert!(normalize_frobenius(&r, 0.0).is_err());
    }

    #[test]
    fn covariance_examples() {
        let f = Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap();
        assert_eq!(batch_covariance(&f).unwrap().values(), &[2.0]);
        let same = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(batch_covariance(&same).unwrap().values().iter().all(|&v| v == 0.0));
        let one = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(batch_covariance(&one), Err(NumError::DegenerateBatch(1))));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_temperature(&[0.3, 0.3], 0.7).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = softmax_temperature(&[1.0, 0.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
        let p = softmax_temperature(&[1.0, 0.0], 0.01).unwrap();
        assert!(p[1] < 1e-40 && p[0] >= 1.0 - 1e-40);
        assert!(softmax_temperature(&[1.0], 0.0).is_err());
        assert!(softmax_temperature(&[1.0], -1.0).is_err());
    }

    #[test]
    fn checksum_tracks_values() {
        let a = Tensor::identity(2);
        let mut b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        b.values_mut()[1] = 1e-300;
        assert_ne!(a.checksum(), b.checksum());
    }
}
