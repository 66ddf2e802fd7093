//! Dense row-major `f64` tensors and the handful of kernels the engine needs.
//!
//! Every reduction runs in a fixed left-to-right order so results are
//! bit-reproducible on a given platform.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch: {left:?} vs {right:?} ({op})")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but {actual} values were given")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("invalid shape {0:?}: every dimension must be positive")]
    InvalidShape(Vec<usize>),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("{0}: input must be non-empty")]
    Empty(&'static str),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major array of finite `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::InvalidShape(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ElementCount {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(TensorError::Dimension {
                op: "from_rows",
                left: vec![cols],
                right: vec![bad.len()],
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Mutable access for crate-internal builders. Callers must keep values finite.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing dimension size (`1` for a vector viewed as a column).
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub(crate) fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    fn require_matrix(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(TensorError::Dimension {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Standard matrix product. Each output element accumulates over the
    /// inner index in ascending order.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.require_matrix("matmul", other)?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(TensorError::Dimension {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                // a == 0 contributes exactly nothing for finite b
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(TensorError::Usage(format!(
                "transpose expects a matrix, got shape {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::Dimension {
                op: "add",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `bias` to every row of a matrix.
    pub fn add_row_vector(&mut self, bias: &[f64]) -> Result<()> {
        if self.cols() != bias.len() {
            return Err(TensorError::Dimension {
                op: "add_row_vector",
                left: self.shape.clone(),
                right: vec![bias.len()],
            });
        }
        let c = self.cols();
        for row in self.data.chunks_mut(c) {
            for (a, b) in row.iter_mut().zip(bias) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Columns `[start, start + width)` of a matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Result<Tensor> {
        if self.shape.len() != 2 || start + width > self.shape[1] || width == 0 {
            return Err(TensorError::Usage(format!(
                "column block [{start}, {}) out of range for shape {:?}",
                start + width,
                self.shape
            )));
        }
        let rows = self.shape[0];
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Ok(Tensor {
            shape: vec![rows, width],
            data: out,
        })
    }

    /// Rows `[start, start + count)` of a matrix.
    pub fn row_block(&self, start: usize, count: usize) -> Result<Tensor> {
        if self.shape.len() != 2 || start + count > self.shape[0] || count == 0 {
            return Err(TensorError::Usage(format!(
                "row block [{start}, {}) out of range for shape {:?}",
                start + count,
                self.shape
            )));
        }
        let c = self.shape[1];
        Ok(Tensor {
            shape: vec![count, c],
            data: self.data[start * c..(start + count) * c].to_vec(),
        })
    }
}

fn check_logits(op: &'static str, logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(TensorError::Empty(op));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite(i));
    }
    Ok(())
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_logits("softmax", logits)?;
    let max = max_of(logits);
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// `log(softmax(logits))` via the log-sum-exp identity.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_logits("log_softmax", logits)?;
    let max = max_of(logits);
    let sum: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + sum.ln();
    Ok(logits.iter().map(|&x| x - lse).collect())
}

/// Layer normalisation over a single vector with affine gain and bias.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(TensorError::Dimension {
            op: "layer_norm",
            left: vec![x.len()],
            right: vec![gain.len(), bias.len()],
        });
    }
    if x.is_empty() {
        return Err(TensorError::Empty("layer_norm"));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(TensorError::Usage(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    Ok(x
        .iter()
        .zip(gain)
        .zip(bias)
        .map(|((v, g), b)| (v - mean) * inv * g + b)
        .collect())
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![r, c], data).unwrap()
    }

    #[test]
    fn construction_rejects_bad_inputs() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(TensorError::ElementCount { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![1, 2], vec![1.0, f64::NAN]),
            Err(TensorError::NonFinite(1))
        ));
        assert!(matches!(
            Tensor::new(vec![0, 2], vec![]),
            Err(TensorError::InvalidShape(_))
        ));
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::identity(2).unwrap().matmul(&a).unwrap(), a);
        let z = Tensor::zeros(&[2, 3]).unwrap();
        assert_eq!(Tensor::identity(2).unwrap().matmul(&z).unwrap(), z);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        // 1*5 + 2*6 = 17, 3*5 + 4*6 = 39
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[2, 3]).unwrap();
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::Dimension { .. }));
    }

    #[test]
    fn matmul_is_associative_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let a = random_matrix(&mut rng, 3, 4);
            let b = random_matrix(&mut rng, 4, 5);
            let c = random_matrix(&mut rng, 5, 2);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                assert!((x - y).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn matmul_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 8, 16);
        let b = random_matrix(&mut rng, 16, 8);
        let x = a.matmul(&b).unwrap();
        let y = a.matmul(&b).unwrap();
        assert!(x
            .data()
            .iter()
            .zip(y.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn softmax_examples() {
        for c in [-3.0, 0.0, 17.5] {
            assert_eq!(softmax(&[c; 4]).unwrap(), vec![0.25; 4]);
        }
        let p = softmax(&[0.0, 2f64.ln()]).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-15);

        // shift invariance: compare against softmax([0, 1]) written out directly
        let e = std::f64::consts::E;
        let oracle = [1.0 / (1.0 + e), e / (1.0 + e)];
        let p = softmax(&[1000.0, 1001.0]).unwrap();
        assert!((p[0] - 0.2689).abs() < 1e-4 && (p[1] - 0.7311).abs() < 1e-4);
        assert!((p[0] - oracle[0]).abs() < 1e-12 && (p[1] - oracle[1]).abs() < 1e-12);
        assert!(matches!(softmax(&[]), Err(TensorError::Empty(_))));
    }

    #[test]
    fn log_softmax_examples() {
        let l = log_softmax(&[0.0, 0.0]).unwrap();
        assert!(l.iter().all(|&v| (v + 2f64.ln()).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.random_range(2..40);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-20.0..20.0)).collect();
            let l = log_softmax(&v).unwrap();
            assert_eq!(argmax(&l), argmax(&v));
            let total: f64 = l.iter().map(|x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-10);
            let direct = softmax(&v).unwrap();
            for (a, b) in l.iter().zip(&direct) {
                if *b > 0.0 {
                    assert!((a - b.ln()).abs() < 1e-10);
                }
            }
        }
        // max element never underflows to -inf
        let l = log_softmax(&[0.0, 5000.0]).unwrap();
        assert!(l[1].is_finite() && l[1] <= 0.0);
    }

    #[test]
    fn layer_norm_examples() {
        let z = layer_norm(&[3.0; 5], &[1.0; 5], &[0.0; 5], 1e-5).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));

        let y = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2], 1e-15).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-12 && (y[1] + 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x: Vec<f64> = (0..32).map(|_| rng.random_range(-4.0..4.0)).collect();
            let y = layer_norm(&x, &[1.0; 32], &[0.0; 32], 1e-12).unwrap();
            let mean = y.iter().sum::<f64>() / 32.0;
            let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() <= 1e-8);
            assert!((var - 1.0).abs() <= 1e-8);
        }
        assert!(matches!(
            layer_norm(&[1.0], &[1.0, 1.0], &[0.0], 1e-5),
            Err(TensorError::Dimension { .. })
        ));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    proptest! {
        #[test]
        fn softmax_is_a_probability_vector(v in prop::collection::vec(-50.0f64..50.0, 1..64)) {
            let p = softmax(&v).unwrap();
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert_eq!(argmax(&p), argmax(&v));
        }

        #[test]
        fn softmax_is_shift_invariant(
            v in prop::collection::vec(-30.0f64..30.0, 1..32),
            c in -100.0f64..100.0,
        ) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = softmax(&v).unwrap();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
        }
    }
}
