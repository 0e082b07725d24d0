//! Dense row-major tensors over `f64` and the few norms the rest of the crate
//! needs. No BLAS, no views; every operation allocates or mutates in place.
//!
//! Tensors are immutable values once built (all binary ops return fresh
//! tensors), so sharing them across threads is safe.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor after checking `product(shape) == data.len()` and that
    /// every extent is positive. Rank zero is rejected.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::RankZero);
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidArg("zero extent in tensor shape".into()));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} wants {} entries, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same data, new shape (element count must match).
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|a| c * a).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self[i] += c * other[i]` elementwise, one multiply and one add per
    /// entry. Every hot update in the solvers and adjoints goes through this
    /// so that recomputed and stored paths round identically.
    pub fn add_scaled_assign(&mut self, c: f64, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "add_scaled_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    /// Euclidean norm of the flattened data (this is also the Frobenius norm
    /// for matrices).
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Rounds every entry through `f32` in place; used by the solvers'
    /// single-precision emulation mode.
    pub fn round_f32(&mut self) {
        for x in self.data.iter_mut() {
            *x = *x as f32 as f64;
        }
    }

    /// 2-D accessor, row-major.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }
}

/// `||a - b||_2 / ||b||_2`. Errors when the reference `b` has zero norm.
pub fn relative_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "relative_error: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let denom = b.norm();
    if denom == 0.0 {
        return Err(Error::UndefinedRelativeError);
    }
    Ok(a.sub(b)?.norm() / denom)
}

/// Relative error over two gradient pairs stacked into one vector; used to
/// compare pipelines on `(grad_theta, grad_z0)` jointly.
pub fn relative_error_concat(a: &[&Tensor], b: &[&Tensor]) -> Result<f64> {
    let flat = |ts: &[&Tensor]| {
        let mut v = Vec::new();
        for t in ts {
            v.extend_from_slice(t.data());
        }
        Tensor::from_vec(v)
    };
    relative_error(&flat(a), &flat(b))
}

/// `W x` for a 2-D `W` of shape `[m, n]` and `x` of length `n`.
pub fn matvec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (m, n) = mat_dims(w)?;
    if x.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "matvec: [{m}, {n}] * len {}",
            x.len()
        )));
    }
    let mut out = vec![0.0; m];
    let wd = w.data();
    let xd = x.data();
    for i in 0..m {
        let row = &wd[i * n..(i + 1) * n];
        let mut acc = 0.0;
        for j in 0..n {
            acc += row[j] * xd[j];
        }
        out[i] = acc;
    }
    Ok(Tensor::from_vec(out))
}

/// `W^T x` for a 2-D `W` of shape `[m, n]` and `x` of length `m`.
pub fn matvec_transpose(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (m, n) = mat_dims(w)?;
    if x.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "matvec_transpose: [{m}, {n}]^T * len {}",
            x.len()
        )));
    }
    let mut out = vec![0.0; n];
    let wd = w.data();
    let xd = x.data();
    for i in 0..m {
        let row = &wd[i * n..(i + 1) * n];
        let xi = xd[i];
        for j in 0..n {
            out[j] += row[j] * xi;
        }
    }
    Ok(Tensor::from_vec(out))
}

fn mat_dims(w: &Tensor) -> Result<(usize, usize)> {
    if w.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected a matrix, got rank {}",
            w.rank()
        )));
    }
    Ok((w.shape()[0], w.shape()[1]))
}

/// Power-iteration estimate of the largest singular value of a matrix.
///
/// Starts from the normalized all-ones vector and alternates `w = A v`,
/// `v = A^T w / ||A^T w||`; the returned estimate `||A v||` is monotonically
/// non-decreasing in the iteration count up to round-off.
pub fn spectral_norm(w: &Tensor, iterations: usize) -> Result<f64> {
    let (_, n) = mat_dims(w)?;
    if iterations == 0 {
        return Err(Error::InvalidArg("spectral_norm wants iterations >= 1".into()));
    }
    let mut v = Tensor::full(&[n], 1.0 / (n as f64).sqrt())?;
    let mut sigma = 0.0;
    for _ in 0..iterations {
        let av = matvec(w, &v)?;
        sigma = av.norm();
        if sigma == 0.0 {
            return Ok(0.0);
        }
        let atav = matvec_transpose(w, &av)?;
        let nrm = atav.norm();
        if nrm == 0.0 {
            break;
        }
        v = atav.scale(1.0 / nrm);
    }
    Ok(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(matches!(Tensor::new(vec![], vec![]), Err(Error::RankZero)));
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![3], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn relative_error_hand_values() {
        let a = Tensor::from_vec(vec![1.01]);
        let b = Tensor::from_vec(vec![1.0]);
        let e = relative_error(&a, &b).unwrap();
        assert!((e - 0.01).abs() < 1e-15, "e={e}");

        // ||[3,-1]|| / 5 = sqrt(10)/5
        let a = Tensor::from_vec(vec![3.0, 4.0]);
        let b = Tensor::from_vec(vec![0.0, 5.0]);
        let e = relative_error(&a, &b).unwrap();
        assert!((e - 0.6324555320336759).abs() < 1e-15, "e={e}");
    }

    #[test]
    fn relative_error_identical_is_exactly_zero() {
        let a = Tensor::from_vec(vec![0.1, -7.3, 2.5e-11]);
        assert_eq!(relative_error(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn relative_error_zero_reference_errors() {
        let a = Tensor::from_vec(vec![1.0]);
        let z = Tensor::from_vec(vec![0.0]);
        assert!(matches!(
            relative_error(&a, &z),
            Err(Error::UndefinedRelativeError)
        ));
    }

    #[test]
    fn spectral_norm_identity_and_diag() {
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        assert!((spectral_norm(&eye, 1).unwrap() - 1.0).abs() < 1e-15);

        let d = Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, -5.0]).unwrap();
        let s = spectral_norm(&d, 100).unwrap();
        assert!((s - 5.0).abs() < 1e-12, "s={s}");
    }

    #[test]
    fn spectral_norm_monotone_in_iterations() {
        let w = Tensor::new(vec![3, 3], vec![1., 2., 0., -1., 0.5, 3., 0.2, 0., -2.]).unwrap();
        let mut prev = 0.0;
        for it in 1..20 {
            let s = spectral_norm(&w, it).unwrap();
            assert!(s >= prev - 1e-13, "iter {it}: {s} < {prev}");
            prev = s;
        }
    }

    #[test]
    fn matvec_transpose_agrees_with_transposed_matvec() {
        let w = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let x = Tensor::from_vec(vec![7.0, -1.0]);
        let wt = Tensor::new(vec![3, 2], vec![1., 4., 2., 5., 3., 6.]).unwrap();
        let a = matvec_transpose(&w, &x).unwrap();
        let b = matvec(&wt, &x).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-14);
        }
    }
}
