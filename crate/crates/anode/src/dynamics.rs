//! Parametric vector fields `f(z, theta)` — the right-hand sides of ODE
//! blocks — with exact evaluation and exact vector-Jacobian products with
//! respect to both the state and the parameters.
//!
//! Parameters are always a flat tensor; composite fields concatenate their
//! parts' parameters in order, so a whole block's gradient lands in one
//! vector. Every field preserves the shape of its state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{gaussian_tensor, Rng};
use crate::tensor::{matvec, matvec_transpose, Tensor};

/// Pointwise activations. The ReLU subgradient at 0 is fixed to 0 (and the
/// leaky variant to its slope) so forward and reverse passes agree
/// deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu { slope: f64 },
    Softplus,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Softplus => {
                // ln(1 + e^x), overflow-safe on both tails
                if x > 30.0 {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    /// Almost-everywhere derivative; at the ReLU kink returns the x<=0 branch.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Softplus => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Whether the derivative is discontinuous at 0.
    pub fn has_kink(self) -> bool {
        matches!(self, Activation::Relu | Activation::LeakyRelu { .. })
    }
}

/// Default slope for leaky ReLU where a config does not say otherwise.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// A vector field `f(z, theta)`.
///
/// Parameter layouts (`theta` is flat, row-major matrices):
///
/// | kind          | theta                         | f(z)                  |
/// |---------------|-------------------------------|-----------------------|
/// | `Constant`    | `c` (len = state len)         | `c`                   |
/// | `ScalarLinear`| `[lambda]`                    | `lambda * z`          |
/// | `ScalarQuadratic` | `[c]`                     | `c * z^2` (pointwise) |
/// | `ScalarRelu`  | `[a, b]`                      | `a * max(0, b z)`     |
/// | `Matrix`      | `W` (dim x dim)               | `act(W z)`            |
/// | `Linear`      | `W` (dim x dim), then `c`     | `act(W z + c)`        |
/// | `Conv2d`      | 3x3 kernel (9 entries)        | `act(conv(z))`        |
/// | `Composite`   | parts' params concatenated    | `p_k(...p_1(z))`      |
///
/// `Conv2d` is a stride-1, zero-padded, single-channel 3x3 cross-correlation
/// with no bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VectorField {
    Constant {
        dim: usize,
    },
    ScalarLinear,
    ScalarQuadratic,
    ScalarRelu,
    Matrix {
        dim: usize,
        activation: Activation,
    },
    Linear {
        dim: usize,
        activation: Activation,
    },
    Conv2d {
        height: usize,
        width: usize,
        activation: Activation,
    },
    Composite {
        parts: Vec<VectorField>,
    },
}

impl VectorField {
    pub fn param_len(&self) -> usize {
        match self {
            VectorField::Constant { dim } => *dim,
            VectorField::ScalarLinear | VectorField::ScalarQuadratic => 1,
            VectorField::ScalarRelu => 2,
            VectorField::Matrix { dim, .. } => dim * dim,
            VectorField::Linear { dim, .. } => dim * dim + dim,
            VectorField::Conv2d { .. } => 9,
            VectorField::Composite { parts } => parts.iter().map(|p| p.param_len()).sum(),
        }
    }

    /// Checks that `z` is a state this field accepts and `theta` has the
    /// right length.
    pub fn validate(&self, z: &Tensor, theta: &Tensor) -> Result<()> {
        if theta.len() != self.param_len() {
            return Err(Error::ShapeMismatch(format!(
                "field wants {} parameters, got {}",
                self.param_len(),
                theta.len()
            )));
        }
        match self {
            VectorField::Constant { dim } => {
                if z.len() != *dim {
                    return Err(Error::ShapeMismatch(format!(
                        "constant field of dim {dim} applied to state of len {}",
                        z.len()
                    )));
                }
            }
            VectorField::ScalarLinear | VectorField::ScalarQuadratic | VectorField::ScalarRelu => {}
            VectorField::Matrix { dim, .. } | VectorField::Linear { dim, .. } => {
                if z.len() != *dim {
                    return Err(Error::ShapeMismatch(format!(
                        "matrix field of dim {dim} applied to state of len {}",
                        z.len()
                    )));
                }
            }
            VectorField::Conv2d { height, width, .. } => {
                if z.shape() != [*height, *width] {
                    return Err(Error::ShapeMismatch(format!(
                        "conv field wants [{height}, {width}], got {:?}",
                        z.shape()
                    )));
                }
            }
            VectorField::Composite { parts } => {
                let mut offset = 0;
                for p in parts {
                    let np = p.param_len();
                    let sub = Tensor::from_vec(theta.data()[offset..offset + np].to_vec());
                    p.validate(z, &sub)?;
                    offset += np;
                }
            }
        }
        Ok(())
    }

    /// Splits a flat parameter vector into per-part tensors (composite only).
    fn split_params<'a>(parts: &[VectorField], theta: &'a Tensor) -> Vec<&'a [f64]> {
        let mut out = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for p in parts {
            let np = p.param_len();
            out.push(&theta.data()[offset..offset + np]);
            offset += np;
        }
        out
    }

    pub fn evaluate(&self, z: &Tensor, theta: &Tensor) -> Result<Tensor> {
        match self {
            VectorField::Constant { .. } => theta.reshaped(z.shape()),
            VectorField::ScalarLinear => Ok(z.scale(theta.data()[0])),
            VectorField::ScalarQuadratic => {
                let c = theta.data()[0];
                let data = z.data().iter().map(|x| c * x * x).collect();
                Tensor::new(z.shape().to_vec(), data)
            }
            VectorField::ScalarRelu => {
                let (a, b) = (theta.data()[0], theta.data()[1]);
                let data = z
                    .data()
                    .iter()
                    .map(|x| a * Activation::Relu.apply(b * x))
                    .collect();
                Tensor::new(z.shape().to_vec(), data)
            }
            VectorField::Matrix { dim, activation } => {
                let w = theta.reshaped(&[*dim, *dim])?;
                let mut pre = matvec(&w, &z.reshaped(&[*dim])?)?;
                for x in pre.data_mut() {
                    *x = activation.apply(*x);
                }
                pre.reshaped(z.shape())
            }
            VectorField::Linear { dim, activation } => {
                let (w, c) = linear_params(theta, *dim)?;
                let mut pre = matvec(&w, &z.reshaped(&[*dim])?)?;
                pre.add_assign(&c)?;
                for x in pre.data_mut() {
                    *x = activation.apply(*x);
                }
                pre.reshaped(z.shape())
            }
            VectorField::Conv2d {
                height,
                width,
                activation,
            } => {
                let mut pre = conv3x3(z, theta.data(), *height, *width);
                for x in pre.data_mut() {
                    *x = activation.apply(*x);
                }
                Ok(pre)
            }
            VectorField::Composite { parts } => {
                let thetas = Self::split_params(parts, theta);
                let mut cur = z.clone();
                for (p, th) in parts.iter().zip(thetas) {
                    cur = p.evaluate(&cur, &Tensor::from_vec(th.to_vec()))?;
                }
                Ok(cur)
            }
        }
    }

    /// `(df/dz)^T v`.
    pub fn vjp_z(&self, z: &Tensor, theta: &Tensor, v: &Tensor) -> Result<Tensor> {
        match self {
            VectorField::Constant { .. } => Tensor::zeros(z.shape()),
            VectorField::ScalarLinear => Ok(v.scale(theta.data()[0])),
            VectorField::ScalarQuadratic => {
                let c = theta.data()[0];
                let data = z
                    .data()
                    .iter()
                    .zip(v.data())
                    .map(|(x, vi)| 2.0 * c * x * vi)
                    .collect();
                Tensor::new(z.shape().to_vec(), data)
            }
            VectorField::ScalarRelu => {
                let (a, b) = (theta.data()[0], theta.data()[1]);
                let data = z
                    .data()
                    .iter()
                    .zip(v.data())
                    .map(|(x, vi)| if b * x > 0.0 { a * b * vi } else { 0.0 })
                    .collect();
                Tensor::new(z.shape().to_vec(), data)
            }
            VectorField::Matrix { dim, activation } => {
                let w = theta.reshaped(&[*dim, *dim])?;
                let pre = matvec(&w, &z.reshaped(&[*dim])?)?;
                let masked = mask_by_derivative(&pre, v, *activation)?;
                matvec_transpose(&w, &masked)?.reshaped(z.shape())
            }
            VectorField::Linear { dim, activation } => {
                let (w, c) = linear_params(theta, *dim)?;
                let mut pre = matvec(&w, &z.reshaped(&[*dim])?)?;
                pre.add_assign(&c)?;
                let masked = mask_by_derivative(&pre, v, *activation)?;
                matvec_transpose(&w, &masked)?.reshaped(z.shape())
            }
            VectorField::Conv2d {
                height,
                width,
                activation,
            } => {
                let pre = conv3x3(z, theta.data(), *height, *width);
                let masked = mask_by_derivative(&pre, v, *activation)?;
                // adjoint of correlation = correlation with the flipped kernel
                let mut flipped = [0.0; 9];
                for (i, k) in theta.data().iter().enumerate() {
                    flipped[8 - i] = *k;
                }
                Ok(conv3x3(&masked, &flipped, *height, *width))
            }
            VectorField::Composite { parts } => {
                let (xs, thetas) = self.composite_forward(parts, z, theta)?;
                let mut w = v.clone();
                for (idx, p) in parts.iter().enumerate().rev() {
                    let th = Tensor::from_vec(thetas[idx].to_vec());
                    w = p.vjp_z(&xs[idx], &th, &w)?;
                }
                Ok(w)
            }
        }
    }

    /// `(df/dtheta)^T v`, flat like `theta`.
    pub fn vjp_theta(&self, z: &Tensor, theta: &Tensor, v: &Tensor) -> Result<Tensor> {
        match self {
            VectorField::Constant { .. } => v.reshaped(&[v.len()]),
            VectorField::ScalarLinear => Ok(Tensor::from_vec(vec![z.dot(v)?])),
            VectorField::ScalarQuadratic => {
                let s = z
                    .data()
                    .iter()
                    .zip(v.data())
                    .map(|(x, vi)| x * x * vi)
                    .sum();
                Ok(Tensor::from_vec(vec![s]))
            }
            VectorField::ScalarRelu => {
                let (a, b) = (theta.data()[0], theta.data()[1]);
                let mut ga = 0.0;
                let mut gb = 0.0;
                for (x, vi) in z.data().iter().zip(v.data()) {
                    if b * x > 0.0 {
                        ga += b * x * vi;
                        gb += a * x * vi;
                    }
                }
                Ok(Tensor::from_vec(vec![ga, gb]))
            }
            VectorField::Matrix { dim, activation } => {
                let w = theta.reshaped(&[*dim, *dim])?;
                let zf = z.reshaped(&[*dim])?;
                let pre = matvec(&w, &zf)?;
                let masked = mask_by_derivative(&pre, v, *activation)?;
                Ok(outer_flat(&masked, &zf))
            }
            VectorField::Linear { dim, activation } => {
                let (w, c) = linear_params(theta, *dim)?;
                let zf = z.reshaped(&[*dim])?;
                let mut pre = matvec(&w, &zf)?;
                pre.add_assign(&c)?;
                let masked = mask_by_derivative(&pre, v, *activation)?;
                let mut out = outer_flat(&masked, &zf).into_data();
                out.extend_from_slice(masked.data());
                Ok(Tensor::from_vec(out))
            }
            VectorField::Conv2d {
                height,
                width,
                activation,
            } => {
                let pre = conv3x3(z, theta.data(), *height, *width);
                let masked = mask_by_derivative(&pre, v, *activation)?;
                let (h, w) = (*height as isize, *width as isize);
                let mut grad = vec![0.0; 9];
                for di in -1..=1isize {
                    for dj in -1..=1isize {
                        let mut acc = 0.0;
                        for i in 0..h {
                            for j in 0..w {
                                let (si, sj) = (i + di, j + dj);
                                if si >= 0 && si < h && sj >= 0 && sj < w {
                                    acc += masked.data()[(i * w + j) as usize]
                                        * z.data()[(si * w + sj) as usize];
                                }
                            }
                        }
                        grad[((di + 1) * 3 + (dj + 1)) as usize] = acc;
                    }
                }
                Ok(Tensor::from_vec(grad))
            }
            VectorField::Composite { parts } => {
                let (xs, thetas) = self.composite_forward(parts, z, theta)?;
                let mut grads: Vec<Tensor> = Vec::with_capacity(parts.len());
                let mut w = v.clone();
                for (idx, p) in parts.iter().enumerate().rev() {
                    let th = Tensor::from_vec(thetas[idx].to_vec());
                    grads.push(p.vjp_theta(&xs[idx], &th, &w)?);
                    if idx > 0 {
                        w = p.vjp_z(&xs[idx], &th, &w)?;
                    }
                }
                grads.reverse();
                let mut flat = Vec::with_capacity(self.param_len());
                for g in grads {
                    flat.extend_from_slice(g.data());
                }
                Ok(Tensor::from_vec(flat))
            }
        }
    }

    /// Forward pass of a composite field keeping each part's input.
    fn composite_forward<'a>(
        &self,
        parts: &[VectorField],
        z: &Tensor,
        theta: &'a Tensor,
    ) -> Result<(Vec<Tensor>, Vec<&'a [f64]>)> {
        let thetas = Self::split_params(parts, theta);
        let mut xs = Vec::with_capacity(parts.len());
        let mut cur = z.clone();
        for (p, th) in parts.iter().zip(&thetas) {
            xs.push(cur.clone());
            cur = p.evaluate(&cur, &Tensor::from_vec(th.to_vec()))?;
        }
        Ok((xs, thetas))
    }

    /// Distance from the nearest activation kink among all pre-activations,
    /// or `None` when the field is smooth at every point. Gradient checks use
    /// this to resample configurations too close to a ReLU edge.
    pub fn kink_margin(&self, z: &Tensor, theta: &Tensor) -> Result<Option<f64>> {
        match self {
            VectorField::Constant { .. }
            | VectorField::ScalarLinear
            | VectorField::ScalarQuadratic => Ok(None),
            VectorField::ScalarRelu => {
                let b = theta.data()[1];
                Ok(Some(
                    z.data()
                        .iter()
                        .map(|x| (b * x).abs())
                        .fold(f64::INFINITY, f64::min),
                ))
            }
            VectorField::Matrix { dim, activation } => {
                if !activation.has_kink() {
                    return Ok(None);
                }
                let w = theta.reshaped(&[*dim, *dim])?;
                let pre = matvec(&w, &z.reshaped(&[*dim])?)?;
                Ok(Some(pre.data().iter().map(|x| x.abs()).fold(f64::INFINITY, f64::min)))
            }
            VectorField::Linear { dim, activation } => {
                if !activation.has_kink() {
                    return Ok(None);
                }
                let (w, c) = linear_params(theta, *dim)?;
                let mut pre = matvec(&w, &z.reshaped(&[*dim])?)?;
                pre.add_assign(&c)?;
                Ok(Some(pre.data().iter().map(|x| x.abs()).fold(f64::INFINITY, f64::min)))
            }
            VectorField::Conv2d {
                height,
                width,
                activation,
            } => {
                if !activation.has_kink() {
                    return Ok(None);
                }
                let pre = conv3x3(z, theta.data(), *height, *width);
                Ok(Some(pre.data().iter().map(|x| x.abs()).fold(f64::INFINITY, f64::min)))
            }
            VectorField::Composite { parts } => {
                let (xs, thetas) = self.composite_forward(parts, z, theta)?;
                let mut margin: Option<f64> = None;
                for (idx, p) in parts.iter().enumerate() {
                    let th = Tensor::from_vec(thetas[idx].to_vec());
                    if let Some(m) = p.kink_margin(&xs[idx], &th)? {
                        margin = Some(margin.map_or(m, |cur: f64| cur.min(m)));
                    }
                }
                Ok(margin)
            }
        }
    }

    /// Gaussian parameter draw with the given stddev (mean 0).
    pub fn random_params(&self, rng: &mut Rng, stddev: f64) -> Result<Tensor> {
        gaussian_tensor(rng, &[self.param_len().max(1)], 0.0, stddev)
    }
}

fn linear_params(theta: &Tensor, dim: usize) -> Result<(Tensor, Tensor)> {
    let w = Tensor::new(vec![dim, dim], theta.data()[..dim * dim].to_vec())?;
    let c = Tensor::from_vec(theta.data()[dim * dim..].to_vec());
    Ok((w, c))
}

fn mask_by_derivative(pre: &Tensor, v: &Tensor, act: Activation) -> Result<Tensor> {
    if pre.len() != v.len() {
        return Err(Error::ShapeMismatch(format!(
            "vjp cotangent has len {}, state has len {}",
            v.len(),
            pre.len()
        )));
    }
    let data = pre
        .data()
        .iter()
        .zip(v.data())
        .map(|(p, vi)| act.derivative(*p) * vi)
        .collect();
    Ok(Tensor::from_vec(data))
}

fn outer_flat(u: &Tensor, v: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(u.len() * v.len());
    for a in u.data() {
        for b in v.data() {
            out.push(a * b);
        }
    }
    Tensor::from_vec(out)
}

/// 3x3 zero-padded cross-correlation on a `[h, w]` grid.
fn conv3x3(z: &Tensor, kernel: &[f64], h: usize, w: usize) -> Tensor {
    let (hi, wi) = (h as isize, w as isize);
    let mut out = vec![0.0; h * w];
    let zd = z.data();
    for i in 0..hi {
        for j in 0..wi {
            let mut acc = 0.0;
            for di in -1..=1isize {
                for dj in -1..=1isize {
                    let (si, sj) = (i + di, j + dj);
                    if si >= 0 && si < hi && sj >= 0 && sj < wi {
                        acc += kernel[((di + 1) * 3 + (dj + 1)) as usize]
                            * zd[(si * wi + sj) as usize];
                    }
                }
            }
            out[(i * wi + j) as usize] = acc;
        }
    }
    Tensor::new(vec![h, w], out).expect("conv output shape")
}

/// Largest singular value of the linear conv operator (identity activation),
/// by power iteration through the field's own forward/adjoint pair.
pub fn conv2d_spectral_norm(kernel: &Tensor, height: usize, width: usize, iterations: usize) -> Result<f64> {
    let field = VectorField::Conv2d {
        height,
        width,
        activation: Activation::Identity,
    };
    let mut v = Tensor::full(&[height, width], 1.0 / ((height * width) as f64).sqrt())?;
    let mut sigma = 0.0;
    for _ in 0..iterations {
        let av = field.evaluate(&v, kernel)?;
        sigma = av.norm();
        if sigma == 0.0 {
            return Ok(0.0);
        }
        let back = field.vjp_z(&v, kernel, &av)?;
        let nrm = back.norm();
        if nrm == 0.0 {
            break;
        }
        v = back.scale(1.0 / nrm);
    }
    Ok(sigma)
}

/// Compares both VJPs against central finite differences of `v^T f` and
/// returns the worst relative error seen over `trials` random cotangents.
///
/// `h` must be in `[1e-8, 1e-3]`. If the supplied `(z, theta)` sits within
/// `10 h` of an activation kink, fresh Gaussian points are drawn until one
/// clears the margin.
pub fn check_vjp(
    field: &VectorField,
    z: &Tensor,
    theta: &Tensor,
    trials: usize,
    h: f64,
    rng: &mut Rng,
) -> Result<f64> {
    if !(1e-8..=1e-3).contains(&h) {
        return Err(Error::InvalidArg(format!("fd step {h} outside [1e-8, 1e-3]")));
    }
    field.validate(z, theta)?;
    let (mut z, mut theta) = (z.clone(), theta.clone());
    for _ in 0..100 {
        match field.kink_margin(&z, &theta)? {
            Some(m) if m < 10.0 * h => {
                z = gaussian_tensor(rng, z.shape(), 0.0, 1.0)?;
                theta = gaussian_tensor(rng, &[theta.len()], 0.0, 1.0)?;
            }
            _ => break,
        }
    }

    let mut worst: f64 = 0.0;
    for _ in 0..trials.max(1) {
        let v = gaussian_tensor(rng, z.shape(), 0.0, 1.0)?;
        let scalar = |zz: &Tensor, tt: &Tensor| -> Result<f64> { field.evaluate(zz, tt)?.dot(&v) };

        let gz = field.vjp_z(&z, &theta, &v)?;
        let mut fd = Vec::with_capacity(z.len());
        for i in 0..z.len() {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp.data_mut()[i] += h;
            zm.data_mut()[i] -= h;
            fd.push((scalar(&zp, &theta)? - scalar(&zm, &theta)?) / (2.0 * h));
        }
        worst = worst.max(fd_relative_error(gz.data(), &fd));

        let gt = field.vjp_theta(&z, &theta, &v)?;
        let mut fd = Vec::with_capacity(theta.len());
        for i in 0..theta.len() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp.data_mut()[i] += h;
            tm.data_mut()[i] -= h;
            fd.push((scalar(&z, &tp)? - scalar(&z, &tm)?) / (2.0 * h));
        }
        worst = worst.max(fd_relative_error(gt.data(), &fd));
    }
    Ok(worst)
}

fn fd_relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(fd)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let denom: f64 = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}
