//! Matérn radial kernel and its batched applications.
//!
//! Every diffeomorphic module uses the matrix-valued kernel `k(|x - y| / h) I_d`.
//! Only the scalar profile is ever evaluated; the identity factor is implicit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::{sq_dist, Points};

/// Width `h` and state dimension `d` of one module's kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    width: f64,
    dim: usize,
}

impl KernelConfig {
    pub fn new(width: f64, dim: usize) -> Result<Self> {
        if !(width.is_finite() && width > 0.0) {
            return Err(Error::invalid(format!(
                "kernel width must be positive and finite, got {width}"
            )));
        }
        if dim == 0 {
            return Err(Error::invalid("kernel dimension must be at least 1"));
        }
        Ok(KernelConfig { width, dim })
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.width
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check(&self, what: &str, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::dims(what, self.dim, v.len()));
        }
        Ok(())
    }
}

/// `k(u) = (1 + u + 0.4 u^2 + u^3 / 15) e^{-u}`, unchecked.
#[inline]
pub(crate) fn profile(u: f64) -> f64 {
    (1.0 + u + 0.4 * u * u + u * u * u / 15.0) * (-u).exp()
}

/// `g(u) = -(0.2 + 0.2 u + u^2 / 15) e^{-u}`, so that `∇_x k(|x-y|/h) = (x - y) g(u) / h^2`.
#[inline]
pub(crate) fn grad_profile(u: f64) -> f64 {
    -(0.2 + 0.2 * u + u * u / 15.0) * (-u).exp()
}

/// Kernel value and gradient coefficient `g(u)/h^2` for one pair, sharing one `exp`.
#[inline]
pub(crate) fn pair_terms(inv_width: f64, inv_width_sq: f64, x: &[f64], y: &[f64]) -> (f64, f64) {
    let u = sq_dist(x, y).sqrt() * inv_width;
    let e = (-u).exp();
    let u2 = u * u;
    let k = (1.0 + u + 0.4 * u2 + u2 * u / 15.0) * e;
    let g = -(0.2 + 0.2 * u + u2 / 15.0) * e * inv_width_sq;
    (k, g)
}

/// Kernel value only.
#[inline]
pub(crate) fn pair_value(inv_width: f64, x: &[f64], y: &[f64]) -> f64 {
    let u = sq_dist(x, y).sqrt() * inv_width;
    let e = (-u).exp();
    let u2 = u * u;
    (1.0 + u + 0.4 * u2 + u2 * u / 15.0) * e
}

/// The scalar Matérn profile. Rejects negative or non-finite arguments.
pub fn matern_scalar(u: f64) -> Result<f64> {
    if !u.is_finite() || u < 0.0 {
        return Err(Error::invalid(format!(
            "Matérn argument must be finite and non-negative, got {u}"
        )));
    }
    Ok(profile(u))
}

/// `k(|y - x| / h)`.
pub fn kernel_eval(cfg: &KernelConfig, x: &[f64], y: &[f64]) -> Result<f64> {
    cfg.check("kernel_eval x", x)?;
    cfg.check("kernel_eval y", y)?;
    Ok(pair_value(1.0 / cfg.width, x, y))
}

/// Gradient of the kernel with respect to its first argument.
///
/// Exactly zero at `x == y`, where the radial profile is stationary.
pub fn kernel_grad1(cfg: &KernelConfig, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    cfg.check("kernel_grad1 x", x)?;
    cfg.check("kernel_grad1 y", y)?;
    let r2 = sq_dist(x, y);
    if r2 == 0.0 {
        return Ok(vec![0.0; x.len()]);
    }
    let h = cfg.width;
    let u = r2.sqrt() / h;
    let c = grad_profile(u) / (h * h);
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * c).collect())
}

/// Evaluates the field `Σ_l k(|anchors[l] - targets[k]| / h) coeffs[l]` at every target.
///
/// The sum over anchors runs in ascending index order for every target.
pub fn gram_apply(
    cfg: &KernelConfig,
    targets: &Points,
    anchors: &Points,
    coeffs: &Points,
) -> Result<Points> {
    if anchors.is_empty() {
        return Err(Error::invalid("gram_apply needs at least one anchor"));
    }
    if anchors.len() != coeffs.len() {
        return Err(Error::dims("gram_apply coefficients", anchors.len(), coeffs.len()));
    }
    for (what, p) in [("targets", targets), ("anchors", anchors), ("coeffs", coeffs)] {
        if p.dim() != cfg.dim && !(p.is_empty() && what == "targets") {
            return Err(Error::dims(format!("gram_apply {what}"), cfg.dim, p.dim()));
        }
    }
    let d = cfg.dim;
    let inv_h = 1.0 / cfg.width;
    let mut out = Points::zeros(targets.len(), d);
    out.as_mut_slice()
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(k, acc)| {
            let t = targets.row(k);
            for l in 0..anchors.len() {
                let kv = pair_value(inv_h, t, anchors.row(l));
                for (o, c) in acc.iter_mut().zip(coeffs.row(l)) {
                    *o += kv * c;
                }
            }
        });
    Ok(out)
}
