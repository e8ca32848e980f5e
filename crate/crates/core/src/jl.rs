//! Randomized estimate of the squared Frobenius norm of the input Jacobian.
//!
//! For a random projection `w` with i.i.d. `N(0, 1/K)` entries,
//! `E ‖∇_x (w · v(x))‖² = ‖∇_x v(x)‖²_F / K`. Each projected gradient norm is
//! replaced by a finite difference along the (detached) unit direction
//! `ĝ = ∇_x(w·v) / ‖∇_x(w·v)‖`, so the estimate needs one reverse pass to find
//! `ĝ` and two forward passes per replication.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MlpModel;
use crate::tensor::{dot, Tensor};

/// Below this gradient norm `ĝ` is taken to be zero.
pub const ZERO_GRADIENT_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JlConfig {
    /// Number of noise replications κ.
    pub kappa: usize,
    /// Finite-difference step δ.
    pub delta_fd: f64,
    /// Projection dimension K; must equal the number of classes.
    pub proj_dim: Option<usize>,
}

impl Default for JlConfig {
    fn default() -> Self {
        JlConfig {
            kappa: 10,
            delta_fd: 0.1,
            proj_dim: None,
        }
    }
}

impl JlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kappa == 0 {
            return Err(Error::config("jl.kappa", "must be at least 1"));
        }
        if !(self.delta_fd > 0.0 && self.delta_fd.is_finite()) {
            return Err(Error::config("jl.delta_fd", "must be positive"));
        }
        if self.proj_dim == Some(0) {
            return Err(Error::config("jl.proj_dim", "must be positive"));
        }
        Ok(())
    }

    /// Resolved projection dimension for a model with `n_classes` outputs.
    pub fn resolve_proj_dim(&self, n_classes: usize) -> Result<usize> {
        match self.proj_dim {
            None => Ok(n_classes),
            Some(k) if k == n_classes => Ok(k),
            Some(k) => Err(Error::config(
                "jl.proj_dim",
                format!("projection dim {k} must equal the number of classes {n_classes}"),
            )),
        }
    }

    /// Factor turning the raw sum of κ squared differences into an unbiased
    /// estimate of the squared Frobenius norm.
    pub fn normalization(&self, proj_dim: usize) -> f64 {
        proj_dim as f64 / self.kappa as f64
    }
}

/// `K` i.i.d. standard normals scaled by `1/√K`, so `E‖w‖² = 1`.
pub fn sample_w<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Tensor {
    let scale = 1.0 / (k as f64).sqrt();
    let data = (0..k)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();
    Tensor::from_raw(vec![k], data)
}

/// Scales `v` to unit length in place, or zeroes it if its norm is below
/// [`ZERO_GRADIENT_TOL`].
pub(crate) fn normalize_or_zero(v: &mut [f64]) {
    let n = crate::tensor::norm(v);
    if n < ZERO_GRADIENT_TOL {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Unit direction of `∇_x (w · v(x))`, or zero where that gradient vanishes.
pub fn hatg(model: &MlpModel, x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let mut g = model.input_grad_projected(x, w)?;
    normalize_or_zero(g.data_mut());
    Ok(g)
}

/// Estimate of `‖∇_x v(x)‖²_F`:
/// `(K/κ) Σ_{i=1..κ} ((w_i·v(x + δĝ_i) − w_i·v(x)) / δ)²`.
///
/// Exact in expectation for affine `v`; always nonnegative.
pub fn grad_norm_sq_estimate<R: Rng + ?Sized>(
    model: &MlpModel,
    x: &Tensor,
    cfg: &JlConfig,
    rng: &mut R,
) -> Result<f64> {
    cfg.validate()?;
    let k = cfg.resolve_proj_dim(model.n_classes())?;
    let base = model.logits(x.data())?;
    let mut total = 0.0;
    let mut shifted = vec![0.0; x.len()];
    for _ in 0..cfg.kappa {
        let w = sample_w(k, rng);
        let g = hatg(model, x, &w)?;
        for ((s, &xv), &gv) in shifted.iter_mut().zip(x.data()).zip(g.data()) {
            *s = xv + cfg.delta_fd * gv;
        }
        let moved = model.logits(&shifted)?;
        let diff = (dot(w.data(), &moved) - dot(w.data(), &base)) / cfg.delta_fd;
        total += diff * diff;
    }
    Ok(total * cfg.normalization(k))
}
