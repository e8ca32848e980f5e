//! Deterministic Gaussian smoothing of classifiers.
//!
//! A pretrained classifier is retrained against a frozen copy of itself with
//! a gradient-norm penalty; repeated over a few timesteps this approximates
//! heat flow, i.e. convolution of the model with a Gaussian. The smoothed
//! model can then be certified with a single forward pass (closed-form
//! Lipschitz bound) or with the usual Monte Carlo protocol, and attacked
//! with ℓ2 PGD / DDN.
//!
//! Modules:
//! - [`autodiff`]: reverse-mode tape over dense tensors.
//! - [`model`]: MLP classifiers and their file format.
//! - [`jl`]: randomized Jacobian-norm estimation.
//! - [`smoothing`]: training loops (heat smoothing, noisy-input variant, noise baseline).
//! - [`certify`]: certified radii and certified-accuracy curves.
//! - [`attacks`]: ℓ2 PGD and DDN.
//! - [`heat_oracle`]: heat equation / Gaussian convolution ground truth on grids.
//! - [`data`]: toy datasets and CSV ingestion.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod autodiff;
pub mod certify;
pub mod data;
pub mod error;
pub mod heat_oracle;
pub mod jl;
pub mod model;
pub mod rng;
pub mod smoothing;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{Activation, MlpModel};
pub use tensor::Tensor;

/// Anything that maps an input to class probabilities in `[0, 1]^Nc`.
pub trait ProbabilityModel {
    fn n_classes(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Predicted class of every row of `xs`.
    fn predict_batch(&self, xs: &Tensor) -> Result<Vec<usize>> {
        (0..xs.rows())
            .map(|i| self.probabilities(xs.row(i)).map(|p| model::argmax(&p)))
            .collect()
    }
}

impl ProbabilityModel for MlpModel {
    fn n_classes(&self) -> usize {
        MlpModel::n_classes(self)
    }

    fn input_dim(&self) -> usize {
        self.d_in()
    }

    fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        MlpModel::probabilities(self, x)
    }

    fn predict_batch(&self, xs: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward_batch(xs)?;
        Ok((0..logits.rows()).map(|i| model::argmax(logits.row(i))).collect())
    }
}
