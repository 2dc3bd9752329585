//! Finite-difference probes for validating analytic gradients. The
//! numerical route only ever calls the forward pass, so it stays
//! independent of the backward implementation it is checking.

use crate::error::Result;
use crate::model::{forward, ModelParams, ModelSpec};
use crate::optim::cross_entropy;
use crate::tensor::Tensor;

/// Central-difference step used throughout the gradient suites.
pub const FD_STEP: f64 = 1e-5;

/// Scale-guarded relative error between an analytic and a numerical value.
pub fn relative_error(analytic: f64, numerical: f64) -> f64 {
    let scale = analytic.abs().max(numerical.abs()).max(1e-8);
    (analytic - numerical).abs() / scale
}

/// Mean cross-entropy of the model on the batch.
pub fn model_loss(
    spec: &ModelSpec,
    params: &ModelParams,
    batch: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    let (logits, _) = forward(spec, params, batch)?;
    Ok(cross_entropy(&logits, labels)?.0)
}

/// Central finite difference of the model loss along one parameter
/// coordinate.
pub fn fd_model_gradient(
    spec: &ModelSpec,
    params: &ModelParams,
    batch: &Tensor,
    labels: &[usize],
    coord: usize,
    step: f64,
) -> Result<f64> {
    let mut plus = params.clone();
    plus.values[coord] += step;
    let mut minus = params.clone();
    minus.values[coord] -= step;
    Ok((model_loss(spec, &plus, batch, labels)? - model_loss(spec, &minus, batch, labels)?)
        / (2.0 * step))
}

/// Central finite difference of an arbitrary scalar function of a vector,
/// along one coordinate.
pub fn fd_at(f: impl Fn(&[f64]) -> f64, point: &[f64], coord: usize, step: f64) -> f64 {
    let mut plus = point.to_vec();
    plus[coord] += step;
    let mut minus = point.to_vec();
    minus[coord] -= step;
    (f(&plus) - f(&minus)) / (2.0 * step)
}
