//! The channel-graph multi-view detector and the linear autoregressive
//! baseline.

mod config;
mod linear_ar;
mod model;
mod params;
mod scoring;

pub use config::{CcgConfig, ScoreProjection, View, PRESETS};
pub use linear_ar::LinearAr;
pub use model::{
    channel_view_forward, composite_loss, forward, gate_fuse, gaussian_prior, patch_view_forward, symmetric_kl,
    temp_view_forward, Binding, CcgModel, Forward, LossParts, ViewOutputs,
};
pub use params::{AdjacencyParams, Init, ModelParams, ParamBlock, ADJ_BIAS_INIT, ADJ_FACTOR_STD};
pub use scoring::{anomaly_score, project_scores};

use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;
use crate::numerics::matexp_trace;

/// Added inside `log(A + ε)` for the attention bias.
pub const LOG_EPS: f64 = 1e-8;
/// Bias used where the prior mask forbids an edge.
pub const LOG_FLOOR: f64 = -30.0;

/// Patch start offsets; a final patch is anchored at `len − patch` when the
/// stride leaves a tail uncovered.
pub fn patch_starts(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|s| s + patch <= len).collect();
    if starts.last().is_some_and(|&s| s + patch < len) {
        starts.push(len - patch);
    }
    starts
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// `σ(UVᵀ + b) ∘ M_prior`.
pub fn adjacency(p: &AdjacencyParams) -> Result<Matrix> {
    let c = p.u.rows();
    if p.v.rows() != c || p.u.cols() != p.v.cols() {
        return Err(shape_err!("factors {}x{} and {}x{}", c, p.u.cols(), p.v.rows(), p.v.cols()));
    }
    if p.prior.rows() != c || p.prior.cols() != c {
        return Err(shape_err!("prior {}x{} for {c} channels", p.prior.rows(), p.prior.cols()));
    }
    if p.prior.as_slice().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::InvalidArgument("prior mask must be 0/1".into()));
    }
    let uv = p.u.matmul(&p.v.transpose())?;
    Ok(Matrix::from_fn(c, c, |i, j| sigmoid(uv.get(i, j) + p.b) * p.prior.get(i, j)))
}

/// Length-normalised acyclicity penalty `(tr exp(A∘A) − C) / C`.
pub fn dag_penalty(a: &Matrix) -> Result<f64> {
    if a.as_slice().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument("adjacency entries must be non-negative".into()));
    }
    let c = a.rows() as f64;
    let (tr, _) = matexp_trace(&a.map(|v| v * v), false)?;
    Ok(((tr - c) / c).max(0.0))
}

#[cfg(test)]
mod tests;
