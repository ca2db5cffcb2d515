//! Numerical substrate: matrices, reverse-mode autodiff over a bounded op
//! set, layer builders, Adam parameter updates, diagonal Gaussians, and a
//! finite-difference gradient checker.

mod check;
mod layers;
mod mat;
mod store;
mod tape;

pub use check::{finite_diff_check, FiniteDiffReport};
pub use layers::{
    attention_nodes, attention_proj_init, cosine_nodes, dense, dense_init, dense_init_zero,
    dense_tanh, gaussian_kl_nodes, gru_cell, gru_init, projected_attention,
};
pub use mat::{logsumexp, softmax_into, Mat};
pub use store::{xavier, ParamStore};
pub use tape::{NodeId, Tape};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Clamp range for log standard deviations.
pub const LOG_STD_MIN: f64 = -7.0;
pub const LOG_STD_MAX: f64 = 7.0;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension mismatch: {what}")]
    DimMismatch { what: String },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("non-finite value produced by op `{op}`")]
    NonFinite { op: String },
    #[error("snapshot error: {0}")]
    Snapshot(String),
}

/// Diagonal Gaussian given by per-dimension mean and log standard deviation.
/// `log_std` is clamped to [-7, 7] on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Self {
        assert_eq!(mean.len(), log_std.len(), "mean/log_std length mismatch");
        let log_std = log_std
            .into_iter()
            .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect();
        DiagGaussian { mean, log_std }
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            log_std: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|v| v.exp()).collect()
    }

    /// Reparameterized sample: mean + std * eps.
    pub fn sample(&self, eps: &[f64]) -> Vec<f64> {
        assert_eq!(eps.len(), self.dim());
        self.mean
            .iter()
            .zip(self.log_std.iter())
            .zip(eps.iter())
            .map(|((&m, &ls), &e)| m + ls.exp() * e)
            .collect()
    }

    /// Log density of `x` under this Gaussian.
    pub fn log_prob(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim());
        let mut lp = 0.0;
        for i in 0..self.dim() {
            let std = self.log_std[i].exp();
            let z = (x[i] - self.mean[i]) / std;
            lp += -0.5 * z * z - self.log_std[i] - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        lp
    }
}

/// Closed-form KL divergence between diagonal Gaussians, KL(q || p).
/// Returns exactly 0 when q == p.
pub fn gaussian_kl(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64, TensorError> {
    if q.dim() != p.dim() {
        return Err(TensorError::DimMismatch {
            what: format!("gaussian_kl dims {} vs {}", q.dim(), p.dim()),
        });
    }
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let var_q = (2.0 * q.log_std[i]).exp();
        let var_p = (2.0 * p.log_std[i]).exp();
        let diff = q.mean[i] - p.mean[i];
        kl += p.log_std[i] - q.log_std[i] + (var_q + diff * diff) / (2.0 * var_p) - 0.5;
    }
    Ok(kl)
}

/// Cosine similarity in [-1, 1]; errors on zero-norm inputs.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64, TensorError> {
    if a.len() != b.len() {
        return Err(TensorError::DimMismatch {
            what: format!("cosine_sim dims {} vs {}", a.len(), b.len()),
        });
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(TensorError::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Scaled dot-product attention on plain matrices:
/// softmax(q k^T / sqrt(d) + bias) v with row-stochastic weights.
pub fn attention_layer(q: &Mat, k: &Mat, v: &Mat, bias: &Mat) -> Result<Mat, TensorError> {
    if q.cols != k.cols || k.rows != v.rows || bias.rows != q.rows || bias.cols != k.rows {
        return Err(TensorError::DimMismatch {
            what: format!(
                "attention q {}x{}, k {}x{}, v {}x{}, bias {}x{}",
                q.rows, q.cols, k.rows, k.cols, v.rows, v.cols, bias.rows, bias.cols
            ),
        });
    }
    let scale = 1.0 / (q.cols as f64).sqrt();
    let mut out = Mat::zeros(q.rows, v.cols);
    let mut weights = vec![0.0; k.rows];
    for i in 0..q.rows {
        let scores: Vec<f64> = (0..k.rows)
            .map(|j| {
                let dot: f64 = (0..q.cols).map(|c| q.at(i, c) * k.at(j, c)).sum();
                dot * scale + bias.at(i, j)
            })
            .collect();
        softmax_into(&scores, &mut weights);
        for (j, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for c in 0..v.cols {
                *out.at_mut(i, c) += w * v.at(j, c);
            }
        }
    }
    Ok(out)
}
