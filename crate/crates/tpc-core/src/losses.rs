//! Training objectives: cross-entropy on the aggregated CLS state, the
//! ponder penalty on halting depth, and the KL divergence of the
//! layer-level break distribution against a Gaussian depth prior.

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

/// Floor applied to target distribution entries before taking logs.
pub const KL_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("label {label} outside 0..{classes}")]
    BadLabel { label: usize, classes: usize },
    #[error("empty token set")]
    EmptyTokenSet,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Scalar values of one loss evaluation.
/// `final_loss == task + phi_p * ponder + phi_d * distribution` exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub task: f64,
    pub ponder: f64,
    pub distribution: f64,
    pub final_loss: f64,
    pub phi_p: f64,
    pub phi_d: f64,
}

impl LossBreakdown {
    pub fn compose(task: f64, ponder: f64, distribution: f64, phi_p: f64, phi_d: f64) -> Self {
        LossBreakdown {
            task,
            ponder,
            distribution,
            final_loss: task + phi_p * ponder + phi_d * distribution,
            phi_p,
            phi_d,
        }
    }
}

/// Per-layer mean break mass over tokens, raw and normalized to sum 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBreakDistribution {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl LayerBreakDistribution {
    /// `per_layer_token_weights[l][k]` is token `k`'s aggregated break
    /// weight at layer `l`.
    pub fn from_weights(per_layer_token_weights: &[Vec<f64>]) -> Result<Self, LossError> {
        let mut raw = Vec::with_capacity(per_layer_token_weights.len());
        for layer in per_layer_token_weights {
            if layer.is_empty() {
                return Err(LossError::EmptyTokenSet);
            }
            raw.push(layer.iter().sum::<f64>() / layer.len() as f64);
        }
        let total: f64 = raw.iter().sum();
        let normalized = if total > 0.0 {
            raw.iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / raw.len() as f64; raw.len()]
        };
        Ok(LayerBreakDistribution { raw, normalized })
    }
}

/// Mean of `halting_layer + remainder` over tokens.
pub fn ponder_loss(halting_layers: &[usize], remainders: &[f64]) -> Result<f64, LossError> {
    assert_eq!(halting_layers.len(), remainders.len());
    if halting_layers.is_empty() {
        return Err(LossError::EmptyTokenSet);
    }
    let sum: f64 = halting_layers
        .iter()
        .zip(remainders)
        .map(|(&m, &r)| m as f64 + r)
        .sum();
    Ok(sum / halting_layers.len() as f64)
}

/// Discretized Gaussian N(center, 1) over layers 1..=depth, floored at
/// [`KL_EPS`] and normalized to sum 1.
pub fn gaussian_target(depth: usize, center: f64) -> Vec<f64> {
    let mut target: Vec<f64> = (1..=depth)
        .map(|l| {
            let z = l as f64 - center;
            (-0.5 * z * z).exp()
        })
        .collect();
    let sum: f64 = target.iter().sum();
    for v in &mut target {
        *v = (*v / sum).max(KL_EPS);
    }
    let sum: f64 = target.iter().sum();
    for v in &mut target {
        *v /= sum;
    }
    target
}

/// KL(d || target) with the 0·ln(0) = 0 convention. Both inputs are
/// expected to be normalized.
pub fn kl_divergence(d: &[f64], target: &[f64]) -> f64 {
    assert_eq!(d.len(), target.len());
    d.iter()
        .zip(target)
        .map(|(&p, &q)| {
            if p <= 0.0 {
                0.0
            } else {
                p * (p.ln() - q.max(KL_EPS).ln())
            }
        })
        .sum()
}

/// Distribution loss from per-layer token break weights: normalize the
/// layer means and take KL against the Gaussian depth prior.
pub fn distribution_loss(
    per_layer_token_weights: &[Vec<f64>],
    target_depth: f64,
) -> Result<f64, LossError> {
    let dist = LayerBreakDistribution::from_weights(per_layer_token_weights)?;
    let target = gaussian_target(dist.raw.len(), target_depth);
    Ok(kl_divergence(&dist.normalized, &target))
}

/// Cross-entropy of a `[1, C]` (or `[C]`) logit row against a class label.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<Tensor, LossError> {
    let classes = logits.numel();
    if label >= classes {
        return Err(LossError::BadLabel { label, classes });
    }
    let flat = logits.flatten();
    Ok(flat.log_softmax().gather_rows(&[label])?.neg())
}

/// Tape-level composition of the final loss from the three scalar parts.
pub fn compose_final(
    task: &Tensor,
    ponder: &Tensor,
    distribution: &Tensor,
    phi_p: f64,
    phi_d: f64,
) -> Result<Tensor, TensorError> {
    task.add(&ponder.scale(phi_p))?.add(&distribution.scale(phi_d))
}
