//! Class-weighted cross-entropy, MoE balance and shapelet sparsity terms.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dualpath::GateStats;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the MoE load-balance term.
    pub lambda_moe: f64,
    /// Weight of the shapelet score entropy term.
    pub lambda_sparsity: f64,
    /// Per-class weights; inverse frequency of the training labels when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_moe: 0.01,
            lambda_sparsity: 0.1,
            class_weights: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_moe", self.lambda_moe), ("lambda_sparsity", self.lambda_sparsity)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{name} = {v} must be finite and >= 0")));
            }
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::Config(format!("loss.class_weights {w:?} must be positive")));
            }
        }
        Ok(())
    }
}

/// The three loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub moe: f64,
    pub sparsity: f64,
}

/// `sum_b w[y_b] * -log softmax(logits_b)[y_b] / sum_b w[y_b]`.
pub fn weighted_cross_entropy(g: &Graph, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
    let shape = g.shape(logits);
    let (b, k) = match shape[..] {
        [b, k] => (b, k),
        _ => return Err(Error::Shape(format!("logits must be [B,K], got {shape:?}"))),
    };
    if labels.len() != b {
        return Err(Error::Data(format!("{} labels for {b} logit rows", labels.len())));
    }
    if weights.len() != k {
        return Err(Error::Data(format!("{} class weights for {k} classes", weights.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Data(format!("label {bad} outside 0..{k}")));
    }
    let logp = g.log_softmax(logits, 1)?;
    let picked = g.take(logp, labels.iter().enumerate().map(|(i, &y)| i * k + y).collect(), &[b])?;
    let applied: Vec<f64> = labels.iter().map(|&y| weights[y]).collect();
    let total: f64 = applied.iter().sum();
    let w = g.constant(Tensor::new(vec![b], applied.iter().map(|v| -v / total).collect())?);
    Ok(g.sum(g.mul(picked, w)?))
}

/// `E * sum_i f_i * p_i`; equals `top_g` under uniform utilisation.
pub fn moe_load_balance_loss(stats: &GateStats) -> f64 {
    let e = stats.num_experts() as f64;
    e * stats
        .token_fraction
        .iter()
        .zip(&stats.mean_prob)
        .map(|(f, p)| f * p)
        .sum::<f64>()
}

/// Graph form of [`moe_load_balance_loss`]; gradients reach the gate
/// probabilities `[T, E]` while token fractions are constants.
pub fn load_balance_term(g: &Graph, probs: Var, stats: &GateStats) -> Result<Var> {
    let shape = g.shape(probs);
    let (t, e) = (shape[0], shape[1]);
    let f = g.constant(Tensor::new(vec![1, e], stats.token_fraction.clone())?);
    let weighted = g.sum(g.mul(probs, f)?);
    Ok(g.scale(weighted, e as f64 / t as f64))
}

/// Mean normalised entropy `H(a) / log N` of per-sample score vectors.
pub fn sparsity_loss(g: &Graph, scores: Var) -> Result<Var> {
    let shape = g.shape(scores);
    let (b, n) = match shape[..] {
        [b, n] if n >= 2 => (b, n),
        _ => return Err(Error::Shape(format!("scores must be [B,N>=2], got {shape:?}"))),
    };
    let plogp = g.mul(scores, g.log_clamped(scores, 1e-300))?;
    Ok(g.scale(g.sum(plogp), -1.0 / (b as f64 * (n as f64).ln())))
}

/// `cls + lambda_moe * moe + lambda_sparsity * sparsity`.
pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> Result<f64> {
    check_parts(parts)?;
    Ok(parts.cls + cfg.lambda_moe * parts.moe + cfg.lambda_sparsity * parts.sparsity)
}

pub(crate) fn check_parts(parts: &LossParts) -> Result<()> {
    for (name, v) in [("classification", parts.cls), ("load-balance", parts.moe), ("sparsity", parts.sparsity)] {
        if !v.is_finite() {
            return Err(Error::Training(format!("{name} loss is not finite ({v})")));
        }
    }
    Ok(())
}

/// Graph form of [`total_loss`]. Terms with zero weight are left out.
pub fn combine_losses(
    g: &Graph,
    cls: Var,
    moe: Option<Var>,
    sparsity: Option<Var>,
    cfg: &LossConfig,
) -> Result<Var> {
    let mut total = cls;
    for (term, lambda) in [(moe, cfg.lambda_moe), (sparsity, cfg.lambda_sparsity)] {
        if let Some(v) = term {
            if lambda != 0.0 {
                total = g.add(total, g.scale(v, lambda))?;
            }
        }
    }
    Ok(total)
}

/// `total / (K * count_k)` clamped to `[0.1, 10]`; absent classes get 1.
pub fn class_weights_from_labels(labels: &[usize], k: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::Data("cannot derive class weights from no labels".into()));
    }
    let mut counts = vec![0usize; k];
    for &y in labels {
        if y >= k {
            return Err(Error::Data(format!("label {y} outside 0..{k}")));
        }
        counts[y] += 1;
    }
    let total = labels.len() as f64;
    Ok(counts
        .iter()
        .map(|&c| {
            if c == 0 {
                1.0
            } else {
                (total / (k as f64 * c as f64)).clamp(0.1, 10.0)
            }
        })
        .collect())
}
