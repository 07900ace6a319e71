//! Dual-path fusion head: sparse mixture of experts for local shapelet
//! learning, an Inception block for multi-scale patterns across shapelets,
//! and attention-weighted classification.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{linear, token_logits, LinearParams, ScorerParams};
use crate::params::composite_group;
use crate::shapelet::ConvParams;
use crate::tensor::Tensor;
use crate::topk::topk_indices;

composite_group! {
    /// Two-layer GELU MLP `D -> hidden -> D`.
    pub struct ExpertParams => ExpertVars {
        up: LinearParams,
        down: LinearParams,
    }
}

composite_group! {
    pub struct MoEParams => MoEVars {
        experts: Vec<ExpertParams>,
        /// Gate projection `D -> E`.
        gate: LinearParams,
    }
}

impl MoEParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, experts: usize, rng: &mut R) -> Self {
        Self {
            experts: (0..experts)
                .map(|_| ExpertParams {
                    up: LinearParams::init(dim, hidden, rng),
                    down: LinearParams::init(hidden, dim, rng),
                })
                .collect(),
            gate: LinearParams::init(dim, experts, rng),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }
}

/// Gate utilisation of one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    /// Mean softmax gate probability per expert; sums to one.
    pub mean_prob: Vec<f64>,
    /// Fraction of tokens routed to each expert; sums to `top_g`.
    pub token_fraction: Vec<f64>,
    /// Entropy of each token's gate distribution.
    pub entropy: Vec<f64>,
    pub top_g: usize,
}

impl GateStats {
    pub fn num_experts(&self) -> usize {
        self.mean_prob.len()
    }
}

#[derive(Clone, Debug)]
pub struct MoEOutput {
    /// `[B, M, D]`
    pub output: Var,
    /// Softmax gate probabilities `[B*M, E]`.
    pub probs: Var,
    /// Renormalised gates over the selected experts `[B*M, E]`.
    pub gates: Var,
    /// Selected experts per token, ascending.
    pub selected: Vec<Vec<usize>>,
    pub stats: GateStats,
}

fn expert_forward(g: &Graph, x: Var, p: &ExpertVars) -> Result<Var> {
    let h = g.gelu(linear(g, x, &p.up)?);
    linear(g, h, &p.down)
}

/// `x + sum_i g_norm_i * Expert_i(x)` per token, where `g_norm` is the
/// gate softmax restricted to the `top_g` largest gates and renormalised.
/// Only routed tokens are evaluated by each expert.
pub fn moe_forward(g: &Graph, x: Var, p: &MoEVars, top_g: usize) -> Result<MoEOutput> {
    let shape = g.shape(x);
    let (b, m, d) = match shape[..] {
        [b, m, d] => (b, m, d),
        _ => return Err(Error::Shape(format!("MoE input must be [B,M,D], got {shape:?}"))),
    };
    let e = p.experts.len();
    if e < 2 {
        return Err(Error::Config(format!("MoE needs at least 2 experts, got {e}")));
    }
    if top_g == 0 || top_g > e {
        return Err(Error::Config(format!("top_g = {top_g} must be in 1..={e}")));
    }
    let t = b * m;
    let flat = g.reshape(x, &[t, d])?;
    let logits = linear(g, flat, &p.gate)?;
    let probs = g.softmax(logits, 1)?;

    let (selected, mask, stats) = {
        let pv = g.value(probs);
        let mut selected = Vec::with_capacity(t);
        let mut mask = vec![0.0; t * e];
        let mut mean_prob = vec![0.0; e];
        let mut counts = vec![0usize; e];
        let mut entropy = Vec::with_capacity(t);
        for (tok, row) in pv.data().chunks(e).enumerate() {
            let sel = topk_indices(row, top_g)?;
            for &i in &sel {
                mask[tok * e + i] = 1.0;
                counts[i] += 1;
            }
            for (acc, &v) in mean_prob.iter_mut().zip(row) {
                *acc += v;
            }
            entropy.push(-row.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>());
            selected.push(sel);
        }
        mean_prob.iter_mut().for_each(|v| *v /= t as f64);
        let stats = GateStats {
            mean_prob,
            token_fraction: counts.iter().map(|&c| c as f64 / t as f64).collect(),
            entropy,
            top_g,
        };
        (selected, Tensor::new(vec![t, e], mask)?, stats)
    };

    let mask = g.constant(mask);
    let masked = g.mul(probs, mask)?;
    let denom = g.sum_axis(masked, 1)?;
    let gates = g.div(masked, denom)?;

    let mut out = flat;
    for (i, expert) in p.experts.iter().enumerate() {
        let tokens: Vec<usize> = (0..t).filter(|&tok| selected[tok].contains(&i)).collect();
        if tokens.is_empty() {
            continue;
        }
        let n = tokens.len();
        let rows: Vec<usize> = tokens.iter().flat_map(|&tok| (0..d).map(move |j| tok * d + j)).collect();
        let xi = g.take(flat, rows.clone(), &[n, d])?;
        let yi = expert_forward(g, xi, expert)?;
        let gi = g.take(gates, tokens.iter().map(|&tok| tok * e + i).collect(), &[n, 1])?;
        let weighted = g.mul(yi, gi)?;
        let placed = g.scatter_add(weighted, rows, &[t, d])?;
        out = g.add(out, placed)?;
    }
    let output = g.reshape(out, &[b, m, d])?;
    Ok(MoEOutput {
        output,
        probs,
        gates,
        selected,
        stats,
    })
}

composite_group! {
    /// Three same-padded conv branches `D -> D/4` plus max-pool then `1x1` conv.
    pub struct InceptionParams => InceptionVars {
        branches: Vec<ConvParams>,
        pool_proj: ConvParams,
    }
}

impl InceptionParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, kernels: &[usize], rng: &mut R) -> Result<Self> {
        check_inception(dim, kernels)?;
        let q = dim / 4;
        Ok(Self {
            branches: kernels.iter().map(|&k| ConvParams::init(dim, q, k, rng)).collect(),
            pool_proj: ConvParams::init(dim, q, 1, rng),
        })
    }
}

fn check_inception(dim: usize, kernels: &[usize]) -> Result<()> {
    if dim % 4 != 0 || dim == 0 {
        return Err(Error::Config(format!("Inception width {dim} is not divisible by 4")));
    }
    if kernels.len() != 3 || kernels.iter().any(|k| k % 2 == 0) {
        return Err(Error::Config(format!(
            "Inception needs three odd kernel sizes, got {kernels:?}"
        )));
    }
    Ok(())
}

/// `Concat(Conv_k1, Conv_k2, Conv_k3, Conv_1x1(MaxPool_3))` along channels,
/// convolving over the token axis; token count is preserved.
pub fn inception_forward(g: &Graph, x: Var, p: &InceptionVars) -> Result<Var> {
    let shape = g.shape(x);
    if shape.len() != 3 || shape[1] == 0 {
        return Err(Error::Shape(format!("Inception input must be [B,M,D], got {shape:?}")));
    }
    let kernels: Vec<usize> = p.branches.iter().map(|b| g.shape(b.weight)[2]).collect();
    check_inception(shape[2], &kernels)?;
    let xt = g.permute(x, &[0, 2, 1])?;
    let mut parts = Vec::with_capacity(4);
    for (branch, &k) in p.branches.iter().zip(&kernels) {
        parts.push(g.conv1d(xt, branch.weight, Some(branch.bias), 1, (k - 1) / 2)?);
    }
    let pooled = g.max_pool1d(xt, 3, 1, 1)?;
    parts.push(g.conv1d(pooled, p.pool_proj.weight, Some(p.pool_proj.bias), 1, 0)?);
    let cat = g.concat(&parts, 1)?;
    g.permute(cat, &[0, 2, 1])
}

composite_group! {
    pub struct HeadParams => HeadVars {
        /// `W_cls: 2D -> K`.
        cls: LinearParams,
        /// Token attention `2D -> 1`.
        attn: ScorerParams,
    }
}

impl HeadParams {
    pub fn init<R: Rng + ?Sized>(combined: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            cls: LinearParams::init(combined, classes, rng),
            attn: ScorerParams::init(combined, rng),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Classified {
    /// `[B, K]`
    pub logits: Var,
    /// `[B, M]` token weights.
    pub attention: Var,
}

/// `y = (1/M) * sum_m a_m * W_cls h_m` over `h = concat(H_moe, H_ms)`.
/// With `average_tokens = false` the `1/M` factor is dropped.
pub fn fuse_classify(
    g: &Graph,
    h_moe: Var,
    h_ms: Var,
    p: &HeadVars,
    average_tokens: bool,
) -> Result<Classified> {
    let a = g.shape(h_moe);
    if a.len() != 3 || g.shape(h_ms) != a {
        return Err(Error::Shape(format!(
            "fusion inputs {a:?} and {:?} must match",
            g.shape(h_ms)
        )));
    }
    let combined = g.concat(&[h_moe, h_ms], 2)?;
    classify_tokens(g, combined, p, average_tokens)
}

/// Attention-weighted token logits for any `[B, M, F]` input.
pub fn classify_tokens(g: &Graph, tokens: Var, p: &HeadVars, average_tokens: bool) -> Result<Classified> {
    let shape = g.shape(tokens);
    let (b, m) = (shape[0], shape[1]);
    let attention = g.softmax(token_logits(g, tokens, &p.attn)?, 1)?;
    let per_token = linear(g, tokens, &p.cls)?;
    let k = g.shape(per_token)[2];
    let weighted = g.matmul(g.reshape(attention, &[b, 1, m])?, per_token)?;
    let mut logits = g.reshape(weighted, &[b, k])?;
    if average_tokens {
        logits = g.scale(logits, 1.0 / m as f64);
    }
    Ok(Classified { logits, attention })
}

/// Ablation head: `W (mean_m h_m) + b`.
pub fn mean_pool_classify(g: &Graph, tokens: Var, p: &crate::nn::LinearVars) -> Result<Var> {
    let shape = g.shape(tokens);
    let pooled = g.mean_axis(tokens, 1)?;
    let pooled = g.reshape(pooled, &[shape[0], shape[2]])?;
    linear(g, pooled, p)
}
