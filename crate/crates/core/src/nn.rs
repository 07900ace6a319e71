//! Shared layers: linear maps, multi-head attention, initialisation.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::param_group;
use crate::tensor::Tensor;

param_group! {
    /// `y = x W + b` with `W: [in, out]`.
    pub struct LinearParams => LinearVars {
        weight,
        bias,
    }
}

impl LinearParams {
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[fan_in, fan_out], bound, rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            weight.set(&[i, i], 1.0);
        }
        Self {
            weight,
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

pub fn linear(g: &Graph, x: Var, p: &LinearVars) -> Result<Var> {
    let y = g.matmul(x, p.weight)?;
    g.add(y, p.bias)
}

param_group! {
    /// One scalar per token, `x w` with `w: [in, 1]`. Only used ahead of a
    /// softmax over tokens, where a bias would cancel.
    pub struct ScorerParams => ScorerVars {
        weight,
    }
}

impl ScorerParams {
    pub fn init<R: Rng + ?Sized>(fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[fan_in, 1], bound, rng),
        }
    }

    pub fn zeros(fan_in: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, 1]),
        }
    }
}

/// `[B, N, F] -> [B, N]` token logits.
pub fn token_logits(g: &Graph, x: Var, p: &ScorerVars) -> Result<Var> {
    let shape = g.shape(x);
    if shape.len() != 3 {
        return Err(Error::Shape(format!("token scorer input must be [B,N,F], got {shape:?}")));
    }
    let y = g.matmul(x, p.weight)?;
    g.reshape(y, &shape[..2])
}

param_group! {
    /// Query/key/value/output projections of a multi-head attention layer.
    /// The key projection has no bias: it shifts every score in a query row
    /// equally.
    pub struct AttentionParams => AttentionVars {
        wq,
        bq,
        wk,
        wv,
        bv,
        wo,
        bo,
    }
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let q = LinearParams::init(dim, dim, rng);
        let k = LinearParams::init(dim, dim, rng);
        let v = LinearParams::init(dim, dim, rng);
        let o = LinearParams::init(dim, dim, rng);
        Self::from_linears(q, k, v, o)
    }

    pub fn identity(dim: usize) -> Self {
        let i = LinearParams::identity(dim);
        Self::from_linears(i.clone(), i.clone(), i.clone(), i)
    }

    pub fn zeros(dim: usize) -> Self {
        let z = LinearParams::zeros(dim, dim);
        Self::from_linears(z.clone(), z.clone(), z.clone(), z)
    }

    fn from_linears(q: LinearParams, k: LinearParams, v: LinearParams, o: LinearParams) -> Self {
        Self {
            wq: q.weight,
            bq: q.bias,
            wk: k.weight,
            wv: v.weight,
            bv: v.bias,
            wo: o.weight,
            bo: o.bias,
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }
}

/// Output of [`multi_head_attention`].
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// `[B, N, D]`
    pub output: Var,
    /// `[B, heads, N, N]`, rows sum to one.
    pub weights: Var,
}

/// Scaled dot-product attention split over `heads`, scale `1/sqrt(D/heads)`.
pub fn multi_head_attention(
    g: &Graph,
    q: Var,
    k: Var,
    v: Var,
    p: &AttentionVars,
    heads: usize,
) -> Result<Attended> {
    let shape = g.shape(q);
    if shape.len() != 3 {
        return Err(Error::Shape(format!("attention input must be [B,N,D], got {shape:?}")));
    }
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    if g.shape(k) != shape || g.shape(v) != shape {
        return Err(Error::Shape("query, key and value shapes differ".into()));
    }
    let dh = d / heads;
    let split = |x: Var, w: Var, bias: Option<Var>| -> Result<Var> {
        let mut y = g.matmul(x, w)?;
        if let Some(bias) = bias {
            y = g.add(y, bias)?;
        }
        let y = g.reshape(y, &[b, n, heads, dh])?;
        g.permute(y, &[0, 2, 1, 3])
    };
    let qh = split(q, p.wq, Some(p.bq))?;
    let kh = split(k, p.wk, None)?;
    let vh = split(v, p.wv, Some(p.bv))?;
    let scores = g.matmul(qh, g.transpose(kh)?)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = g.softmax(scores, 3)?;
    let ctx = g.matmul(weights, vh)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, n, d])?;
    let output = g.add(g.matmul(ctx, p.wo)?, p.bo)?;
    Ok(Attended { output, weights })
}
