//! Soft shapelet tokens: strided convolution plus positional encoding,
//! attention scores, and top-k sparsification with one aggregate token.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{token_logits, ScorerParams, ScorerVars};
use crate::params::{composite_group, param_group};
use crate::tensor::{conv_out_len, Tensor};
use crate::topk::{complement, topk_indices};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEncoding {
    #[default]
    Sinusoidal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeletConfig {
    /// Kernel length; `max(2, ceil(L/4))` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    /// Kernel stride; `max(1, window/2)` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    pub model_dim: usize,
    pub positional_encoding: PositionalEncoding,
}

impl Default for ShapeletConfig {
    fn default() -> Self {
        Self {
            window: None,
            stride: None,
            model_dim: 16,
            positional_encoding: PositionalEncoding::Sinusoidal,
        }
    }
}

/// Tokenizer geometry for one series length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    pub window: usize,
    pub stride: usize,
    pub tokens: usize,
}

impl ShapeletConfig {
    pub fn tokenizer(&self, len: usize) -> Result<Tokenizer> {
        let window = self.window.unwrap_or_else(|| 2.max(len.div_ceil(4)));
        let stride = self.stride.unwrap_or(1.max(window / 2));
        if window < 2 || stride < 1 {
            return Err(Error::Config(format!(
                "shapelet window {window} must be >= 2 and stride {stride} >= 1"
            )));
        }
        let tokens = conv_out_len(len, window, stride, 0).unwrap_or(0);
        if tokens < 2 {
            return Err(Error::Config(format!(
                "series length {len} with window {window} and stride {stride} gives {tokens} \
                 shapelet tokens; at least 2 are needed"
            )));
        }
        Ok(Tokenizer {
            window,
            stride,
            tokens,
        })
    }
}

/// `ceil(r * n)` with a small tolerance against float error, in `1..=n`.
pub fn keep_count(r: f64, n: usize) -> usize {
    ((r * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// `P[n, 2i] = sin(n / 10000^(2i/D))`, `P[n, 2i+1] = cos(n / 10000^(2i/D))`.
pub fn positional_encoding(tokens: usize, dim: usize) -> Tensor {
    let mut p = Tensor::zeros(&[tokens, dim]);
    for n in 0..tokens {
        for j in 0..dim {
            let pair = (j / 2 * 2) as f64;
            let angle = n as f64 / 10000f64.powf(pair / dim as f64);
            p.set(&[n, j], if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    p
}

param_group! {
    /// `weight: [D, C, window]`, `bias: [D]`.
    pub struct ConvParams => ConvVars {
        weight,
        bias,
    }
}

impl ConvParams {
    pub fn init<R: Rng + ?Sized>(cin: usize, cout: usize, kernel: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((cin * kernel) as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[cout, cin, kernel], bound, rng),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn zeros(cin: usize, cout: usize, kernel: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[cout, cin, kernel]),
            bias: Tensor::zeros(&[cout]),
        }
    }
}

composite_group! {
    pub struct ShapeletParams => ShapeletVars {
        embed: ConvParams,
        /// Scoring head `D -> 1`.
        score: ScorerParams,
    }
}

impl ShapeletParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, dim: usize, window: usize, rng: &mut R) -> Self {
        Self {
            embed: ConvParams::init(channels, dim, window, rng),
            score: ScorerParams::init(dim, rng),
        }
    }
}

/// `Conv1D(x_enhanced) + P` as `[B, N, D]`.
pub fn embed(g: &Graph, x_enhanced: Var, p: &ConvVars, tok: &Tokenizer) -> Result<Var> {
    let conv = g.conv1d(x_enhanced, p.weight, Some(p.bias), tok.stride, 0)?;
    let shape = g.shape(conv);
    if shape[2] < 2 {
        return Err(Error::Config(format!("{} shapelet tokens; at least 2 needed", shape[2])));
    }
    let seq = g.permute(conv, &[0, 2, 1])?;
    let pe = g.constant(positional_encoding(shape[2], shape[1]));
    g.add(seq, pe)
}

/// Per-token score `softmax_N(S w)`, shape `[B, N]`.
pub fn score_shapelets(g: &Graph, seq: Var, p: &ScorerVars) -> Result<Var> {
    g.softmax(token_logits(g, seq, p)?, 1)
}

/// Result of [`sparsify`].
#[derive(Clone, Debug)]
pub struct Sparsified {
    /// `[B, keep + 1, D]`: kept tokens in temporal order, then the aggregate.
    pub tokens: Var,
    /// `[B, 1, D]` mean of the discarded tokens (zero when none are discarded).
    pub agg: Var,
    pub kept: Vec<Vec<usize>>,
    pub discarded: Vec<Vec<usize>>,
}

/// Keeps the `ceil(r*N)` best-scored tokens of each sample and appends the
/// mean of the rest. Scores only select; no gradient flows through them.
pub fn sparsify(g: &Graph, seq: Var, scores: &Tensor, r: f64) -> Result<Sparsified> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Argument(format!("keep ratio {r} outside (0, 1]")));
    }
    let shape = g.shape(seq);
    let (b, n, d) = match shape[..] {
        [b, n, d] => (b, n, d),
        _ => return Err(Error::Shape(format!("sparsify expects [B,N,D], got {shape:?}"))),
    };
    if scores.shape() != [b, n] {
        return Err(Error::Shape(format!(
            "scores {:?} do not match tokens {shape:?}",
            scores.shape()
        )));
    }
    let k = keep_count(r, n);
    let mut kept = Vec::with_capacity(b);
    let mut discarded = Vec::with_capacity(b);
    let mut offsets = Vec::with_capacity(b * k * d);
    let mut weights = vec![0.0; b * n];
    for (i, row) in scores.data().chunks(n).enumerate() {
        let keep = topk_indices(row, k)?;
        let rest = complement(&keep, n);
        for &t in &keep {
            offsets.extend((0..d).map(|j| (i * n + t) * d + j));
        }
        if !rest.is_empty() {
            let w = 1.0 / rest.len() as f64;
            rest.iter().for_each(|&t| weights[i * n + t] = w);
        }
        kept.push(keep);
        discarded.push(rest);
    }
    let selected = g.take(seq, offsets, &[b, k, d])?;
    let w = g.constant(Tensor::new(vec![b, 1, n], weights)?);
    let agg = g.matmul(w, seq)?;
    let tokens = g.concat(&[selected, agg], 1)?;
    Ok(Sparsified {
        tokens,
        agg,
        kept,
        discarded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, probe};
    use crate::params::ParamGroup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn token_count_formula() {
        let cfg = ShapeletConfig {
            window: Some(3),
            stride: Some(1),
            ..Default::default()
        };
        assert_eq!(cfg.tokenizer(10).unwrap().tokens, 8);
        let auto = ShapeletConfig::default().tokenizer(32).unwrap();
        assert_eq!((auto.window, auto.stride, auto.tokens), (8, 4, 7));
        let short = ShapeletConfig::default().tokenizer(10).unwrap();
        assert_eq!((short.window, short.stride, short.tokens), (3, 1, 8));
        assert!(ShapeletConfig {
            window: Some(10),
            ..Default::default()
        }
        .tokenizer(10)
        .is_err());
    }

    #[test]
    fn keep_count_rounds_up_robustly() {
        assert_eq!(keep_count(0.3, 10), 3);
        assert_eq!(keep_count(0.5, 7), 4);
        assert_eq!(keep_count(1.0, 7), 7);
        assert_eq!(keep_count(0.01, 7), 1);
    }

    #[test]
    fn zero_conv_gives_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tok = ShapeletConfig::default().tokenizer(10).unwrap();
        let g = Graph::new();
        let p = ConvParams::zeros(2, 6, tok.window).bind(&g, false);
        let x = g.constant(Tensor::randn(&[3, 2, 10], 1.0, &mut rng));
        let s = embed(&g, x, &p, &tok).unwrap();
        let pe = positional_encoding(tok.tokens, 6);
        for b in 0..3 {
            for n in 0..tok.tokens {
                for j in 0..6 {
                    assert_eq!(g.value(s).get(&[b, n, j]), pe.get(&[n, j]));
                }
            }
        }
    }

    #[test]
    fn encoding_closed_form() {
        let p = positional_encoding(9, 8);
        for n in 0..9 {
            for i in 0..4 {
                let a = n as f64 / 10000f64.powf(2.0 * i as f64 / 8.0);
                assert!((p.get(&[n, 2 * i]) - a.sin()).abs() < 1e-12);
                assert!((p.get(&[n, 2 * i + 1]) - a.cos()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_scores_for_identical_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Graph::new();
        let p = ScorerParams::init(4, &mut rng).bind(&g, false);
        let row: Vec<f64> = vec![0.3, -0.2, 1.0, 0.5];
        let s = g.constant(Tensor::new(vec![1, 5, 4], row.repeat(5)).unwrap());
        let a = score_shapelets(&g, s, &p).unwrap();
        assert!(g.value(a).data().iter().all(|v| (v - 0.2).abs() < 1e-15));
        let z = ScorerParams::zeros(4).bind(&g, false);
        let s2 = g.constant(Tensor::randn(&[2, 5, 4], 1.0, &mut rng));
        let a2 = score_shapelets(&g, s2, &z).unwrap();
        assert!(g.value(a2).data().iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn score_argmax_matches_recomputed_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ScorerParams::init(6, &mut rng);
        let tokens = Tensor::randn(&[4, 9, 6], 1.0, &mut rng);
        let g = Graph::new();
        let p = params.bind(&g, false);
        let s = g.constant(tokens.clone());
        let a = g.value(score_shapelets(&g, s, &p).unwrap()).clone();
        for b in 0..4 {
            let logit = |n: usize| -> f64 {
                (0..6)
                    .map(|j| tokens.get(&[b, n, j]) * params.weight.get(&[j, 0]))
                    .sum::<f64>()
            };
            let best_logit = (0..9).max_by(|&x, &y| logit(x).total_cmp(&logit(y))).unwrap();
            let best_score = (0..9).max_by(|&x, &y| a.get(&[b, x]).total_cmp(&a.get(&[b, y]))).unwrap();
            assert_eq!(best_logit, best_score);
            let row_sum: f64 = (0..9).map(|n| a.get(&[b, n])).sum();
            assert!((row_sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn full_keep_appends_zero_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = Tensor::randn(&[2, 4, 3], 1.0, &mut rng);
        let g = Graph::new();
        let sv = g.constant(s.clone());
        let out = sparsify(&g, sv, &Tensor::full(&[2, 4], 0.25), 1.0).unwrap();
        let o = g.value(out.tokens);
        assert_eq!(o.shape(), &[2, 5, 3]);
        for b in 0..2 {
            for n in 0..4 {
                for j in 0..3 {
                    assert_eq!(o.get(&[b, n, j]), s.get(&[b, n, j]));
                }
            }
            assert!((0..3).all(|j| o.get(&[b, 4, j]) == 0.0));
        }
    }

    #[test]
    fn hand_topk_and_mean() {
        let s: Vec<f64> = (0..8).map(f64::from).collect();
        let g = Graph::new();
        let sv = g.constant(Tensor::new(vec![1, 4, 2], s).unwrap());
        let scores = Tensor::new(vec![1, 4], vec![0.4, 0.1, 0.2, 0.3]).unwrap();
        let out = sparsify(&g, sv, &scores, 0.5).unwrap();
        assert_eq!(out.kept, vec![vec![0, 3]]);
        assert_eq!(out.discarded, vec![vec![1, 2]]);
        // rows: S0, S3, (S1 + S2) / 2
        assert_eq!(g.value(out.tokens).data(), &[0., 1., 6., 7., 3., 4.]);
    }

    #[test]
    fn aggregate_ignores_discard_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = Tensor::randn(&[1, 6, 3], 1.0, &mut rng);
        let scores = Tensor::new(vec![1, 6], vec![0.9, 0.01, 0.02, 0.03, 0.8, 0.04]).unwrap();
        let g = Graph::new();
        let a = sparsify(&g, g.constant(s.clone()), &scores, 0.3).unwrap();
        // swap two discarded tokens (1 and 3), keeping their scores with them
        let mut p = s.clone();
        for j in 0..3 {
            p.set(&[0, 1, j], s.get(&[0, 3, j]));
            p.set(&[0, 3, j], s.get(&[0, 1, j]));
        }
        let ps = Tensor::new(vec![1, 6], vec![0.9, 0.03, 0.02, 0.01, 0.8, 0.04]).unwrap();
        let b = sparsify(&g, g.constant(p), &ps, 0.3).unwrap();
        assert!(g.value(a.agg).max_abs_diff(&g.value(b.agg)) < 1e-15);
    }

    #[test]
    fn rejects_bad_ratio() {
        let g = Graph::new();
        let s = g.constant(Tensor::zeros(&[1, 3, 2]));
        let sc = Tensor::full(&[1, 3], 1.0 / 3.0);
        assert!(matches!(sparsify(&g, s, &sc, 0.0), Err(Error::Argument(_))));
        assert!(sparsify(&g, s, &sc, 1.5).is_err());
    }

    #[test]
    fn every_token_gets_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = Tensor::randn(&[2, 7, 3], 1.0, &mut rng);
        let scores = Tensor::uniform(&[2, 7], 1.0, &mut rng);
        let err = grad_check(
            |g, sv| {
                let out = sparsify(g, sv, &scores, 0.5)?;
                probe(g, out.tokens, 1)
            },
            &s,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");

        let g = Graph::new();
        let sv = g.param(s);
        let out = sparsify(&g, sv, &scores, 0.5).unwrap();
        let loss = probe(&g, out.tokens, 1).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(sv).unwrap();
        for row in grad.data().chunks(3) {
            assert!(row.iter().any(|&v| v != 0.0));
        }
    }
}
