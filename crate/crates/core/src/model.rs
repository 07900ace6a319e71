//! The assembled network: temporal enhancement, shapelet tokens with soft
//! sparsification, and the MoE / Inception fusion head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{compute_metrics, MetricsReport, SeriesBatch};
use crate::dualpath::{
    fuse_classify, inception_forward, mean_pool_classify, moe_forward, GateStats, HeadParams,
    InceptionParams, MoEParams,
};
use crate::enhancement::{temporal_enhance, EnhancerParams};
use crate::error::{Error, Result};
use crate::nn::LinearParams;
use crate::params::{composite_group, ParamGroup};
use crate::shapelet::{embed, score_shapelets, sparsify, ShapeletConfig, ShapeletParams, Tokenizer};
use crate::tensor::Tensor;

/// Component switches; `true` keeps the component in the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub data_enhancement: bool,
    pub temporal_enhancement: bool,
    pub sparsification: bool,
    /// When off, the fusion head is replaced by a mean-pool linear classifier.
    pub dual_path: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            data_enhancement: true,
            temporal_enhancement: true,
            sparsification: true,
            dual_path: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Subtract each sample's per-channel mean over the input window before
    /// anything else.
    pub center_input: bool,
    pub enhancer_width: usize,
    pub enhancer_heads: usize,
    pub enhancer_residual: bool,
    pub experts: usize,
    pub top_g: usize,
    /// Expert MLP hidden width; the token width when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expert_hidden: Option<usize>,
    pub inception_kernels: Vec<usize>,
    /// Divide the attention-weighted logits by the token count.
    pub average_tokens: bool,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            center_input: true,
            enhancer_width: 8,
            enhancer_heads: 2,
            enhancer_residual: true,
            experts: 4,
            top_g: 2,
            expert_hidden: None,
            inception_kernels: vec![3, 5, 7],
            average_tokens: true,
            ablation: Ablation::default(),
        }
    }
}

composite_group! {
    pub struct ModelParams => ModelVars {
        enhancer: Option<EnhancerParams>,
        shapelet: ShapeletParams,
        moe: Option<MoEParams>,
        inception: Option<InceptionParams>,
        head: Option<HeadParams>,
        pool_head: Option<LinearParams>,
    }
}

/// Input geometry fixed at construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub channels: usize,
    pub length: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub shapelet: ShapeletConfig,
    pub dims: InputDims,
    pub params: ModelParams,
}

/// Graph outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[B, K]`
    pub logits: Var,
    /// `[B, N]` shapelet scores; absent without sparsification.
    pub scores: Option<Var>,
    /// `[B*M, E]` gate probabilities; absent without the dual path.
    pub gate_probs: Option<Var>,
    pub gate_stats: Option<GateStats>,
    pub kept: Vec<Vec<usize>>,
}

impl Model {
    pub fn new(config: ModelConfig, shapelet: ShapeletConfig, dims: InputDims, seed: u64) -> Result<Self> {
        let tok = validate(&config, &shapelet, &dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = shapelet.model_dim;
        let ab = &config.ablation;
        let enhancer = ab
            .temporal_enhancement
            .then(|| EnhancerParams::init(dims.channels, config.enhancer_width, &mut rng));
        let shapelet_params = ShapeletParams::init(dims.channels, d, tok.window, &mut rng);
        let (moe, inception, head, pool_head) = if ab.dual_path {
            let hidden = config.expert_hidden.unwrap_or(d);
            (
                Some(MoEParams::init(d, hidden, config.experts, &mut rng)),
                Some(InceptionParams::init(d, &config.inception_kernels, &mut rng)?),
                Some(HeadParams::init(2 * d, dims.classes, &mut rng)),
                None,
            )
        } else {
            (None, None, None, Some(LinearParams::init(d, dims.classes, &mut rng)))
        };
        Ok(Self {
            config,
            shapelet,
            dims,
            params: ModelParams {
                enhancer,
                shapelet: shapelet_params,
                moe,
                inception,
                head,
                pool_head,
            },
        })
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        self.shapelet.tokenizer(self.dims.length)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Forward pass at keep ratio `r` with parameters bound as `vars`.
    pub fn forward(&self, g: &Graph, vars: &ModelVars, x: Var, r: f64) -> Result<Forward> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[1] != self.dims.channels || shape[2] != self.dims.length {
            return Err(Error::Shape(format!(
                "model expects [B,{},{}] input, got {shape:?}",
                self.dims.channels, self.dims.length
            )));
        }
        let tok = self.tokenizer()?;
        let x = if self.config.center_input {
            g.sub(x, g.mean_axis(x, 2)?)?
        } else {
            x
        };
        let enhanced = match &vars.enhancer {
            Some(p) => temporal_enhance(
                g,
                x,
                p,
                self.config.enhancer_heads,
                self.config.enhancer_residual,
            )?,
            None => x,
        };
        let seq = embed(g, enhanced, &vars.shapelet.embed, &tok)?;
        let (tokens, scores, kept) = if self.config.ablation.sparsification {
            let scores = score_shapelets(g, seq, &vars.shapelet.score)?;
            let values = g.value(scores).clone();
            let sp = sparsify(g, seq, &values, r)?;
            (sp.tokens, Some(scores), sp.kept)
        } else {
            let n = tok.tokens;
            (seq, None, vec![(0..n).collect(); shape[0]])
        };

        if let (Some(moe), Some(inc), Some(head)) = (&vars.moe, &vars.inception, &vars.head) {
            let m = moe_forward(g, tokens, moe, self.config.top_g)?;
            let ms = inception_forward(g, tokens, inc)?;
            let out = fuse_classify(g, m.output, ms, head, self.config.average_tokens)?;
            Ok(Forward {
                logits: out.logits,
                scores,
                gate_probs: Some(m.probs),
                gate_stats: Some(m.stats),
                kept,
            })
        } else {
            let head = vars
                .pool_head
                .as_ref()
                .ok_or_else(|| Error::Config("model has no classification head".into()))?;
            Ok(Forward {
                logits: mean_pool_classify(g, tokens, head)?,
                scores,
                gate_probs: None,
                gate_stats: None,
                kept,
            })
        }
    }

    /// Logits for `x` evaluated without gradient tracking.
    pub fn logits(&self, x: &Tensor, r: f64) -> Result<Tensor> {
        let g = Graph::new();
        let vars = self.params.bind(&g, false);
        let out = self.forward(&g, &vars, g.constant(x.clone()), r)?;
        let v = g.value(out.logits).clone();
        Ok(v)
    }

    /// Argmax predictions, processed in chunks of `chunk` samples.
    pub fn predict(&self, x: &Tensor, r: f64, chunk: usize) -> Result<Vec<usize>> {
        let shape = x.shape();
        let per = shape[1..].iter().product::<usize>();
        let mut preds = Vec::with_capacity(shape[0]);
        for rows in x.data().chunks(per * chunk.max(1)) {
            let b = rows.len() / per;
            let part = Tensor::new(vec![b, shape[1], shape[2]], rows.to_vec())?;
            let logits = self.logits(&part, r)?;
            preds.extend(logits.data().chunks(self.dims.classes).map(argmax));
        }
        Ok(preds)
    }

    pub fn evaluate(&self, data: &SeriesBatch, r: f64) -> Result<MetricsReport> {
        let preds = self.predict(&data.x, r, 256)?;
        compute_metrics(&preds, &data.labels, self.dims.classes)
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn validate(config: &ModelConfig, shapelet: &ShapeletConfig, dims: &InputDims) -> Result<Tokenizer> {
    if dims.classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", dims.classes)));
    }
    if dims.channels == 0 {
        return Err(Error::Config("need at least one channel".into()));
    }
    let d = shapelet.model_dim;
    if d == 0 {
        return Err(Error::Config("model_dim must be positive".into()));
    }
    if config.ablation.temporal_enhancement {
        let (w, h) = (config.enhancer_width, config.enhancer_heads);
        if w == 0 || h == 0 || w % h != 0 {
            return Err(Error::Config(format!(
                "enhancer_width {w} must be a positive multiple of enhancer_heads {h}"
            )));
        }
    }
    if config.ablation.dual_path {
        if config.experts < 2 {
            return Err(Error::Config(format!("need at least 2 experts, got {}", config.experts)));
        }
        if config.top_g == 0 || config.top_g > config.experts {
            return Err(Error::Config(format!(
                "top_g = {} must be in 1..={}",
                config.top_g, config.experts
            )));
        }
        if d % 4 != 0 {
            return Err(Error::Config(format!("model_dim {d} must be divisible by 4")));
        }
        if config.expert_hidden == Some(0) {
            return Err(Error::Config("expert_hidden must be positive".into()));
        }
    }
    shapelet.tokenizer(dims.length)
}
