//! Data-level augmentation (crop, scale, noise) and attention-based
//! temporal enhancement.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::SeriesBatch;
use crate::error::{Error, Result};
use crate::nn::{linear, multi_head_attention, AttentionParams, LinearParams};
use crate::params::composite_group;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub crop_enabled: bool,
    pub crop_ratio_range: [f64; 2],
    pub scale_enabled: bool,
    pub scale_range: [f64; 2],
    pub noise_enabled: bool,
    /// Noise std as a fraction of each channel's std.
    pub noise_sigma_rel: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_enabled: true,
            crop_ratio_range: [0.8, 1.0],
            scale_enabled: true,
            scale_range: [0.8, 1.2],
            noise_enabled: true,
            noise_sigma_rel: 0.05,
            seed: 0x5eed,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            crop_enabled: false,
            scale_enabled: false,
            noise_enabled: false,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        !(self.crop_enabled || self.scale_enabled || self.noise_enabled)
    }

    pub fn validate(&self) -> Result<()> {
        let [clo, chi] = self.crop_ratio_range;
        if !(clo > 0.0 && clo <= chi && chi <= 1.0) {
            return Err(Error::Config(format!(
                "crop_ratio_range [{clo}, {chi}] must satisfy 0 < lo <= hi <= 1"
            )));
        }
        let [slo, shi] = self.scale_range;
        if !(slo > 0.0 && slo <= shi && shi.is_finite()) {
            return Err(Error::Config(format!(
                "scale_range [{slo}, {shi}] must satisfy 0 < lo <= hi"
            )));
        }
        if !(self.noise_sigma_rel >= 0.0 && self.noise_sigma_rel.is_finite()) {
            return Err(Error::Config("noise_sigma_rel must be a finite value >= 0".into()));
        }
        Ok(())
    }
}

fn draw(range: [f64; 2], rng: &mut dyn RngCore) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..=range[1])
    }
}

fn check_series(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, c, l] => Ok((b, c, l)),
        _ => Err(Error::Shape(format!("expected [B,C,L], got {:?}", x.shape()))),
    }
}

/// Window length used by [`crop`] for a series of length `len`.
pub fn crop_window(len: usize, ratio: f64) -> usize {
    ((ratio * len as f64).round() as usize).clamp(2, len)
}

/// Linearly resamples `src[start..start+window]` to `out.len()` points.
fn resample(src: &[f64], start: usize, window: usize, out: &mut [f64]) {
    let n = out.len();
    let step = (window - 1) as f64 / (n - 1).max(1) as f64;
    for (j, o) in out.iter_mut().enumerate() {
        let pos = j as f64 * step;
        let i0 = (pos.floor() as usize).min(window - 1);
        let i1 = (i0 + 1).min(window - 1);
        let frac = pos - i0 as f64;
        let (a, b) = (src[start + i0], src[start + i1]);
        *o = a + (b - a) * frac;
    }
}

/// Crops one `[C, L]` series at `start` and stretches it back to `L`.
pub fn crop_series(series: &[f64], len: usize, window: usize, start: usize) -> Vec<f64> {
    let mut out = vec![0.0; series.len()];
    for (src, dst) in series.chunks(len).zip(out.chunks_mut(len)) {
        resample(src, start, window, dst);
    }
    out
}

/// Per-sample random window of `max(2, round(ratio*L))` steps, resized to `L`.
pub fn crop(x: &Tensor, ratio: f64, rng: &mut dyn RngCore) -> Result<Tensor> {
    crop_per_sample(x, |_| ratio, rng)
}

fn crop_per_sample(
    x: &Tensor,
    mut ratio: impl FnMut(&mut dyn RngCore) -> f64,
    rng: &mut dyn RngCore,
) -> Result<Tensor> {
    let (_, c, l) = check_series(x)?;
    if l < 2 {
        return Err(Error::Argument(format!("cannot crop series of length {l}")));
    }
    let mut out = Vec::with_capacity(x.len());
    for series in x.data().chunks(c * l) {
        let r = ratio(rng);
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::Argument(format!("crop ratio {r} outside (0, 1]")));
        }
        let window = crop_window(l, r);
        let start = rng.random_range(0..=l - window);
        out.extend(crop_series(series, l, window, start));
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn scale(x: &Tensor, factor: f64) -> Result<Tensor> {
    if !(factor > 0.0) {
        return Err(Error::Argument(format!("scale factor {factor} must be positive")));
    }
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * factor).collect())
}

/// Adds `N(0, (sigma_rel * std_c)^2)` to each channel of each sample.
pub fn noise(x: &Tensor, sigma_rel: f64, rng: &mut dyn RngCore) -> Result<Tensor> {
    let (_, _, l) = check_series(x)?;
    if !(sigma_rel >= 0.0) {
        return Err(Error::Argument(format!("noise level {sigma_rel} must be >= 0")));
    }
    let mut out = x.data().to_vec();
    if sigma_rel == 0.0 {
        return Tensor::new(x.shape().to_vec(), out);
    }
    for row in out.chunks_mut(l) {
        let mean = row.iter().sum::<f64>() / l as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / l as f64;
        let sd = sigma_rel * var.sqrt();
        if sd == 0.0 {
            continue;
        }
        for v in row.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += sd * z;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// The three augmentation stages, swappable for instrumentation.
pub trait AugmentOps {
    fn crop(&mut self, x: &Tensor, cfg: &AugmentConfig, rng: &mut dyn RngCore) -> Result<Tensor>;
    fn scale(&mut self, x: &Tensor, cfg: &AugmentConfig, rng: &mut dyn RngCore) -> Result<Tensor>;
    fn noise(&mut self, x: &Tensor, cfg: &AugmentConfig, rng: &mut dyn RngCore) -> Result<Tensor>;
}

/// Per-sample draws of crop ratio and scale factor.
pub struct StandardAugment;

impl AugmentOps for StandardAugment {
    fn crop(&mut self, x: &Tensor, cfg: &AugmentConfig, rng: &mut dyn RngCore) -> Result<Tensor> {
        crop_per_sample(x, |r| draw(cfg.crop_ratio_range, r), rng)
    }

    fn scale(&mut self, x: &Tensor, cfg: &AugmentConfig, rng: &mut dyn RngCore) -> Result<Tensor> {
        let (_, c, l) = check_series(x)?;
        let mut out = Vec::with_capacity(x.len());
        for series in x.data().chunks(c * l) {
            let f = draw(cfg.scale_range, rng);
            out.extend(series.iter().map(|v| v * f));
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    fn noise(&mut self, x: &Tensor, cfg: &AugmentConfig, rng: &mut dyn RngCore) -> Result<Tensor> {
        noise(x, cfg.noise_sigma_rel, rng)
    }
}

/// `Noise(Scale(Crop(x)))`, each stage only when enabled.
pub fn augment(x: &SeriesBatch, cfg: &AugmentConfig, rng: &mut dyn RngCore) -> Result<SeriesBatch> {
    augment_with(&mut StandardAugment, x, cfg, rng)
}

pub fn augment_with(
    ops: &mut dyn AugmentOps,
    x: &SeriesBatch,
    cfg: &AugmentConfig,
    rng: &mut dyn RngCore,
) -> Result<SeriesBatch> {
    cfg.validate()?;
    let mut out = x.clone();
    if cfg.crop_enabled {
        out.x = ops.crop(&out.x, cfg, rng)?;
    }
    if cfg.scale_enabled {
        out.x = ops.scale(&out.x, cfg, rng)?;
    }
    if cfg.noise_enabled {
        out.x = ops.noise(&out.x, cfg, rng)?;
    }
    Ok(out)
}

composite_group! {
    /// Time steps are tokens of width `C`, projected to `D_enh` for attention.
    pub struct EnhancerParams => EnhancerVars {
        input: LinearParams,
        attention: AttentionParams,
        output: LinearParams,
    }
}

impl EnhancerParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, width: usize, rng: &mut R) -> Self {
        Self {
            input: LinearParams::init(channels, width, rng),
            attention: AttentionParams::init(width, rng),
            output: LinearParams::init(width, channels, rng),
        }
    }

    pub fn zeros(channels: usize, width: usize) -> Self {
        Self {
            input: LinearParams::zeros(channels, width),
            attention: AttentionParams::zeros(width),
            output: LinearParams::zeros(width, channels),
        }
    }
}

/// Self-attention over time steps; `x_aug + back(MHA(in(x_aug)))` when
/// `residual`, otherwise just the attention branch. Shape `[B,C,L]` is kept.
pub fn temporal_enhance(
    g: &Graph,
    x_aug: Var,
    p: &EnhancerVars,
    heads: usize,
    residual: bool,
) -> Result<Var> {
    let shape = g.shape(x_aug);
    let in_dim = g.shape(p.input.weight)[0];
    if shape.len() != 3 || shape[1] != in_dim {
        return Err(Error::Config(format!(
            "enhancer expects [B,{in_dim},L] input, got {shape:?}"
        )));
    }
    let tokens = g.permute(x_aug, &[0, 2, 1])?;
    let z = linear(g, tokens, &p.input)?;
    let att = multi_head_attention(g, z, z, z, &p.attention, heads)?;
    let back = linear(g, att.output, &p.output)?;
    let back = g.permute(back, &[0, 2, 1])?;
    if residual {
        g.add(x_aug, back)
    } else {
        Ok(back)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, probe};
    use crate::params::ParamGroup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    fn series(data: &[f64]) -> Tensor {
        Tensor::new(vec![1, 1, data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn full_crop_is_identity() {
        let x = Tensor::randn(&[3, 2, 9], 1.0, &mut rng());
        let y = crop(&x, 1.0, &mut rng()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn crop_interpolates_by_hand() {
        let out = crop_series(&[1.0, 2.0, 5.0, 7.0], 4, 2, 2);
        let expect = [5.0, 5.0 + 2.0 / 3.0, 5.0 + 4.0 / 3.0, 7.0];
        for (o, e) in out.iter().zip(expect) {
            assert!((o - e).abs() < 1e-6);
        }
        assert_eq!(crop_window(4, 0.5), 2);
        assert_eq!(crop_window(4, 0.01), 2);
    }

    #[test]
    fn crop_keeps_constants() {
        let x = series(&[3.5; 11]);
        for r in [0.2, 0.5, 0.9] {
            assert!(crop(&x, r, &mut rng()).unwrap().data().iter().all(|&v| v == 3.5));
        }
    }

    #[test]
    fn crop_rejects_short_series() {
        assert!(matches!(crop(&series(&[1.0]), 0.5, &mut rng()), Err(Error::Argument(_))));
        assert!(crop(&series(&[1.0, 2.0]), 0.0, &mut rng()).is_err());
    }

    #[test]
    fn scale_examples() {
        let x = series(&[1.0, -3.0]);
        assert_eq!(scale(&x, 1.0).unwrap(), x);
        assert_eq!(scale(&x, 2.0).unwrap().data(), &[2.0, -6.0]);
        let std = |t: &Tensor| {
            let m = t.sum() / t.len() as f64;
            (t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / t.len() as f64).sqrt()
        };
        let r = Tensor::randn(&[1, 1, 50], 1.0, &mut rng());
        assert!((std(&scale(&r, 1.7).unwrap()) - 1.7 * std(&r)).abs() < 1e-9);
    }

    #[test]
    fn noise_examples() {
        let x = Tensor::randn(&[2, 2, 5], 1.0, &mut rng());
        assert_eq!(noise(&x, 0.0, &mut rng()).unwrap(), x);
        let c = series(&[2.0; 8]);
        assert_eq!(noise(&c, 0.5, &mut rng()).unwrap(), c);
    }

    #[test]
    fn noise_level_statistics() {
        let n = 10_000;
        let x = series(&(0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect::<Vec<_>>());
        let y = noise(&x, 0.1, &mut rng()).unwrap();
        let resid: Vec<f64> = y.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
        let m = resid.iter().sum::<f64>() / n as f64;
        let sd = (resid.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((0.097..=0.103).contains(&sd), "{sd}");
    }

    fn batch() -> SeriesBatch {
        let x = Tensor::randn(&[4, 2, 12], 1.0, &mut rng());
        SeriesBatch::new(x, vec![0, 1, 0, 1], (0..4).map(|i| i.to_string()).collect(), 2).unwrap()
    }

    #[test]
    fn disabled_augment_is_bitwise_identity() {
        let b = batch();
        assert_eq!(augment(&b, &AugmentConfig::disabled(), &mut rng()).unwrap(), b);
    }

    #[test]
    fn degenerate_scale_range_doubles() {
        let b = batch();
        let cfg = AugmentConfig {
            scale_enabled: true,
            scale_range: [2.0, 2.0],
            ..AugmentConfig::disabled()
        };
        let out = augment(&b, &cfg, &mut rng()).unwrap();
        for (o, i) in out.x.data().iter().zip(b.x.data()) {
            assert_eq!(*o, 2.0 * i);
        }
        assert_eq!(out.labels, b.labels);
        assert_eq!(out.subjects, b.subjects);
    }

    #[test]
    fn seeded_replay() {
        let b = batch();
        let cfg = AugmentConfig::default();
        let a1 = augment(&b, &cfg, &mut rng()).unwrap();
        let a2 = augment(&b, &cfg, &mut rng()).unwrap();
        assert_eq!(a1, a2);
        assert_ne!(a1.x, b.x);
    }

    #[derive(Default)]
    struct Recorder(Vec<&'static str>);

    impl AugmentOps for Recorder {
        fn crop(&mut self, x: &Tensor, _: &AugmentConfig, _: &mut dyn RngCore) -> Result<Tensor> {
            self.0.push("crop");
            Ok(x.clone())
        }
        fn scale(&mut self, x: &Tensor, _: &AugmentConfig, _: &mut dyn RngCore) -> Result<Tensor> {
            self.0.push("scale");
            Ok(x.clone())
        }
        fn noise(&mut self, x: &Tensor, _: &AugmentConfig, _: &mut dyn RngCore) -> Result<Tensor> {
            self.0.push("noise");
            Ok(x.clone())
        }
    }

    #[test]
    fn composition_order_is_crop_scale_noise() {
        let mut rec = Recorder::default();
        augment_with(&mut rec, &batch(), &AugmentConfig::default(), &mut rng()).unwrap();
        assert_eq!(rec.0, vec!["crop", "scale", "noise"]);

        let mut rec = Recorder::default();
        let cfg = AugmentConfig {
            scale_enabled: false,
            ..AugmentConfig::default()
        };
        augment_with(&mut rec, &batch(), &cfg, &mut rng()).unwrap();
        assert_eq!(rec.0, vec!["crop", "noise"]);
    }

    #[test]
    fn zero_enhancer_is_residual_only() {
        let x = Tensor::randn(&[2, 3, 6], 1.0, &mut rng());
        let g = Graph::new();
        let p = EnhancerParams::zeros(3, 4).bind(&g, false);
        let xv = g.constant(x.clone());
        let y = temporal_enhance(&g, xv, &p, 2, true).unwrap();
        assert_eq!(*g.value(y), x);
    }

    #[test]
    fn single_step_enhancement() {
        let mut r = rng();
        let params = EnhancerParams::init(3, 4, &mut r);
        let x = Tensor::randn(&[2, 3, 1], 1.0, &mut r);
        let g = Graph::new();
        let p = params.bind(&g, false);
        let xv = g.constant(x.clone());
        let y = temporal_enhance(&g, xv, &p, 2, true).unwrap();
        // With one token the attention weight is 1: branch = out(Wo(Wv(in(x)))).
        let t = g.permute(xv, &[0, 2, 1]).unwrap();
        let z = linear(&g, t, &p.input).unwrap();
        let v = g.add(g.matmul(z, p.attention.wv).unwrap(), p.attention.bv).unwrap();
        let o = g.add(g.matmul(v, p.attention.wo).unwrap(), p.attention.bo).unwrap();
        let back = linear(&g, o, &p.output).unwrap();
        let expect = g.add(xv, g.permute(back, &[0, 2, 1]).unwrap()).unwrap();
        assert!(g.value(y).max_abs_diff(&g.value(expect)) < 1e-12);
    }

    #[test]
    fn enhancement_shape_error() {
        let g = Graph::new();
        let p = EnhancerParams::zeros(3, 4).bind(&g, false);
        let x = g.constant(Tensor::zeros(&[1, 2, 5]));
        assert!(matches!(temporal_enhance(&g, x, &p, 2, true), Err(Error::Config(_))));
    }

    #[test]
    fn enhancement_gradcheck() {
        let mut r = rng();
        let params = EnhancerParams::init(3, 4, &mut r);
        let x = Tensor::randn(&[2, 3, 5], 1.0, &mut r);
        let err = grad_check(
            |g, xv| {
                let p = params.bind(g, false);
                let y = temporal_enhance(g, xv, &p, 2, true)?;
                assert_eq!(g.shape(y), vec![2, 3, 5]);
                probe(g, y, 3)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
