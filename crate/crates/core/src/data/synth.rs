use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SeriesBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Planted-motif dataset description.
///
/// Every sample is Gaussian background plus a per-subject channel offset,
/// with the motif of its class added at a random position of one random
/// channel. The motif of class `c` is a sine with `c + 1` full periods, so
/// motifs are zero-mean and mutually orthogonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub channels: usize,
    pub length: usize,
    pub classes: usize,
    /// Fraction of samples per class; sums to one.
    pub class_ratios: Vec<f64>,
    /// Motif length per class.
    pub motif_lengths: Vec<usize>,
    /// Motif amplitude per class.
    pub motif_amplitudes: Vec<f64>,
    /// The motif lies entirely inside `[lo*L, hi*L)`.
    pub motif_region: [f64; 2],
    pub noise_std: f64,
    pub subjects_per_class: usize,
    /// Per-subject channel offsets are drawn from `U(-subject_offset, subject_offset)`.
    pub subject_offset: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            channels: 3,
            length: 32,
            classes: 2,
            class_ratios: vec![0.8, 0.2],
            motif_lengths: vec![6, 6],
            motif_amplitudes: vec![1.0, 1.0],
            motif_region: [0.0, 1.0],
            noise_std: 0.3,
            subjects_per_class: 20,
            subject_offset: 0.2,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.classes;
        let cfg = |m: String| Err(Error::Config(m));
        if k < 2 {
            return cfg(format!("need at least 2 classes, got {k}"));
        }
        if self.channels == 0 || self.length < 2 || self.n_samples == 0 {
            return cfg("channels, length and n_samples must be positive (length >= 2)".into());
        }
        if self.class_ratios.len() != k
            || self.motif_lengths.len() != k
            || self.motif_amplitudes.len() != k
        {
            return cfg(format!(
                "class_ratios, motif_lengths and motif_amplitudes need {k} entries"
            ));
        }
        let total: f64 = self.class_ratios.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.class_ratios.iter().any(|&r| !(r >= 0.0)) {
            return cfg(format!("class_ratios must be non-negative and sum to 1, got {total}"));
        }
        let [lo, hi] = self.motif_region;
        if !(0.0..1.0).contains(&lo) || !(lo < hi && hi <= 1.0) {
            return cfg(format!("motif_region [{lo}, {hi}] is not a sub-interval of [0, 1]"));
        }
        for (c, &m) in self.motif_lengths.iter().enumerate() {
            if m >= self.length {
                return cfg(format!(
                    "motif length {m} for class {c} must be below the series length {}",
                    self.length
                ));
            }
            if m <= 2 * (c + 1) {
                return cfg(format!(
                    "motif length {m} for class {c} must exceed {} to resolve {} sine periods",
                    2 * (c + 1),
                    c + 1
                ));
            }
            self.start_range(m).ok_or_else(|| {
                Error::Config(format!(
                    "motif of length {m} does not fit region [{lo}, {hi}] of length {}",
                    self.length
                ))
            })?;
        }
        if self.subjects_per_class == 0 {
            return cfg("subjects_per_class must be positive".into());
        }
        if !(self.noise_std >= 0.0) || !(self.subject_offset >= 0.0) {
            return cfg("noise_std and subject_offset must be non-negative".into());
        }
        Ok(())
    }

    /// Inclusive range of valid motif start positions.
    fn start_range(&self, motif_len: usize) -> Option<(usize, usize)> {
        let l = self.length as f64;
        let lo = (self.motif_region[0] * l).ceil() as usize;
        let hi = ((self.motif_region[1] * l).floor() as usize).min(self.length);
        (hi >= lo + motif_len).then(|| (lo, hi - motif_len))
    }

    /// Exact per-class sample counts (largest remainder, ties to lower class).
    pub fn class_counts(&self) -> Vec<usize> {
        let n = self.n_samples as f64;
        let raw: Vec<f64> = self.class_ratios.iter().map(|r| r * n).collect();
        let mut counts: Vec<usize> = raw.iter().map(|x| (x + 1e-9).floor() as usize).collect();
        let mut rest = self.n_samples - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = raw[a] - counts[a] as f64;
            let fb = raw[b] - counts[b] as f64;
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &c in order.iter().cycle() {
            if rest == 0 {
                break;
            }
            counts[c] += 1;
            rest -= 1;
        }
        counts
    }
}

/// Motif of `class`: `class + 1` full sine periods over `len` steps, so
/// every class waveform is zero-mean and the classes differ in frequency.
pub fn motif_waveform(class: usize, len: usize, amplitude: f64) -> Vec<f64> {
    let cycles = (class + 1) as f64;
    (0..len)
        .map(|j| amplitude * (2.0 * PI * cycles * j as f64 / len as f64).sin())
        .collect()
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SeriesBatch> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (c, l, k) = (cfg.channels, cfg.length, cfg.classes);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;

    let offsets: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|_| {
            (0..cfg.subjects_per_class)
                .map(|_| {
                    (0..c)
                        .map(|_| {
                            if cfg.subject_offset > 0.0 {
                                rng.random_range(-cfg.subject_offset..cfg.subject_offset)
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let per = c * l;
    let mut samples: Vec<(Vec<f64>, usize, String)> = Vec::with_capacity(cfg.n_samples);
    for (class, &count) in cfg.class_counts().iter().enumerate() {
        let len = cfg.motif_lengths[class];
        let motif = motif_waveform(class, len, cfg.motif_amplitudes[class]);
        let (lo, hi) = cfg.start_range(len).expect("validated");
        for i in 0..count {
            let subject = i % cfg.subjects_per_class;
            let mut x = vec![0.0; per];
            for ch in 0..c {
                let off = offsets[class][subject][ch];
                for t in 0..l {
                    x[ch * l + t] = off + noise.sample(&mut rng);
                }
            }
            let ch = rng.random_range(0..c);
            let start = rng.random_range(lo..=hi);
            for (j, m) in motif.iter().enumerate() {
                x[ch * l + start + j] += m;
            }
            samples.push((x, class, format!("c{class}s{subject}")));
        }
    }
    samples.shuffle(&mut rng);

    let mut data = Vec::with_capacity(cfg.n_samples * per);
    let mut labels = Vec::with_capacity(cfg.n_samples);
    let mut subjects = Vec::with_capacity(cfg.n_samples);
    for (x, y, s) in samples {
        data.extend(x);
        labels.push(y);
        subjects.push(s);
    }
    SeriesBatch::new(Tensor::new(vec![cfg.n_samples, c, l], data)?, labels, subjects, k)
}
