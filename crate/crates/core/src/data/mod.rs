//! Series batches, synthetic data, CSV ingestion, splits and metrics.

mod csv;
mod metrics;
mod split;
mod synth;

pub use self::csv::{load_csv, write_csv, CsvSchema};
pub use metrics::{compute_metrics, MetricsReport};
pub use split::{prefix_truncate, subject_split, zero_pad};
pub use synth::{generate_synthetic, motif_waveform, SynthConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A batch of multivariate series `x[B, C, L]` with labels and subject ids.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub subjects: Vec<String>,
    pub num_classes: usize,
}

impl SeriesBatch {
    pub fn new(
        x: Tensor,
        labels: Vec<usize>,
        subjects: Vec<String>,
        num_classes: usize,
    ) -> Result<Self> {
        if x.ndim() != 3 {
            return Err(Error::Shape(format!("series batch must be [B,C,L], got {:?}", x.shape())));
        }
        let b = x.shape()[0];
        if labels.len() != b || subjects.len() != b {
            return Err(Error::Data(format!(
                "{b} series but {} labels and {} subjects",
                labels.len(),
                subjects.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} not below K = {num_classes}")));
        }
        Ok(Self {
            x,
            labels,
            subjects,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn length(&self) -> usize {
        self.x.shape()[2]
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Data("cannot select an empty batch".into()));
        }
        let per = self.channels() * self.length();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.x.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.x.shape().to_vec();
        shape[0] = indices.len();
        Ok(Self {
            x: Tensor::new(shape, data)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
            num_classes: self.num_classes,
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }

    /// One series `[C, L]` as a flat slice.
    pub fn series(&self, i: usize) -> &[f64] {
        let per = self.channels() * self.length();
        &self.x.data()[i * per..(i + 1) * per]
    }
}
