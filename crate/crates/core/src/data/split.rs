use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SeriesBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Splits by subject so no subject appears on both sides.
///
/// Subjects are stratified by the label of their first sample; within each
/// class `round(test_fraction * n)` subjects (clamped to `1..n-1`) go to test.
pub fn subject_split(
    d: &SeriesBatch,
    test_fraction: f64,
    seed: u64,
) -> Result<(SeriesBatch, SeriesBatch)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "test fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let mut strata: Vec<Vec<&str>> = vec![Vec::new(); d.num_classes];
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (s, &y) in d.subjects.iter().zip(&d.labels) {
        if !seen.contains_key(s.as_str()) {
            seen.insert(s, y);
            strata[y].push(s);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_subjects: HashMap<&str, ()> = HashMap::new();
    for (class, subjects) in strata.iter_mut().enumerate() {
        let n = subjects.len();
        if n == 0 {
            continue;
        }
        if n < 2 {
            return Err(Error::Split(format!(
                "class {class} has only one subject; a subject-consistent split needs two"
            )));
        }
        subjects.shuffle(&mut rng);
        let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
        for s in &subjects[..n_test] {
            test_subjects.insert(s, ());
        }
    }
    let (test_idx, train_idx): (Vec<usize>, Vec<usize>) =
        (0..d.len()).partition(|&i| test_subjects.contains_key(d.subjects[i].as_str()));
    Ok((d.select(&train_idx)?, d.select(&test_idx)?))
}

/// Keeps the first `t` time steps of every series.
pub fn prefix_truncate(d: &SeriesBatch, t: usize) -> Result<SeriesBatch> {
    let (b, c, l) = (d.len(), d.channels(), d.length());
    if t == 0 || t > l {
        return Err(Error::Argument(format!("prefix length {t} outside 1..={l}")));
    }
    let mut data = Vec::with_capacity(b * c * t);
    for row in d.x.data().chunks(l) {
        data.extend_from_slice(&row[..t]);
    }
    SeriesBatch::new(
        Tensor::new(vec![b, c, t], data)?,
        d.labels.clone(),
        d.subjects.clone(),
        d.num_classes,
    )
}

/// Right-pads every series with zeros up to `len` steps.
pub fn zero_pad(d: &SeriesBatch, len: usize) -> Result<SeriesBatch> {
    let (b, c, l) = (d.len(), d.channels(), d.length());
    if len < l {
        return Err(Error::Argument(format!("cannot pad length {l} down to {len}")));
    }
    let mut data = Vec::with_capacity(b * c * len);
    for row in d.x.data().chunks(l) {
        data.extend_from_slice(row);
        data.extend(std::iter::repeat_n(0.0, len - l));
    }
    SeriesBatch::new(
        Tensor::new(vec![b, c, len], data)?,
        d.labels.clone(),
        d.subjects.clone(),
        d.num_classes,
    )
}
