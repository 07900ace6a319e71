//! Hard top-k selection.

use crate::error::{Error, Result};

/// Indices of the `k` largest scores, ascending.
///
/// Ties go to the lower index. Selection is not differentiable; callers
/// gather values with the returned indices.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Argument(format!(
            "top-k with k = {k} over {} scores",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// Complement of a sorted index set within `0..n`.
pub fn complement(keep: &[usize], n: usize) -> Vec<usize> {
    let mut mask = vec![true; n];
    keep.iter().for_each(|&i| mask[i] = false);
    (0..n).filter(|&i| mask[i]).collect()
}
