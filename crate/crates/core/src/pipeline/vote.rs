use crate::classifier::{argmax, Matrix, PointClassifier};
use crate::cloud::{AugmentParams, Cloud};
use crate::ensemble::predict_ensemble;
use crate::error::{Error, Result};
use crate::supervoxel::Partition;

/// Average probabilities within each super-voxel and give every member the
/// argmax (ties to the lowest class id).
pub fn vote(mean_probs: &Matrix, partition: &Partition) -> Result<Vec<u32>> {
    if mean_probs.rows() != partition.len() {
        return Err(Error::DimensionMismatch { expected: partition.len(), actual: mean_probs.rows() });
    }
    let c = mean_probs.cols();
    let mut out = vec![0u32; partition.len()];
    let mut acc = vec![0.0; c];
    for members in partition.all_members() {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for &m in members {
            for (a, &p) in acc.iter_mut().zip(mean_probs.row(m as usize)) {
                *a += p;
            }
        }
        let n = members.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        let class = argmax(&acc) as u32;
        for &m in members {
            out[m as usize] = class;
        }
    }
    Ok(out)
}

/// Pointwise argmax of each row.
pub fn pointwise(mean_probs: &Matrix) -> Vec<u32> {
    (0..mean_probs.rows()).map(|i| argmax(mean_probs.row(i)) as u32).collect()
}

/// Ensemble prediction followed by super-voxel voting.
pub fn infer_vote<C: PointClassifier + ?Sized>(
    model: &C,
    cloud: &Cloud,
    partition: &Partition,
    params: &AugmentParams,
    k: usize,
    seed: u64,
    k_neighbors: usize,
) -> Result<Vec<u32>> {
    if partition.len() != cloud.len() {
        return Err(Error::DimensionMismatch { expected: cloud.len(), actual: partition.len() });
    }
    let summary = predict_ensemble(model, cloud, params, k, seed, k_neighbors)?;
    vote(&summary.mean_probs, partition)
}
