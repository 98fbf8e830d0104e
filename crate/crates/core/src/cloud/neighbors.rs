use std::num::NonZero;

use kiddo::{ImmutableKdTree, SquaredEuclidean};

use super::Vec3;

/// Fixed-size k-nearest-neighbour lists for every point of a cloud.
///
/// Each list contains the point itself and is ordered by ascending distance,
/// ties by ascending index. The lists are the shared neighbourhood structure
/// for normal estimation, covariance features and region growing.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhoods {
    k: usize,
    indices: Vec<u32>,
}

impl Neighborhoods {
    /// `k` is clamped to the number of points.
    pub fn build(positions: &[Vec3], k: usize) -> Self {
        let n = positions.len();
        let k = k.clamp(1, n.max(1));
        let coords: Vec<[f64; 3]> = positions
            .iter()
            .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
            .collect();
        let tree: ImmutableKdTree<f64, 3> = ImmutableKdTree::new_from_slice(&coords);
        let qty = NonZero::new(k).expect("k >= 1");
        let mut indices = Vec::with_capacity(n * k);
        let mut row: Vec<(f64, u32)> = Vec::with_capacity(k);
        for q in &coords {
            row.clear();
            row.extend(
                tree.nearest_n::<SquaredEuclidean>(q, qty)
                    .into_iter()
                    .map(|nb| (nb.distance, nb.item as u32)),
            );
            row.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            indices.extend(row.iter().map(|&(_, i)| i));
        }
        Neighborhoods { k, indices }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn of(&self, i: usize) -> &[u32] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }
}
