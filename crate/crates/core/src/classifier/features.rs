use nalgebra::Matrix3;

use super::Matrix;
use crate::cloud::{normals::neighborhood_covariance, Cloud, Neighborhoods};
use crate::error::{Error, Result};

pub const FEATURE_COUNT: usize = 13;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "x", "y", "z", "red", "green", "blue", "nx", "ny", "nz", "height", "linearity", "planarity", "scattering",
];

/// Featurize with a fresh `k_neighbors` graph.
pub fn featurize(cloud: &Cloud, k_neighbors: usize) -> Result<Matrix> {
    if cloud.normals().is_none() {
        return Err(Error::MissingNormals);
    }
    let nb = Neighborhoods::build(cloud.positions(), k_neighbors);
    featurize_with(cloud, &nb)
}

/// Featurize using a precomputed neighbourhood graph.
///
/// The graph is index based, so the one built for an original cloud can be
/// reused for its augmented versions.
pub fn featurize_with(cloud: &Cloud, neighborhoods: &Neighborhoods) -> Result<Matrix> {
    let normals = cloud.normals().ok_or(Error::MissingNormals)?;
    if neighborhoods.len() != cloud.len() {
        return Err(Error::DimensionMismatch { expected: cloud.len(), actual: neighborhoods.len() });
    }
    let positions = cloud.positions();
    let n = cloud.len();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut centroid = [0.0f64; 3];
    for p in positions {
        for a in 0..3 {
            let v = p[a] as f64;
            lo[a] = lo[a].min(v);
            hi[a] = hi[a].max(v);
            centroid[a] += v;
        }
    }
    for c in &mut centroid {
        *c /= n as f64;
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    let scale = if extent > 0.0 { 1.0 / extent } else { 1.0 };

    let mut data = Vec::with_capacity(n * FEATURE_COUNT);
    for i in 0..n {
        let p = positions[i];
        for a in 0..3 {
            data.push((p[a] as f64 - centroid[a]) * scale);
        }
        data.extend(cloud.colors()[i].iter().map(|&c| c as f64));
        data.extend(normals[i].iter().map(|&c| c as f64));
        data.push(p[2] as f64 - lo[2]);
        let cov = neighborhood_covariance(positions, neighborhoods.of(i));
        data.extend(shape_descriptors(&cov));
    }
    Matrix::new(n, FEATURE_COUNT, data)
}

/// Linearity, planarity and scattering from sorted covariance eigenvalues.
pub(crate) fn shape_descriptors(cov: &Matrix3<f64>) -> [f64; 3] {
    let mut ev = sym3_eigenvalues(cov);
    ev.sort_by(|a, b| b.total_cmp(a));
    let [l1, l2, l3] = ev.map(|v| v.max(0.0));
    if l1 <= 1e-18 {
        return [0.0, 0.0, 0.0];
    }
    [(l1 - l2) / l1, (l2 - l3) / l1, l3 / l1]
}

/// Closed-form eigenvalues of a symmetric 3x3 matrix.
fn sym3_eigenvalues(m: &Matrix3<f64>) -> [f64; 3] {
    let p1 = m[(0, 1)].powi(2) + m[(0, 2)].powi(2) + m[(1, 2)].powi(2);
    let q = m.trace() / 3.0;
    if p1 == 0.0 {
        return [m[(0, 0)], m[(1, 1)], m[(2, 2)]];
    }
    let p2 = (m[(0, 0)] - q).powi(2) + (m[(1, 1)] - q).powi(2) + (m[(2, 2)] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let b = (m - Matrix3::identity() * q) / p;
    let r = (b.determinant() / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    [e1, 3.0 * q - e1 - e3, e3]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::estimate_normals;
    use nalgebra::SymmetricEigen;

    #[test]
    fn closed_form_eigenvalues_match_nalgebra() {
        let mut state = 7u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for _ in 0..200 {
            let a = Matrix3::from_fn(|_, _| next());
            let m = a * a.transpose();
            let mut ours = sym3_eigenvalues(&m);
            let mut theirs: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
            ours.sort_by(f64::total_cmp);
            theirs.sort_by(f64::total_cmp);
            for (x, y) in ours.iter().zip(&theirs) {
                assert!((x - y).abs() < 1e-9, "{ours:?} vs {theirs:?}");
            }
        }
    }

    #[test]
    fn planar_patch_is_planar() {
        let mut pos = Vec::new();
        for i in 0..12 {
            for j in 0..12 {
                pos.push([i as f32 * 0.02, j as f32 * 0.02, 0.0]);
            }
        }
        let n = pos.len();
        let cloud = estimate_normals(&Cloud::new("p", pos, vec![[0.5; 3]; n]).unwrap(), 16).unwrap();
        let f = featurize(&cloud, 16).unwrap();
        assert_eq!(f.cols(), 13);
        // interior points have symmetric neighbourhoods
        for i in (0..n).filter(|i| (3..9).contains(&(i / 12)) && (3..9).contains(&(i % 12))) {
            let r = f.row(i);
            assert!(r[11] > r[10] && r[11] > r[12], "row {i}: {r:?}");
        }
    }

    #[test]
    fn duplicated_points_share_rows() {
        let pos = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [1.0, 1.0, 0.2]];
        let cloud = Cloud::new("d", pos, vec![[0.2; 3]; 5]).unwrap().with_normals(vec![[0.0, 0.0, 1.0]; 5]).unwrap();
        let f = featurize(&cloud, 5).unwrap();
        assert_eq!(f.row(0), f.row(3));
    }

    #[test]
    fn requires_normals() {
        let cloud = Cloud::new("n", vec![[0.0; 3]; 3], vec![[0.0; 3]; 3]).unwrap();
        assert!(matches!(featurize(&cloud, 3), Err(Error::MissingNormals)));
    }
}
