use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use super::{Cloud, Neighborhoods, Vec3};
use crate::error::{Error, Result};

/// Covariance of a neighbourhood about its own mean.
pub(crate) fn neighborhood_covariance(positions: &[Vec3], members: &[u32]) -> Matrix3<f64> {
    let n = members.len() as f64;
    let mut mean = Vector3::zeros();
    for &j in members {
        let p = positions[j as usize];
        mean += Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64);
    }
    mean /= n;
    let mut cov = Matrix3::zeros();
    for &j in members {
        let p = positions[j as usize];
        let d = Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64) - mean;
        cov += d * d.transpose();
    }
    cov / n
}

/// Unit normal from a covariance: eigenvector of the smallest eigenvalue,
/// oriented into the +z half-space.
pub(crate) fn normal_from_covariance(cov: &Matrix3<f64>) -> [f64; 3] {
    if cov.iter().all(|&v| v.abs() < 1e-300) {
        return [0.0, 0.0, 1.0];
    }
    let eig = SymmetricEigen::new(*cov);
    let (mut best, mut best_val) = (0, f64::INFINITY);
    for (i, &v) in eig.eigenvalues.iter().enumerate() {
        if v < best_val {
            best = i;
            best_val = v;
        }
    }
    let v = eig.eigenvectors.column(best).normalize();
    let mut n = [v[0], v[1], v[2]];
    if !n.iter().all(|c| c.is_finite()) {
        return [0.0, 0.0, 1.0];
    }
    let flip = if n[2].abs() > 1e-12 {
        n[2] < 0.0
    } else if n[0].abs() > 1e-12 {
        n[0] < 0.0
    } else {
        n[1] < 0.0
    };
    if flip {
        n = [-n[0], -n[1], -n[2]];
    }
    n
}

pub(crate) fn to_unit_f32(n: [f64; 3]) -> Vec3 {
    let mut out = [n[0] as f32, n[1] as f32, n[2] as f32];
    // Re-normalise after rounding so the stored vector meets the unit-norm tolerance.
    let norm = out.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    for v in &mut out {
        *v = (*v as f64 / norm) as f32;
    }
    out
}

/// Estimate per-point normals by PCA over the `k_neighbors` nearest points.
pub fn estimate_normals(cloud: &Cloud, k_neighbors: usize) -> Result<Cloud> {
    if k_neighbors < 3 {
        return Err(Error::InvalidParameter(format!(
            "k_neighbors must be >= 3, got {k_neighbors}"
        )));
    }
    if cloud.len() < k_neighbors {
        return Err(Error::InvalidParameter(format!(
            "cloud has {} points, fewer than k_neighbors = {k_neighbors}",
            cloud.len()
        )));
    }
    let nb = Neighborhoods::build(cloud.positions(), k_neighbors);
    estimate_normals_with(cloud, &nb)
}

/// Same as [`estimate_normals`] with precomputed neighbourhoods.
pub fn estimate_normals_with(cloud: &Cloud, neighborhoods: &Neighborhoods) -> Result<Cloud> {
    if neighborhoods.len() != cloud.len() {
        return Err(Error::DimensionMismatch {
            expected: cloud.len(),
            actual: neighborhoods.len(),
        });
    }
    let positions = cloud.positions();
    let normals = (0..cloud.len())
        .map(|i| {
            let cov = neighborhood_covariance(positions, neighborhoods.of(i));
            to_unit_f32(normal_from_covariance(&cov))
        })
        .collect();
    cloud.clone().with_normals(normals)
}
