use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::normals::to_unit_f32;
use super::{Cloud, Vec3};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rotation {
    None,
    AboutUpAxisUniform,
}

/// Index-preserving augmentation recipe: rotation, then scale, then jitter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation: Rotation,
    pub scale_range: [f64; 2],
    /// Std-dev of Gaussian position noise, meters.
    pub jitter_sigma: f64,
    /// Clip for position noise, meters; active when `>= jitter_sigma`.
    pub jitter_clip: f64,
    /// Max per-channel color delta.
    pub color_jitter: f64,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            rotation: Rotation::AboutUpAxisUniform,
            scale_range: [0.9, 1.1],
            jitter_sigma: 0.005,
            jitter_clip: 0.02,
            color_jitter: 0.05,
            seed: 0,
        }
    }
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            rotation: Rotation::None,
            scale_range: [1.0, 1.0],
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
            color_jitter: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        AugmentParams { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "scale range [{lo}, {hi}] must satisfy 0 < lo <= hi"
            )));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::InvalidParameter("jitter_sigma must be >= 0".into()));
        }
        if !(self.color_jitter >= 0.0 && self.jitter_clip >= 0.0) {
            return Err(Error::InvalidParameter(
                "color_jitter and jitter_clip must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Apply a seeded augmentation. Output point `i` is the transform of input
/// point `i`; labels are carried over unchanged.
pub fn augment(cloud: &Cloud, params: &AugmentParams) -> Result<Cloud> {
    params.validate()?;
    let mut rng = seed::rng(params.seed);

    let angle = match params.rotation {
        Rotation::None => None,
        Rotation::AboutUpAxisUniform => Some(rng.random_range(0.0..std::f64::consts::TAU)),
    };
    let [lo, hi] = params.scale_range;
    let scale = if lo == hi { lo } else { rng.random_range(lo..hi) };
    let geometric = angle.is_some() || scale != 1.0;

    let n = cloud.len() as f64;
    let mut centroid = [0.0f64; 3];
    for i in 0..cloud.len() {
        let p = cloud.position_f64(i);
        for a in 0..3 {
            centroid[a] += p[a] / n;
        }
    }
    let (sin, cos) = angle.map_or((0.0, 1.0), f64::sin_cos);
    let rotate = |v: [f64; 3]| [cos * v[0] - sin * v[1], sin * v[0] + cos * v[1], v[2]];

    let mut positions: Vec<Vec3> = cloud.positions().to_vec();
    if geometric {
        for (i, out) in positions.iter_mut().enumerate() {
            let p = cloud.position_f64(i);
            let d = rotate([p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]]);
            for a in 0..3 {
                out[a] = (centroid[a] + scale * d[a]) as f32;
            }
        }
    }

    if params.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, params.jitter_sigma)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let clip = (params.jitter_clip >= params.jitter_sigma).then_some(params.jitter_clip);
        for out in positions.iter_mut() {
            for v in out.iter_mut() {
                let mut d: f64 = normal.sample(&mut rng);
                if let Some(c) = clip {
                    d = d.clamp(-c, c);
                }
                *v = (*v as f64 + d) as f32;
            }
        }
    }

    let mut colors: Vec<Vec3> = cloud.colors().to_vec();
    if params.color_jitter > 0.0 {
        let delta = params.color_jitter;
        for c in colors.iter_mut() {
            for v in c.iter_mut() {
                let d: f64 = rng.random_range(-delta..=delta);
                *v = (*v as f64 + d).clamp(0.0, 1.0) as f32;
            }
        }
    }

    let normals = cloud.normals().map(|ns| {
        if angle.is_some() {
            ns.iter()
                .map(|n| to_unit_f32(rotate([n[0] as f64, n[1] as f64, n[2] as f64])))
                .collect()
        } else {
            ns.to_vec()
        }
    });

    Ok(cloud.with_transformed(positions, colors, normals))
}
