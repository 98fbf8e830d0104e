//! Point-cloud data model and the operations that produce or transform clouds.

mod augment;
mod io;
mod neighbors;
pub(crate) mod normals;
mod synth;

pub use augment::{augment, AugmentParams, Rotation};
pub use io::{load_cloud, read_cloud, save_cloud, write_cloud, CloudFormat};
pub use neighbors::Neighborhoods;
pub use normals::{estimate_normals, estimate_normals_with};
pub use synth::{generate_synthetic_scene, ClassSpec, SceneSpec, Shape};

use crate::error::{Error, Result};

pub type Vec3 = [f32; 3];

/// An immutable point set with per-point attributes.
///
/// All per-point arrays have the same length `N >= 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Cloud {
    scene_id: String,
    positions: Vec<Vec3>,
    colors: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
    gt_semantic: Option<Vec<u32>>,
    gt_instance: Option<Vec<u32>>,
    class_names: Option<Vec<String>>,
}

const NORMAL_TOLERANCE: f64 = 1e-6;

impl Cloud {
    pub fn new(scene_id: impl Into<String>, positions: Vec<Vec3>, colors: Vec<Vec3>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidCloud("a cloud needs at least one point".into()));
        }
        if colors.len() != positions.len() {
            return Err(Error::InvalidCloud(format!(
                "{} colors for {} points",
                colors.len(),
                positions.len()
            )));
        }
        if let Some(i) = positions.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidCloud(format!("non-finite position at point {i}")));
        }
        if let Some(i) = colors
            .iter()
            .position(|c| c.iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(Error::InvalidCloud(format!("color outside [0,1] at point {i}")));
        }
        Ok(Cloud {
            scene_id: scene_id.into(),
            positions,
            colors,
            normals: None,
            gt_semantic: None,
            gt_instance: None,
            class_names: None,
        })
    }

    pub fn with_normals(mut self, normals: Vec<Vec3>) -> Result<Self> {
        self.check_len("normals", normals.len())?;
        for (i, n) in normals.iter().enumerate() {
            let norm = n.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > NORMAL_TOLERANCE {
                return Err(Error::InvalidCloud(format!(
                    "normal at point {i} has norm {norm}"
                )));
            }
        }
        self.normals = Some(normals);
        Ok(self)
    }

    /// Attach ground-truth classes. When `class_names` is given every label
    /// must index into it.
    pub fn with_semantic(mut self, labels: Vec<u32>, class_names: Option<Vec<String>>) -> Result<Self> {
        self.check_len("semantic labels", labels.len())?;
        if let Some(names) = &class_names {
            if let Some(i) = labels.iter().position(|&l| l as usize >= names.len()) {
                return Err(Error::ClassOutOfRange {
                    class_id: labels[i] as usize,
                    classes: names.len(),
                });
            }
        }
        self.gt_semantic = Some(labels);
        self.class_names = class_names;
        Ok(self)
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if let Some(labels) = &self.gt_semantic {
            if let Some(&l) = labels.iter().find(|&&l| l as usize >= names.len()) {
                return Err(Error::ClassOutOfRange {
                    class_id: l as usize,
                    classes: names.len(),
                });
            }
        }
        self.class_names = Some(names);
        Ok(self)
    }

    pub fn with_instances(mut self, ids: Vec<u32>) -> Result<Self> {
        self.check_len("instance ids", ids.len())?;
        self.gt_instance = Some(ids);
        Ok(self)
    }

    pub fn with_scene_id(mut self, scene_id: impl Into<String>) -> Self {
        self.scene_id = scene_id.into();
        self
    }

    /// Drop ground truth, e.g. before handing a cloud to a human annotator.
    pub fn without_ground_truth(mut self) -> Self {
        self.gt_semantic = None;
        self.gt_instance = None;
        self
    }

    fn check_len(&self, what: &str, len: usize) -> Result<()> {
        if len != self.positions.len() {
            return Err(Error::InvalidCloud(format!(
                "{len} {what} for {} points",
                self.positions.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn colors(&self) -> &[Vec3] {
        &self.colors
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn gt_semantic(&self) -> Option<&[u32]> {
        self.gt_semantic.as_deref()
    }

    pub fn gt_instance(&self) -> Option<&[u32]> {
        self.gt_instance.as_deref()
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn position_f64(&self, i: usize) -> [f64; 3] {
        let p = self.positions[i];
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }

    /// Replace geometry and colors while keeping labels, used by augmentation.
    pub(crate) fn with_transformed(
        &self,
        positions: Vec<Vec3>,
        colors: Vec<Vec3>,
        normals: Option<Vec<Vec3>>,
    ) -> Cloud {
        debug_assert_eq!(positions.len(), self.len());
        Cloud {
            scene_id: self.scene_id.clone(),
            positions,
            colors,
            normals,
            gt_semantic: self.gt_semantic.clone(),
            gt_instance: self.gt_instance.clone(),
            class_names: self.class_names.clone(),
        }
    }
}
