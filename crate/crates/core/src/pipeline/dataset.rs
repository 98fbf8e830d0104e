use std::collections::BTreeMap;

use super::config::{DatasetSource, ExperimentConfig};
use crate::classifier::{featurize_with, FeatureMatrix, FEATURE_COUNT};
use crate::cloud::{estimate_normals_with, generate_synthetic_scene, load_cloud, Cloud, CloudFormat, Neighborhoods};
use crate::ensemble::augmented_features;
use crate::error::{Error, Result};
use crate::labels::SceneLookup;
use crate::seed;
use crate::supervoxel::{load_partition, segment_with, Partition};

/// A scene with everything an experiment needs precomputed.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    /// The input cloud with normals.
    pub cloud: Cloud,
    pub partition: Partition,
    /// Original features followed by augmented training versions.
    pub train_versions: Vec<FeatureMatrix>,
    /// Features of the K augmented versions used for ensembles.
    pub ensemble_versions: Vec<FeatureMatrix>,
    pub ensemble_seeds: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct PreparedDataset {
    scenes: Vec<PreparedScene>,
    index: BTreeMap<String, usize>,
    num_classes: usize,
    class_names: Vec<String>,
}

/// Load or generate the clouds named by a dataset source.
pub fn load_dataset_clouds(source: &DatasetSource) -> Result<(Vec<Cloud>, Option<Vec<Partition>>)> {
    match source {
        DatasetSource::Synthetic { spec, scenes, seed: s } => {
            let clouds = (0..*scenes)
                .map(|j| generate_synthetic_scene(spec, &format!("scene{j:03}"), seed::derive(*s, "scene", j as u64)))
                .collect::<Result<Vec<_>>>()?;
            Ok((clouds, None))
        }
        DatasetSource::Files { clouds, partitions } => {
            let loaded = clouds
                .iter()
                .map(|p| load_cloud(p, CloudFormat::from_path(p)))
                .collect::<Result<Vec<_>>>()?;
            let parts = match partitions {
                None => None,
                Some(paths) => {
                    if paths.len() != loaded.len() {
                        return Err(Error::InvalidParameter(format!(
                            "{} partitions for {} clouds",
                            paths.len(),
                            loaded.len()
                        )));
                    }
                    Some(
                        paths
                            .iter()
                            .zip(&loaded)
                            .map(|(p, c)| load_partition(p, Some(c.len())))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
            };
            Ok((loaded, parts))
        }
    }
}

impl PreparedDataset {
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        let (clouds, partitions) = load_dataset_clouds(&config.dataset)?;
        Self::prepare(clouds, partitions, config)
    }

    /// Estimate normals, segment (unless partitions are given) and featurize
    /// every scene.
    pub fn prepare(clouds: Vec<Cloud>, partitions: Option<Vec<Partition>>, config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        if clouds.is_empty() {
            return Err(Error::InvalidParameter("dataset has no scenes".into()));
        }
        let num_classes = infer_num_classes(&clouds)?;
        let class_names = clouds
            .iter()
            .find_map(|c| c.class_names().map(<[String]>::to_vec))
            .unwrap_or_else(|| (0..num_classes).map(|c| format!("class{c}")).collect());
        let mut index = BTreeMap::new();
        let mut scenes = Vec::with_capacity(clouds.len());
        let mut partitions = partitions.map(Vec::into_iter);
        let aug_master = config.seeds.augment();
        for (j, cloud) in clouds.into_iter().enumerate() {
            if index.insert(cloud.scene_id().to_string(), j).is_some() {
                return Err(Error::InvalidParameter(format!("duplicate scene id `{}`", cloud.scene_id())));
            }
            if cloud.len() < config.feature_k {
                return Err(Error::InvalidParameter(format!(
                    "scene `{}` has fewer points than feature_k",
                    cloud.scene_id()
                )));
            }
            let nb = Neighborhoods::build(cloud.positions(), config.feature_k);
            let cloud = match cloud.normals() {
                Some(_) => cloud,
                None => estimate_normals_with(&cloud, &nb)?,
            };
            let partition = match partitions.as_mut().and_then(Iterator::next) {
                Some(p) => p,
                None => {
                    let normals = cloud.normals().expect("normals present");
                    if config.segment.k_neighbors == config.feature_k {
                        segment_with(&cloud, &config.segment, &nb, normals)?
                    } else {
                        let snb = Neighborhoods::build(cloud.positions(), config.segment.k_neighbors);
                        segment_with(&cloud, &config.segment, &snb, normals)?
                    }
                }
            };
            if partition.len() != cloud.len() {
                return Err(Error::DimensionMismatch { expected: cloud.len(), actual: partition.len() });
            }
            let mut train_versions = vec![featurize_with(&cloud, &nb)?];
            let (extra, _) = augmented_features(
                &cloud,
                &nb,
                &config.augment,
                config.train_augmented_versions,
                seed::derive(aug_master, "train-versions", j as u64),
            )?;
            train_versions.extend(extra);
            let (ensemble_versions, ensemble_seeds) = augmented_features(
                &cloud,
                &nb,
                &config.augment,
                config.k_versions,
                seed::derive(aug_master, "ensemble-versions", j as u64),
            )?;
            scenes.push(PreparedScene { cloud, partition, train_versions, ensemble_versions, ensemble_seeds });
        }
        Ok(PreparedDataset { scenes, index, num_classes, class_names })
    }

    pub fn scenes(&self) -> &[PreparedScene] {
        &self.scenes
    }

    pub fn scene(&self, scene_id: &str) -> Option<&PreparedScene> {
        self.index.get(scene_id).map(|&j| &self.scenes[j])
    }

    pub fn scene_index(&self, scene_id: &str) -> Option<usize> {
        self.index.get(scene_id).copied()
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_features(&self) -> usize {
        FEATURE_COUNT
    }

    pub fn has_ground_truth(&self) -> bool {
        self.scenes.iter().all(|s| s.cloud.gt_semantic().is_some())
    }

    pub fn total_points(&self) -> usize {
        self.scenes.iter().map(|s| s.cloud.len()).sum()
    }
}

impl SceneLookup for PreparedDataset {
    fn partition(&self, scene_id: &str) -> Option<&Partition> {
        self.scene(scene_id).map(|s| &s.partition)
    }

    fn instances(&self, scene_id: &str) -> Option<&[u32]> {
        self.scene(scene_id).and_then(|s| s.cloud.gt_instance())
    }
}

fn infer_num_classes(clouds: &[Cloud]) -> Result<usize> {
    let mut named = None;
    let mut max_label = None;
    for c in clouds {
        if let Some(names) = c.class_names() {
            match named {
                None => named = Some(names.len()),
                Some(n) if n != names.len() => {
                    return Err(Error::InvalidParameter(format!(
                        "scene `{}` declares {} classes, others {n}",
                        c.scene_id(),
                        names.len()
                    )))
                }
                _ => {}
            }
        }
        if let Some(gt) = c.gt_semantic() {
            let m = gt.iter().copied().max().unwrap_or(0) as usize;
            max_label = Some(max_label.map_or(m, |x: usize| x.max(m)));
        }
    }
    match (named, max_label) {
        (Some(n), _) => Ok(n),
        (None, Some(m)) => Ok(m + 1),
        (None, None) => Err(Error::InvalidParameter("cannot determine the class count: no names and no labels".into())),
    }
}
