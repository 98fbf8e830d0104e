use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::TrainSchedule;
use crate::cloud::{AugmentParams, SceneSpec};
use crate::ensemble::DEFAULT_K_VERSIONS;
use crate::error::{Error, Result};
use crate::sampler::{Allocation, Budget, Strategy};
use crate::seed;
use crate::supervoxel::SegmentParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    DataEfficient,
    #[serde(rename = "1t1c")]
    OneThingOneClick,
}

/// Pseudo-label threshold policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TauMode {
    /// 0.99 early, 0.95 in the last two iterations.
    Schedule,
    Fixed { tau: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    /// Model initialisation stream; defaults to one derived from `master`.
    #[serde(default)]
    pub init: Option<u64>,
    /// Query sampling stream; defaults to one derived from `master`.
    #[serde(default)]
    pub sampling: Option<u64>,
}

impl Seeds {
    pub fn new(master: u64) -> Self {
        Seeds { master, init: None, sampling: None }
    }

    pub fn init(&self) -> u64 {
        self.init.unwrap_or_else(|| seed::derive(self.master, "init-stream", 0))
    }

    pub fn sampling(&self) -> u64 {
        self.sampling.unwrap_or_else(|| seed::derive(self.master, "sampling-stream", 0))
    }

    pub fn augment(&self) -> u64 {
        seed::derive(self.master, "augment-stream", 0)
    }

    pub fn train(&self) -> u64 {
        seed::derive(self.master, "train-stream", 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    /// Procedurally generated rooms.
    Synthetic { spec: SceneSpec, scenes: usize, seed: u64 },
    /// Cloud files, optionally with precomputed partitions (same order).
    Files {
        clouds: Vec<PathBuf>,
        #[serde(default)]
        partitions: Option<Vec<PathBuf>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub budget: Budget,
    /// Queries per scene per round in one-click mode before the final sweep.
    pub clicks_per_round: usize,
    pub k_versions: usize,
    pub tau: TauMode,
    pub schedule: TrainSchedule,
    /// Hidden layer widths of the reference network.
    pub hidden: Vec<usize>,
    /// Selection after the first iteration.
    pub strategy: Strategy,
    pub self_training: bool,
    /// Report the voting prediction as the headline metric.
    pub voting: bool,
    /// Train / pseudo-label repetitions per annotation round.
    pub inner_rounds: usize,
    pub seeds: Seeds,
    pub augment: AugmentParams,
    /// Augmented feature versions added to the original for training.
    pub train_augmented_versions: usize,
    /// Neighbourhood size for normals and shape descriptors.
    pub feature_k: usize,
    pub segment: SegmentParams,
    pub dataset: DatasetSource,
    /// Compute the metric after every iteration rather than only the last.
    pub evaluate_every_iteration: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::DataEfficient,
            budget: Budget { total_n: 20, iterations_k: 5, allocation: Allocation::PerScene, scenes_s: 0 },
            clicks_per_round: 6,
            k_versions: DEFAULT_K_VERSIONS,
            tau: TauMode::Schedule,
            schedule: TrainSchedule::default(),
            hidden: vec![64, 64],
            strategy: Strategy::UncertaintyWeighted,
            self_training: true,
            voting: true,
            inner_rounds: 1,
            seeds: Seeds::new(0),
            augment: AugmentParams::default(),
            train_augmented_versions: 2,
            feature_k: 16,
            segment: SegmentParams::default(),
            dataset: DatasetSource::Synthetic { spec: SceneSpec::indoor(2), scenes: 4, seed: 0 },
            evaluate_every_iteration: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.budget.iterations_k == 0 {
            return bad("iterations_k must be >= 1");
        }
        if self.k_versions == 0 {
            return bad("k_versions must be >= 1");
        }
        if self.inner_rounds == 0 {
            return bad("inner_rounds must be >= 1");
        }
        if self.feature_k < 3 {
            return bad("feature_k must be >= 3");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be > 0");
        }
        if let TauMode::Fixed { tau } = self.tau {
            if !(0.0..1.0).contains(&tau) {
                return bad("tau must be in [0, 1)");
            }
        }
        if self.mode == Mode::OneThingOneClick && self.clicks_per_round == 0 {
            return bad("clicks_per_round must be >= 1");
        }
        if self.mode == Mode::DataEfficient && self.strategy == Strategy::OneThingOneClick {
            return bad("the 1t1c strategy needs mode 1t1c");
        }
        self.schedule.validate()?;
        self.augment.validate()?;
        self.segment.validate()
    }

    pub fn tau(&self, iteration: usize) -> Result<f64> {
        match self.tau {
            TauMode::Schedule => crate::labels::tau_schedule(iteration, self.budget.iterations_k),
            TauMode::Fixed { tau } => Ok(tau),
        }
    }

    /// Read a JSON config; relative dataset paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig = serde_json::from_slice(&bytes)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DatasetSource::Files { clouds, partitions } = &mut cfg.dataset {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            clouds.iter_mut().for_each(fix);
            if let Some(parts) = partitions {
                parts.iter_mut().for_each(fix);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
