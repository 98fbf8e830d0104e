use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{FeatureMatrix, Model, PointLabel};
use crate::error::{Error, Result};
use crate::seed;

/// SGD schedule with polynomial learning-rate decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub steps: usize,
    pub base_lr: f64,
    pub power: f64,
    pub batch_points: usize,
    pub loss_weight_lambda: f64,
    pub momentum: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            steps: 3000,
            base_lr: 0.1,
            power: 0.9,
            batch_points: 64,
            loss_weight_lambda: 0.5,
            momentum: 0.9,
        }
    }
}

impl TrainSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        self.base_lr * (1.0 - step as f64 / self.steps as f64).max(0.0).powf(self.power)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::InvalidParameter("base_lr must be positive".into()));
        }
        if self.batch_points == 0 {
            return Err(Error::InvalidParameter("batch_points must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.loss_weight_lambda) {
            return Err(Error::InvalidParameter("loss_weight_lambda must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Training inputs for one scene. Every version must have one row per point.
pub struct SceneTrainData<'a> {
    pub versions: &'a [FeatureMatrix],
    pub true_labels: &'a [PointLabel],
    pub pseudo_labels: &'a [PointLabel],
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mini-batch loss estimate at every step.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    /// Mean batch loss over the last tenth of training (NaN when no steps ran).
    pub fn mean_loss(&self) -> f64 {
        if self.losses.is_empty() {
            return f64::NAN;
        }
        let tail = (self.losses.len() / 10).max(1);
        let xs = &self.losses[self.losses.len() - tail..];
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Train `model` on the pooled labels of all scenes.
///
/// Each mini-batch holds `ceil(B / 2)` points drawn uniformly from the true
/// labels of all scenes and `floor(B / 2)` from the pseudo labels (all `B`
/// from T when there are no pseudo labels or `B = 1`), each with a feature
/// version drawn uniformly. The batch loss is the dual-term loss over the
/// batch: the mean over its true points plus `lambda` times the mean over its
/// pseudo points.
pub fn train(model: &Model, scenes: &[SceneTrainData], schedule: &TrainSchedule, seed: u64) -> Result<TrainOutcome> {
    schedule.validate()?;
    let total_t: usize = scenes.iter().map(|s| s.true_labels.len()).sum();
    let total_p: usize = scenes.iter().map(|s| s.pseudo_labels.len()).sum();
    if total_t == 0 {
        return Err(Error::Labels("no true labels in the dataset".into()));
    }
    let c = *model.widths().last().unwrap();
    for (si, s) in scenes.iter().enumerate() {
        if s.versions.is_empty() && !(s.true_labels.is_empty() && s.pseudo_labels.is_empty()) {
            return Err(Error::InvalidParameter(format!("scene {si} has labels but no feature versions")));
        }
        let rows = s.versions.first().map_or(0, |v| v.rows());
        for v in s.versions {
            if v.rows() != rows {
                return Err(Error::DimensionMismatch { expected: rows, actual: v.rows() });
            }
        }
        for &(i, class) in s.true_labels.iter().chain(s.pseudo_labels) {
            if i as usize >= rows {
                return Err(Error::DimensionMismatch { expected: rows, actual: i as usize + 1 });
            }
            if class as usize >= c {
                return Err(Error::ClassOutOfRange { class_id: class as usize, classes: c });
            }
        }
    }
    let mut model = model.clone();
    if schedule.steps == 0 {
        return Ok(TrainOutcome { model, losses: Vec::new() });
    }

    // Flat index over T (all scenes) then P (all scenes).
    let mut t_offsets = Vec::with_capacity(scenes.len() + 1);
    let mut p_offsets = Vec::with_capacity(scenes.len() + 1);
    let (mut at, mut ap) = (0, 0);
    for s in scenes {
        t_offsets.push(at);
        p_offsets.push(ap);
        at += s.true_labels.len();
        ap += s.pseudo_labels.len();
    }
    t_offsets.push(at);
    p_offsets.push(ap);
    let locate = |offsets: &[usize], k: usize| offsets.partition_point(|&o| o <= k) - 1;

    let b = schedule.batch_points;
    let bt = if total_p > 0 && b > 1 { b.div_ceil(2) } else { b };
    let bp = b - bt;
    let wt = 1.0 / bt as f64;
    let wp = if bp > 0 { schedule.loss_weight_lambda / bp as f64 } else { 0.0 };

    let mut rng = seed::rng(seed);
    let mut grad = vec![0.0; model.num_params()];
    let mut velocity = vec![0.0; model.num_params()];
    let mut losses = Vec::with_capacity(schedule.steps);
    let mut batch: Vec<(usize, usize, PointLabel, bool)> = Vec::with_capacity(schedule.batch_points);
    let mut rows: Vec<(usize, u32, f64)> = Vec::with_capacity(schedule.batch_points);
    for step in 0..schedule.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        batch.clear();
        let mut loss = 0.0;
        for slot in 0..schedule.batch_points {
            let (si, label, is_true) = if slot < bt {
                let k = rng.random_range(0..total_t);
                let si = locate(&t_offsets, k);
                (si, scenes[si].true_labels[k - t_offsets[si]], true)
            } else {
                let k = rng.random_range(0..total_p);
                let si = locate(&p_offsets, k);
                (si, scenes[si].pseudo_labels[k - p_offsets[si]], false)
            };
            let v = rng.random_range(0..scenes[si].versions.len());
            batch.push((si, v, label, is_true));
        }
        batch.sort_unstable_by_key(|b| (b.0, b.1));
        for group in batch.chunk_by(|a, b| (a.0, a.1) == (b.0, b.1)) {
            rows.clear();
            rows.extend(group.iter().map(|&(_, _, (i, c), is_true)| (i as usize, c, if is_true { wt } else { wp })));
            let (si, v) = (group[0].0, group[0].1);
            loss += model.weighted_loss_grad(&scenes[si].versions[v], &rows, &mut grad)?;
        }
        let lr = schedule.lr(step);
        for ((p, v), g) in model.params_mut().iter_mut().zip(&mut velocity).zip(&grad) {
            *v = schedule.momentum * *v + g;
            *p -= lr * *v;
        }
        losses.push(loss);
    }
    if model.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidParameter("training diverged to non-finite parameters".into()));
    }
    Ok(TrainOutcome { model, losses })
}
