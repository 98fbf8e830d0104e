//! Segmentation metrics and selection statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cloud::Cloud;
use crate::error::{Error, Result};
use crate::labels::LabelState;

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        let mut m = ConfusionMatrix::new(c);
        for (g, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::DimensionMismatch { expected: c, actual: row.len() });
            }
            m.counts[g * c..(g + 1) * c].copy_from_slice(row);
        }
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tally one more labeling into this matrix.
    pub fn accumulate(&mut self, pred: &[u32], gt: &[u32]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::DimensionMismatch { expected: gt.len(), actual: pred.len() });
        }
        let c = self.classes;
        for (&p, &g) in pred.iter().zip(gt) {
            for v in [p, g] {
                if v as usize >= c {
                    return Err(Error::ClassOutOfRange { class_id: v as usize, classes: c });
                }
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::DimensionMismatch { expected: self.classes, actual: other.classes });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion(pred: &[u32], gt: &[u32], classes: usize) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::new(classes);
    m.accumulate(pred, gt)?;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Unweighted mean over the present classes, in [0, 1].
    pub mean: f64,
}

impl IouReport {
    pub fn percent(&self) -> f64 {
        self.mean * 100.0
    }

    /// `class,iou` lines; absent classes are left empty.
    pub fn to_csv(&self, class_names: Option<&[String]>) -> String {
        let mut out = String::from("class,iou\n");
        for (c, iou) in self.per_class.iter().enumerate() {
            let name = class_names.and_then(|n| n.get(c)).cloned().unwrap_or_else(|| c.to_string());
            match iou {
                Some(v) => writeln!(out, "{name},{v}").unwrap(),
                None => writeln!(out, "{name},").unwrap(),
            }
        }
        writeln!(out, "mean,{}", self.mean).unwrap();
        out
    }
}

pub fn miou(cm: &ConfusionMatrix) -> Result<IouReport> {
    let c = cm.classes;
    let mut per_class = Vec::with_capacity(c);
    let (mut sum, mut present) = (0.0, 0usize);
    for k in 0..c {
        let tp = cm.get(k, k);
        let fn_: u64 = (0..c).filter(|&p| p != k).map(|p| cm.get(k, p)).sum();
        let fp: u64 = (0..c).filter(|&g| g != k).map(|g| cm.get(g, k)).sum();
        let denom = tp + fp + fn_;
        if denom == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / denom as f64;
            per_class.push(Some(iou));
            sum += iou;
            present += 1;
        }
    }
    if present == 0 {
        return Err(Error::InvalidParameter("no class is present in prediction or ground truth".into()));
    }
    Ok(IouReport { per_class, mean: sum / present as f64 })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceBuckets {
    pub zero: u64,
    pub one: u64,
    pub more: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    /// Annotations per ground-truth class of the annotated point.
    pub class_histogram: Vec<u64>,
    pub class_names: Option<Vec<String>>,
    /// Instances by number of annotations they received.
    pub instance_buckets: InstanceBuckets,
}

impl SelectionStats {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }
}

/// Histograms of where annotations landed.
pub fn selection_stats(state: &LabelState, clouds: &[Cloud]) -> Result<SelectionStats> {
    let by_id: BTreeMap<&str, &Cloud> = clouds.iter().map(|c| (c.scene_id(), c)).collect();
    let classes = clouds
        .iter()
        .map(|c| match (c.class_names(), c.gt_semantic()) {
            (Some(n), _) => Ok(n.len()),
            (None, Some(g)) => Ok(g.iter().max().map_or(0, |&m| m as usize + 1)),
            (None, None) => Err(Error::MissingGroundTruth(c.scene_id().to_string())),
        })
        .try_fold(0, |acc, c| c.map(|c| acc.max(c)))?;
    let mut class_histogram = vec![0u64; classes];
    let mut per_instance: BTreeMap<(&str, u32), u64> = BTreeMap::new();
    for c in clouds {
        let inst = c.gt_instance().ok_or_else(|| Error::MissingGroundTruth(c.scene_id().to_string()))?;
        for &i in inst {
            per_instance.entry((c.scene_id(), i)).or_insert(0);
        }
    }
    for a in state.annotations() {
        let cloud = by_id
            .get(a.scene_id.as_str())
            .ok_or_else(|| Error::MissingGroundTruth(format!("no cloud for scene `{}`", a.scene_id)))?;
        let p = a.point_index as usize;
        let gt = cloud.gt_semantic().ok_or_else(|| Error::MissingGroundTruth(a.scene_id.clone()))?;
        class_histogram[gt[p] as usize] += 1;
        let inst = cloud.gt_instance().expect("checked above")[p];
        *per_instance.get_mut(&(cloud.scene_id(), inst)).expect("registered") += 1;
    }
    let mut buckets = InstanceBuckets::default();
    for &n in per_instance.values() {
        match n {
            0 => buckets.zero += 1,
            1 => buckets.one += 1,
            _ => buckets.more += 1,
        }
    }
    let class_names = clouds.iter().find_map(|c| c.class_names().map(<[String]>::to_vec));
    Ok(SelectionStats { class_histogram, class_names, instance_buckets: buckets })
}
