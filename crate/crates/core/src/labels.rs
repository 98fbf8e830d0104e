//! Raw annotations, propagated true labels and pseudo-labels.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::PointLabel;
use crate::ensemble::EnsembleSummary;
use crate::error::{Error, Result};
use crate::supervoxel::Partition;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnnotationSource {
    Human,
    Oracle,
    RandomInit,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub scene_id: String,
    pub point_index: u32,
    pub class_id: u32,
    pub iteration: u32,
    pub source: AnnotationSource,
}

/// Sparse point → class map of one scene.
pub type SparseLabels = BTreeMap<u32, u32>;

pub fn to_point_labels(labels: &SparseLabels) -> Vec<PointLabel> {
    labels.iter().map(|(&p, &c)| (p, c)).collect()
}

/// Per-scene lookups needed to validate and propagate annotations.
pub trait SceneLookup {
    fn partition(&self, scene_id: &str) -> Option<&Partition>;
    fn instances(&self, _scene_id: &str) -> Option<&[u32]> {
        None
    }
}

impl SceneLookup for BTreeMap<String, Partition> {
    fn partition(&self, scene_id: &str) -> Option<&Partition> {
        self.get(scene_id)
    }
}

/// Label everything sharing a super-voxel with an annotation.
pub fn propagate<'a>(
    annotations: impl IntoIterator<Item = &'a Annotation>,
    partition: &Partition,
) -> Result<SparseLabels> {
    let mut out = SparseLabels::new();
    let mut seen = BTreeSet::new();
    for a in annotations {
        let p = a.point_index as usize;
        if p >= partition.len() {
            return Err(Error::DimensionMismatch { expected: partition.len(), actual: p + 1 });
        }
        let sv = partition.supervoxel_of(p);
        if !seen.insert(sv) {
            return Err(Error::DuplicateSupervoxel { scene: a.scene_id.clone(), supervoxel: sv });
        }
        for &m in partition.members(sv) {
            out.insert(m, a.class_id);
        }
    }
    Ok(out)
}

/// Points outside `exclude` whose confidence is strictly above `tau`.
pub fn generate_pseudo(summary: &EnsembleSummary, tau: f64, exclude: &SparseLabels) -> SparseLabels {
    summary
        .confidence
        .iter()
        .enumerate()
        .filter(|&(i, &c)| c > tau && !exclude.contains_key(&(i as u32)))
        .map(|(i, _)| (i as u32, summary.top_class[i]))
        .collect()
}

/// 0.95 for the last two iterations, 0.99 before.
pub fn tau_schedule(iteration: usize, total_k: usize) -> Result<f64> {
    if iteration == 0 || iteration > total_k {
        return Err(Error::InvalidParameter(format!("iteration {iteration} outside 1..={total_k}")));
    }
    Ok(if iteration + 2 > total_k { 0.95 } else { 0.99 })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelState {
    annotations: Vec<Annotation>,
    true_labels: BTreeMap<String, SparseLabels>,
    pseudo_labels: BTreeMap<String, SparseLabels>,
    annotated_supervoxels: BTreeMap<String, BTreeSet<u32>>,
    annotated_instances: BTreeMap<String, BTreeSet<u32>>,
}

static EMPTY_LABELS: SparseLabels = SparseLabels::new();
static EMPTY_SET: BTreeSet<u32> = BTreeSet::new();

impl LabelState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn true_labels(&self, scene_id: &str) -> &SparseLabels {
        self.true_labels.get(scene_id).unwrap_or(&EMPTY_LABELS)
    }

    pub fn pseudo_labels(&self, scene_id: &str) -> &SparseLabels {
        self.pseudo_labels.get(scene_id).unwrap_or(&EMPTY_LABELS)
    }

    pub fn annotated_supervoxels(&self, scene_id: &str) -> &BTreeSet<u32> {
        self.annotated_supervoxels.get(scene_id).unwrap_or(&EMPTY_SET)
    }

    pub fn annotated_instances(&self, scene_id: &str) -> &BTreeSet<u32> {
        self.annotated_instances.get(scene_id).unwrap_or(&EMPTY_SET)
    }

    pub fn num_true(&self) -> usize {
        self.true_labels.values().map(BTreeMap::len).sum()
    }

    pub fn num_pseudo(&self) -> usize {
        self.pseudo_labels.values().map(BTreeMap::len).sum()
    }

    /// Replace the pseudo-labels of a scene. They must avoid true labels.
    pub fn set_pseudo(&mut self, scene_id: &str, labels: SparseLabels) -> Result<()> {
        let t = self.true_labels(scene_id);
        if let Some(p) = labels.keys().find(|p| t.contains_key(p)) {
            return Err(Error::Labels(format!("pseudo-label on true-labeled point {p} of `{scene_id}`")));
        }
        if labels.is_empty() {
            self.pseudo_labels.remove(scene_id);
        } else {
            self.pseudo_labels.insert(scene_id.to_string(), labels);
        }
        Ok(())
    }

    pub fn clear_pseudo(&mut self) {
        self.pseudo_labels.clear();
    }
}

/// Add a batch of annotations, re-propagating true labels of the touched
/// scenes. Pseudo-labels are left alone.
pub fn merge_annotations(
    state: &LabelState,
    new: &[Annotation],
    scenes: &dyn SceneLookup,
    num_classes: usize,
) -> Result<LabelState> {
    let mut next = state.clone();
    let mut touched = BTreeSet::new();
    for a in new {
        let part = scenes
            .partition(&a.scene_id)
            .ok_or_else(|| Error::Labels(format!("unknown scene `{}`", a.scene_id)))?;
        if a.point_index as usize >= part.len() {
            return Err(Error::DimensionMismatch { expected: part.len(), actual: a.point_index as usize + 1 });
        }
        if a.class_id as usize >= num_classes {
            return Err(Error::ClassOutOfRange { class_id: a.class_id as usize, classes: num_classes });
        }
        let sv = part.supervoxel_of(a.point_index as usize);
        let svs = next.annotated_supervoxels.entry(a.scene_id.clone()).or_default();
        if !svs.insert(sv as u32) {
            return Err(Error::DuplicateSupervoxel { scene: a.scene_id.clone(), supervoxel: sv });
        }
        if let Some(inst) = scenes.instances(&a.scene_id) {
            next.annotated_instances
                .entry(a.scene_id.clone())
                .or_default()
                .insert(inst[a.point_index as usize]);
        }
        next.annotations.push(a.clone());
        touched.insert(a.scene_id.clone());
    }
    for scene in touched {
        let part = scenes.partition(&scene).expect("checked above");
        let t = propagate(next.annotations.iter().filter(|a| a.scene_id == scene), part)?;
        if let Some(p) = next.pseudo_labels.get_mut(&scene) {
            // keep T and P disjoint
            p.retain(|k, _| !t.contains_key(k));
        }
        next.true_labels.insert(scene, t);
    }
    Ok(next)
}

/// Append-only JSON-lines annotation log, synced before returning.
pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Journal { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, annotations: &[Annotation]) -> Result<()> {
        let mut buf = Vec::new();
        for a in annotations {
            serde_json::to_writer(&mut buf, a)?;
            buf.push(b'\n');
        }
        self.file.write_all(&buf).map_err(|e| Error::io(&self.path, e))?;
        self.file.sync_data().map_err(|e| Error::io(&self.path, e))
    }
}

/// Read a journal, keeping the first entry per `(iteration, scene, point)`.
///
/// A torn final line (no trailing newline, unparsable) is ignored.
pub fn read_journal(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let path = path.as_ref();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut reader = BufReader::new(file);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut line = String::new();
    let mut lineno = 0;
    loop {
        line.clear();
        let read = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if read == 0 {
            break;
        }
        lineno += 1;
        let complete = line.ends_with('\n');
        if line.trim().is_empty() {
            continue;
        }
        let a: Annotation = match serde_json::from_str(line.trim_end()) {
            Ok(a) => a,
            Err(_) if !complete => break,
            Err(e) => return Err(Error::parse(format!("{}:{lineno}", path.display()), e.to_string())),
        };
        if seen.insert((a.iteration, a.scene_id.clone(), a.point_index)) {
            out.push(a);
        }
    }
    Ok(out)
}

/// Rebuild annotations, true labels and annotated sets from a journal.
pub fn replay(path: impl AsRef<Path>, scenes: &dyn SceneLookup, num_classes: usize) -> Result<LabelState> {
    let annotations = read_journal(path)?;
    merge_annotations(&LabelState::new(), &annotations, scenes, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Matrix;
    use crate::ensemble::uncertainty_of;

    fn ann(scene: &str, point: u32, class: u32, iteration: u32) -> Annotation {
        Annotation { scene_id: scene.into(), point_index: point, class_id: class, iteration, source: AnnotationSource::Oracle }
    }

    fn scenes() -> BTreeMap<String, Partition> {
        // super-voxels of sizes 4, 5, 6 and 10
        let mut a = Vec::new();
        for (sv, size) in [4, 5, 6, 10].iter().enumerate() {
            a.extend(std::iter::repeat_n(sv as u32, *size));
        }
        BTreeMap::from([("s".to_string(), Partition::from_assignment(a, "t").unwrap())])
    }

    #[test]
    fn propagation_fills_supervoxels() {
        let s = scenes();
        let part = &s["s"];
        assert_eq!(propagate(&[ann("s", 20, 2, 1)], part).unwrap().len(), 10);
        assert!(propagate(&[], part).unwrap().is_empty());
        let t = propagate(&[ann("s", 0, 1, 1), ann("s", 5, 1, 1), ann("s", 12, 0, 1)], part).unwrap();
        assert_eq!(t.len(), 15);
        assert!(propagate(&[ann("s", 0, 1, 1), ann("s", 3, 1, 1)], part).is_err());
    }

    #[test]
    fn pseudo_threshold_is_strict() {
        let probs = Matrix::from_rows(&[vec![0.995, 0.005], vec![0.98, 0.02], vec![0.001, 0.999]]).unwrap();
        let s = uncertainty_of(&[probs]).unwrap();
        let p = generate_pseudo(&s, 0.99, &SparseLabels::new());
        assert_eq!(p, SparseLabels::from([(0, 0), (2, 1)]));
        assert!(generate_pseudo(&s, 0.999, &SparseLabels::new()).is_empty());
        assert!(!generate_pseudo(&s, 0.99, &SparseLabels::from([(2, 1)])).contains_key(&2));
    }

    #[test]
    fn tau_examples() {
        assert_eq!(tau_schedule(1, 6).unwrap(), 0.99);
        assert_eq!(tau_schedule(4, 6).unwrap(), 0.99);
        assert_eq!(tau_schedule(5, 6).unwrap(), 0.95);
        assert_eq!(tau_schedule(6, 6).unwrap(), 0.95);
        assert_eq!(tau_schedule(3, 5).unwrap(), 0.99);
        assert!(tau_schedule(0, 5).is_err());
        assert!(tau_schedule(6, 5).is_err());
    }

    #[test]
    fn merge_rules() {
        let s = scenes();
        let st = merge_annotations(&LabelState::new(), &[ann("s", 0, 1, 1)], &s, 3).unwrap();
        assert_eq!(st.num_true(), 4);
        assert!(matches!(
            merge_annotations(&st, &[ann("s", 2, 1, 2)], &s, 3),
            Err(Error::DuplicateSupervoxel { supervoxel: 0, .. })
        ));
        assert!(matches!(merge_annotations(&st, &[ann("s", 9, 3, 2)], &s, 3), Err(Error::ClassOutOfRange { .. })));
        assert_eq!(merge_annotations(&st, &[], &s, 3).unwrap(), st);
    }

    #[test]
    fn merge_drops_pseudo_labels_under_new_truth() {
        let s = scenes();
        let mut st = merge_annotations(&LabelState::new(), &[ann("s", 0, 1, 1)], &s, 3).unwrap();
        st.set_pseudo("s", SparseLabels::from([(5, 2), (20, 0)])).unwrap();
        assert!(st.set_pseudo("s", SparseLabels::from([(1, 2)])).is_err());
        let st = merge_annotations(&st, &[ann("s", 6, 0, 2)], &s, 3).unwrap();
        assert_eq!(st.pseudo_labels("s"), &SparseLabels::from([(20, 0)]));
    }

    #[test]
    fn journal_replay_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        let s = scenes();
        let batch = [ann("s", 0, 1, 1), ann("s", 6, 0, 1)];
        let mut j = Journal::open(&path).unwrap();
        j.append(&batch).unwrap();
        // a retried submission after a lost acknowledgement
        j.append(&batch).unwrap();
        let expected = merge_annotations(&LabelState::new(), &batch, &s, 3).unwrap();
        assert_eq!(replay(&path, &s, 3).unwrap(), expected);
        // torn tail
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"scene_id":"s","poi"#).unwrap();
        assert_eq!(replay(&path, &s, 3).unwrap(), expected);
        assert!(read_journal(dir.path().join("missing")).unwrap().is_empty());
    }
}
