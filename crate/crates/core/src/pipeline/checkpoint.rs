use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::experiment::{ExperimentState, IterationMetrics, Status};
use crate::classifier::{read_model, write_model, Matrix};
use crate::ensemble::EnsembleSummary;
use crate::error::{Error, Result};
use crate::labels::LabelState;
use crate::sampler::QuerySet;

const STATE_FILE: &str = "state.json";
const SUMMARY_FILE: &str = "summaries.bin";
const MODEL_FILE: &str = "model.astm";
const MANIFEST_FILE: &str = "manifest.json";
const SUMMARY_MAGIC: &[u8; 5] = b"ASTS1";

#[derive(Serialize, Deserialize)]
struct StateFile {
    config: ExperimentConfig,
    iteration: usize,
    status: Status,
    labels: LabelState,
    pending: Option<QuerySet>,
    metrics: Vec<IterationMetrics>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    /// File name → sha256 hex digest.
    files: BTreeMap<String, String>,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_summaries(summaries: &[EnsembleSummary]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(SUMMARY_MAGIC);
    b.extend_from_slice(&(summaries.len() as u32).to_le_bytes());
    for s in summaries {
        for v in [s.len(), s.num_classes(), s.k_versions, s.seeds.len()] {
            b.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &seed in &s.seeds {
            b.extend_from_slice(&seed.to_le_bytes());
        }
        for &v in s.mean_probs.data().iter().chain(&s.uncertainty).chain(&s.confidence) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for &c in &s.top_class {
            b.extend_from_slice(&c.to_le_bytes());
        }
    }
    b
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("summaries truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn decode_summaries(bytes: &[u8]) -> Result<Vec<EnsembleSummary>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(5)? != SUMMARY_MAGIC {
        return Err(Error::Checkpoint("bad summaries magic".into()));
    }
    let scenes = c.u32()? as usize;
    let mut out = Vec::with_capacity(scenes);
    for _ in 0..scenes {
        let n = c.u32()? as usize;
        let classes = c.u32()? as usize;
        let k_versions = c.u32()? as usize;
        let nseeds = c.u32()? as usize;
        let seeds = (0..nseeds).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
        let mean_probs = Matrix::new(n, classes, c.f64s(n * classes)?)?;
        let uncertainty = c.f64s(n)?;
        let confidence = c.f64s(n)?;
        let top_class = (0..n).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        out.push(EnsembleSummary { mean_probs, top_class, uncertainty, confidence, k_versions, seeds });
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes in summaries".into()));
    }
    Ok(out)
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let tmp = dir.join(format!(".{name}.tmp"));
    let dst = dir.join(name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))
}

/// Persist everything needed to continue the experiment bit-exactly.
///
/// The manifest carrying content hashes is written last, so a torn
/// checkpoint fails verification on resume.
pub fn checkpoint(state: &ExperimentState, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    let state_file = StateFile {
        config: state.config.clone(),
        iteration: state.iteration,
        status: state.status,
        labels: state.labels.clone(),
        pending: state.pending.clone(),
        metrics: state.metrics.clone(),
    };
    let json = serde_json::to_vec(&state_file)?;
    files.insert(STATE_FILE.to_string(), digest(&json));
    write_atomic(dir, STATE_FILE, &json)?;
    if let Some(s) = &state.summaries {
        let bytes = encode_summaries(s);
        files.insert(SUMMARY_FILE.to_string(), digest(&bytes));
        write_atomic(dir, SUMMARY_FILE, &bytes)?;
    }
    if let Some(m) = &state.model {
        let mut bytes = Vec::new();
        write_model(m, &mut bytes).expect("in-memory write");
        files.insert(MODEL_FILE.to_string(), digest(&bytes));
        write_atomic(dir, MODEL_FILE, &bytes)?;
    }
    let manifest = serde_json::to_vec_pretty(&Manifest { version: 1, files })?;
    write_atomic(dir, MANIFEST_FILE, &manifest)
}

fn read_verified(dir: &Path, name: &str, expected: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if digest(&bytes) != expected {
        return Err(Error::Checkpoint(format!("hash mismatch for {name}")));
    }
    Ok(bytes)
}

/// Restore a checkpointed experiment. The model, if present, is restored at
/// the checkpoint's f32 precision; continuing never depends on it.
pub fn resume(dir: impl AsRef<Path>) -> Result<ExperimentState> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest =
        serde_json::from_slice(&fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?)
            .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    let hash_of = |name: &str| manifest.files.get(name).cloned();
    let state_hash = hash_of(STATE_FILE).ok_or_else(|| Error::Checkpoint("manifest lacks state".into()))?;
    let state: StateFile = serde_json::from_slice(&read_verified(dir, STATE_FILE, &state_hash)?)?;
    let summaries = match hash_of(SUMMARY_FILE) {
        Some(h) => Some(decode_summaries(&read_verified(dir, SUMMARY_FILE, &h)?)?),
        None => None,
    };
    let model = match hash_of(MODEL_FILE) {
        Some(h) => Some(read_model(&mut read_verified(dir, MODEL_FILE, &h)?.as_slice())?),
        None => None,
    };
    Ok(ExperimentState {
        config: state.config,
        iteration: state.iteration,
        status: state.status,
        labels: state.labels,
        pending: state.pending,
        metrics: state.metrics,
        summaries,
        model,
    })
}
