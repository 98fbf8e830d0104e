//! Augmentation-ensemble statistics: mean probabilities, uncertainty and
//! confidence over K index-preserving versions of a cloud.

use std::io::{Read, Write};

use crate::classifier::{argmax, featurize_with, FeatureMatrix, Matrix, PointClassifier};
use crate::cloud::{augment, AugmentParams, Cloud, Neighborhoods};
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_K_VERSIONS: usize = 5;
pub const SUMMARY_MAGIC: &[u8; 5] = b"ASTE1";

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSummary {
    pub mean_probs: Matrix,
    /// Argmax of `mean_probs`, ties to the lowest class id.
    pub top_class: Vec<u32>,
    /// Population standard deviation across versions at `top_class`.
    pub uncertainty: Vec<f64>,
    /// `mean_probs` at `top_class`.
    pub confidence: Vec<f64>,
    pub k_versions: usize,
    pub seeds: Vec<u64>,
}

impl EnsembleSummary {
    pub fn len(&self) -> usize {
        self.top_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.top_class.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.mean_probs.cols()
    }
}

/// Reduce per-version probability matrices to an [`EnsembleSummary`].
pub fn uncertainty_of(probs_per_version: &[Matrix]) -> Result<EnsembleSummary> {
    let first = probs_per_version
        .first()
        .ok_or_else(|| Error::InvalidParameter("at least one version is required".into()))?;
    let (n, c) = (first.rows(), first.cols());
    for m in probs_per_version {
        if m.rows() != n || m.cols() != c {
            return Err(Error::DimensionMismatch { expected: n * c, actual: m.rows() * m.cols() });
        }
    }
    let k = probs_per_version.len() as f64;
    let mut mean = vec![0.0; n * c];
    for m in probs_per_version {
        for (acc, &p) in mean.iter_mut().zip(m.data()) {
            *acc += p;
        }
    }
    for v in &mut mean {
        *v /= k;
    }
    let mean_probs = Matrix::new(n, c, mean)?;
    let mut top_class = Vec::with_capacity(n);
    let mut uncertainty = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    for i in 0..n {
        let top = argmax(mean_probs.row(i));
        let mu = mean_probs.get(i, top);
        // Deviations are shifted by the first version so identical passes give exactly zero.
        let x0 = first.get(i, top);
        let shift = probs_per_version.iter().map(|m| m.get(i, top) - x0).sum::<f64>() / k;
        let var = probs_per_version.iter().map(|m| (m.get(i, top) - x0 - shift).powi(2)).sum::<f64>() / k;
        top_class.push(top as u32);
        uncertainty.push(var.sqrt());
        confidence.push(mu);
    }
    Ok(EnsembleSummary {
        mean_probs,
        top_class,
        uncertainty,
        confidence,
        k_versions: probs_per_version.len(),
        seeds: Vec::new(),
    })
}

/// Augmentation seed of version `v` under `master`.
pub fn version_seed(master: u64, v: usize) -> u64 {
    seed::derive(master, "augment", v as u64)
}

/// Featurize `k` augmented versions of `cloud`, reusing the original's
/// neighbourhood graph.
pub fn augmented_features(
    cloud: &Cloud,
    neighborhoods: &Neighborhoods,
    params: &AugmentParams,
    k: usize,
    master_seed: u64,
) -> Result<(Vec<FeatureMatrix>, Vec<u64>)> {
    let seeds: Vec<u64> = (0..k).map(|v| version_seed(master_seed, v)).collect();
    let versions = seeds
        .iter()
        .map(|&s| featurize_with(&augment(cloud, &params.with_seed(s))?, neighborhoods))
        .collect::<Result<Vec<_>>>()?;
    Ok((versions, seeds))
}

/// Run the classifier on precomputed feature versions.
pub fn summarize_versions<C: PointClassifier + ?Sized>(
    model: &C,
    versions: &[FeatureMatrix],
    seeds: &[u64],
) -> Result<EnsembleSummary> {
    let probs = versions.iter().map(|f| model.predict_proba(f)).collect::<Result<Vec<_>>>()?;
    let mut summary = uncertainty_of(&probs)?;
    summary.seeds = seeds.to_vec();
    Ok(summary)
}

/// Ensemble prediction over `k` augmented versions of `cloud`.
pub fn predict_ensemble<C: PointClassifier + ?Sized>(
    model: &C,
    cloud: &Cloud,
    params: &AugmentParams,
    k: usize,
    master_seed: u64,
    k_neighbors: usize,
) -> Result<EnsembleSummary> {
    if k == 0 {
        return Err(Error::InvalidParameter("K must be >= 1".into()));
    }
    if cloud.normals().is_none() {
        return Err(Error::MissingNormals);
    }
    let nb = Neighborhoods::build(cloud.positions(), k_neighbors);
    let (versions, seeds) = augmented_features(cloud, &nb, params, k, master_seed)?;
    summarize_versions(model, &versions, &seeds)
}

/// `ASTE1`, u32 N, u32 C, f32 mean probabilities (row-major), f32
/// uncertainty, i32 top class.
pub fn write_summary<W: Write>(summary: &EnsembleSummary, w: &mut W) -> std::io::Result<()> {
    w.write_all(SUMMARY_MAGIC)?;
    w.write_all(&(summary.len() as u32).to_le_bytes())?;
    w.write_all(&(summary.num_classes() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(summary.len() * (summary.num_classes() + 2) * 4);
    for &p in summary.mean_probs.data() {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    for &u in &summary.uncertainty {
        buf.extend_from_slice(&(u as f32).to_le_bytes());
    }
    for &c in &summary.top_class {
        buf.extend_from_slice(&(c as i32).to_le_bytes());
    }
    w.write_all(&buf)
}

/// Decoded `ASTE1` payload.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapPayload {
    pub n: usize,
    pub c: usize,
    pub mean_probs: Vec<f32>,
    pub uncertainty: Vec<f32>,
    pub top_class: Vec<i32>,
}

pub fn read_summary<R: Read>(r: &mut R) -> Result<HeatmapPayload> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::parse("byte 0", e.to_string()))?;
    if bytes.len() < 13 || &bytes[..5] != SUMMARY_MAGIC {
        return Err(Error::parse("byte 0", "not an ASTE1 stream"));
    }
    let n = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let need = 13 + 4 * (n * c + 2 * n);
    if bytes.len() != need {
        return Err(Error::parse(format!("byte {}", bytes.len().min(need)), format!("expected {need} bytes")));
    }
    let words: Vec<[u8; 4]> = bytes[13..].chunks_exact(4).map(|w| w.try_into().unwrap()).collect();
    Ok(HeatmapPayload {
        n,
        c,
        mean_probs: words[..n * c].iter().map(|w| f32::from_le_bytes(*w)).collect(),
        uncertainty: words[n * c..n * c + n].iter().map(|w| f32::from_le_bytes(*w)).collect(),
        top_class: words[n * c + n..].iter().map(|w| i32::from_le_bytes(*w)).collect(),
    })
}
