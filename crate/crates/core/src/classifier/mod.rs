//! Per-point classifier contract and the reference feed-forward network.

mod features;
mod io;
mod mlp;
mod train;

pub use features::{featurize, featurize_with, FEATURE_COUNT, FEATURE_NAMES};
pub use io::{load_model, read_model, save_model, write_model, MODEL_MAGIC};
pub use mlp::{grad, init_model, loss, loss_and_grad, Model};
pub use train::{train, SceneTrainData, TrainOutcome, TrainSchedule};

use crate::error::{Error, Result};

/// A `(point index, class id)` pair.
pub type PointLabel = (u32, u32);

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// One feature row per cloud point.
pub type FeatureMatrix = Matrix;

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch { expected: rows * cols, actual: data.len() });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch { expected: cols, actual: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Rows gathered in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: indices.len(), cols: self.cols, data }
    }
}

/// Anything that maps feature rows to class-probability rows.
pub trait PointClassifier {
    fn num_inputs(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Row-stochastic `N x C` matrix.
    fn predict_proba(&self, features: &FeatureMatrix) -> Result<Matrix>;
}

impl PointClassifier for Model {
    fn num_inputs(&self) -> usize {
        self.widths()[0]
    }

    fn num_classes(&self) -> usize {
        *self.widths().last().expect("widths")
    }

    fn predict_proba(&self, features: &FeatureMatrix) -> Result<Matrix> {
        self.forward(features)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
