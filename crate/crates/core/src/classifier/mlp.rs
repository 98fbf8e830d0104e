use rand::Rng as _;

use super::{Matrix, PointLabel};
use crate::error::{Error, Result};
use crate::seed;

pub(crate) const LOG_FLOOR: f64 = 1e-12;

/// Fully connected network: ReLU hidden layers, softmax output.
///
/// Layer `l` stores an `in x out` row-major weight block followed by `out`
/// biases in one flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    widths: Vec<usize>,
    params: Vec<f64>,
    init_seed: u64,
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Fresh He-uniform weights and zero biases from `seed`.
pub fn init_model(seed: u64, widths: &[usize]) -> Result<Model> {
    if widths.len() < 2 {
        return Err(Error::InvalidParameter("a model needs at least input and output widths".into()));
    }
    if widths.contains(&0) {
        return Err(Error::InvalidParameter(format!("zero-width layer in {widths:?}")));
    }
    let mut rng = seed::rng(seed);
    let mut params = Vec::with_capacity(param_count(widths));
    for w in widths.windows(2) {
        let limit = (6.0 / w[0] as f64).sqrt();
        for _ in 0..w[0] * w[1] {
            params.push(rng.random_range(-limit..limit));
        }
        params.extend(std::iter::repeat_n(0.0, w[1]));
    }
    Ok(Model { widths: widths.to_vec(), params, init_seed: seed })
}

impl Model {
    pub fn from_parts(widths: Vec<usize>, params: Vec<f64>, init_seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidParameter(format!("bad widths {widths:?}")));
        }
        let expected = param_count(&widths);
        if params.len() != expected {
            return Err(Error::DimensionMismatch { expected, actual: params.len() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidParameter("non-finite parameter".into()));
        }
        Ok(Model { widths, params, init_seed })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.widths.windows(2).map(move |w| {
            let start = offset;
            offset += w[0] * w[1] + w[1];
            (start, w[0], w[1])
        })
    }

    fn check_input(&self, features: &Matrix) -> Result<()> {
        if features.cols() != self.widths[0] {
            return Err(Error::DimensionMismatch { expected: self.widths[0], actual: features.cols() });
        }
        Ok(())
    }

    /// Class probabilities for every row of `features`.
    pub fn forward(&self, features: &Matrix) -> Result<Matrix> {
        self.check_input(features)?;
        const BLOCK: usize = 2048;
        let n = features.rows();
        let c = *self.widths.last().unwrap();
        let layers: Vec<_> = self.layers().collect();
        let max_w = *self.widths.iter().max().unwrap();
        let mut probs = vec![0.0; n * c];
        let mut a = vec![0.0; BLOCK * max_w];
        let mut z = vec![0.0; BLOCK * max_w];
        for start in (0..n).step_by(BLOCK) {
            let rows = BLOCK.min(n - start);
            let x = &features.data()[start * self.widths[0]..(start + rows) * self.widths[0]];
            for (l, &(off, fan_in, fan_out)) in layers.iter().enumerate() {
                let (w, b) = self.params[off..off + fan_in * fan_out + fan_out].split_at(fan_in * fan_out);
                let input: &[f64] = if l == 0 { x } else { &a[..rows * fan_in] };
                let out = &mut z[..rows * fan_out];
                for o in out.chunks_exact_mut(fan_out) {
                    o.copy_from_slice(b);
                }
                // SAFETY: `input` is rows x fan_in, `w` is fan_in x fan_out and `out`
                // is rows x fan_out, all row-major, contiguous and non-overlapping.
                unsafe {
                    matrixmultiply::dgemm(
                        rows,
                        fan_in,
                        fan_out,
                        1.0,
                        input.as_ptr(),
                        fan_in as isize,
                        1,
                        w.as_ptr(),
                        fan_out as isize,
                        1,
                        1.0,
                        out.as_mut_ptr(),
                        fan_out as isize,
                        1,
                    );
                }
                if l + 1 < layers.len() {
                    relu(out);
                    std::mem::swap(&mut a, &mut z);
                } else {
                    for o in out.chunks_exact_mut(fan_out) {
                        softmax(o);
                    }
                    probs[start * c..(start + rows) * c].copy_from_slice(out);
                }
            }
        }
        Matrix::new(n, c, probs)
    }

    /// Loss and gradient of `sum_i weight_i * -log p_{i, class_i}` over the
    /// given `(row, class, weight)` triples.
    pub(crate) fn weighted_loss_grad(
        &self,
        features: &Matrix,
        rows: &[(usize, u32, f64)],
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check_input(features)?;
        let c = *self.widths.last().unwrap();
        let layers: Vec<_> = self.layers().collect();
        let max_w = *self.widths.iter().max().unwrap();
        let mut acts: Vec<Vec<f64>> = self.widths.iter().map(|&w| vec![0.0; w]).collect();
        let mut delta = vec![0.0; max_w];
        let mut delta_prev = vec![0.0; max_w];
        let mut total = 0.0;
        for &(row, class, weight) in rows {
            if class as usize >= c {
                return Err(Error::ClassOutOfRange { class_id: class as usize, classes: c });
            }
            if row >= features.rows() {
                return Err(Error::DimensionMismatch { expected: features.rows(), actual: row + 1 });
            }
            acts[0].copy_from_slice(features.row(row));
            for (l, &(off, fan_in, fan_out)) in layers.iter().enumerate() {
                let (w, b) = self.params[off..off + fan_in * fan_out + fan_out].split_at(fan_in * fan_out);
                let (before, after) = acts.split_at_mut(l + 1);
                let out = &mut after[0];
                out.copy_from_slice(b);
                affine_accumulate(&before[l], w, out);
                if l + 1 < layers.len() {
                    relu(out);
                } else {
                    softmax(out);
                }
            }
            let probs = &acts[layers.len()];
            total += weight * -probs[class as usize].max(LOG_FLOOR).ln();
            // d(-log softmax)/d logits = p - onehot
            let d = &mut delta[..c];
            for (k, dk) in d.iter_mut().enumerate() {
                *dk = weight * (probs[k] - if k == class as usize { 1.0 } else { 0.0 });
            }
            for (l, &(off, fan_in, fan_out)) in layers.iter().enumerate().rev() {
                let input = &acts[l];
                let g = &mut grad[off..off + fan_in * fan_out + fan_out];
                let (gw, gb) = g.split_at_mut(fan_in * fan_out);
                let d = &delta[..fan_out];
                for (gbo, &dv) in gb.iter_mut().zip(d) {
                    *gbo += dv;
                }
                for j in 0..fan_in {
                    let x = input[j];
                    if x != 0.0 {
                        for (g, &dv) in gw[j * fan_out..(j + 1) * fan_out].iter_mut().zip(d) {
                            *g += x * dv;
                        }
                    }
                }
                if l > 0 {
                    let w = &self.params[off..off + fan_in * fan_out];
                    for j in 0..fan_in {
                        // ReLU derivative: stored activation is zero where inactive
                        delta_prev[j] = if input[j] > 0.0 {
                            w[j * fan_out..(j + 1) * fan_out].iter().zip(d).map(|(a, b)| a * b).sum()
                        } else {
                            0.0
                        };
                    }
                    std::mem::swap(&mut delta, &mut delta_prev);
                }
            }
        }
        Ok(total)
    }
}

#[inline]
fn affine_accumulate(input: &[f64], w: &[f64], out: &mut [f64]) {
    let fan_out = out.len();
    for (j, &x) in input.iter().enumerate() {
        if x != 0.0 {
            for (o, &wv) in out.iter_mut().zip(&w[j * fan_out..(j + 1) * fan_out]) {
                *o += x * wv;
            }
        }
    }
}

#[inline]
fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

#[inline]
fn softmax(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

fn check_label_sets(n: usize, c: usize, t: &[PointLabel], p: &[PointLabel]) -> Result<()> {
    if t.is_empty() {
        return Err(Error::Labels("the true label set T is empty".into()));
    }
    let mut seen = vec![0u8; n];
    for (tag, set) in [(1u8, t), (2u8, p)] {
        for &(i, class) in set {
            let i = i as usize;
            if i >= n {
                return Err(Error::DimensionMismatch { expected: n, actual: i + 1 });
            }
            if class as usize >= c {
                return Err(Error::ClassOutOfRange { class_id: class as usize, classes: c });
            }
            if seen[i] != 0 && seen[i] != tag {
                return Err(Error::Labels(format!("point {i} is in both T and P")));
            }
            seen[i] = tag;
        }
    }
    Ok(())
}

/// Dual-term cross-entropy: mean over `t` plus `lambda` times mean over `p`.
/// An empty `p` contributes nothing.
pub fn loss(probs: &Matrix, t: &[PointLabel], p: &[PointLabel], lambda: f64) -> Result<f64> {
    check_label_sets(probs.rows(), probs.cols(), t, p)?;
    let term = |set: &[PointLabel]| -> f64 {
        set.iter().map(|&(i, c)| -probs.get(i as usize, c as usize).max(LOG_FLOOR).ln()).sum::<f64>()
            / set.len() as f64
    };
    let mut l = term(t);
    if !p.is_empty() {
        l += lambda * term(p);
    }
    Ok(l)
}

fn eq1_rows(t: &[PointLabel], p: &[PointLabel], lambda: f64) -> Vec<(usize, u32, f64)> {
    let wt = 1.0 / t.len() as f64;
    let mut rows: Vec<_> = t.iter().map(|&(i, c)| (i as usize, c, wt)).collect();
    if !p.is_empty() {
        let wp = lambda / p.len() as f64;
        rows.extend(p.iter().map(|&(i, c)| (i as usize, c, wp)));
    }
    rows
}

/// Loss and its gradient with respect to the flat parameter vector.
pub fn loss_and_grad(
    model: &Model,
    features: &Matrix,
    t: &[PointLabel],
    p: &[PointLabel],
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    model.check_input(features)?;
    check_label_sets(features.rows(), *model.widths.last().unwrap(), t, p)?;
    let mut g = vec![0.0; model.num_params()];
    let l = model.weighted_loss_grad(features, &eq1_rows(t, p, lambda), &mut g)?;
    Ok((l, g))
}

pub fn grad(model: &Model, features: &Matrix, t: &[PointLabel], p: &[PointLabel], lambda: f64) -> Result<Vec<f64>> {
    loss_and_grad(model, features, t, p, lambda).map(|(_, g)| g)
}
