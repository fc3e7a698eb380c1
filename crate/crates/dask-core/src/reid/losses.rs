//! Training losses: cosine similarity matrices, the KL similarity
//! distillation between old and new models, batch-hard triplet plus
//! cross-entropy, and the weighted total.

use crate::error::{Error, Result};
use crate::reid::FeatureBatch;
use crate::tensor::{Tape, Tensor, Var};

/// Pairwise cosine similarities of a feature batch; rows are unit-normalized
/// features, so the matrix is symmetric with a unit diagonal.
#[derive(Clone, Debug)]
pub struct SimilarityMatrix {
    values: Vec<f64>,
    size: usize,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.size..(i + 1) * self.size]
    }

    pub fn from_raw(values: Vec<f64>, size: usize) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {size}x{size} similarity matrix",
                values.len()
            )));
        }
        Ok(SimilarityMatrix { values, size })
    }
}

/// S = normalize_rows(F) . normalize_rows(F)^T. Needs at least two rows;
/// zero-norm feature rows are rejected.
pub fn similarity_matrix(fb: &FeatureBatch) -> Result<SimilarityMatrix> {
    if fb.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "similarity matrix needs >=2 rows, got {}",
            fb.len()
        )));
    }
    let mut tape = Tape::new();
    let f = tape.leaf(Tensor::new(
        vec![fb.len(), fb.dim()],
        fb.features().to_vec(),
    )?);
    let s = similarity_matrix_var(&mut tape, f)?;
    SimilarityMatrix::from_raw(tape.value(s).data().to_vec(), fb.len())
}

/// Tape route used during training so gradients reach the features.
pub fn similarity_matrix_var(tape: &mut Tape, features: Var) -> Result<Var> {
    let n = tape.row_normalize(features)?;
    let nt = tape.transpose(n)?;
    tape.matmul(n, nt)
}

/// Mean over rows of KL(softmax(old_row / tau) || softmax(new_row / tau)).
/// Gradient is meant to flow only into the new matrix; the value route is
/// gradient-free and the tape route takes the old matrix as a constant.
pub fn skd_loss(s_old: &SimilarityMatrix, s_new: &SimilarityMatrix, tau: f64) -> Result<f64> {
    if s_old.size() != s_new.size() {
        return Err(Error::ShapeMismatch(format!(
            "similarity matrices {}x{} vs {}x{}",
            s_old.size(),
            s_old.size(),
            s_new.size(),
            s_new.size()
        )));
    }
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("tau {tau} must be > 0")));
    }
    let b = s_old.size();
    let mut total = 0.0;
    for i in 0..b {
        let p = softmax_scaled(s_old.row(i), tau);
        let q = softmax_scaled(s_new.row(i), tau);
        for (pv, qv) in p.iter().zip(&q) {
            total += pv * (pv.ln() - qv.ln());
        }
    }
    Ok(total / b as f64)
}

/// Tape form of [`skd_loss`]; `s_old` enters as a constant.
pub fn skd_loss_var(
    tape: &mut Tape,
    s_old: &SimilarityMatrix,
    s_new: Var,
    tau: f64,
) -> Result<Var> {
    let b = s_old.size();
    let new_shape = tape.value(s_new).shape().to_vec();
    if new_shape != vec![b, b] {
        return Err(Error::ShapeMismatch(format!(
            "similarity matrices {b}x{b} vs {new_shape:?}"
        )));
    }
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("tau {tau} must be > 0")));
    }
    let mut p_data = Vec::with_capacity(b * b);
    for i in 0..b {
        p_data.extend(softmax_scaled(s_old.row(i), tau));
    }
    let log_p: Vec<f64> = p_data.iter().map(|v| v.ln()).collect();
    let p = tape.leaf(Tensor::new(vec![b, b], p_data)?);
    let log_p = tape.leaf(Tensor::new(vec![b, b], log_p)?);

    let scaled = tape.scale(s_new, 1.0 / tau)?;
    let q = tape.softmax_rows(scaled)?;
    let log_q = tape.log(q)?;
    let diff = tape.sub(log_p, log_q)?;
    let weighted = tape.mul(p, diff)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, 1.0 / b as f64)
}

fn softmax_scaled(row: &[f64], tau: f64) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x / tau));
    let mut out: Vec<f64> = row.iter().map(|&x| (x / tau - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

/// Batch-hard triplet loss on raw features (value route).
pub fn triplet_loss(fb: &FeatureBatch, margin: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let f = tape.leaf(Tensor::new(
        vec![fb.len(), fb.dim()],
        fb.features().to_vec(),
    )?);
    let loss = tape.batch_hard_triplet(f, fb.labels(), margin)?;
    tape.value(loss).item()
}

/// Mean softmax cross-entropy of classifier logits (value route).
pub fn cross_entropy_loss(logits: &[f64], n_classes: usize, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.leaf(Tensor::new(vec![labels.len(), n_classes], logits.to_vec())?);
    let loss = tape.cross_entropy(l, labels)?;
    tape.value(loss).item()
}

/// Triplet plus cross-entropy, unweighted.
pub fn reid_loss(
    fb: &FeatureBatch,
    logits: &[f64],
    n_classes: usize,
    margin: f64,
) -> Result<f64> {
    Ok(triplet_loss(fb, margin)? + cross_entropy_loss(logits, n_classes, fb.labels())?)
}

/// The step loss: `reid + alpha * skd + beta * (reid* + alpha * skd*)`.
/// Rehearsed terms are absent at the first step, where no old model exists.
pub fn total_loss(
    new_reid: f64,
    new_skd: f64,
    rehearsed: Option<(f64, f64)>,
    alpha: f64,
    beta: f64,
) -> f64 {
    let mut total = new_reid + alpha * new_skd;
    if let Some((r_reid, r_skd)) = rehearsed {
        total += beta * (r_reid + alpha * r_skd);
    }
    total
}
