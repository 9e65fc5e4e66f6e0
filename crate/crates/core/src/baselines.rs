//! Comparison models: hard top-κ selection without key training, and a dense
//! softmax classifier trained by plain gradient descent.

use ndarray::{Array1, Array2, Axis};

use crate::ensemble::{ExpertEnsemble, ExpertEvaluation, ForwardCache, GradientSet};
use crate::error::{DeeError, Result};
use crate::soft_knn::{cosine_distances, hard_topk};
use crate::types::{EmbeddingVector, LabeledExample, OneHotLabel, VotingMode};

/// Forward pass with γ replaced by the hard top-κ indicator and similarity-only weighting.
pub fn ee_hard_forward(model: &ExpertEnsemble, z: &EmbeddingVector) -> Result<(Array1<f64>, ForwardCache)> {
    if z.dim() != model.cfg.embedding_dim {
        return Err(DeeError::shape(format!(
            "embedding has dimension {}, model expects {}",
            z.dim(),
            model.cfg.embedding_dim
        )));
    }
    let c = cosine_distances(z, &model.keys)?;
    let selection = hard_topk(&c, model.cfg.num_neighbors);
    model.forward_with(z, Some(selection), ExpertEvaluation::Selected, VotingMode::Similarity)
}

/// Gradients for the selected experts only; keys never receive a gradient.
pub fn ee_hard_backward(model: &ExpertEnsemble, cache: &ForwardCache, y: &OneHotLabel) -> Result<GradientSet> {
    let mut grads = model.backward(cache, y)?;
    grads.clear_keys();
    Ok(grads)
}

/// Dense `K × M` softmax classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct NaiveModel {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub learning_rate: f64,
}

impl NaiveModel {
    /// Zero-initialized model.
    pub fn new(num_classes: usize, dim: usize, learning_rate: f64) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(DeeError::config("naive model needs K ≥ 1 and M ≥ 1"));
        }
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(DeeError::config(format!(
                "naive learning rate must be non-negative, got {learning_rate}"
            )));
        }
        Ok(Self {
            weights: Array2::zeros((num_classes, dim)),
            bias: Array1::zeros(num_classes),
            learning_rate,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    fn check(&self, z: &EmbeddingVector) -> Result<()> {
        if z.dim() != self.dim() {
            return Err(DeeError::shape(format!(
                "embedding has dimension {}, naive model expects {}",
                z.dim(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, z: &EmbeddingVector) -> Result<Array1<f64>> {
        self.check(z)?;
        Ok(self.weights.dot(z.values()) + &self.bias)
    }

    pub fn probabilities(&self, z: &EmbeddingVector) -> Result<Array1<f64>> {
        Ok(softmax(&self.logits(z)?))
    }

    /// Mean cross-entropy over `batch`.
    pub fn loss(&self, batch: &[LabeledExample]) -> Result<f64> {
        let mut total = 0.0;
        for ex in batch {
            let logits = self.logits(&ex.embedding)?;
            let label = self.label(ex)?;
            let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + logits.mapv(|v| (v - max).exp()).sum().ln();
            total += lse - logits[label];
        }
        Ok(total / batch.len().max(1) as f64)
    }

    fn label(&self, ex: &LabeledExample) -> Result<usize> {
        if ex.label >= self.num_classes() {
            return Err(DeeError::config(format!(
                "label {} out of range for {} classes",
                ex.label,
                self.num_classes()
            )));
        }
        Ok(ex.label)
    }

    /// Batch-averaged gradient `((p - y) zᵀ, p - y)`.
    pub fn gradient(&self, batch: &[LabeledExample]) -> Result<(Array2<f64>, Array1<f64>)> {
        let mut dw = Array2::zeros(self.weights.raw_dim());
        let mut db = Array1::zeros(self.num_classes());
        for ex in batch {
            let mut r = self.probabilities(&ex.embedding)?;
            r[self.label(ex)?] -= 1.0;
            let outer = r.view().insert_axis(Axis(1)).dot(&ex.embedding.values().view().insert_axis(Axis(0)));
            dw += &outer;
            db += &r;
        }
        if !batch.is_empty() {
            let inv = 1.0 / batch.len() as f64;
            dw *= inv;
            db *= inv;
        }
        Ok((dw, db))
    }
}

pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

/// One gradient-descent step on the batch-mean cross-entropy.
pub fn naive_train_step(m: &mut NaiveModel, batch: &[LabeledExample]) -> Result<()> {
    if batch.is_empty() || m.learning_rate == 0.0 {
        return Ok(());
    }
    let (dw, db) = m.gradient(batch)?;
    m.weights.scaled_add(-m.learning_rate, &dw);
    m.bias.scaled_add(-m.learning_rate, &db);
    Ok(())
}
