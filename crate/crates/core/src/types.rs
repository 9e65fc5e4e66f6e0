//! Shared domain types: embeddings, labels and the model configuration.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{DeeError, Result};

/// Frozen feature vector produced by an extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Array1<f64>);

impl EmbeddingVector {
    /// Wraps `values`, rejecting non-finite entries.
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DeeError::config(format!(
                "embedding entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        Self::new(Array1::from(values))
    }

    /// Wraps `values` after checking the expected dimension too.
    pub fn with_dim(values: Array1<f64>, dim: usize) -> Result<Self> {
        if values.len() != dim {
            return Err(DeeError::shape(format!(
                "embedding has length {}, expected {dim}",
                values.len()
            )));
        }
        Self::new(values)
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.dot(&self.0).sqrt()
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub embedding: EmbeddingVector,
    pub label: usize,
}

impl LabeledExample {
    pub fn new(embedding: EmbeddingVector, label: usize) -> Self {
        Self { embedding, label }
    }
}

/// One-hot encoded class label.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotLabel(Array1<f64>);

impl OneHotLabel {
    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn class(&self) -> usize {
        argmax(self.0.as_slice().expect("contiguous"))
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }
}

pub fn one_hot(label: usize, num_classes: usize) -> Result<OneHotLabel> {
    if label >= num_classes {
        return Err(DeeError::config(format!(
            "label {label} out of range for {num_classes} classes"
        )));
    }
    let mut v = Array1::zeros(num_classes);
    v[label] = 1.0;
    Ok(OneHotLabel(v))
}

/// Index of the largest entry; ties go to the lowest index. NaN entries never win.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] || values[best].is_nan() {
            best = i;
        }
    }
    best
}

/// How the voting layer weights expert outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum VotingMode {
    /// Weights `gamma_n * max(0, 1 - c_n)`, normalized over selected experts.
    #[default]
    Similarity,
    /// Weights `gamma_n * c_n`, normalized by the sum of all distances.
    Literal,
}

/// Starting column scaling for the Bregman iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SinkhornInit {
    /// Start from the exact root of the one-dimensional dual balance equation.
    #[default]
    DualRoot,
    /// Start from `q = [1/2, 1/2]`.
    Uniform,
}

impl std::str::FromStr for VotingMode {
    type Err = DeeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "similarity" => Ok(Self::Similarity),
            "literal" => Ok(Self::Literal),
            other => Err(DeeError::config(format!("unknown voting mode `{other}`"))),
        }
    }
}

impl std::str::FromStr for SinkhornInit {
    type Err = DeeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual-root" => Ok(Self::DualRoot),
            "uniform" => Ok(Self::Uniform),
            other => Err(DeeError::config(format!("unknown sinkhorn init `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_experts: usize,
    pub num_neighbors: usize,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub kernel_width: f64,
    pub bregman_iters: usize,
    pub gamma_threshold: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub voting: VotingMode,
    pub sinkhorn_init: SinkhornInit,
}

impl Default for ModelConfig {
    /// MNIST row of the reference hyperparameter table with soft-KNN width 5e-4 and 400 iterations.
    fn default() -> Self {
        Self {
            num_experts: 128,
            num_neighbors: 16,
            embedding_dim: 64,
            num_classes: 10,
            kernel_width: 0.0005,
            bregman_iters: 400,
            gamma_threshold: 0.3,
            learning_rate: 0.0001,
            weight_decay: 0.0001,
            batch_size: 60,
            seed: 0,
            voting: VotingMode::Similarity,
            sinkhorn_init: SinkhornInit::DualRoot,
        }
    }
}

/// Checks every invariant of `cfg` and returns all violations (empty when valid).
pub fn validate_config(cfg: &ModelConfig) -> Vec<String> {
    let mut violations = Vec::new();
    if cfg.num_experts == 0 {
        violations.push("N ≥ 1 required".to_string());
    }
    if cfg.num_neighbors == 0 {
        violations.push("κ ≥ 1 required".to_string());
    }
    if cfg.num_neighbors >= cfg.num_experts {
        violations.push(format!(
            "κ < N required (κ={}, N={})",
            cfg.num_neighbors, cfg.num_experts
        ));
    }
    if cfg.embedding_dim == 0 {
        violations.push("M ≥ 1 required".to_string());
    }
    if cfg.num_classes == 0 {
        violations.push("K ≥ 1 required".to_string());
    }
    if !(cfg.kernel_width > 0.0 && cfg.kernel_width.is_finite()) {
        violations.push(format!("σ > 0 required (σ={})", cfg.kernel_width));
    }
    if cfg.bregman_iters == 0 {
        violations.push("L ≥ 1 required".to_string());
    }
    if !(0.0..=1.0).contains(&cfg.gamma_threshold) {
        violations.push(format!(
            "gamma_threshold ∈ [0,1] required (got {})",
            cfg.gamma_threshold
        ));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        violations.push(format!(
            "learning_rate > 0 required (got {})",
            cfg.learning_rate
        ));
    }
    if !(cfg.weight_decay >= 0.0 && cfg.weight_decay < 1.0) {
        violations.push(format!(
            "weight_decay ∈ [0,1) required (got {})",
            cfg.weight_decay
        ));
    }
    if cfg.batch_size == 0 {
        violations.push("batch_size ≥ 1 required".to_string());
    }
    violations
}

/// [`validate_config`] folded into a single configuration error.
pub fn ensure_valid(cfg: &ModelConfig) -> Result<()> {
    let violations = validate_config(cfg);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(DeeError::Config(violations.join("; ")))
    }
}
