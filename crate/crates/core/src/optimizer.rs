//! Sign-based updates with a fixed step.
//!
//! Only the sign of each gradient component is used: every parameter with a
//! non-zero gradient moves by exactly the learning rate. Weight decay is
//! decoupled and multiplicative, applied after the sign step.

use ndarray::{ArrayViewMut, Dimension, ArrayView, Zip};
use serde::{Deserialize, Serialize};

use crate::ensemble::{normalize_rows, ExpertEnsemble, GradientSet};
use crate::error::{DeeError, Result};
use crate::types::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub renormalize_keys: bool,
    /// Also decay expert biases (weights are always decayed).
    pub decay_biases: bool,
    /// Also decay keys before renormalization.
    pub decay_keys: bool,
}

impl OptimizerConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            renormalize_keys: true,
            decay_biases: false,
            decay_keys: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DeeError::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return Err(DeeError::config(format!(
                "weight decay must lie in [0, 1), got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

impl From<&ModelConfig> for OptimizerConfig {
    fn from(cfg: &ModelConfig) -> Self {
        Self::new(cfg.learning_rate, cfg.weight_decay)
    }
}

#[inline]
fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `param ← param - lr · sign(grad)` with `sign(0) = 0`.
pub fn sign_step<D: Dimension>(mut param: ArrayViewMut<'_, f64, D>, grad: ArrayView<'_, f64, D>, lr: f64) {
    Zip::from(&mut param).and(&grad).for_each(|p, &g| *p -= lr * sign(g));
}

/// `param ← (1 - wd) · param`
pub fn apply_weight_decay<D: Dimension>(mut param: ArrayViewMut<'_, f64, D>, wd: f64) {
    if wd != 0.0 {
        param.mapv_inplace(|p| (1.0 - wd) * p);
    }
}

/// One update of every weight, bias and key.
pub fn step(model: &mut ExpertEnsemble, grads: &GradientSet, opt: &OptimizerConfig) -> Result<()> {
    opt.validate()?;
    if !grads.matches(model) {
        return Err(DeeError::shape("gradient set does not mirror the model"));
    }
    let lr = opt.learning_rate;
    for ((expert, dw), db) in model
        .experts
        .iter_mut()
        .zip(&grads.d_weights)
        .zip(&grads.d_biases)
    {
        sign_step(expert.weights.view_mut(), dw.view(), lr);
        apply_weight_decay(expert.weights.view_mut(), opt.weight_decay);
        sign_step(expert.bias.view_mut(), db.view(), lr);
        if opt.decay_biases {
            apply_weight_decay(expert.bias.view_mut(), opt.weight_decay);
        }
    }
    sign_step(model.keys.view_mut(), grads.d_keys.view(), lr);
    if opt.decay_keys {
        apply_weight_decay(model.keys.view_mut(), opt.weight_decay);
    }
    if opt.renormalize_keys {
        normalize_rows(&mut model.keys);
    }
    model.bump_revision();
    Ok(())
}
