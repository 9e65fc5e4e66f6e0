//! Finite-difference verification of the analytic gradients.
//!
//! The numeric side only ever calls forward passes, so it stays independent
//! of the backward code it checks.

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::ensemble::{loss, ExpertEnsemble, GradientSet};
use crate::error::Result;
use crate::rng::{derive_seed, seeded_rng, standard_normal, uniform01, DeeRng};
use crate::soft_knn::{soft_knn_backward_raw, soft_knn_from_distances, DistanceVector, SoftKnnParams};
use crate::types::{one_hot, EmbeddingVector, ModelConfig, SinkhornInit};

/// Magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// `|a - f| / max(|a|, |f|, floor)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckOptions {
    pub num_experts: usize,
    pub num_neighbors: usize,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub kernel_width: f64,
    pub iters: usize,
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub init: SinkhornInit,
    /// Negates the analytic key gradient before comparison. Used to prove the check can fail.
    #[serde(skip)]
    pub inject_sign_flip: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            num_experts: 8,
            num_neighbors: 3,
            embedding_dim: 5,
            num_classes: 3,
            kernel_width: 0.05,
            iters: 50,
            instances: 20,
            step: 1e-6,
            tolerance: 1e-4,
            seed: 0,
            init: SinkhornInit::DualRoot,
            inject_sign_flip: false,
        }
    }
}

impl GradcheckOptions {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_experts: self.num_experts,
            num_neighbors: self.num_neighbors,
            embedding_dim: self.embedding_dim,
            num_classes: self.num_classes,
            kernel_width: self.kernel_width,
            bregman_iters: self.iters,
            sinkhorn_init: self.init,
            ..ModelConfig::default()
        }
    }
}

/// Worst discrepancy within one parameter group.
#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub group: String,
    pub max_relative_error: f64,
    pub worst_coordinate: String,
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

impl GroupReport {
    fn new(group: &str) -> Self {
        Self {
            group: group.to_string(),
            max_relative_error: 0.0,
            worst_coordinate: String::new(),
            analytic: 0.0,
            numeric: 0.0,
            entries: 0,
        }
    }

    fn record(&mut self, coordinate: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.entries += 1;
        let err = relative_error(analytic, numeric);
        if err > self.max_relative_error || err.is_nan() {
            self.max_relative_error = if err.is_nan() { f64::INFINITY } else { err };
            self.worst_coordinate = coordinate();
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }

    fn merge(&mut self, other: GroupReport) {
        self.entries += other.entries;
        if other.max_relative_error > self.max_relative_error {
            self.max_relative_error = other.max_relative_error;
            self.worst_coordinate = other.worst_coordinate;
            self.analytic = other.analytic;
            self.numeric = other.numeric;
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
    pub instances: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_relative_error <= self.tolerance)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_relative_error).fold(0.0, f64::max)
    }

    pub fn group(&self, name: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.group == name)
    }
}

fn random_distances(rng: &mut DeeRng, n: usize) -> DistanceVector {
    DistanceVector::new(Array1::from_shape_simple_fn(n, || 0.1 + 1.8 * uniform01(rng)))
        .expect("distances in range")
}

/// Full Jacobian of the pre-threshold scores w.r.t. the distances.
pub fn check_soft_knn(opts: &GradcheckOptions, rng: &mut DeeRng) -> Result<GroupReport> {
    let params = SoftKnnParams {
        num_neighbors: opts.num_neighbors,
        kernel_width: opts.kernel_width,
        iters: opts.iters,
        threshold: 0.0,
        init: opts.init,
    };
    let n = opts.num_experts;
    let c = random_distances(rng, n);
    let result = soft_knn_from_distances(c.clone(), &params)?;
    let mut analytic = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let mut e = Array1::zeros(n);
        e[i] = 1.0;
        analytic.row_mut(i).assign(&soft_knn_backward_raw(&result, &e)?);
    }
    if opts.inject_sign_flip {
        analytic.mapv_inplace(|v| -v);
    }
    let mut report = GroupReport::new("soft_knn");
    for k in 0..n {
        let mut plus = c.values().clone();
        let mut minus = c.values().clone();
        plus[k] += opts.step;
        minus[k] -= opts.step;
        let gp = soft_knn_from_distances(DistanceVector::new(plus)?, &params)?.gamma_raw;
        let gm = soft_knn_from_distances(DistanceVector::new(minus)?, &params)?.gamma_raw;
        for i in 0..n {
            let numeric = (gp[i] - gm[i]) / (2.0 * opts.step);
            report.record(|| format!("dgamma[{i}]/dc[{k}]"), analytic[[i, k]], numeric);
        }
    }
    Ok(report)
}

fn model_loss(model: &ExpertEnsemble, z: &EmbeddingVector, label: usize) -> Result<f64> {
    let y = one_hot(label, model.cfg.num_classes)?;
    loss(&y, &model.predict(z)?)
}

/// Gradients of the full pipeline (weights, biases, keys) for one random instance.
pub fn check_model(
    opts: &GradcheckOptions,
    rng: &mut DeeRng,
) -> Result<(GroupReport, GroupReport, GroupReport)> {
    let cfg = opts.model_config();
    let mut model = ExpertEnsemble::init(&cfg, rng)?;
    // non-zero biases so their gradient path is exercised away from the origin
    for e in &mut model.experts {
        e.bias.mapv_inplace(|_| 0.3 * standard_normal(rng));
    }
    let z = EmbeddingVector::new(Array1::from_shape_simple_fn(cfg.embedding_dim, || {
        standard_normal(rng)
    }))?;
    let label = (uniform01(rng) * cfg.num_classes as f64) as usize % cfg.num_classes;

    let (_, cache) = model.forward(&z)?;
    let mut grads: GradientSet = model.backward(&cache, &one_hot(label, cfg.num_classes)?)?;
    if opts.inject_sign_flip {
        grads.d_keys.mapv_inplace(|v| -v);
    }

    let h = opts.step;
    let mut dw = GroupReport::new("dW");
    let mut db = GroupReport::new("db");
    let mut dk = GroupReport::new("dkeys");
    let mut probe = model.clone();
    for n in 0..cfg.num_experts {
        for k in 0..cfg.num_classes {
            for m in 0..cfg.embedding_dim {
                let orig = probe.experts[n].weights[[k, m]];
                probe.experts[n].weights[[k, m]] = orig + h;
                let lp = model_loss(&probe, &z, label)?;
                probe.experts[n].weights[[k, m]] = orig - h;
                let lm = model_loss(&probe, &z, label)?;
                probe.experts[n].weights[[k, m]] = orig;
                dw.record(|| format!("W[{n}][{k},{m}]"), grads.d_weights[n][[k, m]], (lp - lm) / (2.0 * h));
            }
            let orig = probe.experts[n].bias[k];
            probe.experts[n].bias[k] = orig + h;
            let lp = model_loss(&probe, &z, label)?;
            probe.experts[n].bias[k] = orig - h;
            let lm = model_loss(&probe, &z, label)?;
            probe.experts[n].bias[k] = orig;
            db.record(|| format!("b[{n}][{k}]"), grads.d_biases[n][k], (lp - lm) / (2.0 * h));
        }
        for m in 0..cfg.embedding_dim {
            let orig = probe.keys[[n, m]];
            probe.keys[[n, m]] = orig + h;
            let lp = model_loss(&probe, &z, label)?;
            probe.keys[[n, m]] = orig - h;
            let lm = model_loss(&probe, &z, label)?;
            probe.keys[[n, m]] = orig;
            dk.record(|| format!("k[{n}][{m}]"), grads.d_keys[[n, m]], (lp - lm) / (2.0 * h));
        }
    }
    Ok((dw, db, dk))
}

/// Runs `opts.instances` soft-KNN and full-model checks.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut soft = GroupReport::new("soft_knn");
    let mut dw = GroupReport::new("dW");
    let mut db = GroupReport::new("db");
    let mut dk = GroupReport::new("dkeys");
    for i in 0..opts.instances {
        let mut rng = seeded_rng(derive_seed(opts.seed, i as u64));
        soft.merge(check_soft_knn(opts, &mut rng)?);
        let (w, b, k) = check_model(opts, &mut rng)?;
        dw.merge(w);
        db.merge(b);
        dk.merge(k);
    }
    Ok(GradcheckReport {
        groups: vec![soft, dw, db, dk],
        tolerance: opts.tolerance,
        instances: opts.instances,
    })
}
