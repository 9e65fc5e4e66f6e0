//! Key-addressed ensemble of single-layer tanh experts.
//!
//! Each expert `n` owns a unit-norm key `k_n` and a classifier
//! `ŷ_n = tanh(W_n z + b_n)`. An input is routed by its cosine distances to
//! the keys, the soft-KNN layer scores the candidates, and the voting layer
//! mixes the selected experts' outputs. The loss is `-yᵀŷ`; [`ExpertEnsemble::backward`]
//! returns exact gradients for every weight, bias and key.

use ndarray::{Array1, Array2, Zip};

use crate::error::{DeeError, Result};
use crate::rng::{standard_normal, DeeRng};
use crate::soft_knn::{cosine_distances, soft_knn_backward, soft_knn_from_distances, DistanceVector, SoftKnnParams, SoftKnnResult};
use crate::types::{ensure_valid, EmbeddingVector, ModelConfig, OneHotLabel, VotingMode};

#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    /// `K × M`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Expert {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            weights: Array2::zeros((num_classes, dim)),
            bias: Array1::zeros(num_classes),
        }
    }

    /// `tanh(W z + b)`
    pub fn forward(&self, z: &Array1<f64>) -> Array1<f64> {
        let mut a = self.weights.dot(z);
        a += &self.bias;
        a.mapv_inplace(f64::tanh);
        a
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// How the experts taking part in a vote are chosen.
#[derive(Debug, Clone)]
pub enum Routing {
    /// Differentiable soft-KNN scores.
    Soft(Box<SoftKnnResult>),
    /// A fixed 0/1 indicator (hard top-κ, or random experts in the ablation).
    /// No gradient flows through the selection itself.
    Fixed(Array1<f64>),
}

/// Everything [`ExpertEnsemble::backward`] needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub z: EmbeddingVector,
    pub c: DistanceVector,
    pub routing: Routing,
    /// Effective scores used in the vote (thresholded for soft routing).
    pub gamma: Array1<f64>,
    /// Per-expert distance weights `s_n` (similarity or raw distance depending on mode).
    pub distance_weights: Array1<f64>,
    /// `γ_n s_n`
    pub voting_weights: Array1<f64>,
    pub denominator: f64,
    /// Expert outputs; `None` for experts outside the vote.
    pub outputs: Vec<Option<Array1<f64>>>,
    pub prediction: Array1<f64>,
    pub mode: VotingMode,
    revision: u64,
}

impl ForwardCache {
    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Sinkhorn row-marginal flag; fixed routings never fail to converge.
    pub fn converged(&self) -> bool {
        match &self.routing {
            Routing::Soft(s) => s.converged(),
            Routing::Fixed(_) => true,
        }
    }
}

/// Gradients mirroring the trainable parameters of an [`ExpertEnsemble`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub d_weights: Vec<Array2<f64>>,
    pub d_biases: Vec<Array1<f64>>,
    pub d_keys: Array2<f64>,
}

impl GradientSet {
    pub fn zeros_like(model: &ExpertEnsemble) -> Self {
        let cfg = &model.cfg;
        Self {
            d_weights: vec![Array2::zeros((cfg.num_classes, cfg.embedding_dim)); cfg.num_experts],
            d_biases: vec![Array1::zeros(cfg.num_classes); cfg.num_experts],
            d_keys: Array2::zeros((cfg.num_experts, cfg.embedding_dim)),
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            *a += b;
        }
        for (a, b) in self.d_biases.iter_mut().zip(&other.d_biases) {
            *a += b;
        }
        self.d_keys += &other.d_keys;
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.d_weights {
            *w *= factor;
        }
        for b in &mut self.d_biases {
            *b *= factor;
        }
        self.d_keys *= factor;
    }

    pub fn clear_keys(&mut self) {
        self.d_keys.fill(0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.d_weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.d_biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
            && self.d_keys.iter().all(|v| v.is_finite())
    }

    pub(crate) fn matches(&self, model: &ExpertEnsemble) -> bool {
        let cfg = &model.cfg;
        self.d_weights.len() == cfg.num_experts
            && self.d_biases.len() == cfg.num_experts
            && self.d_keys.dim() == (cfg.num_experts, cfg.embedding_dim)
            && self.d_weights.iter().all(|w| w.dim() == (cfg.num_classes, cfg.embedding_dim))
            && self.d_biases.iter().all(|b| b.len() == cfg.num_classes)
    }
}

/// The trainable model: `N` keys and `N` experts.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertEnsemble {
    /// `N × M`, unit rows.
    pub keys: Array2<f64>,
    pub experts: Vec<Expert>,
    pub cfg: ModelConfig,
    revision: u64,
}

/// Which experts [`ExpertEnsemble::forward_routed`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertEvaluation {
    /// Only experts with a non-zero score.
    Selected,
    /// Every expert, used to check that skipping is exact.
    All,
}

/// Scales every row of `keys` to unit Euclidean norm. Zero rows are left alone.
pub fn normalize_rows(keys: &mut Array2<f64>) {
    for mut row in keys.outer_iter_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
}

impl ExpertEnsemble {
    /// Keys from a standard normal, row-normalized; weights `N(0, 1/M)`; zero biases.
    pub fn init(cfg: &ModelConfig, rng: &mut DeeRng) -> Result<Self> {
        ensure_valid(cfg)?;
        let (n, m, k) = (cfg.num_experts, cfg.embedding_dim, cfg.num_classes);
        let mut keys = Array2::from_shape_simple_fn((n, m), || standard_normal(rng));
        normalize_rows(&mut keys);
        let scale = 1.0 / (m as f64).sqrt();
        let experts = (0..n)
            .map(|_| Expert {
                weights: Array2::from_shape_simple_fn((k, m), || scale * standard_normal(rng)),
                bias: Array1::zeros(k),
            })
            .collect();
        Ok(Self {
            keys,
            experts,
            cfg: cfg.clone(),
            revision: 0,
        })
    }

    /// Assembles a model from explicit parameters after checking shapes.
    pub fn from_parts(cfg: ModelConfig, keys: Array2<f64>, experts: Vec<Expert>) -> Result<Self> {
        ensure_valid(&cfg)?;
        let (n, m, k) = (cfg.num_experts, cfg.embedding_dim, cfg.num_classes);
        if keys.dim() != (n, m) {
            return Err(DeeError::shape(format!(
                "keys are {:?}, expected ({n}, {m})",
                keys.dim()
            )));
        }
        if experts.len() != n {
            return Err(DeeError::shape(format!("{} experts, expected {n}", experts.len())));
        }
        if let Some(i) = experts
            .iter()
            .position(|e| e.weights.dim() != (k, m) || e.bias.len() != k)
        {
            return Err(DeeError::shape(format!("expert {i} does not have shape ({k}, {m})")));
        }
        Ok(Self {
            keys,
            experts,
            cfg,
            revision: 0,
        })
    }

    /// Incremented by every optimizer step; caches from older revisions are rejected.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub(crate) fn bump_revision(&mut self) {
        self.revision += 1;
    }

    /// Parameters of all classifiers, `N · (K·M + K)`; keys are not counted.
    pub fn classifier_param_count(&self) -> usize {
        self.experts.iter().map(Expert::param_count).sum()
    }

    pub fn key_param_count(&self) -> usize {
        self.keys.len()
    }

    fn check_input(&self, z: &EmbeddingVector) -> Result<()> {
        if z.dim() != self.cfg.embedding_dim {
            return Err(DeeError::shape(format!(
                "embedding has dimension {}, model expects {}",
                z.dim(),
                self.cfg.embedding_dim
            )));
        }
        Ok(())
    }

    /// Soft-routed prediction.
    pub fn forward(&self, z: &EmbeddingVector) -> Result<(Array1<f64>, ForwardCache)> {
        self.forward_routed(z, None, ExpertEvaluation::Selected)
    }

    /// Prediction with an optional fixed selection overriding soft routing.
    pub fn forward_routed(
        &self,
        z: &EmbeddingVector,
        fixed: Option<Array1<f64>>,
        evaluation: ExpertEvaluation,
    ) -> Result<(Array1<f64>, ForwardCache)> {
        self.forward_with(z, fixed, evaluation, self.cfg.voting)
    }

    /// [`Self::forward_routed`] with the voting mode overridden.
    pub fn forward_with(
        &self,
        z: &EmbeddingVector,
        fixed: Option<Array1<f64>>,
        evaluation: ExpertEvaluation,
        mode: VotingMode,
    ) -> Result<(Array1<f64>, ForwardCache)> {
        self.check_input(z)?;
        let c = cosine_distances(z, &self.keys)?;
        let (routing, gamma) = match fixed {
            Some(indicator) => {
                if indicator.len() != self.cfg.num_experts {
                    return Err(DeeError::shape("fixed routing has the wrong length"));
                }
                (Routing::Fixed(indicator.clone()), indicator)
            }
            None => {
                let soft = soft_knn_from_distances(c.clone(), &SoftKnnParams::from(&self.cfg))?;
                let gamma = soft.gamma.clone();
                (Routing::Soft(Box::new(soft)), gamma)
            }
        };

        let outputs: Vec<Option<Array1<f64>>> = self
            .experts
            .iter()
            .zip(gamma.iter())
            .map(|(e, &g)| match evaluation {
                ExpertEvaluation::All => Some(e.forward(z.values())),
                ExpertEvaluation::Selected => (g > 0.0).then(|| e.forward(z.values())),
            })
            .collect();
        let voted = vote_with(&gamma, &c, &outputs, self.cfg.num_classes, mode)?;
        let prediction = voted.prediction.clone();
        Ok((
            prediction.clone(),
            ForwardCache {
                z: z.clone(),
                c,
                routing,
                gamma,
                distance_weights: voted.distance_weights,
                voting_weights: voted.voting_weights,
                denominator: voted.denominator,
                outputs,
                prediction,
                mode,
                revision: self.revision,
            },
        ))
    }

    /// Prediction only.
    pub fn predict(&self, z: &EmbeddingVector) -> Result<Array1<f64>> {
        Ok(self.forward(z)?.0)
    }

    /// Gradients of `-yᵀŷ` for the forward pass recorded in `cache`.
    pub fn backward(&self, cache: &ForwardCache, y: &OneHotLabel) -> Result<GradientSet> {
        if y.num_classes() != self.cfg.num_classes {
            return Err(DeeError::shape(format!(
                "label has {} classes, model has {}",
                y.num_classes(),
                self.cfg.num_classes
            )));
        }
        self.backward_from_output_grad(cache, &y.values().mapv(|v| -v))
    }

    /// Backpropagates an arbitrary gradient `∂L/∂ŷ` through the cached forward pass.
    pub fn backward_from_output_grad(
        &self,
        cache: &ForwardCache,
        d_pred: &Array1<f64>,
    ) -> Result<GradientSet> {
        if cache.revision != self.revision {
            return Err(DeeError::StaleCache {
                cached: cache.revision,
                current: self.revision,
            });
        }
        let cfg = &self.cfg;
        let n = cfg.num_experts;
        if cache.outputs.len() != n || cache.gamma.len() != n || d_pred.len() != cfg.num_classes {
            return Err(DeeError::shape("forward cache does not match the model"));
        }

        let mut grads = GradientSet::zeros_like(self);
        let z = cache.z.values();
        let den = cache.denominator;
        let g_dot_pred = d_pred.dot(&cache.prediction);
        let mut d_gamma = Array1::<f64>::zeros(n);
        let mut d_s = Array1::<f64>::zeros(n);

        for i in 0..n {
            let gamma = cache.gamma[i];
            if gamma > 0.0 {
                let out = cache.outputs[i]
                    .as_ref()
                    .ok_or_else(|| DeeError::shape(format!("output of selected expert {i} missing")))?;
                let w = cache.voting_weights[i];
                let g_dot_out = d_pred.dot(out);
                if w != 0.0 {
                    // ∂L/∂a = (∂L/∂ŷ · w / D) ⊙ (1 - ŷ_n²)
                    let d_a = Zip::from(d_pred)
                        .and(out)
                        .map_collect(|&g, &o| g * w / den * (1.0 - o * o));
                    let d_a2 = d_a.view().insert_axis(ndarray::Axis(1));
                    let z2 = z.view().insert_axis(ndarray::Axis(0));
                    grads.d_weights[i] = d_a2.dot(&z2);
                    grads.d_biases[i] = d_a;
                }
                d_gamma[i] = cache.distance_weights[i] * g_dot_out / den;
                d_s[i] += gamma * g_dot_out / den;
            }
            let in_denominator = match cache.mode {
                VotingMode::Similarity => gamma > 0.0,
                VotingMode::Literal => true,
            };
            if in_denominator {
                d_s[i] -= g_dot_pred / den;
            }
        }

        let c = cache.c.values();
        let mut d_c = Array1::from_shape_fn(n, |i| match cache.mode {
            VotingMode::Similarity => {
                if 1.0 - c[i] > 0.0 {
                    -d_s[i]
                } else {
                    0.0
                }
            }
            VotingMode::Literal => d_s[i],
        });
        if let Routing::Soft(soft) = &cache.routing {
            d_c += &soft_knn_backward(soft, &d_gamma)?;
        }

        // c_n = 1 - <z, k_n> / (|z| |k_n|)
        let z_norm = cache.z.norm();
        for (i, key) in self.keys.outer_iter().enumerate() {
            if d_c[i] == 0.0 {
                continue;
            }
            let k_norm = key.dot(&key).sqrt();
            let cos = key.dot(z) / (z_norm * k_norm);
            let mut row = grads.d_keys.row_mut(i);
            Zip::from(&mut row).and(z).and(key).for_each(|g, &zv, &kv| {
                *g = -d_c[i] * (zv / (z_norm * k_norm) - cos * kv / (k_norm * k_norm));
            });
        }
        Ok(grads)
    }
}

/// Voting weights, denominator and the mixed prediction.
#[derive(Debug, Clone)]
pub(crate) struct Vote {
    pub distance_weights: Array1<f64>,
    pub voting_weights: Array1<f64>,
    pub denominator: f64,
    pub prediction: Array1<f64>,
}

pub(crate) fn vote_with(
    gamma: &Array1<f64>,
    c: &DistanceVector,
    outputs: &[Option<Array1<f64>>],
    num_classes: usize,
    mode: VotingMode,
) -> Result<Vote> {
    let n = gamma.len();
    if c.len() != n || outputs.len() != n {
        return Err(DeeError::shape("gamma, distances and outputs differ in length"));
    }
    let cv = c.values();
    let (distance_weights, denominator) = match mode {
        VotingMode::Similarity => {
            let s = cv.mapv(|ci| (1.0 - ci).max(0.0));
            let den = (0..n).filter(|&i| gamma[i] > 0.0).map(|i| s[i]).sum::<f64>();
            (s, den)
        }
        VotingMode::Literal => (cv.clone(), cv.sum()),
    };
    if !(denominator > 0.0) {
        return Err(DeeError::DegenerateRouting(format!(
            "voting denominator is {denominator}: no selected expert carries weight"
        )));
    }
    let voting_weights = gamma * &distance_weights;
    let mut prediction = Array1::zeros(num_classes);
    for i in 0..n {
        let w = voting_weights[i];
        if w == 0.0 {
            continue;
        }
        let out = outputs[i]
            .as_ref()
            .ok_or_else(|| DeeError::shape(format!("output of selected expert {i} missing")))?;
        prediction.scaled_add(w / denominator, out);
    }
    Ok(Vote {
        distance_weights,
        voting_weights,
        denominator,
        prediction,
    })
}

/// Weighted vote over expert outputs.
pub fn vote(
    gamma: &Array1<f64>,
    c: &DistanceVector,
    outputs: &[Array1<f64>],
    mode: VotingMode,
) -> Result<Array1<f64>> {
    let k = outputs.first().map_or(0, Array1::len);
    let wrapped: Vec<Option<Array1<f64>>> = outputs.iter().cloned().map(Some).collect();
    Ok(vote_with(gamma, c, &wrapped, k, mode)?.prediction)
}

/// `-yᵀŷ`
pub fn loss(y: &OneHotLabel, prediction: &Array1<f64>) -> Result<f64> {
    if y.num_classes() != prediction.len() {
        return Err(DeeError::shape(format!(
            "label has {} classes, prediction has {}",
            y.num_classes(),
            prediction.len()
        )));
    }
    Ok(-y.values().dot(prediction))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    use crate::rng::seeded_rng;
    use crate::types::one_hot;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            num_experts: 8,
            num_neighbors: 3,
            embedding_dim: 5,
            num_classes: 3,
            kernel_width: 0.05,
            bregman_iters: 50,
            ..ModelConfig::default()
        }
    }

    fn random_z(rng: &mut DeeRng, m: usize) -> EmbeddingVector {
        EmbeddingVector::new(Array1::from_shape_simple_fn(m, || standard_normal(rng))).unwrap()
    }

    #[test]
    fn init_normalizes_keys_and_zeroes_biases() {
        let cfg = small_cfg();
        let model = ExpertEnsemble::init(&cfg, &mut seeded_rng(1)).unwrap();
        for row in model.keys.outer_iter() {
            assert_abs_diff_eq!(row.dot(&row).sqrt(), 1.0, epsilon = 1e-9);
        }
        assert!(model.experts.iter().all(|e| e.bias.iter().all(|&b| b == 0.0)));
        assert_eq!(model, ExpertEnsemble::init(&cfg, &mut seeded_rng(1)).unwrap());
        assert_ne!(model, ExpertEnsemble::init(&cfg, &mut seeded_rng(2)).unwrap());
    }

    #[test]
    fn init_weight_variance_is_fan_in() {
        let cfg = ModelConfig {
            num_experts: 128,
            num_neighbors: 16,
            embedding_dim: 64,
            num_classes: 10,
            ..ModelConfig::default()
        };
        let model = ExpertEnsemble::init(&cfg, &mut seeded_rng(9)).unwrap();
        let all: Vec<f64> = model.experts.iter().flat_map(|e| e.weights.iter().copied()).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (all.len() - 1) as f64;
        let target = 1.0 / 64.0;
        assert!((var - target).abs() <= 0.2 * target, "variance {var}");
    }

    #[test]
    fn expert_forward_examples() {
        let zero = Expert::zeros(2, 3);
        assert_eq!(zero.forward(&array![1.0, 2.0, 3.0]), array![0.0, 0.0]);
        let biased = Expert {
            weights: Array2::zeros((2, 3)),
            bias: array![10.0, -10.0],
        };
        let out = biased.forward(&array![1.0, 2.0, 3.0]);
        assert_abs_diff_eq!(out[0], 1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(out[1], -1.0, epsilon = 1e-4);
        let identity = Expert {
            weights: Array2::eye(3),
            bias: Array1::zeros(3),
        };
        assert_eq!(identity.forward(&array![0.5, 0.0, 0.0]), array![0.5f64.tanh(), 0.0, 0.0]);
    }

    #[test]
    fn vote_examples() {
        let single = vote(
            &array![1.0],
            &DistanceVector::from_vec(vec![0.3]).unwrap(),
            &[array![0.2, -0.4]],
            VotingMode::Similarity,
        )
        .unwrap();
        assert_abs_diff_eq!(single[0], 0.2, epsilon = 1e-15);
        let literal = vote(
            &array![1.0],
            &DistanceVector::from_vec(vec![0.3]).unwrap(),
            &[array![0.2, -0.4]],
            VotingMode::Literal,
        )
        .unwrap();
        assert_abs_diff_eq!(literal[1], -0.4, epsilon = 1e-15);

        // similarity 0.8 and 0.3
        let c = DistanceVector::from_vec(vec![0.2, 0.7]).unwrap();
        let o1 = array![0.6, -0.1];
        let o2 = array![-0.9, 0.4];
        let y = vote(&array![1.0, 0.0], &c, &[o1.clone(), o2], VotingMode::Similarity).unwrap();
        assert_abs_diff_eq!(y[0], o1[0], epsilon = 1e-15);
        assert_abs_diff_eq!(y[1], o1[1], epsilon = 1e-15);

        let c = DistanceVector::from_vec(vec![0.5, 0.5]).unwrap();
        let y = vote(&array![1.0, 1.0], &c, &[array![1.0, 0.0], array![0.0, 1.0]], VotingMode::Similarity)
            .unwrap();
        assert_eq!(y, array![0.5, 0.5]);
    }

    #[test]
    fn vote_with_no_weight_is_degenerate() {
        let c = DistanceVector::from_vec(vec![1.5, 0.2]).unwrap();
        let r = vote(&array![1.0, 0.0], &c, &[array![1.0], array![1.0]], VotingMode::Similarity);
        assert!(matches!(r, Err(DeeError::DegenerateRouting(_))));
    }

    #[test]
    fn loss_examples() {
        let y = one_hot(1, 3).unwrap();
        assert_abs_diff_eq!(loss(&y, &array![0.1, 0.9, 0.3]).unwrap(), -0.9);
        assert_eq!(loss(&y, &Array1::zeros(3)).unwrap(), 0.0);
        assert_eq!(loss(&one_hot(0, 2).unwrap(), &array![-1.0, -1.0]).unwrap(), 1.0);
    }

    #[test]
    fn zero_experts_predict_zero() {
        let cfg = small_cfg();
        let mut model = ExpertEnsemble::init(&cfg, &mut seeded_rng(4)).unwrap();
        for e in &mut model.experts {
            e.weights.fill(0.0);
        }
        let z = random_z(&mut seeded_rng(5), 5);
        assert!(model.predict(&z).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn skipping_unselected_experts_is_exact() {
        let cfg = small_cfg();
        let model = ExpertEnsemble::init(&cfg, &mut seeded_rng(6)).unwrap();
        let mut rng = seeded_rng(7);
        for _ in 0..20 {
            let z = random_z(&mut rng, 5);
            let (fast, cache) = model.forward_routed(&z, None, ExpertEvaluation::Selected).unwrap();
            let (full, _) = model.forward_routed(&z, None, ExpertEvaluation::All).unwrap();
            assert_eq!(fast, full);
            assert!(cache.outputs.iter().zip(cache.gamma.iter()).all(|(o, &g)| o.is_some() == (g > 0.0)));
        }
    }

    #[test]
    fn prediction_is_bounded() {
        let cfg = small_cfg();
        let model = ExpertEnsemble::init(&cfg, &mut seeded_rng(8)).unwrap();
        let mut rng = seeded_rng(9);
        for _ in 0..50 {
            let y = model.predict(&random_z(&mut rng, 5)).unwrap();
            assert!(y.iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn unselected_expert_gets_no_gradient() {
        let cfg = small_cfg();
        let model = ExpertEnsemble::init(&cfg, &mut seeded_rng(10)).unwrap();
        let z = random_z(&mut seeded_rng(11), 5);
        let (_, cache) = model.forward(&z).unwrap();
        let g = model.backward(&cache, &one_hot(1, 3).unwrap()).unwrap();
        let mut seen_unselected = false;
        for i in 0..8 {
            if cache.voting_weights[i] == 0.0 {
                seen_unselected = true;
                assert!(g.d_weights[i].iter().all(|&v| v == 0.0));
                assert!(g.d_biases[i].iter().all(|&v| v == 0.0));
            }
        }
        assert!(seen_unselected);
    }

    #[test]
    fn gradient_is_linear_in_output_gradient() {
        let cfg = small_cfg();
        let model = ExpertEnsemble::init(&cfg, &mut seeded_rng(12)).unwrap();
        let z = random_z(&mut seeded_rng(13), 5);
        let (_, cache) = model.forward(&z).unwrap();
        let y = one_hot(2, 3).unwrap();
        let once = model.backward(&cache, &y).unwrap();
        let twice = model
            .backward_from_output_grad(&cache, &y.values().mapv(|v| -2.0 * v))
            .unwrap();
        let mut doubled = once.clone();
        doubled.scale(2.0);
        for (a, b) in doubled.d_weights.iter().zip(&twice.d_weights) {
            Zip::from(a).and(b).for_each(|x, y| assert_abs_diff_eq!(x, y, epsilon = 1e-14));
        }
        Zip::from(&doubled.d_keys)
            .and(&twice.d_keys)
            .for_each(|x, y| assert_abs_diff_eq!(x, y, epsilon = 1e-14));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let cfg = small_cfg();
        let mut model = ExpertEnsemble::init(&cfg, &mut seeded_rng(14)).unwrap();
        let z = random_z(&mut seeded_rng(15), 5);
        let (_, cache) = model.forward(&z).unwrap();
        model.bump_revision();
        assert!(matches!(
            model.backward(&cache, &one_hot(0, 3).unwrap()),
            Err(DeeError::StaleCache { cached: 0, current: 1 })
        ));
    }

    #[test]
    fn far_key_does_not_move_prediction() {
        let cfg = small_cfg();
        let model = ExpertEnsemble::init(&cfg, &mut seeded_rng(16)).unwrap();
        let z = random_z(&mut seeded_rng(17), 5);
        let (pred, cache) = model.forward(&z).unwrap();
        let far = (0..8)
            .filter(|&i| cache.gamma[i] == 0.0)
            .max_by(|&a, &b| cache.c.values()[a].total_cmp(&cache.c.values()[b]))
            .unwrap();
        let mut moved = model.clone();
        let mut row = moved.keys.row_mut(far);
        row[0] += 1e-7;
        let (pred2, cache2) = moved.forward(&z).unwrap();
        if cache2.gamma[far] == 0.0 {
            for (a, b) in pred.iter().zip(pred2.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let model = ExpertEnsemble::init(&small_cfg(), &mut seeded_rng(18)).unwrap();
        let z = EmbeddingVector::from_vec(vec![1.0; 4]).unwrap();
        assert!(matches!(model.forward(&z), Err(DeeError::ShapeMismatch(_))));
    }
}
