//! Task streams, the online training loop, evaluation, the random-selection
//! ablation and the ensemble-size sweep.

use std::str::FromStr;
use std::time::Instant;

use ndarray::Array1;
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{ee_hard_backward, ee_hard_forward, naive_train_step, NaiveModel};
use crate::data_io::EmbeddedDataset;
use crate::ensemble::{ExpertEnsemble, ExpertEvaluation, ForwardCache, GradientSet};
use crate::error::{DeeError, Result};
use crate::optimizer::{step, OptimizerConfig};
use crate::rng::{derive_seed, seeded_rng, uniform01, DeeRng};
use crate::runlog::{RunLog, SummaryRecord, TaskRecord};
use crate::types::{argmax, ensure_valid, one_hot, EmbeddingVector, LabeledExample, ModelConfig};

/// Seed streams derived from a run seed.
const STREAM_SEED: u64 = 1;
const INIT_SEED: u64 = 2;
const TRAIN_SEED: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "class-inc")]
    ClassIncremental,
    #[serde(rename = "domain-inc")]
    DomainIncremental,
}

impl FromStr for Scenario {
    type Err = DeeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class-inc" => Ok(Self::ClassIncremental),
            "domain-inc" => Ok(Self::DomainIncremental),
            other => Err(DeeError::config(format!("unknown scenario `{other}` (class-inc | domain-inc)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    /// Sorted distinct labels present in the task.
    pub labels: Vec<usize>,
    pub batches: Vec<Vec<LabeledExample>>,
}

impl Task {
    fn new(examples: Vec<LabeledExample>, batch_size: usize) -> Self {
        let mut labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
        labels.sort_unstable();
        labels.dedup();
        let batches = examples.chunks(batch_size).map(<[LabeledExample]>::to_vec).collect();
        Self { labels, batches }
    }

    pub fn num_examples(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub scenario: Scenario,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn empty(scenario: Scenario) -> Self {
        Self {
            scenario,
            tasks: Vec::new(),
        }
    }

    pub fn num_examples(&self) -> usize {
        self.tasks.iter().map(Task::num_examples).sum()
    }

    /// Hex SHA-256 over scenario, task and batch boundaries, labels and embedding bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update([self.scenario as u8]);
        for task in &self.tasks {
            h.update(b"T");
            for batch in &task.batches {
                h.update(b"B");
                for ex in batch {
                    h.update((ex.label as u64).to_le_bytes());
                    for v in ex.embedding.values() {
                        h.update(v.to_bits().to_le_bytes());
                    }
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// Class-incremental streams must keep every task single-label and label sets disjoint.
    pub fn validate(&self) -> Result<()> {
        if self.scenario != Scenario::ClassIncremental {
            return Ok(());
        }
        let mut seen = std::collections::BTreeSet::new();
        for (t, task) in self.tasks.iter().enumerate() {
            if task.labels.len() != 1 {
                return Err(DeeError::Stream(format!("task {t} has labels {:?}", task.labels)));
            }
            if !seen.insert(task.labels[0]) {
                return Err(DeeError::Stream(format!("label {} appears in two tasks", task.labels[0])));
            }
            for (b, batch) in task.batches.iter().enumerate() {
                if batch.iter().any(|e| e.label != task.labels[0]) {
                    return Err(DeeError::Stream(format!("batch {b} of task {t} interleaves labels")));
                }
            }
        }
        Ok(())
    }
}

/// All declared classes in ascending order, optionally shuffled by `rng`.
pub fn class_order(data: &EmbeddedDataset, shuffle: bool, rng: &mut DeeRng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..data.num_classes).collect();
    if shuffle {
        order.shuffle(rng);
    }
    order
}

/// One task per class in `order`, examples shuffled within each class.
pub fn build_class_incremental(
    data: &EmbeddedDataset,
    batch_size: usize,
    order: &[usize],
    rng: &mut DeeRng,
) -> Result<TaskStream> {
    if data.is_empty() {
        return Err(DeeError::Stream("dataset is empty".into()));
    }
    if batch_size == 0 {
        return Err(DeeError::config("batch_size ≥ 1 required"));
    }
    let counts = data.class_counts();
    let mut in_order = vec![false; data.num_classes];
    for &c in order {
        if c >= data.num_classes {
            return Err(DeeError::Stream(format!("class {c} in order is not declared")));
        }
        if in_order[c] {
            return Err(DeeError::Stream(format!("class {c} listed twice in order")));
        }
        if counts[c] == 0 {
            return Err(DeeError::Stream(format!("class {c} has no examples")));
        }
        in_order[c] = true;
    }
    if let Some(c) = (0..data.num_classes).find(|&c| counts[c] > 0 && !in_order[c]) {
        return Err(DeeError::Stream(format!("class {c} is present but missing from the order")));
    }
    let mut tasks = Vec::with_capacity(order.len());
    for &c in order {
        let mut examples: Vec<LabeledExample> = data.examples.iter().filter(|e| e.label == c).cloned().collect();
        examples.shuffle(rng);
        tasks.push(Task::new(examples, batch_size));
    }
    Ok(TaskStream {
        scenario: Scenario::ClassIncremental,
        tasks,
    })
}

/// Globally shuffled data cut into `num_phases` near-equal tasks of mixed classes.
pub fn build_domain_incremental(
    data: &EmbeddedDataset,
    batch_size: usize,
    num_phases: usize,
    rng: &mut DeeRng,
) -> Result<TaskStream> {
    if num_phases == 0 {
        return Err(DeeError::config("num_phases ≥ 1 required"));
    }
    if batch_size == 0 {
        return Err(DeeError::config("batch_size ≥ 1 required"));
    }
    let mut examples = data.examples.clone();
    examples.shuffle(rng);
    let n = examples.len();
    let mut tasks = Vec::with_capacity(num_phases);
    let mut rest = examples.into_iter();
    for p in 0..num_phases {
        let size = n / num_phases + usize::from(p < n % num_phases);
        tasks.push(Task::new(rest.by_ref().take(size).collect(), batch_size));
    }
    Ok(TaskStream {
        scenario: Scenario::DomainIncremental,
        tasks,
    })
}

/// Counters for one training batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchStats {
    pub examples: usize,
    /// Soft-routed forward passes whose transport solve missed the marginals.
    pub nonconverged: usize,
    /// Examples without any weighted expert; they contribute no gradient.
    pub skipped: usize,
}

impl BatchStats {
    fn add(&mut self, o: BatchStats) {
        self.examples += o.examples;
        self.nonconverged += o.nonconverged;
        self.skipped += o.skipped;
    }
}

/// Anything the stream loop can train and evaluate.
pub trait Learner: Sync {
    fn num_classes(&self) -> usize;
    fn embedding_dim(&self) -> usize;
    /// One update from `batch`. With probability `ablation_p` per example the
    /// routing is replaced by κ uniformly random experts.
    fn train_batch(&mut self, batch: &[LabeledExample], ablation_p: f64, rng: &mut DeeRng) -> Result<BatchStats>;
    /// Class scores, or `None` when the model cannot vote for this input.
    fn scores(&self, z: &EmbeddingVector) -> Result<Option<Array1<f64>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Differentiable soft κ-NN routing with trained keys.
    Soft,
    /// Hard top-κ routing, frozen keys.
    Hard,
}

#[derive(Debug, Clone)]
pub struct EnsembleLearner {
    pub model: ExpertEnsemble,
    pub opt: OptimizerConfig,
    pub selection: Selection,
}

fn degenerate<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(DeeError::DegenerateRouting(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

impl EnsembleLearner {
    /// Hard selection freezes keys, so key decay and renormalization are switched off for it.
    pub fn new(model: ExpertEnsemble, mut opt: OptimizerConfig, selection: Selection) -> Result<Self> {
        opt.validate()?;
        if selection == Selection::Hard {
            opt.renormalize_keys = false;
            opt.decay_keys = false;
        }
        Ok(Self { model, opt, selection })
    }

    fn forward(&self, z: &EmbeddingVector, fixed: Option<Array1<f64>>) -> Result<Option<(Array1<f64>, ForwardCache)>> {
        degenerate(match (fixed, self.selection) {
            (Some(f), Selection::Soft) => self.model.forward_routed(z, Some(f), ExpertEvaluation::Selected),
            (Some(f), Selection::Hard) => {
                self.model
                    .forward_with(z, Some(f), ExpertEvaluation::Selected, crate::types::VotingMode::Similarity)
            }
            (None, Selection::Soft) => self.model.forward(z),
            (None, Selection::Hard) => ee_hard_forward(&self.model, z),
        })
    }

    fn example_gradient(
        &self,
        ex: &LabeledExample,
        fixed: Option<Array1<f64>>,
    ) -> Result<(Option<GradientSet>, BatchStats)> {
        let mut stats = BatchStats {
            examples: 1,
            ..BatchStats::default()
        };
        let Some((_, cache)) = self.forward(&ex.embedding, fixed)? else {
            stats.skipped = 1;
            return Ok((None, stats));
        };
        if !cache.converged() {
            stats.nonconverged = 1;
        }
        let y = one_hot(ex.label, self.model.cfg.num_classes)?;
        let grads = match self.selection {
            Selection::Soft => self.model.backward(&cache, &y)?,
            Selection::Hard => ee_hard_backward(&self.model, &cache, &y)?,
        };
        Ok((Some(grads), stats))
    }
}

impl Learner for EnsembleLearner {
    fn num_classes(&self) -> usize {
        self.model.cfg.num_classes
    }

    fn embedding_dim(&self) -> usize {
        self.model.cfg.embedding_dim
    }

    fn train_batch(&mut self, batch: &[LabeledExample], ablation_p: f64, rng: &mut DeeRng) -> Result<BatchStats> {
        let (n, kappa) = (self.model.cfg.num_experts, self.model.cfg.num_neighbors);
        // random draws happen up front so the parallel part is order independent
        let routes: Vec<Option<Array1<f64>>> = batch
            .iter()
            .map(|_| {
                (ablation_p > 0.0 && uniform01(rng) < ablation_p).then(|| {
                    let mut ind = Array1::zeros(n);
                    for i in index::sample(rng, n, kappa) {
                        ind[i] = 1.0;
                    }
                    ind
                })
            })
            .collect();
        let results: Vec<(Option<GradientSet>, BatchStats)> = batch
            .par_iter()
            .zip(routes)
            .map(|(ex, fixed)| self.example_gradient(ex, fixed))
            .collect::<Result<_>>()?;
        let mut total = GradientSet::zeros_like(&self.model);
        let mut stats = BatchStats::default();
        for (g, s) in results {
            stats.add(s);
            if let Some(g) = g {
                total.add_assign(&g);
            }
        }
        if stats.examples > stats.skipped {
            total.scale(1.0 / batch.len() as f64);
            if !total.is_finite() {
                return Err(DeeError::NumericalDegeneracy {
                    iteration: 0,
                    detail: "non-finite batch gradient".into(),
                });
            }
            step(&mut self.model, &total, &self.opt)?;
        }
        Ok(stats)
    }

    fn scores(&self, z: &EmbeddingVector) -> Result<Option<Array1<f64>>> {
        Ok(self.forward(z, None)?.map(|(p, _)| p))
    }
}

impl Learner for NaiveModel {
    fn num_classes(&self) -> usize {
        NaiveModel::num_classes(self)
    }

    fn embedding_dim(&self) -> usize {
        self.dim()
    }

    fn train_batch(&mut self, batch: &[LabeledExample], _ablation_p: f64, _rng: &mut DeeRng) -> Result<BatchStats> {
        naive_train_step(self, batch)?;
        Ok(BatchStats {
            examples: batch.len(),
            ..BatchStats::default()
        })
    }

    fn scores(&self, z: &EmbeddingVector) -> Result<Option<Array1<f64>>> {
        Ok(Some(self.logits(z)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes absent from the test set.
    pub per_class: Vec<Option<f64>>,
    pub predictions: Vec<Option<usize>>,
}

/// Argmax accuracy; inputs the model cannot vote on count as wrong.
pub fn evaluate<L: Learner + ?Sized>(learner: &L, test: &[LabeledExample]) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(DeeError::config("evaluation needs a non-empty test set"));
    }
    let k = learner.num_classes();
    let predictions: Vec<Option<usize>> = test
        .par_iter()
        .map(|ex| Ok(learner.scores(&ex.embedding)?.map(|s| argmax(s.as_slice().expect("contiguous")))))
        .collect::<Result<_>>()?;
    let mut correct = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (ex, p) in test.iter().zip(&predictions) {
        if ex.label >= k {
            return Err(DeeError::config(format!("test label {} out of range for {k} classes", ex.label)));
        }
        total[ex.label] += 1;
        if *p == Some(ex.label) {
            correct[ex.label] += 1;
        }
    }
    let per_class = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
        .collect();
    Ok(Evaluation {
        accuracy: correct.iter().sum::<usize>() as f64 / test.len() as f64,
        per_class,
        predictions,
    })
}

/// Result of [`train_stream`] before it is wrapped into a [`RunLog`].
#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutcome {
    pub tasks: Vec<TaskRecord>,
    pub final_evaluation: Evaluation,
    pub nonconvergence_rate: f64,
}

/// Single pass over the tasks, evaluating on `test` after each one.
pub fn train_stream<L: Learner + ?Sized>(
    learner: &mut L,
    stream: &TaskStream,
    test: &[LabeledExample],
    ablation_p: f64,
    rng: &mut DeeRng,
    timings: bool,
) -> Result<StreamOutcome> {
    if !(0.0..=1.0).contains(&ablation_p) {
        return Err(DeeError::config(format!("ablation probability must lie in [0, 1], got {ablation_p}")));
    }
    stream.validate()?;
    let dim = learner.embedding_dim();
    for ex in stream.tasks.iter().flat_map(|t| t.batches.iter().flatten()).chain(test) {
        if ex.embedding.dim() != dim {
            return Err(DeeError::config(format!(
                "example of dimension {} fed to a model of dimension {dim}",
                ex.embedding.dim()
            )));
        }
        if ex.label >= learner.num_classes() {
            return Err(DeeError::config(format!(
                "label {} out of range for a model with {} classes",
                ex.label,
                learner.num_classes()
            )));
        }
    }
    let mut tasks = Vec::with_capacity(stream.tasks.len());
    let mut overall = BatchStats::default();
    for (t, task) in stream.tasks.iter().enumerate() {
        let start = Instant::now();
        let mut stats = BatchStats::default();
        for batch in &task.batches {
            stats.add(learner.train_batch(batch, ablation_p, rng)?);
        }
        let eval = evaluate(learner, test)?;
        overall.add(stats);
        tasks.push(TaskRecord {
            task_index: t,
            labels: task.labels.clone(),
            train_examples: stats.examples,
            accuracy: eval.accuracy,
            per_class: eval.per_class,
            nonconvergence_rate: rate(stats.nonconverged, stats.examples),
            skipped: stats.skipped,
            elapsed_s: timings.then(|| start.elapsed().as_secs_f64()),
        });
    }
    Ok(StreamOutcome {
        tasks,
        final_evaluation: evaluate(learner, test)?,
        nonconvergence_rate: rate(overall.nonconverged, overall.examples),
    })
}

fn rate(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerKind {
    Dee,
    EeHard,
    Naive,
}

impl FromStr for LearnerKind {
    type Err = DeeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dee" => Ok(Self::Dee),
            "ee-hard" => Ok(Self::EeHard),
            "naive" => Ok(Self::Naive),
            other => Err(DeeError::config(format!("unknown model `{other}` (dee | ee-hard | naive)"))),
        }
    }
}

/// Everything that determines a run; echoed as the first log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub learner: LearnerKind,
    pub scenario: Scenario,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub naive_learning_rate: f64,
    pub ablation_p: f64,
    /// Tasks in the domain-incremental scenario.
    pub num_phases: usize,
    pub shuffle_classes: bool,
    pub timings: bool,
}

impl RunConfig {
    pub fn new(learner: LearnerKind, model: ModelConfig) -> Self {
        Self {
            learner,
            scenario: Scenario::ClassIncremental,
            optimizer: OptimizerConfig::from(&model),
            model,
            naive_learning_rate: 0.05,
            ablation_p: 0.0,
            num_phases: 5,
            shuffle_classes: false,
            timings: false,
        }
    }

    pub fn seed(&self) -> u64 {
        self.model.seed
    }

    /// Same configuration with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.model.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        ensure_valid(&self.model)?;
        self.optimizer.validate()?;
        if !(0.0..=1.0).contains(&self.ablation_p) {
            return Err(DeeError::config(format!("ablation probability must lie in [0, 1], got {}", self.ablation_p)));
        }
        if !(self.naive_learning_rate >= 0.0 && self.naive_learning_rate.is_finite()) {
            return Err(DeeError::config("naive learning rate must be non-negative"));
        }
        if self.num_phases == 0 {
            return Err(DeeError::config("num_phases ≥ 1 required"));
        }
        Ok(())
    }
}

/// The stream a run with `cfg` trains on; identical for every learner kind.
pub fn build_stream(cfg: &RunConfig, train: &EmbeddedDataset) -> Result<TaskStream> {
    let mut rng = seeded_rng(derive_seed(cfg.seed(), STREAM_SEED));
    match cfg.scenario {
        Scenario::ClassIncremental => {
            let order = class_order(train, cfg.shuffle_classes, &mut rng);
            build_class_incremental(train, cfg.model.batch_size, &order, &mut rng)
        }
        Scenario::DomainIncremental => build_domain_incremental(train, cfg.model.batch_size, cfg.num_phases, &mut rng),
    }
}

/// A freshly initialized learner of any kind.
#[derive(Debug, Clone)]
pub enum AnyLearner {
    Ensemble(EnsembleLearner),
    Naive(NaiveModel),
}

impl AnyLearner {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let mut rng = seeded_rng(derive_seed(cfg.seed(), INIT_SEED));
        Ok(match cfg.learner {
            LearnerKind::Dee | LearnerKind::EeHard => {
                let model = ExpertEnsemble::init(&cfg.model, &mut rng)?;
                let selection = if cfg.learner == LearnerKind::Dee { Selection::Soft } else { Selection::Hard };
                AnyLearner::Ensemble(EnsembleLearner::new(model, cfg.optimizer, selection)?)
            }
            LearnerKind::Naive => AnyLearner::Naive(NaiveModel::new(
                cfg.model.num_classes,
                cfg.model.embedding_dim,
                cfg.naive_learning_rate,
            )?),
        })
    }

    pub fn ensemble(&self) -> Option<&ExpertEnsemble> {
        match self {
            AnyLearner::Ensemble(e) => Some(&e.model),
            AnyLearner::Naive(_) => None,
        }
    }
}

impl Learner for AnyLearner {
    fn num_classes(&self) -> usize {
        match self {
            AnyLearner::Ensemble(l) => l.num_classes(),
            AnyLearner::Naive(l) => Learner::num_classes(l),
        }
    }

    fn embedding_dim(&self) -> usize {
        match self {
            AnyLearner::Ensemble(l) => l.embedding_dim(),
            AnyLearner::Naive(l) => Learner::embedding_dim(l),
        }
    }

    fn train_batch(&mut self, batch: &[LabeledExample], ablation_p: f64, rng: &mut DeeRng) -> Result<BatchStats> {
        match self {
            AnyLearner::Ensemble(l) => l.train_batch(batch, ablation_p, rng),
            AnyLearner::Naive(l) => l.train_batch(batch, ablation_p, rng),
        }
    }

    fn scores(&self, z: &EmbeddingVector) -> Result<Option<Array1<f64>>> {
        match self {
            AnyLearner::Ensemble(l) => l.scores(z),
            AnyLearner::Naive(l) => l.scores(z),
        }
    }
}

/// A finished run: its log, the trained learner and the final predictions.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub log: RunLog,
    pub learner: AnyLearner,
    pub final_evaluation: Evaluation,
}

/// Builds the stream, initializes the learner and trains, all from `cfg`'s seed.
pub fn run_experiment(cfg: &RunConfig, train: &EmbeddedDataset, test: &EmbeddedDataset) -> Result<RunResult> {
    cfg.validate()?;
    if train.embedding_dim != cfg.model.embedding_dim || test.embedding_dim != cfg.model.embedding_dim {
        return Err(DeeError::config(format!(
            "data dimension {} does not match M = {}",
            train.embedding_dim, cfg.model.embedding_dim
        )));
    }
    let stream = build_stream(cfg, train)?;
    let mut learner = AnyLearner::init(cfg)?;
    let mut rng = seeded_rng(derive_seed(cfg.seed(), TRAIN_SEED));
    let start = Instant::now();
    let outcome = train_stream(&mut learner, &stream, &test.examples, cfg.ablation_p, &mut rng, cfg.timings)?;
    let summary = SummaryRecord {
        seed: cfg.seed(),
        tasks: outcome.tasks.len(),
        final_accuracy: outcome.final_evaluation.accuracy,
        per_class: outcome.final_evaluation.per_class.clone(),
        nonconvergence_rate: outcome.nonconvergence_rate,
        stream_fingerprint: stream.fingerprint(),
        elapsed_s: cfg.timings.then(|| start.elapsed().as_secs_f64()),
    };
    Ok(RunResult {
        log: RunLog {
            config: cfg.clone(),
            tasks: outcome.tasks,
            summary,
        },
        learner,
        final_evaluation: outcome.final_evaluation,
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seeds used for `repeats` runs derived from `base`.
pub fn repeat_seeds(base: u64, repeats: usize) -> Vec<u64> {
    (0..repeats as u64).map(|r| derive_seed(base, 1000 + r)).collect()
}

/// Final accuracies of `repeats` independent runs, in seed order.
pub fn repeated_accuracies(cfg: &RunConfig, train: &EmbeddedDataset, test: &EmbeddedDataset, repeats: usize) -> Result<(Vec<u64>, Vec<f64>)> {
    let seeds = repeat_seeds(cfg.seed(), repeats);
    let accs = seeds
        .par_iter()
        .map(|&s| Ok(run_experiment(&cfg.with_seed(s), train, test)?.log.summary.final_accuracy))
        .collect::<Result<Vec<_>>>()?;
    Ok((seeds, accs))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub num_experts: usize,
    pub num_neighbors: usize,
    /// `N · (K·M + K)`.
    pub classifier_params: usize,
    /// `N · M`, reported apart from the classifier count.
    pub key_params: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub seeds: Vec<u64>,
}

/// Default neighbor count for a sweep size: `min(N/4, 64)`, at least 1.
pub fn sweep_neighbors(num_experts: usize) -> usize {
    (num_experts / 4).clamp(1, 64)
}

pub fn sweep_ensemble_size(
    sizes: &[usize],
    base: &RunConfig,
    train: &EmbeddedDataset,
    test: &EmbeddedDataset,
    repeats: usize,
) -> Result<Vec<SweepRow>> {
    if sizes.is_empty() || repeats == 0 {
        return Err(DeeError::config("sweep needs at least one size and one repeat"));
    }
    sizes
        .iter()
        .map(|&n| {
            let mut cfg = base.clone();
            cfg.model.num_experts = n;
            cfg.model.num_neighbors = sweep_neighbors(n);
            cfg.validate()?;
            let (seeds, accs) = repeated_accuracies(&cfg, train, test, repeats)?;
            let (mean, std) = mean_std(&accs);
            let (k, m) = (cfg.model.num_classes, cfg.model.embedding_dim);
            Ok(SweepRow {
                num_experts: n,
                num_neighbors: cfg.model.num_neighbors,
                classifier_params: n * (k * m + k),
                key_params: n * m,
                mean_accuracy: mean,
                std_accuracy: std,
                seeds,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub p: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub seeds: Vec<u64>,
}

/// Random-expert ablation over a grid of probabilities at fixed model size.
pub fn ablation_grid(
    ps: &[f64],
    base: &RunConfig,
    train: &EmbeddedDataset,
    test: &EmbeddedDataset,
    repeats: usize,
) -> Result<Vec<AblationRow>> {
    if ps.is_empty() || repeats == 0 {
        return Err(DeeError::config("ablation needs at least one probability and one repeat"));
    }
    ps.iter()
        .map(|&p| {
            let mut cfg = base.clone();
            cfg.ablation_p = p;
            cfg.validate()?;
            let (seeds, accs) = repeated_accuracies(&cfg, train, test, repeats)?;
            let (mean, std) = mean_std(&accs);
            Ok(AblationRow {
                p,
                mean_accuracy: mean,
                std_accuracy: std,
                seeds,
            })
        })
        .collect()
}
