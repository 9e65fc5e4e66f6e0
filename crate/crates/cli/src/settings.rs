//! Run settings resolved from flags, an optional key-value file and defaults, in that order.
//!
//! The file holds one `key = value` pair per line. Blank lines and lines starting
//! with `#` are ignored. Keys are the long flag names with `-` or `_` as separator.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use dee_core::continual::{LearnerKind, RunConfig, Scenario};
use dee_core::types::{ModelConfig, SinkhornInit, VotingMode};

use crate::error::CliError;

/// Training flags shared by `train`, `sweep` and `ablate`.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// Key-value settings file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// dee | ee-hard | naive
    #[arg(long)]
    pub model: Option<String>,
    /// class-inc | domain-inc
    #[arg(long)]
    pub scenario: Option<String>,
    /// Ensemble size; a comma-separated list for `sweep`.
    #[arg(long)]
    pub experts: Option<String>,
    #[arg(long)]
    pub neighbors: Option<usize>,
    /// Soft-KNN kernel width.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Bregman iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Minimum soft-KNN score kept in the vote.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub wd: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Probability of replacing soft routing with κ random experts per training example.
    #[arg(long)]
    pub ablate_p: Option<f64>,
    /// Learning rate of the naive baseline.
    #[arg(long)]
    pub naive_lr: Option<f64>,
    /// Number of tasks in the domain-incremental scenario.
    #[arg(long)]
    pub phases: Option<usize>,
    #[arg(long)]
    pub shuffle_classes: Option<bool>,
    /// similarity | literal
    #[arg(long)]
    pub voting: Option<String>,
    /// dual-root | uniform
    #[arg(long)]
    pub sinkhorn_init: Option<String>,
    #[arg(long)]
    pub decay_biases: Option<bool>,
    #[arg(long)]
    pub decay_keys: Option<bool>,
    #[arg(long)]
    pub renormalize_keys: Option<bool>,
    /// Test share when no separate test file is given.
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Record wall-clock times in the log (makes logs differ between runs).
    #[arg(long)]
    pub timings: bool,
}

/// Everything a training command needs besides file paths.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub run: RunConfig,
    pub test_fraction: f64,
    pub split_seed: u64,
}

pub fn parse_config_text(text: &str, origin: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("{}:{}: expected `key = value`", origin.display(), i + 1))
        })?;
        let key = key.trim().replace('-', "_");
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(CliError::Config(format!("{}:{}: duplicate key `{key}`", origin.display(), i + 1)));
        }
    }
    Ok(map)
}

struct Layers {
    file: BTreeMap<String, String>,
}

impl Layers {
    fn pick<T: FromStr>(&mut self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let from_file = self.file.remove(key);
        if let Some(v) = flag {
            return Ok(v);
        }
        match from_file {
            Some(raw) => raw
                .parse()
                .map_err(|e| CliError::Config(format!("config key `{key}`: cannot parse `{raw}`: {e}"))),
            None => Ok(default),
        }
    }
}

fn parse_voting(s: &str) -> Result<VotingMode, CliError> {
    match s {
        "similarity" => Ok(VotingMode::Similarity),
        "literal" => Ok(VotingMode::Literal),
        other => Err(CliError::Config(format!("unknown voting mode `{other}` (similarity | literal)"))),
    }
}

fn parse_init(s: &str) -> Result<SinkhornInit, CliError> {
    match s {
        "dual-root" => Ok(SinkhornInit::DualRoot),
        "uniform" => Ok(SinkhornInit::Uniform),
        other => Err(CliError::Config(format!("unknown sinkhorn init `{other}` (dual-root | uniform)"))),
    }
}

impl TrainFlags {
    /// Resolves every setting; `embedding_dim` and `num_classes` come from the data.
    pub fn resolve(&self, embedding_dim: usize, num_classes: usize) -> Result<Resolved, CliError> {
        let file = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
                parse_config_text(&text, path)?
            }
            None => BTreeMap::new(),
        };
        let mut l = Layers { file };
        let d = ModelConfig::default();
        let learner: LearnerKind = l.pick(self.model.clone(), "model", "dee".to_string())?.parse()?;
        let scenario: Scenario = l.pick(self.scenario.clone(), "scenario", "class-inc".to_string())?.parse()?;
        let voting = parse_voting(&l.pick(self.voting.clone(), "voting", "similarity".to_string())?)?;
        let sinkhorn_init = parse_init(&l.pick(self.sinkhorn_init.clone(), "sinkhorn_init", "dual-root".to_string())?)?;
        let model = ModelConfig {
            num_experts: l.pick(self.experts.as_deref().map(parse_single).transpose()?, "experts", d.num_experts)?,
            num_neighbors: l.pick(self.neighbors, "neighbors", d.num_neighbors)?,
            embedding_dim,
            num_classes,
            kernel_width: l.pick(self.sigma, "sigma", d.kernel_width)?,
            bregman_iters: l.pick(self.iters, "iters", d.bregman_iters)?,
            gamma_threshold: l.pick(self.threshold, "threshold", d.gamma_threshold)?,
            learning_rate: l.pick(self.lr, "lr", d.learning_rate)?,
            weight_decay: l.pick(self.wd, "wd", d.weight_decay)?,
            batch_size: l.pick(self.batch_size, "batch_size", d.batch_size)?,
            seed: l.pick(self.seed, "seed", d.seed)?,
            voting,
            sinkhorn_init,
        };
        let mut run = RunConfig::new(learner, model);
        run.scenario = scenario;
        run.ablation_p = l.pick(self.ablate_p, "ablate_p", run.ablation_p)?;
        run.naive_learning_rate = l.pick(self.naive_lr, "naive_lr", run.naive_learning_rate)?;
        run.num_phases = l.pick(self.phases, "phases", run.num_phases)?;
        run.shuffle_classes = l.pick(self.shuffle_classes, "shuffle_classes", run.shuffle_classes)?;
        run.optimizer.decay_biases = l.pick(self.decay_biases, "decay_biases", run.optimizer.decay_biases)?;
        run.optimizer.decay_keys = l.pick(self.decay_keys, "decay_keys", run.optimizer.decay_keys)?;
        run.optimizer.renormalize_keys =
            l.pick(self.renormalize_keys, "renormalize_keys", run.optimizer.renormalize_keys)?;
        let file_timings = l.pick(None, "timings", false)?;
        run.timings = self.timings || file_timings;
        let test_fraction = l.pick(self.test_fraction, "test_fraction", 1.0 / 3.0)?;
        let split_seed = l.pick(self.split_seed, "split_seed", 1)?;
        if let Some(key) = l.file.keys().next() {
            return Err(CliError::Config(format!("unknown config key `{key}`")));
        }
        run.validate()?;
        Ok(Resolved { run, test_fraction, split_seed })
    }
}

fn parse_single(raw: &str) -> Result<usize, CliError> {
    raw.trim().parse().map_err(|e| CliError::Config(format!("--experts `{raw}`: {e}")))
}

/// Comma-separated grid such as `0,0.5,1`.
pub fn parse_grid<T: FromStr>(raw: &str, what: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    let values = raw
        .split(',')
        .map(|s| {
            let s = s.trim();
            s.parse().map_err(|e| CliError::Config(format!("malformed {what} grid entry `{s}`: {e}")))
        })
        .collect::<Result<Vec<T>, _>>()?;
    if values.is_empty() {
        return Err(CliError::Config(format!("empty {what} grid")));
    }
    Ok(values)
}
