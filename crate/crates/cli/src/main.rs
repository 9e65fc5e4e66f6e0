mod error;
mod settings;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dee_core::checkpoint::{load_checkpoint, model_fingerprint, save_checkpoint};
use dee_core::continual::{ablation_grid, evaluate, run_experiment, sweep_ensemble_size, EnsembleLearner, Selection};
use dee_core::data_io::{
    embed_images, gaussian_mixture, import_csv, read_embd, read_idx_images, stratified_split, write_embd,
    EmbeddedDataset, RandomProjectionExtractor,
};
use dee_core::gradcheck::{run_gradcheck, GradcheckOptions};
use dee_core::optimizer::OptimizerConfig;
use dee_core::rng::seeded_rng;
use serde_json::json;

use crate::error::CliError;
use crate::settings::{parse_grid, Resolved, TrainFlags};

#[derive(Debug, Parser)]
#[command(name = "dee", version, about = "Differentiable expert ensembles for class-incremental learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a Gaussian-mixture embedding dataset.
    Synth(SynthArgs),
    /// Convert CSV embeddings or IDX images into an embedding file.
    Import(ImportArgs),
    /// Train on an incremental stream and emit the run log.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on an embedding file.
    Eval(EvalArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Accuracy over several ensemble sizes, as CSV.
    Sweep(SweepArgs),
    /// Accuracy under random expert selection, as CSV.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 300)]
    per_class: usize,
    #[arg(long, default_value_t = 10.0)]
    separation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ImportArgs {
    #[arg(long)]
    out: PathBuf,
    /// CSV with header `label,f0,f1,...`.
    #[arg(long, conflicts_with_all = ["images", "labels"], required_unless_present = "images")]
    csv: Option<PathBuf>,
    /// IDX image file, optionally gzipped.
    #[arg(long, requires = "labels")]
    images: Option<PathBuf>,
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
    /// Output dimension of the random projection.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    projection_seed: u64,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Training embeddings (EMBD).
    #[arg(long)]
    data: PathBuf,
    /// Test embeddings; without it `--data` is split.
    #[arg(long)]
    test: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    flags: TrainFlags,
    /// Run log destination; stdout by default.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint destination (ensemble models only).
    #[arg(long)]
    save: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    kappa: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long, hide = true)]
    inject_sign_flip: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    /// `--experts` takes the list of sizes, e.g. `16,64,128`.
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    flags: TrainFlags,
    /// Ablation probabilities, e.g. `0,0.5,1`.
    #[arg(long = "p", value_name = "LIST")]
    grid: String,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()).map_err(|e| CliError::Data(e.to_string()))
        }
    }
}

fn dataset_line(path: &Path, ds: &EmbeddedDataset) -> String {
    json!({
        "kind": "dataset",
        "path": path.display().to_string(),
        "name": ds.name,
        "examples": ds.len(),
        "embedding_dim": ds.embedding_dim,
        "num_classes": ds.num_classes,
        "class_counts": ds.class_counts(),
    })
    .to_string()
}

fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let ds = gaussian_mixture(a.classes, a.dim, a.per_class, a.separation, &mut seeded_rng(a.seed))?;
    write_embd(&a.out, &ds)?;
    emit(None, &format!("{}\n", dataset_line(&a.out, &ds)))
}

fn import(a: &ImportArgs) -> Result<(), CliError> {
    let (ds, extra) = match (&a.csv, &a.images, &a.labels) {
        (Some(csv), _, _) => (import_csv(csv)?, None),
        (None, Some(images), Some(labels)) => {
            let raw = read_idx_images(images, labels)?;
            let extractor = RandomProjectionExtractor::new(raw.pixels(), a.dim, a.projection_seed)?;
            let name = images.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            (embed_images(&raw, &extractor, &name)?, Some(extractor.fingerprint()))
        }
        _ => return Err(CliError::Config("give --csv or both --images and --labels".into())),
    };
    write_embd(&a.out, &ds)?;
    let mut line: serde_json::Value = serde_json::from_str(&dataset_line(&a.out, &ds)).expect("valid json");
    if let Some(fp) = extra {
        line["projection_fingerprint"] = json!(fp);
    }
    emit(None, &format!("{line}\n"))
}

/// Reads the data, resolves settings against it and splits off a test set if needed.
fn prepare(data: &DataArgs, flags: &TrainFlags) -> Result<(Resolved, EmbeddedDataset, EmbeddedDataset), CliError> {
    let all = read_embd(&data.data)?;
    let resolved = flags.resolve(all.embedding_dim, all.num_classes)?;
    let (train, test) = match &data.test {
        Some(path) => {
            let test = read_embd(path)?;
            if test.embedding_dim != all.embedding_dim || test.num_classes != all.num_classes {
                return Err(CliError::Data(format!(
                    "test file has M={}, K={}; training file has M={}, K={}",
                    test.embedding_dim, test.num_classes, all.embedding_dim, all.num_classes
                )));
            }
            (all, test)
        }
        None => {
            if !(resolved.test_fraction > 0.0 && resolved.test_fraction < 1.0) {
                return Err(CliError::Config(format!("test fraction must lie in (0, 1), got {}", resolved.test_fraction)));
            }
            stratified_split(&all, resolved.test_fraction, &mut seeded_rng(resolved.split_seed))?
        }
    };
    Ok((resolved, train, test))
}

fn train(a: &TrainArgs) -> Result<(), CliError> {
    let (resolved, train, test) = prepare(&a.data, &a.flags)?;
    let run = run_experiment(&resolved.run, &train, &test)?;
    if let Some(path) = &a.save {
        let model = run
            .learner
            .ensemble()
            .ok_or_else(|| CliError::Config("--save needs an ensemble model (dee or ee-hard)".into()))?;
        save_checkpoint(path, model)?;
    }
    emit(a.out.as_deref(), &run.log.to_jsonl())
}

fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let model = load_checkpoint(&a.checkpoint)?;
    let data = read_embd(&a.data)?;
    if data.embedding_dim != model.cfg.embedding_dim || data.num_classes > model.cfg.num_classes {
        return Err(CliError::Data(format!(
            "data has M={}, K={}; model expects M={}, K={}",
            data.embedding_dim, data.num_classes, model.cfg.embedding_dim, model.cfg.num_classes
        )));
    }
    let fingerprint = model_fingerprint(&model);
    let learner = EnsembleLearner::new(model, OptimizerConfig::new(1.0, 0.0), Selection::Soft)?;
    let ev = evaluate(&learner, &data.examples)?;
    let line = json!({
        "kind": "evaluation",
        "examples": data.len(),
        "accuracy": ev.accuracy,
        "per_class": ev.per_class,
        "model_fingerprint": fingerprint,
    });
    emit(None, &format!("{line}\n"))
}

fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let d = GradcheckOptions::default();
    let opts = GradcheckOptions {
        kernel_width: a.sigma.unwrap_or(d.kernel_width),
        iters: a.iters.unwrap_or(d.iters),
        num_experts: a.n.unwrap_or(d.num_experts),
        num_neighbors: a.kappa.unwrap_or(d.num_neighbors),
        embedding_dim: a.m.unwrap_or(d.embedding_dim),
        num_classes: a.k.unwrap_or(d.num_classes),
        instances: a.instances.unwrap_or(d.instances),
        seed: a.seed.unwrap_or(d.seed),
        tolerance: a.tolerance.unwrap_or(d.tolerance),
        inject_sign_flip: a.inject_sign_flip,
        ..d
    };
    let report = run_gradcheck(&opts)?;
    let mut text = format!("{}\n", json!({ "kind": "config", "gradcheck": opts }));
    for g in &report.groups {
        text.push_str(&format!("{}\n", json!({ "kind": "gradcheck_group", "report": g })));
    }
    text.push_str(&format!(
        "{}\n",
        json!({
            "kind": "gradcheck",
            "passed": report.passed(),
            "max_relative_error": report.max_relative_error(),
            "tolerance": report.tolerance,
            "instances": report.instances,
        })
    ));
    emit(None, &text)?;
    if report.passed() {
        return Ok(());
    }
    let failing: Vec<String> = report
        .groups
        .iter()
        .filter(|g| g.max_relative_error > report.tolerance)
        .map(|g| {
            format!(
                "{} at {}: analytic {:e}, numeric {:e}, relative error {:e}",
                g.group, g.worst_coordinate, g.analytic, g.numeric, g.max_relative_error
            )
        })
        .collect();
    Err(CliError::GradcheckFailed(failing.join("; ")))
}

fn config_comment(resolved: &Resolved) -> String {
    let run = serde_json::to_value(&resolved.run).expect("config serializes");
    format!(
        "# config: {}\n",
        json!({ "run": run, "test_fraction": resolved.test_fraction, "split_seed": resolved.split_seed })
    )
}

fn sweep(a: &SweepArgs) -> Result<(), CliError> {
    let grid = a.flags.experts.as_deref().ok_or_else(|| CliError::Config("sweep needs --experts LIST".into()))?;
    let sizes: Vec<usize> = parse_grid(grid, "ensemble size")?;
    if a.repeats == 0 {
        return Err(CliError::Config("--repeats must be positive".into()));
    }
    let flags = TrainFlags { experts: None, ..a.flags.clone() };
    let (resolved, train, test) = prepare(&a.data, &flags)?;
    let rows = sweep_ensemble_size(&sizes, &resolved.run, &train, &test, a.repeats)?;
    let mut text = config_comment(&resolved);
    text.push_str("num_experts,num_neighbors,classifier_params,key_params,mean_acc,std\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.num_experts, r.num_neighbors, r.classifier_params, r.key_params, r.mean_accuracy, r.std_accuracy
        ));
    }
    emit(a.out.as_deref(), &text)
}

fn ablate(a: &AblateArgs) -> Result<(), CliError> {
    let ps: Vec<f64> = parse_grid(&a.grid, "probability")?;
    if let Some(p) = ps.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(CliError::Config(format!("ablation probability {p} outside [0, 1]")));
    }
    if a.repeats == 0 {
        return Err(CliError::Config("--repeats must be positive".into()));
    }
    let (resolved, train, test) = prepare(&a.data, &a.flags)?;
    let rows = ablation_grid(&ps, &resolved.run, &train, &test, a.repeats)?;
    let mut text = config_comment(&resolved);
    text.push_str("p,mean_acc,std\n");
    for r in rows {
        text.push_str(&format!("{},{},{}\n", r.p, r.mean_accuracy, r.std_accuracy));
    }
    emit(a.out.as_deref(), &text)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Import(a) => import(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Sweep(a) => sweep(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dee: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
