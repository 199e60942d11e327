//! `mulot` command-line tool. Machine-readable results go to stdout as
//! JSON; progress and diagnostics go to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use mulot::data::{dir_digest, gen_synthetic, load_manifest, Manifest, Modality, Rule, Split, SynthSpec};
use mulot::error::{DataError, ModelError, TrainError};
use mulot::model::{check_model_gradients, forward, grad_check_config};
use mulot::numeric::Matrix;
use mulot::ot::{entropy, exact_ot_uniform, sinkhorn, transport_cost, uniform, CostMatrix, SinkhornOptions};
use mulot::train::{evaluate, history_csv, load_checkpoint, save_checkpoint, RunConfig, Trainer};

#[derive(Parser)]
#[command(name = "mulot", version, about = "Optimal-transport multimodal fusion toolkit")]
struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic trimodal corpus and its manifest.
    GenSynth(GenSynthArgs),
    /// Train a model and write a checkpoint plus metric history.
    Train(TrainArgs),
    /// Accuracy, macro F1 and confusion counts of a checkpoint on one split.
    Eval(EvalArgs),
    /// Solve an entropic OT problem given as a CSV cost matrix.
    OtSolve(OtSolveArgs),
    /// Self-attention maps and fusion weights for one sample.
    InspectAttention(InspectArgs),
    /// Finite-difference check of every gradient of a small model.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n_per_class: usize,
    /// cross-modal, unimodal or mixed.
    #[arg(long, default_value = "cross-modal")]
    rule: Rule,
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Norm of the planted bump [default: 6].
    #[arg(long, allow_negative_numbers = true)]
    amplitude: Option<f64>,
    /// Feature widths, visual,language,acoustic.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    /// Train,dev,test fractions per class.
    #[arg(long, value_delimiter = ',')]
    splits: Option<Vec<f64>>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration JSON; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest; overrides the config's `data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoint.mlck and metrics.csv.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many updates (the checkpoint can be resumed).
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args)]
struct OtSolveArgs {
    /// CSV file, one row of costs per line.
    #[arg(long)]
    cost: PathBuf,
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
    eps: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// Also solve exactly by enumerating permutations (square, n <= 8).
    #[arg(long)]
    oracle: bool,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    sample_id: String,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Run configuration whose model section replaces the built-in small model.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale the largest analytic gradient entry by 1.1 before checking.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

/// Failure classes with their exit codes.
enum Failure {
    /// Numerical failure or divergence.
    Compute(String),
    /// Bad flags, configuration or missing inputs.
    Usage(String),
    /// Malformed bytes on disk.
    Corrupt(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Compute(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Corrupt(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Compute(m) | Failure::Usage(m) | Failure::Corrupt(m) => m,
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        if e.is_corruption() {
            Failure::Corrupt(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::Dimension { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Compute(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(d) => d.into(),
            TrainError::Model(m) => m.into(),
            TrainError::CheckpointMagic { .. } | TrainError::CheckpointCorrupt { .. } => {
                Failure::Corrupt(e.to_string())
            }
            TrainError::Diverged { .. } | TrainError::NonFiniteGradient { .. } => {
                Failure::Compute(e.to_string())
            }
            TrainError::EmptySplit(_) | TrainError::Io { .. } | TrainError::Config(_) => {
                Failure::Usage(e.to_string())
            }
        }
    }
}

type CmdResult = Result<Value, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    let result = match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::OtSolve(a) => ot_solve(a),
        Command::InspectAttention(a) => inspect_attention(a),
        Command::GradCheck(a) => grad_check(a),
    };
    match result {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn gen_synth(a: GenSynthArgs) -> CmdResult {
    let mut spec = SynthSpec {
        n_per_class: a.n_per_class,
        rule: a.rule,
        noise: a.noise,
        seed: a.seed,
        ..SynthSpec::default()
    };
    if let Some(amplitude) = a.amplitude {
        spec.amplitude = amplitude;
    }
    if let Some(d) = a.dims {
        spec.dims = three("--dims", d)?;
    }
    if let Some(s) = a.splits {
        spec.splits = three("--splits", s)?;
    }
    spec.validate()?;
    let manifest_path = gen_synthetic(&spec, &a.out)?;
    let manifest = load_manifest(&manifest_path)?;
    let digest = dir_digest(&a.out)?;
    let [train, dev, test] = manifest.split_counts();
    eprintln!("wrote {} records to {}", manifest.records.len(), manifest_path.display());
    Ok(json!({
        "manifest": manifest_path,
        "digest": digest,
        "records": {"train": train, "dev": dev, "test": test},
    }))
}

fn three<T: Copy>(flag: &str, v: Vec<T>) -> Result<[T; 3], Failure> {
    <[T; 3]>::try_from(v)
        .map_err(|v| Failure::Usage(format!("{flag} needs 3 comma-separated values, got {}", v.len())))
}

fn open_manifest(flag: Option<PathBuf>, config: Option<&Path>) -> Result<Manifest, Failure> {
    let path = flag
        .or_else(|| config.map(Path::to_path_buf))
        .ok_or_else(|| Failure::Usage("no manifest given (use --data)".into()))?;
    Ok(load_manifest(&path)?)
}

fn train(a: TrainArgs) -> CmdResult {
    let mut trainer = match &a.resume {
        Some(ckpt) => {
            let c = load_checkpoint(ckpt)?;
            let manifest = open_manifest(a.data.clone(), c.config.data.as_deref())?;
            Trainer::resume(c, &manifest)?
        }
        None => {
            let mut config = match &a.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            let manifest = open_manifest(a.data.clone(), config.data.as_deref())?;
            config.data = Some(manifest.path.clone());
            Trainer::new(config, &manifest)?
        }
    };
    fs::create_dir_all(&a.out).map_err(|e| Failure::Usage(format!("{}: {e}", a.out.display())))?;
    eprintln!(
        "training {} steps ({} per epoch)",
        trainer.total_steps(),
        trainer.steps_per_epoch()
    );
    trainer.run(a.max_steps)?;
    let ckpt = trainer.checkpoint();
    let ckpt_path = a.out.join("checkpoint.mlck");
    let csv_path = a.out.join("metrics.csv");
    save_checkpoint(&ckpt_path, &ckpt)?;
    fs::write(&csv_path, history_csv(&ckpt.state.history))
        .map_err(|e| Failure::Usage(format!("{}: {e}", csv_path.display())))?;
    let final_dev = ckpt
        .state
        .history
        .iter()
        .rev()
        .find(|r| r.split == Split::Dev)
        .map(|r| r.accuracy);
    let best = ckpt.state.best.as_ref();
    if let Some(acc) = final_dev {
        eprintln!("final dev accuracy {acc:.4}");
    }
    Ok(json!({
        "checkpoint": ckpt_path,
        "metrics": csv_path,
        "steps": ckpt.state.step,
        "done": trainer.is_done(),
        "final_dev_accuracy": final_dev,
        "best_step": best.map(|b| b.step),
        "best_dev_accuracy": best.map(|b| b.accuracy),
    }))
}

fn eval(a: EvalArgs) -> CmdResult {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let manifest = open_manifest(a.data, ckpt.config.data.as_deref())?;
    let m = evaluate(ckpt.best_params(), &ckpt.config.model, &manifest, a.split)?;
    eprintln!("{} accuracy {:.4}, macro F1 {:.4}", a.split, m.accuracy, m.macro_f1);
    Ok(json!({
        "split": a.split.name(),
        "accuracy": m.accuracy,
        "macro_f1": m.macro_f1,
        "confusion": m.confusion,
    }))
}

fn read_cost_csv(path: &Path) -> Result<Matrix, Failure> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Failure::Usage(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Failure::Usage(format!("{}: empty cost matrix", path.display())));
    }
    Ok(Matrix::from_rows(&rows))
}

fn rows_json(m: &Matrix) -> Value {
    json!((0..m.rows()).map(|i| m.row(i).to_vec()).collect::<Vec<_>>())
}

fn ot_solve(a: OtSolveArgs) -> CmdResult {
    if !(a.eps > 0.0 && a.eps.is_finite()) {
        return Err(Failure::Usage(format!("--eps must be > 0, got {}", a.eps)));
    }
    if a.tol.is_nan() || a.tol < 0.0 || a.max_iter == 0 {
        return Err(Failure::Usage("--tol must be >= 0 and --max-iter positive".into()));
    }
    let matrix = read_cost_csv(&a.cost)?;
    let (n, m) = matrix.shape();
    if a.oracle && (n != m || n > mulot::ot::MAX_EXACT_SIZE) {
        return Err(Failure::Usage(format!(
            "--oracle needs a square cost matrix of size at most {}, got {n}x{m}",
            mulot::ot::MAX_EXACT_SIZE
        )));
    }
    let cost = CostMatrix::new(matrix).map_err(|e| Failure::Usage(e.to_string()))?;
    let opts = SinkhornOptions {
        eps: a.eps,
        max_iter: a.max_iter,
        tol: a.tol,
    };
    let coupling = sinkhorn(&cost, &uniform(n), &uniform(m), opts)
        .map_err(|e| Failure::Compute(e.to_string()))?;
    let cost_value = transport_cost(&cost, &coupling.plan).map_err(|e| Failure::Compute(e.to_string()))?;
    let mut out = json!({
        "rows": n,
        "cols": m,
        "eps": a.eps,
        "iterations": coupling.iterations_used,
        "converged": coupling.converged,
        "coupling": rows_json(&coupling.plan),
        "transport_cost": cost_value,
        "entropy": entropy(&coupling.plan),
    });
    eprintln!("entropic cost {cost_value:.6} after {} iterations", coupling.iterations_used);
    if a.oracle {
        let exact = exact_ot_uniform(&cost).map_err(|e| Failure::Compute(e.to_string()))?;
        eprintln!("exact cost {:?}", exact.cost);
        out["exact"] = json!({"cost": exact.cost, "permutation": exact.permutation});
    }
    Ok(out)
}

fn inspect_attention(a: InspectArgs) -> CmdResult {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let manifest = open_manifest(a.data, ckpt.config.data.as_deref())?;
    let record = manifest
        .find(&a.sample_id)
        .ok_or_else(|| Failure::Usage(format!("unknown sample id {:?}", a.sample_id)))?;
    let sample = manifest.load_sample(record)?;
    let fwd = forward(ckpt.best_params(), &ckpt.config.model, &sample.views)?;
    let mut attention = serde_json::Map::new();
    let mut weights = serde_json::Map::new();
    for m in Modality::ALL {
        attention.insert(
            m.name().into(),
            fwd.attention_map(m).map_or(Value::Null, rows_json),
        );
        weights.insert(m.name().into(), json!(fwd.maf_weights[m.index()]));
    }
    Ok(json!({
        "id": sample.id,
        "label": sample.label,
        "prediction": fwd.prediction(),
        "logits": fwd.logits,
        "maf_weights": weights,
        "attention": attention,
    }))
}

fn grad_check(a: GradCheckArgs) -> CmdResult {
    let mut config = grad_check_config();
    if let Some(p) = &a.config {
        let dims = config.input_dims;
        config = RunConfig::load(p)?.model;
        config.input_dims = config.input_dims.or(dims);
    }
    let fault = a.inject_fault.then_some(1.1);
    let report = check_model_gradients(&config, a.seed, 1e-5, 1e-4, fault)?;
    let worst = report.worst().cloned();
    if let Some(w) = &worst {
        eprintln!(
            "worst parameter {}: relative error {:.3e} at index {} (analytic {:.6e}, numeric {:.6e})",
            w.name, w.max_relative_error, w.worst_index, w.analytic, w.numeric
        );
    }
    let value = serde_json::to_value(&report).expect("report serializes");
    if report.pass {
        Ok(value)
    } else {
        println!("{value}");
        Err(Failure::Compute(format!(
            "gradient check failed: max relative error {:.3e} > {:.0e}",
            report.max_relative_error, report.tolerance
        )))
    }
}
