//! Command-line surface: flat key = value config files, flag precedence,
//! and the per-command dispatch that turns library results into artifacts.
//!
//! Every run's randomness flows from the single `seed` key, and that seed is
//! recorded into each artifact (a `# seed = N` comment line in CSVs, a field
//! in JSON, a header line in text reports, metadata in checkpoints), so
//! re-running a command with identical inputs rewrites identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{load_dataset, load_unlabeled, Dataset, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::gradcheck::{check_layers, REL_TOL};
use crate::model::{describe, predict_labels, ArchId, LayerDesc, Model};
use crate::optim::Rng;
use crate::trainer::{
    confusion_tables, cross_validate, evaluate, greedy_tune, metrics, metrics_csv, metrics_json,
    train, TrainConfig, TuneDimension,
};

/// Post-hurricane satellite damage classifier: training, evaluation, and
/// inspection commands over the labeled damage/no_damage folder layout.
#[derive(Parser, Debug)]
#[command(name = "floodcnn", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes a checkpoint plus history CSV/JSON.
    Train(Flags),
    /// Score a checkpoint on a labeled set; writes confusion matrix and metrics.
    Evaluate(Flags),
    /// Per-image damage probabilities for a folder of images.
    Predict(Flags),
    /// k-fold cross-validation with per-metric mean (std) reporting.
    Cv(Flags),
    /// Greedy hyperparameter tuning; writes a trial log and the best config.
    Tune(Flags),
    /// Per-layer output shapes and parameter counts for an architecture.
    ParamCount(Flags),
    /// Finite-difference gradient verification of every layer type.
    Gradcheck(Flags),
}

/// One flag per config key; anything left unset falls back to the config
/// file and then to the defaults.
#[derive(Args, Debug, Default, Clone)]
pub struct Flags {
    /// Config file in `key = value` form with `#` comments.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Architecture: vgg3block, vgg16, or alexnet.
    #[arg(long)]
    pub arch: Option<String>,
    /// Dataset root (train/cv/tune) or image folder (predict).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation dataset root.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Test dataset root (evaluate).
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Checkpoint path: output for train, input for evaluate/predict.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Square input edge in pixels; images must match or be resized.
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// L2 weight-decay coefficient.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Fold count for cv.
    #[arg(long)]
    pub k: Option<usize>,
    /// Random flips/rotations/translations during training.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub augment: Option<bool>,
    /// Batch normalization after every convolution.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub batchnorm: Option<bool>,
    /// Dropout after the hidden dense layers.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub dropout: Option<bool>,
    #[arg(long)]
    pub dropout_rate: Option<f64>,
    /// L2 penalty on weights during training.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub weight_decay: Option<bool>,
    /// Bilinear-resize images that do not match input_size.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub resize: Option<bool>,
}

/// Fully resolved run: defaults, then config file, then flags.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub arch: ArchId,
    pub data: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub k: usize,
    pub input_size: usize,
    pub resize: bool,
    /// (dimension name, candidates) in config-file order; empty means the
    /// built-in lr-then-lambda grid.
    pub tune_grids: Vec<(String, Vec<f64>)>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: ArchId::Vgg3Block,
            data: None,
            val: None,
            test: None,
            checkpoint: None,
            out: PathBuf::from("."),
            k: 5,
            input_size: 128,
            resize: false,
            tune_grids: Vec::new(),
            train: TrainConfig::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, want: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("config key '{key}': cannot parse '{value}' as {want}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::config(format!(
            "config key '{key}': expected true or false, got '{other}'"
        ))),
    }
}

fn parse_grid(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|part| parse_value::<f64>(key, part.trim(), "a number"))
        .collect()
}

fn apply_key(run: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "arch" => run.arch = value.parse()?,
        "data" => run.data = Some(PathBuf::from(value)),
        "val" => run.val = Some(PathBuf::from(value)),
        "test" => run.test = Some(PathBuf::from(value)),
        "checkpoint" => run.checkpoint = Some(PathBuf::from(value)),
        "out" => run.out = PathBuf::from(value),
        "seed" => run.train.seed = parse_value(key, value, "an unsigned integer")?,
        "input_size" => run.input_size = parse_value(key, value, "an unsigned integer")?,
        "batch_size" => run.train.batch_size = parse_value(key, value, "an unsigned integer")?,
        "lr" => run.train.lr = parse_value(key, value, "a number")?,
        "momentum" => run.train.momentum = parse_value(key, value, "a number")?,
        "lambda" => run.train.lambda = parse_value(key, value, "a number")?,
        "patience" => run.train.patience = parse_value(key, value, "an unsigned integer")?,
        "max_epochs" => run.train.max_epochs = parse_value(key, value, "an unsigned integer")?,
        "k" => run.k = parse_value(key, value, "an unsigned integer")?,
        "augment" => run.train.augment = parse_bool(key, value)?,
        "batchnorm" => run.train.batchnorm = parse_bool(key, value)?,
        "dropout" => run.train.dropout = parse_bool(key, value)?,
        "dropout_rate" => run.train.dropout_rate = parse_value(key, value, "a number")?,
        "weight_decay" => run.train.weight_decay = parse_bool(key, value)?,
        "resize" => run.resize = parse_bool(key, value)?,
        _ => {
            if let Some(dim) = key.strip_prefix("tune_") {
                if !matches!(
                    dim,
                    "lr" | "momentum" | "lambda" | "batch_size" | "dropout_rate" | "patience"
                        | "max_epochs"
                ) {
                    return Err(Error::config(format!("unknown config key '{key}'")));
                }
                let grid = parse_grid(key, value)?;
                run.tune_grids.retain(|(name, _)| name != dim);
                run.tune_grids.push((dim.to_string(), grid));
            } else {
                return Err(Error::config(format!("unknown config key '{key}'")));
            }
        }
    }
    Ok(())
}

/// Parse a config file's `key = value` lines into `run`. Comments start at
/// `#`; blank lines are skipped; unknown keys are rejected by name.
fn apply_config_file(run: &mut RunConfig, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config file {}: {e}", path.display())))?;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!(
                "{}:{}: expected 'key = value', got '{raw}'",
                path.display(),
                lineno + 1
            ))
        })?;
        apply_key(run, key.trim(), value.trim())?;
    }
    Ok(())
}

/// Resolve defaults, then the config file, then explicit flags.
pub fn parse_config(flags: &Flags) -> Result<RunConfig> {
    let mut run = RunConfig::default();
    if let Some(path) = &flags.config {
        apply_config_file(&mut run, path)?;
    }
    if let Some(v) = &flags.arch {
        run.arch = v.parse()?;
    }
    if let Some(v) = &flags.data {
        run.data = Some(v.clone());
    }
    if let Some(v) = &flags.val {
        run.val = Some(v.clone());
    }
    if let Some(v) = &flags.test {
        run.test = Some(v.clone());
    }
    if let Some(v) = &flags.checkpoint {
        run.checkpoint = Some(v.clone());
    }
    if let Some(v) = &flags.out {
        run.out = v.clone();
    }
    if let Some(v) = flags.seed {
        run.train.seed = v;
    }
    if let Some(v) = flags.input_size {
        run.input_size = v;
    }
    if let Some(v) = flags.batch_size {
        run.train.batch_size = v;
    }
    if let Some(v) = flags.lr {
        run.train.lr = v;
    }
    if let Some(v) = flags.momentum {
        run.train.momentum = v;
    }
    if let Some(v) = flags.lambda {
        run.train.lambda = v;
    }
    if let Some(v) = flags.patience {
        run.train.patience = v;
    }
    if let Some(v) = flags.max_epochs {
        run.train.max_epochs = v;
    }
    if let Some(v) = flags.k {
        run.k = v;
    }
    if let Some(v) = flags.augment {
        run.train.augment = v;
    }
    if let Some(v) = flags.batchnorm {
        run.train.batchnorm = v;
    }
    if let Some(v) = flags.dropout {
        run.train.dropout = v;
    }
    if let Some(v) = flags.dropout_rate {
        run.train.dropout_rate = v;
    }
    if let Some(v) = flags.weight_decay {
        run.train.weight_decay = v;
    }
    if let Some(v) = flags.resize {
        run.resize = v;
    }
    run.train.validate()?;
    if run.input_size == 0 {
        return Err(Error::config("input_size must be at least 1"));
    }
    Ok(run)
}

/// Run a parsed command line to completion; the returned code is the
/// process exit status.
pub fn run(cli: Cli) -> Result<i32> {
    match &cli.command {
        Command::Train(f) => cmd_train(&parse_config(f)?),
        Command::Evaluate(f) => cmd_evaluate(&parse_config(f)?),
        Command::Predict(f) => cmd_predict(&parse_config(f)?),
        Command::Cv(f) => cmd_cv(&parse_config(f)?),
        Command::Tune(f) => cmd_tune(&parse_config(f)?),
        Command::ParamCount(f) => cmd_param_count(&parse_config(f)?),
        Command::Gradcheck(f) => cmd_gradcheck(&parse_config(f)?),
    }
}

fn require<'a>(path: &'a Option<PathBuf>, command: &str, key: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| {
        Error::config(format!("{command} requires --{key} (or '{key} = ...' in the config file)"))
    })
}

fn load_labeled(run: &RunConfig, root: &Path, split: &str) -> Result<Dataset> {
    let outcome = load_dataset(root, split, (run.input_size, run.input_size), run.resize)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    Ok(outcome.dataset)
}

fn ensure_out_dir(run: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&run.out)?;
    Ok(())
}

fn seeded_csv(seed: u64, body: &str) -> String {
    format!("# seed = {seed}\n{body}")
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn format_shape(dims: &[usize]) -> String {
    let inner: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
    format!("({})", inner.join(", "))
}

/// Table 1-style trace: layer label, per-sample output shape, trainable and
/// non-trainable parameter counts, and the grand total.
pub fn render_param_table(rows: &[LayerDesc]) -> String {
    let label_w = rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5) + 2;
    let shape_w = rows
        .iter()
        .map(|r| format_shape(&r.output_shape).len())
        .max()
        .unwrap_or(12)
        .max(12)
        + 2;
    let mut out = String::new();
    let _ = writeln!(out, "{:label_w$}{:shape_w$}{:>14}{:>16}", "layer", "output shape", "params", "non-trainable");
    let mut total = 0;
    let mut total_fixed = 0;
    for r in rows {
        let _ = writeln!(
            out,
            "{:label_w$}{:shape_w$}{:>14}{:>16}",
            r.label,
            format_shape(&r.output_shape),
            thousands(r.params),
            thousands(r.non_trainable)
        );
        total += r.params;
        total_fixed += r.non_trainable;
    }
    if total_fixed > 0 {
        let _ = writeln!(out, "Total: {} (+ {} non-trainable)", thousands(total), thousands(total_fixed));
    } else {
        let _ = writeln!(out, "Total: {}", thousands(total));
    }
    out
}

fn cmd_train(run: &RunConfig) -> Result<i32> {
    let data_root = require(&run.data, "train", "data")?;
    let val_root = require(&run.val, "train", "val")?;
    let train_ds = load_labeled(run, data_root, "train")?;
    let val_ds = load_labeled(run, val_root, "val")?;
    ensure_out_dir(run)?;

    let input_shape = [run.input_size, run.input_size, 3];
    let mut rng = Rng::new(run.train.seed);
    let mut model: Model<f32> =
        Model::build(run.arch, run.train.build_flags(), input_shape, 2, &mut rng)?;
    println!(
        "training {} on {} samples (val {}), seed {}",
        run.arch,
        train_ds.len(),
        val_ds.len(),
        run.train.seed
    );

    let history = train(&mut model, &train_ds, &val_ds, &run.train)?;

    let ckpt_path = run
        .checkpoint
        .clone()
        .unwrap_or_else(|| run.out.join("model.ckpt"));
    save_checkpoint(&model, &ckpt_path)?;
    std::fs::write(run.out.join("history.csv"), seeded_csv(run.train.seed, &history.csv()))?;
    let json = format!(
        "{{\n  \"seed\": {},\n  \"arch\": \"{}\",\n  \"history\": {}\n}}\n",
        run.train.seed,
        run.arch,
        history.json()?
    );
    std::fs::write(run.out.join("history.json"), json)?;

    let best = history.best();
    println!(
        "stopped after epoch {} ({:?}); best epoch {} with val loss {:.6}, val acc {:.4}",
        history.epochs.len(),
        history.stop_reason,
        history.best_epoch,
        best.val_loss,
        best.val_acc
    );
    println!("checkpoint: {}", ckpt_path.display());
    println!("history: {} and history.json", run.out.join("history.csv").display());
    Ok(0)
}

fn cmd_evaluate(run: &RunConfig) -> Result<i32> {
    let ckpt_path = require(&run.checkpoint, "evaluate", "checkpoint")?;
    let test_root = run
        .test
        .as_deref()
        .or(run.data.as_deref())
        .ok_or_else(|| Error::config("evaluate requires --test or --data"))?;
    let mut model = load_checkpoint(ckpt_path, None)?;
    let ds = load_labeled(run, test_root, "test")?;
    ensure_out_dir(run)?;

    let cm = evaluate(&mut model, &ds, run.train.batch_size)?;
    let report = metrics(&cm)?;

    let tables = format!("seed {}\n\n{}", model.seed(), confusion_tables(&cm));
    std::fs::write(run.out.join("confusion.txt"), &tables)?;
    std::fs::write(
        run.out.join("metrics.csv"),
        seeded_csv(model.seed(), &metrics_csv(&cm, &report)),
    )?;
    let json = format!(
        "{{\n  \"seed\": {},\n  \"report\": {}\n}}\n",
        model.seed(),
        metrics_json(&cm, &report)?
    );
    std::fs::write(run.out.join("metrics.json"), json)?;

    print!("{tables}");
    let show = |name: &str, v: Option<f64>| match v {
        Some(x) => println!("{name:>9}: {x:.4}"),
        None => println!("{name:>9}: undefined"),
    };
    println!("accuracy: {:.4}", report.accuracy);
    show("tpr", report.tpr);
    show("tnr", report.tnr);
    show("ppv", report.ppv);
    show("npv", report.npv);
    show("f1", report.f1);
    println!("reports written to {}", run.out.display());
    Ok(0)
}

fn cmd_predict(run: &RunConfig) -> Result<i32> {
    let ckpt_path = require(&run.checkpoint, "predict", "checkpoint")?;
    let data_root = require(&run.data, "predict", "data")?;
    let mut model = load_checkpoint(ckpt_path, None)?;
    let (images, warnings) =
        load_unlabeled(data_root, (run.input_size, run.input_size), run.resize)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if images.is_empty() {
        return Err(Error::Input(format!("{}: no images found", data_root.display())));
    }
    ensure_out_dir(run)?;

    let mut body = String::from("path,p_damage,label\n");
    for img in &images {
        let batch = img
            .image
            .reshape(crate::tensor::Shape::new(&[1, run.input_size, run.input_size, 3])?)?;
        let probs = model.forward(&batch, crate::layers::Mode::Infer)?;
        let label = predict_labels(&probs)[0];
        let _ = writeln!(
            body,
            "{},{},{}",
            img.path.display(),
            probs.data()[0],
            CLASS_NAMES[label]
        );
    }
    let csv_path = run.out.join("predictions.csv");
    std::fs::write(&csv_path, seeded_csv(model.seed(), &body))?;
    println!("wrote {} predictions to {}", images.len(), csv_path.display());
    Ok(0)
}

fn cmd_cv(run: &RunConfig) -> Result<i32> {
    let data_root = require(&run.data, "cv", "data")?;
    let ds = load_labeled(run, data_root, "combined")?;
    ensure_out_dir(run)?;

    println!(
        "{}-fold cross-validation of {} on {} samples, seed {}",
        run.k,
        run.arch,
        ds.len(),
        run.train.seed
    );
    let report = cross_validate(run.arch, &ds, run.k, &run.train)?;
    let rendered = report.render();
    std::fs::write(run.out.join("cv_report.txt"), &rendered)?;
    std::fs::write(run.out.join("cv_report.json"), report.json()?)?;
    print!("{rendered}");
    println!("reports written to {}", run.out.display());
    Ok(0)
}

fn tune_default_for(config: &TrainConfig, name: &str) -> f64 {
    match name {
        "lr" => config.lr,
        "momentum" => config.momentum,
        "lambda" => config.lambda,
        "dropout_rate" => config.dropout_rate,
        "batch_size" => config.batch_size as f64,
        "patience" => config.patience as f64,
        "max_epochs" => config.max_epochs as f64,
        _ => unreachable!("grid names are validated at parse time"),
    }
}

fn cmd_tune(run: &RunConfig) -> Result<i32> {
    let data_root = require(&run.data, "tune", "data")?;
    let val_root = require(&run.val, "tune", "val")?;
    let train_ds = load_labeled(run, data_root, "train")?;
    let val_ds = load_labeled(run, val_root, "val")?;
    ensure_out_dir(run)?;

    let grids: Vec<(String, Vec<f64>)> = if run.tune_grids.is_empty() {
        vec![
            ("lr".to_string(), vec![0.01, 0.001, 0.0001]),
            ("lambda".to_string(), vec![0.001, 0.0001]),
        ]
    } else {
        run.tune_grids.clone()
    };
    let dims: Vec<TuneDimension> = grids
        .iter()
        .map(|(name, candidates)| TuneDimension {
            name: name.clone(),
            default: tune_default_for(&run.train, name),
            candidates: candidates.clone(),
        })
        .collect();

    let total: usize = dims.iter().map(|d| d.candidates.len()).sum();
    println!("greedy tuning over {} dimensions, {total} trials, seed {}", dims.len(), run.train.seed);
    let outcome = greedy_tune(run.arch, &train_ds, &val_ds, &dims, &run.train)?;

    let log = format!("{{\n  \"seed\": {},\n  \"outcome\": {}\n}}\n", run.train.seed, outcome.json()?);
    std::fs::write(run.out.join("tune_trials.json"), log)?;

    let mut best_cfg = format!("# seed = {}\narch = {}\n", run.train.seed, run.arch);
    for (name, value) in &outcome.best {
        let _ = writeln!(best_cfg, "{name} = {value}");
    }
    std::fs::write(run.out.join("best_config.txt"), &best_cfg)?;

    for t in &outcome.trials {
        println!(
            "trial {:>3}: {} = {}  ->  val acc {:.4}",
            t.trial, t.dimension, t.candidate, t.score
        );
    }
    println!("best configuration:");
    for (name, value) in &outcome.best {
        println!("  {name} = {value}");
    }
    println!("trial log and best config written to {}", run.out.display());
    Ok(0)
}

fn cmd_param_count(run: &RunConfig) -> Result<i32> {
    let plan = crate::model::catalog_plan(run.arch, &run.train.build_flags(), 2);
    let rows = describe(&plan, [run.input_size, run.input_size, 3])?;
    print!("{}", render_param_table(&rows));
    Ok(0)
}

fn cmd_gradcheck(run: &RunConfig) -> Result<i32> {
    const TRIALS: usize = 20;
    let checks = check_layers(TRIALS, run.train.seed)?;
    println!("gradient check: seed {}, {TRIALS} trials per layer, tolerance {REL_TOL:.0e}", run.train.seed);
    let mut failed = false;
    for c in &checks {
        let verdict = if c.passed() { "pass" } else { "FAIL" };
        println!("{:<10} max rel error {:>12.3e}   {verdict}", c.layer, c.max_rel_error);
        failed |= !c.passed();
    }
    Ok(if failed { 1 } else { 0 })
}
