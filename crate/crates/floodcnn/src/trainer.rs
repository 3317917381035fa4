//! Training loop with early stopping, evaluation metrics, the k-fold
//! cross-validation driver, and the greedy hyperparameter tuner.
//!
//! One training run is sequentially consistent: batch t+1 sees batch t's
//! updates. Validation loss is plain cross-entropy (no decay penalty) so the
//! monitored quantity is comparable across configurations.

use serde::Serialize;

use crate::data::{assemble_batch, augment, augment_rng, batch_plan, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::model::{predict_labels, ArchId, BuildFlags, Model};
use crate::optim::{cross_entropy, l2_penalty, Rng, SgdMomentum};
use crate::tensor::{Elem, Tensor};

/// Per-epoch shuffle stream tag, kept distinct from augmentation forks.
const SHUFFLE_TAG: u64 = 0x7368_7566;

/// Full recipe for one training run. The batchnorm/dropout flags describe
/// how the model was (or should be) built; the trainer itself consumes
/// augment and weight_decay.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lambda: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub augment: bool,
    pub batchnorm: bool,
    pub dropout: bool,
    pub weight_decay: bool,
    pub dropout_rate: f64,
    pub augment_config: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 0.001,
            momentum: 0.9,
            lambda: 0.001,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            augment: false,
            batchnorm: false,
            dropout: false,
            weight_decay: false,
            dropout_rate: 0.5,
            augment_config: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn build_flags(&self) -> BuildFlags {
        BuildFlags {
            batchnorm: self.batchnorm,
            dropout: self.dropout,
            dropout_rate: self.dropout_rate,
        }
    }
}

/// 2x2 tally against true labels; positive class = damage (index 0).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub r#fn: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn new(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        ConfusionMatrix { tp, fp, r#fn: fn_, tn }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.r#fn + self.tn
    }

    pub fn tally(&mut self, predicted: usize, actual: usize) {
        match (actual, predicted) {
            (0, 0) => self.tp += 1,
            (1, 0) => self.fp += 1,
            (0, 1) => self.r#fn += 1,
            _ => self.tn += 1,
        }
    }
}

/// Rates derived from a confusion matrix. Ratios with a zero denominator
/// are reported as absent rather than coerced to 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Input("metrics: confusion matrix is empty".to_string()));
    }
    let tpr = ratio(cm.tp, cm.tp + cm.r#fn);
    let tnr = ratio(cm.tn, cm.tn + cm.fp);
    let ppv = ratio(cm.tp, cm.tp + cm.fp);
    let npv = ratio(cm.tn, cm.tn + cm.r#fn);
    let f1 = match (ppv, tpr) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    Ok(MetricsReport {
        accuracy: (cm.tp + cm.tn) as f64 / total as f64,
        tpr,
        tnr,
        ppv,
        npv,
        f1,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopped,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose weights the model holds.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochStats {
        &self.epochs[self.best_epoch - 1]
    }

    /// CSV with the columns epoch, train_loss, train_acc, val_loss, val_acc.
    pub fn csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc
            ));
        }
        out
    }

    pub fn json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::State(format!("history serialization failed: {e}")))
    }

    /// One-line summary embedded in checkpoints.
    pub fn summary(&self) -> String {
        let stop = match self.stop_reason {
            StopReason::EarlyStopped => "early_stopped",
            StopReason::MaxEpochs => "max_epochs",
        };
        format!(
            "{{\"epochs\":{},\"best_epoch\":{},\"stop\":\"{}\"}}",
            self.epochs.len(),
            self.best_epoch,
            stop
        )
    }
}

/// Validation-loss monitor: strict improvement (min-delta 0) resets the
/// stale counter; `patience` consecutive non-improving epochs stop the run.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best_epoch: usize,
    best_loss: f64,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Result<Self> {
        if patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        Ok(EarlyStopping { patience, best_epoch: 0, best_loss: f64::INFINITY, stale: 0 })
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Observation {
        let improved = val_loss < self.best_loss;
        if improved {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Observation { improved, stop: self.stale >= self.patience }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }
}

fn count_correct<T: Elem>(probs: &Tensor<T>, labels: &Tensor<T>) -> usize {
    let preds = predict_labels(probs);
    let k = *labels.dims().last().expect("rank-2 labels");
    preds
        .iter()
        .enumerate()
        .filter(|&(row, &p)| labels.data()[row * k + p].to_f64() == 1.0)
        .count()
}

/// Mean cross-entropy and accuracy of the model on a dataset, inference
/// mode, dataset order.
pub fn dataset_loss_acc<T: Elem>(
    model: &mut Model<T>,
    ds: &Dataset,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Input("dataset is empty".to_string()));
    }
    let mut unused = Rng::new(0);
    let plan = batch_plan(ds.len(), batch_size, false, &mut unused)?;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for indices in &plan {
        let batch = assemble_batch(ds, indices, None)?;
        let images = batch.images.cast::<T>();
        let labels = batch.labels.cast::<T>();
        let probs = model.forward(&images, crate::layers::Mode::Infer)?;
        let (loss, _) = cross_entropy(&probs, &labels)?;
        loss_sum += loss.to_f64() * indices.len() as f64;
        correct += count_correct(&probs, &labels);
    }
    Ok((loss_sum / ds.len() as f64, correct as f64 / ds.len() as f64))
}

/// Run the full recipe: per epoch, shuffle, optionally augment, iterate
/// batches (forward, cross-entropy with optional L2 penalty, backward, SGD
/// momentum step), then monitor validation loss. Stops early after
/// `patience` non-improving epochs. The model always ends holding the
/// best-epoch weights; a non-finite loss restores them and aborts.
pub fn train<T: Elem>(
    model: &mut Model<T>,
    train_ds: &Dataset,
    val_ds: &Dataset,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    if train_ds.is_empty() {
        return Err(Error::Input("train: training set is empty".to_string()));
    }
    if val_ds.is_empty() {
        return Err(Error::Input("train: validation set is empty".to_string()));
    }

    let mut optimizer: SgdMomentum<T> = SgdMomentum::new(config.lr, config.momentum)?;
    let mut stopper = EarlyStopping::new(config.patience)?;
    let mut best_snapshot = model.snapshot();
    let mut epochs: Vec<EpochStats> = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        let mut shuffle_rng = Rng::new(config.seed).fork(epoch as u64, SHUFFLE_TAG);
        let plan = batch_plan(train_ds.len(), config.batch_size, true, &mut shuffle_rng)?;

        let aug_cfg = config.augment_config;
        let seed = config.seed;
        let aug_fn = move |idx: usize, img: &Tensor<f32>| -> Result<Tensor<f32>> {
            augment(img, &aug_cfg, &mut augment_rng(seed, epoch as u64, idx))
        };

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch_no, indices) in plan.iter().enumerate() {
            let batch = assemble_batch(
                train_ds,
                indices,
                if config.augment { Some(&aug_fn) } else { None },
            )?;
            let images = batch.images.cast::<T>();
            let labels = batch.labels.cast::<T>();

            let step = (|| -> Result<f64> {
                let probs = model.forward(&images, crate::layers::Mode::Train)?;
                let (ce_loss, grad) = cross_entropy(&probs, &labels)?;
                model.backward(&grad)?;

                let mut params = model.trainable();
                let mut penalty = 0.0;
                if config.weight_decay {
                    let mut pairs: Vec<(&Tensor<T>, &mut Tensor<T>)> = params
                        .iter_mut()
                        .filter(|(_, p)| p.weight_decay)
                        .map(|(_, p)| (&*p.value, &mut *p.grad))
                        .collect();
                    penalty = l2_penalty(&mut pairs, config.lambda)?.to_f64();
                }
                let batch_loss = ce_loss.to_f64() + penalty;
                if !batch_loss.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss {batch_loss}")));
                }
                for (key, p) in &mut params {
                    optimizer.step(key, p.value, p.grad)?;
                }
                correct += count_correct(&probs, &labels);
                Ok(batch_loss)
            })();

            match step {
                Ok(batch_loss) => loss_sum += batch_loss * indices.len() as f64,
                Err(Error::Numeric(_)) => {
                    model.restore(&best_snapshot)?;
                    return Err(Error::Diverged { epoch, batch: batch_no, loss: f64::NAN });
                }
                Err(e) => return Err(e),
            }
        }
        let train_loss = loss_sum / train_ds.len() as f64;
        let train_acc = correct as f64 / train_ds.len() as f64;

        let (val_loss, val_acc) = match dataset_loss_acc(model, val_ds, config.batch_size) {
            Ok(v) => v,
            Err(Error::Numeric(_)) => {
                model.restore(&best_snapshot)?;
                return Err(Error::Diverged { epoch, batch: 0, loss: f64::NAN });
            }
            Err(e) => return Err(e),
        };
        if !val_loss.is_finite() {
            model.restore(&best_snapshot)?;
            return Err(Error::Diverged { epoch, batch: 0, loss: val_loss });
        }

        epochs.push(EpochStats { epoch, train_loss, train_acc, val_loss, val_acc });

        let obs = stopper.observe(epoch, val_loss);
        if obs.improved {
            best_snapshot = model.snapshot();
        }
        if obs.stop {
            stop_reason = StopReason::EarlyStopped;
            break;
        }
    }

    model.restore(&best_snapshot)?;
    let history = TrainHistory { epochs, best_epoch: stopper.best_epoch(), stop_reason };
    model.set_history_summary(Some(history.summary()));
    Ok(history)
}

/// Predict every sample (inference mode) and tally against true labels.
pub fn evaluate<T: Elem>(
    model: &mut Model<T>,
    ds: &Dataset,
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    if ds.is_empty() {
        return Err(Error::Input("evaluate: dataset is empty".to_string()));
    }
    let mut unused = Rng::new(0);
    let plan = batch_plan(ds.len(), batch_size, false, &mut unused)?;
    let mut cm = ConfusionMatrix::default();
    for indices in &plan {
        let batch = assemble_batch(ds, indices, None)?;
        let images = batch.images.cast::<T>();
        let preds = model.predict(&images)?;
        for (row, &i) in indices.iter().enumerate() {
            cm.tally(preds[row], ds.get(i).label);
        }
    }
    Ok(cm)
}

/// One fold's evaluation in a cross-validation run.
#[derive(Clone, Debug, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub seed: u64,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
}

/// Aggregated k-fold results. Standard deviations are population std, noted
/// in the rendered report.
#[derive(Clone, Debug, Serialize)]
pub struct CvReport {
    pub k: usize,
    pub seed: u64,
    pub std_kind: &'static str,
    pub folds: Vec<FoldResult>,
}

/// "95.90% (0.8423%)" per the mean-and-spread reporting convention.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{:.2}% ({:.4}%)", mean * 100.0, std * 100.0)
}

fn mean_and_population_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl CvReport {
    /// Per-metric (mean, std, defined-fold count) over folds where the
    /// metric is defined.
    pub fn aggregate(&self) -> Vec<(&'static str, Option<(f64, f64, usize)>)> {
        let pick = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
            let vals: Vec<f64> = self.folds.iter().filter_map(|r| f(&r.metrics)).collect();
            if vals.is_empty() {
                None
            } else {
                let (mean, std) = mean_and_population_std(&vals);
                Some((mean, std, vals.len()))
            }
        };
        vec![
            ("accuracy", pick(&|m| Some(m.accuracy))),
            ("tpr", pick(&|m| m.tpr)),
            ("tnr", pick(&|m| m.tnr)),
            ("ppv", pick(&|m| m.ppv)),
            ("npv", pick(&|m| m.npv)),
            ("f1", pick(&|m| m.f1)),
        ]
    }

    /// Aligned text report, one "metric: mean% (std%)" line per metric.
    pub fn render(&self) -> String {
        let mut out = format!("{}-fold cross-validation (seed {}, {} std)\n", self.k, self.seed, self.std_kind);
        for (name, agg) in self.aggregate() {
            match agg {
                Some((mean, std, n)) => {
                    let note = if n < self.folds.len() {
                        format!("  [defined in {n}/{} folds]", self.folds.len())
                    } else {
                        String::new()
                    };
                    out.push_str(&format!("{name:>9}: {}{note}\n", format_mean_std(mean, std)));
                }
                None => out.push_str(&format!("{name:>9}: undefined in all folds\n")),
            }
        }
        out
    }

    pub fn json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::State(format!("cv report serialization failed: {e}")))
    }
}

/// Generic k-fold driver: split, hand each (train, val) pair plus its
/// derived seed to `run_fold`, aggregate. Fold seeds are seed + fold index
/// so folds differ but the whole run is reproducible.
pub fn cross_validate_with(
    ds: &Dataset,
    k: usize,
    seed: u64,
    run_fold: &mut dyn FnMut(usize, u64, &Dataset, &Dataset) -> Result<ConfusionMatrix>,
) -> Result<CvReport> {
    let mut split_rng = Rng::new(seed);
    let pairs = crate::data::kfold_split(ds, k, &mut split_rng)?;
    let mut folds = Vec::with_capacity(k);
    for (fold, (train_part, val_part)) in pairs.iter().enumerate() {
        let fold_seed = seed + fold as u64;
        let cm = run_fold(fold, fold_seed, train_part, val_part)?;
        folds.push(FoldResult { fold, seed: fold_seed, confusion: cm, metrics: metrics(&cm)? });
    }
    Ok(CvReport { k, seed, std_kind: "population", folds })
}

/// k-fold cross-validation of a catalog architecture: each fold builds a
/// fresh model from its fold seed, trains with early stopping, and is
/// scored on the held-out fold.
pub fn cross_validate(
    arch: ArchId,
    ds: &Dataset,
    k: usize,
    config: &TrainConfig,
) -> Result<CvReport> {
    config.validate()?;
    if ds.is_empty() {
        return Err(Error::Input("cross_validate: dataset is empty".to_string()));
    }
    let dims = ds.get(0).image.dims().to_vec();
    let input_shape = [dims[0], dims[1], dims[2]];
    cross_validate_with(ds, k, config.seed, &mut |_fold, fold_seed, train_part, val_part| {
        let mut rng = Rng::new(fold_seed);
        let mut model: Model<f32> =
            Model::build(arch, config.build_flags(), input_shape, 2, &mut rng)?;
        let mut fold_config = config.clone();
        fold_config.seed = fold_seed;
        train(&mut model, train_part, val_part, &fold_config)?;
        evaluate(&mut model, val_part, config.batch_size)
    })
}

/// One hyperparameter axis: tuned over `candidates` while untuned axes sit
/// at their defaults (or at already-fixed winners).
#[derive(Clone, Debug)]
pub struct TuneDimension {
    pub name: String,
    pub default: f64,
    pub candidates: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TuneTrial {
    pub trial: usize,
    pub dimension: String,
    pub candidate: f64,
    /// Every dimension's value during this trial.
    pub settings: Vec<(String, f64)>,
    /// Validation accuracy.
    pub score: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TuneOutcome {
    pub best: Vec<(String, f64)>,
    pub trials: Vec<TuneTrial>,
}

impl TuneOutcome {
    pub fn json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::State(format!("tune log serialization failed: {e}")))
    }
}

/// Coordinate-wise greedy search: dimensions are tuned in the given order;
/// each candidate is scored with all other dimensions held at incumbent
/// values, and the best (ties to the earlier candidate) is fixed before the
/// next dimension. Total trials = sum of grid sizes, not their product.
pub fn greedy_tune_with(
    dims: &[TuneDimension],
    eval: &mut dyn FnMut(&[(String, f64)]) -> Result<f64>,
) -> Result<TuneOutcome> {
    if dims.is_empty() {
        return Err(Error::config("greedy tuning needs at least one dimension"));
    }
    for d in dims {
        if d.candidates.is_empty() {
            return Err(Error::config(format!("dimension '{}' has no candidates", d.name)));
        }
    }
    for (i, d) in dims.iter().enumerate() {
        if dims[..i].iter().any(|e| e.name == d.name) {
            return Err(Error::config(format!("duplicate tuning dimension '{}'", d.name)));
        }
    }

    let mut incumbent: Vec<(String, f64)> =
        dims.iter().map(|d| (d.name.clone(), d.default)).collect();
    let mut trials = Vec::new();
    for (di, dim) in dims.iter().enumerate() {
        let mut best: Option<(f64, f64)> = None; // (candidate, score)
        for &candidate in &dim.candidates {
            let mut settings = incumbent.clone();
            settings[di].1 = candidate;
            let score = eval(&settings)?;
            trials.push(TuneTrial {
                trial: trials.len() + 1,
                dimension: dim.name.clone(),
                candidate,
                settings,
                score,
            });
            if best.map_or(true, |(_, s)| score > s) {
                best = Some((candidate, score));
            }
        }
        incumbent[di].1 = best.expect("at least one candidate").0;
    }
    Ok(TuneOutcome { best: incumbent, trials })
}

/// Map a tuner setting onto its TrainConfig field. Integer-valued fields
/// reject non-integral candidates.
pub fn apply_setting(config: &mut TrainConfig, name: &str, value: f64) -> Result<()> {
    let as_count = |v: f64| -> Result<usize> {
        if v.fract() != 0.0 || v < 1.0 {
            return Err(Error::config(format!("'{name}' needs a positive integer, got {v}")));
        }
        Ok(v as usize)
    };
    match name {
        "lr" => config.lr = value,
        "momentum" => config.momentum = value,
        "lambda" => config.lambda = value,
        "dropout_rate" => config.dropout_rate = value,
        "batch_size" => config.batch_size = as_count(value)?,
        "patience" => config.patience = as_count(value)?,
        "max_epochs" => config.max_epochs = as_count(value)?,
        other => return Err(Error::config(format!("unknown tuning dimension '{other}'"))),
    }
    Ok(())
}

/// Greedy tuning of a catalog architecture on fixed train/val splits; each
/// trial trains a fresh model from the run seed and scores validation
/// accuracy.
pub fn greedy_tune(
    arch: ArchId,
    train_ds: &Dataset,
    val_ds: &Dataset,
    dims: &[TuneDimension],
    config: &TrainConfig,
) -> Result<TuneOutcome> {
    if train_ds.is_empty() {
        return Err(Error::Input("tune: training set is empty".to_string()));
    }
    let d = train_ds.get(0).image.dims().to_vec();
    let input_shape = [d[0], d[1], d[2]];
    greedy_tune_with(dims, &mut |settings| {
        let mut trial_config = config.clone();
        for (name, value) in settings {
            apply_setting(&mut trial_config, name, *value)?;
        }
        trial_config.validate()?;
        let mut rng = Rng::new(trial_config.seed);
        let mut model: Model<f32> =
            Model::build(arch, trial_config.build_flags(), input_shape, 2, &mut rng)?;
        train(&mut model, train_ds, val_ds, &trial_config)?;
        let (_, val_acc) = dataset_loss_acc(&mut model, val_ds, trial_config.batch_size)?;
        Ok(val_acc)
    })
}

/// CSV row for a metrics report: tp, fp, fn, tn, accuracy, tpr, tnr, ppv,
/// npv, f1. Absent metrics render as empty fields.
pub fn metrics_csv(cm: &ConfusionMatrix, report: &MetricsReport) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    format!(
        "tp,fp,fn,tn,accuracy,tpr,tnr,ppv,npv,f1\n{},{},{},{},{},{},{},{},{},{}\n",
        cm.tp,
        cm.fp,
        cm.r#fn,
        cm.tn,
        report.accuracy,
        opt(report.tpr),
        opt(report.tnr),
        opt(report.ppv),
        opt(report.npv),
        opt(report.f1)
    )
}

pub fn metrics_json(cm: &ConfusionMatrix, report: &MetricsReport) -> Result<String> {
    #[derive(Serialize)]
    struct Payload<'a> {
        confusion: &'a ConfusionMatrix,
        metrics: &'a MetricsReport,
    }
    serde_json::to_string_pretty(&Payload { confusion: cm, metrics: report })
        .map_err(|e| Error::State(format!("metrics serialization failed: {e}")))
}

/// Raw counts and row-normalized rates as a pair of aligned text tables.
pub fn confusion_tables(cm: &ConfusionMatrix) -> String {
    let headers = ["pred damage", "pred no_damage"];
    let rows = [("true damage", cm.tp, cm.r#fn), ("true no_damage", cm.fp, cm.tn)];
    let label_w = 16;
    let col_w = headers.iter().map(|h| h.len()).max().unwrap() + 2;

    let mut out = String::new();
    out.push_str(&format!(
        "{:label_w$}{:>col_w$}{:>col_w$}\n",
        "counts", headers[0], headers[1]
    ));
    for (label, a, b) in rows {
        out.push_str(&format!("{label:label_w$}{a:>col_w$}{b:>col_w$}\n"));
    }
    out.push('\n');
    out.push_str(&format!(
        "{:label_w$}{:>col_w$}{:>col_w$}\n",
        "row-normalized", headers[0], headers[1]
    ));
    for (label, a, b) in rows {
        let total = a + b;
        let cell = |v: usize| {
            if total == 0 {
                format!("{:>col_w$}", "-")
            } else {
                format!("{:>col_w$.4}", v as f64 / total as f64)
            }
        };
        out.push_str(&format!("{label:label_w$}{}{}\n", cell(a), cell(b)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;
    use crate::layers::ConvSpec;
    use crate::model::{LayerSpec, NetPlan};

    fn toy_plan(hw: usize) -> NetPlan {
        assert!(hw % 2 == 0);
        NetPlan::new(vec![
            LayerSpec::Conv(ConvSpec { filters: 4, kernel: (3, 3), stride: (1, 1), padding: (1, 1) }),
            LayerSpec::Relu,
            LayerSpec::Pool { window: (2, 2), stride: (2, 2) },
            LayerSpec::Flatten,
            LayerSpec::Dense { width: 8 },
            LayerSpec::Relu,
            LayerSpec::Dense { width: 2 },
        ])
    }

    fn toy_model(hw: usize, seed: u64) -> Model<f32> {
        let mut rng = Rng::new(seed);
        Model::from_plan(toy_plan(hw), [hw, hw, 3], &mut rng).unwrap()
    }

    fn quick_config(seed: u64) -> TrainConfig {
        TrainConfig { batch_size: 16, max_epochs: 20, seed, ..TrainConfig::default() }
    }

    /// Hand-set single dense layer that reads the synthetic ramp direction:
    /// logit 0 weights the x coordinate, logit 1 the y coordinate.
    fn ramp_oracle_model(hw: usize) -> Model<f32> {
        let mut rng = Rng::new(0);
        let plan = NetPlan::new(vec![LayerSpec::Flatten, LayerSpec::Dense { width: 2 }]);
        let mut model: Model<f32> = Model::from_plan(plan, [hw, hw, 3], &mut rng).unwrap();
        let c = (hw - 1) as f32 / 2.0;
        for (key, t) in model.state_mut() {
            if key.ends_with("weight") {
                for y in 0..hw {
                    for x in 0..hw {
                        for ch in 0..3 {
                            let row = (y * hw + x) * 3 + ch;
                            t.data_mut()[row * 2] = x as f32 - c;
                            t.data_mut()[row * 2 + 1] = y as f32 - c;
                        }
                    }
                }
            } else if key.ends_with("bias") {
                t.fill(0.0);
            }
        }
        model
    }

    /// Bias-only model that always answers damage.
    fn always_damage_model(hw: usize) -> Model<f32> {
        let mut rng = Rng::new(0);
        let plan = NetPlan::new(vec![LayerSpec::Flatten, LayerSpec::Dense { width: 2 }]);
        let mut model: Model<f32> = Model::from_plan(plan, [hw, hw, 3], &mut rng).unwrap();
        for (key, t) in model.state_mut() {
            if key.ends_with("weight") {
                t.fill(0.0);
            } else {
                t.data_mut()[0] = 5.0;
                t.data_mut()[1] = 0.0;
            }
        }
        model
    }

    #[test]
    fn metrics_best_row_arithmetic() {
        let cm = ConfusionMatrix::new(991, 8, 9, 992);
        assert_eq!(cm.total(), 2000);
        let m = metrics(&cm).unwrap();
        assert_eq!(m.accuracy, 0.9915);
        assert_eq!(m.tpr.unwrap(), 0.991);
        assert_eq!(m.tnr.unwrap(), 0.992);
        assert!((m.ppv.unwrap() - 991.0 / 999.0).abs() < 1e-12);
        assert!((m.npv.unwrap() - 992.0 / 1001.0).abs() < 1e-12);
        assert!((m.f1.unwrap() - 0.9915).abs() < 1e-4);
        // f1 is the harmonic mean of ppv and tpr.
        let (p, r) = (m.ppv.unwrap(), m.tpr.unwrap());
        assert!((m.f1.unwrap() - 2.0 * p * r / (p + r)).abs() < 1e-12);
    }

    #[test]
    fn metrics_symmetric_and_perfect_cases() {
        let m = metrics(&ConfusionMatrix::new(25, 25, 25, 25)).unwrap();
        assert_eq!(m.accuracy, 0.5);
        for v in [m.tpr, m.tnr, m.ppv, m.npv, m.f1] {
            assert_eq!(v.unwrap(), 0.5);
        }

        let m = metrics(&ConfusionMatrix::new(7, 0, 0, 3)).unwrap();
        assert_eq!(m.accuracy, 1.0);
        for v in [m.tpr, m.tnr, m.ppv, m.npv, m.f1] {
            assert_eq!(v.unwrap(), 1.0);
        }
    }

    #[test]
    fn metrics_zero_denominators_are_absent() {
        // Never predicts damage and no damage samples exist: ppv and tpr
        // both undefined or zero.
        let m = metrics(&ConfusionMatrix::new(0, 0, 0, 10)).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert!(m.tpr.is_none(), "tp+fn = 0");
        assert!(m.ppv.is_none(), "tp+fp = 0");
        assert!(m.f1.is_none());
        assert_eq!(m.tnr.unwrap(), 1.0);

        // Defined but zero precision and recall: f1 is 0/0, absent.
        let m = metrics(&ConfusionMatrix::new(0, 3, 4, 5)).unwrap();
        assert_eq!(m.tpr.unwrap(), 0.0);
        assert_eq!(m.ppv.unwrap(), 0.0);
        assert!(m.f1.is_none());

        assert!(metrics(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn evaluate_tallies_against_truth() {
        let ds = synthetic_dataset(100, 8, 21);
        let mut oracle = ramp_oracle_model(8);
        let cm = evaluate(&mut oracle, &ds, 32).unwrap();
        assert_eq!((cm.tp, cm.tn, cm.fp, cm.r#fn), (100, 100, 0, 0));

        let mut constant = always_damage_model(8);
        let cm = evaluate(&mut constant, &ds, 32).unwrap();
        assert_eq!((cm.tp, cm.fp, cm.r#fn, cm.tn), (100, 100, 0, 0));

        assert!(evaluate(&mut constant, &ds.subset(&[], "empty"), 32).is_err());
    }

    #[test]
    fn evaluate_totals_match_dataset_size_over_seeds() {
        let ds = synthetic_dataset(13, 6, 77);
        for seed in 0..50 {
            let mut model = toy_model(6, seed);
            let cm = evaluate(&mut model, &ds, 7).unwrap();
            assert_eq!(cm.total(), ds.len());
        }
    }

    #[test]
    fn early_stopping_forced_sequence() {
        let losses = [1.0, 0.9, 0.95, 0.96, 0.97, 0.98, 0.99];
        let mut stopper = EarlyStopping::new(5).unwrap();
        let mut stopped_at = None;
        for (i, &loss) in losses.iter().enumerate() {
            let obs = stopper.observe(i + 1, loss);
            if obs.stop {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(7));
        assert_eq!(stopper.best_epoch(), 2);
        assert_eq!(stopper.best_loss(), 0.9);
    }

    #[test]
    fn early_stopping_requires_strict_improvement() {
        let mut stopper = EarlyStopping::new(1).unwrap();
        assert!(!stopper.observe(1, 1.0).stop);
        // Equal loss is not an improvement with min-delta 0.
        let obs = stopper.observe(2, 1.0);
        assert!(!obs.improved);
        assert!(obs.stop);
        assert_eq!(stopper.best_epoch(), 1);

        let mut stopper = EarlyStopping::new(2).unwrap();
        for e in 1..=10 {
            let obs = stopper.observe(e, 1.0 / e as f64);
            assert!(obs.improved);
            assert!(!obs.stop);
        }
        assert_eq!(stopper.best_epoch(), 10);
        assert!(EarlyStopping::new(0).is_err());
    }

    #[test]
    fn train_converges_on_separable_toy_data() {
        let ds = synthetic_dataset(60, 8, 5);
        let mut split_rng = Rng::new(9);
        let folds = crate::data::kfold_split(&ds, 5, &mut split_rng).unwrap();
        let (train_ds, val_ds) = &folds[0];

        let mut model = toy_model(8, 3);
        let config = quick_config(3);
        let history = train(&mut model, train_ds, val_ds, &config).unwrap();

        assert!(!history.epochs.is_empty());
        assert!(history.epochs.len() <= config.max_epochs);
        let last = history.epochs.last().unwrap();
        assert!(
            history.epochs.iter().any(|e| e.train_acc >= 0.99),
            "train accuracy peaked at {}",
            history.epochs.iter().map(|e| e.train_acc).fold(0.0, f64::max)
        );
        assert!(last.val_acc >= 0.9, "val accuracy {}", last.val_acc);

        // Best epoch holds the minimum observed validation loss.
        let min_loss = history.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(history.best().val_loss, min_loss);
        assert_eq!(
            model.history_summary().unwrap(),
            history.summary()
        );
    }

    #[test]
    fn train_restores_best_epoch_weights() {
        let ds = synthetic_dataset(40, 8, 6);
        let mut split_rng = Rng::new(2);
        let folds = crate::data::kfold_split(&ds, 4, &mut split_rng).unwrap();
        let (train_ds, val_ds) = &folds[0];

        let mut model = toy_model(8, 11);
        let config = TrainConfig { batch_size: 16, max_epochs: 8, patience: 2, seed: 11, ..TrainConfig::default() };
        let history = train(&mut model, train_ds, val_ds, &config).unwrap();

        // Recomputing the monitored loss on the returned weights reproduces
        // the best epoch's value exactly.
        let (val_loss, _) = dataset_loss_acc(&mut model, val_ds, config.batch_size).unwrap();
        assert_eq!(val_loss, history.best().val_loss);
        let min_loss = history.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(val_loss, min_loss);
    }

    #[test]
    fn train_is_deterministic_with_augmentation() {
        let ds = synthetic_dataset(30, 8, 14);
        let mut split_rng = Rng::new(1);
        let folds = crate::data::kfold_split(&ds, 5, &mut split_rng).unwrap();
        let (train_ds, val_ds) = &folds[0];
        let config = TrainConfig {
            batch_size: 8,
            max_epochs: 4,
            seed: 42,
            augment: true,
            weight_decay: true,
            ..TrainConfig::default()
        };

        let run = || {
            let mut model = toy_model(8, 42);
            let history = train(&mut model, train_ds, val_ds, &config).unwrap();
            (history, model.snapshot())
        };
        let (h1, s1) = run();
        let (h2, s2) = run();
        assert_eq!(h1, h2);
        for ((k1, t1), (k2, t2)) in s1.iter().zip(&s2) {
            assert_eq!(k1, k2);
            assert_eq!(t1.data(), t2.data());
        }
    }

    #[test]
    fn train_f64_runs_are_bit_identical() {
        let ds = synthetic_dataset(20, 6, 31);
        let mut split_rng = Rng::new(8);
        let folds = crate::data::kfold_split(&ds, 4, &mut split_rng).unwrap();
        let (train_ds, val_ds) = &folds[0];
        let config = TrainConfig {
            batch_size: 8,
            max_epochs: 3,
            seed: 7,
            weight_decay: true,
            ..TrainConfig::default()
        };

        let run = || {
            let mut rng = Rng::new(19);
            let mut model: Model<f64> = Model::from_plan(toy_plan(6), [6, 6, 3], &mut rng).unwrap();
            train(&mut model, train_ds, val_ds, &config).unwrap();
            model.snapshot()
        };
        let s1 = run();
        let s2 = run();
        for ((_, t1), (_, t2)) in s1.iter().zip(&s2) {
            assert_eq!(t1.data(), t2.data());
        }
    }

    #[test]
    fn divergence_aborts_and_restores_finite_weights() {
        let ds = synthetic_dataset(20, 6, 3);
        let mut split_rng = Rng::new(4);
        let folds = crate::data::kfold_split(&ds, 4, &mut split_rng).unwrap();
        let (train_ds, val_ds) = &folds[0];

        let mut model = toy_model(6, 2);
        let config = TrainConfig { batch_size: 8, lr: 1e28, max_epochs: 10, seed: 2, ..TrainConfig::default() };
        match train(&mut model, train_ds, val_ds, &config) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
        for (key, t) in model.state() {
            assert!(t.data().iter().all(|v| v.is_finite()), "{key} has non-finite values");
        }
    }

    #[test]
    fn train_validates_inputs() {
        let ds = synthetic_dataset(4, 6, 3);
        let empty = ds.subset(&[], "empty");
        let mut model = toy_model(6, 1);
        assert!(train(&mut model, &empty, &ds, &quick_config(0)).is_err());
        assert!(train(&mut model, &ds, &empty, &quick_config(0)).is_err());
        let bad = TrainConfig { momentum: 1.0, ..TrainConfig::default() };
        assert!(train(&mut model, &ds, &ds, &bad).is_err());
    }

    #[test]
    fn cv_stub_perfect_model() {
        let ds = synthetic_dataset(20, 4, 12);
        let report = cross_validate_with(&ds, 4, 99, &mut |_fold, _seed, _train, val| {
            let counts = val.class_counts();
            Ok(ConfusionMatrix::new(counts[0], 0, 0, counts[1]))
        })
        .unwrap();
        assert_eq!(report.folds.len(), 4);
        let agg = report.aggregate();
        let (mean, std, n) = agg[0].1.unwrap();
        assert_eq!((mean, std, n), (1.0, 0.0, 4));
        assert!(report.render().contains("accuracy: 100.00% (0.0000%)"), "{}", report.render());
        // Fold seeds derive from the run seed.
        assert_eq!(report.folds[0].seed, 99);
        assert_eq!(report.folds[3].seed, 102);
    }

    #[test]
    fn cv_folds_cover_dataset_once() {
        let ds = synthetic_dataset(15, 4, 1);
        let mut val_total = 0;
        cross_validate_with(&ds, 5, 3, &mut |_f, _s, train, val| {
            assert_eq!(train.len() + val.len(), ds.len());
            val_total += val.len();
            Ok(ConfusionMatrix::new(val.class_counts()[0], 0, 0, val.class_counts()[1]))
        })
        .unwrap();
        assert_eq!(val_total, ds.len());
    }

    #[test]
    fn cv_trains_real_models_per_fold() {
        let ds = synthetic_dataset(15, 8, 17);
        let config = TrainConfig { batch_size: 8, max_epochs: 6, seed: 5, ..TrainConfig::default() };
        let report = cross_validate(ArchId::Vgg3Block, &ds, 3, &config).unwrap();
        assert_eq!(report.folds.len(), 3);
        for fold in &report.folds {
            assert_eq!(fold.confusion.total(), 10);
        }
        let (mean, _, _) = report.aggregate()[0].1.unwrap();
        assert!(mean > 0.6, "mean accuracy {mean}");
    }

    #[test]
    fn format_matches_table_convention() {
        assert_eq!(format_mean_std(0.9590, 0.008423), "95.90% (0.8423%)");
        assert_eq!(format_mean_std(1.0, 0.0), "100.00% (0.0000%)");
    }

    #[test]
    fn tuner_trial_count_is_sum_not_product() {
        let dims = vec![
            TuneDimension { name: "lr".into(), default: 0.001, candidates: vec![0.01, 0.001, 0.0001] },
            TuneDimension { name: "lambda".into(), default: 0.001, candidates: vec![0.001, 0.0001] },
            TuneDimension { name: "momentum".into(), default: 0.9, candidates: vec![0.9, 0.95] },
        ];
        // Favor lr 0.001, then lambda 0.0001, then momentum 0.9.
        let mut calls = 0;
        let outcome = greedy_tune_with(&dims, &mut |settings| {
            calls += 1;
            let get = |n: &str| settings.iter().find(|(k, _)| k == n).unwrap().1;
            let mut score = 0.0;
            if get("lr") == 0.001 {
                score += 0.5;
            }
            if get("lambda") == 0.0001 {
                score += 0.3;
            }
            if get("momentum") == 0.9 {
                score += 0.1;
            }
            Ok(score)
        })
        .unwrap();
        assert_eq!(calls, 7);
        assert_eq!(outcome.trials.len(), 7);
        assert_eq!(outcome.best, vec![
            ("lr".to_string(), 0.001),
            ("lambda".to_string(), 0.0001),
            ("momentum".to_string(), 0.9),
        ]);

        // While tuning dimension i, the other dimensions sit at incumbents.
        for t in &outcome.trials {
            match t.dimension.as_str() {
                "lr" => {
                    assert_eq!(t.settings[1].1, 0.001, "lambda at default");
                    assert_eq!(t.settings[2].1, 0.9, "momentum at default");
                }
                "lambda" => assert_eq!(t.settings[0].1, 0.001, "lr fixed at winner"),
                "momentum" => {
                    assert_eq!(t.settings[0].1, 0.001);
                    assert_eq!(t.settings[1].1, 0.0001);
                }
                other => panic!("unexpected dimension {other}"),
            }
        }
    }

    #[test]
    fn tuner_ties_resolve_to_earlier_candidate() {
        let dims = vec![TuneDimension { name: "lr".into(), default: 0.1, candidates: vec![0.3, 0.2, 0.1] }];
        let outcome = greedy_tune_with(&dims, &mut |_| Ok(1.0)).unwrap();
        assert_eq!(outcome.best[0].1, 0.3);
        assert_eq!(outcome.trials.len(), 3);

        let dims = vec![TuneDimension { name: "x".into(), default: 5.0, candidates: vec![5.0] }];
        let outcome = greedy_tune_with(&dims, &mut |_| Ok(0.0)).unwrap();
        assert_eq!(outcome.trials.len(), 1);
        assert_eq!(outcome.best[0].1, 5.0);

        assert!(greedy_tune_with(&[], &mut |_| Ok(0.0)).is_err());
        let empty = vec![TuneDimension { name: "x".into(), default: 1.0, candidates: vec![] }];
        assert!(greedy_tune_with(&empty, &mut |_| Ok(0.0)).is_err());
    }

    #[test]
    fn apply_setting_maps_names_to_fields() {
        let mut cfg = TrainConfig::default();
        apply_setting(&mut cfg, "lr", 0.01).unwrap();
        apply_setting(&mut cfg, "batch_size", 32.0).unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.batch_size, 32);
        assert!(apply_setting(&mut cfg, "batch_size", 32.5).is_err());
        assert!(apply_setting(&mut cfg, "learning_rte", 0.1).is_err());
    }

    #[test]
    fn history_exports() {
        let history = TrainHistory {
            epochs: vec![
                EpochStats { epoch: 1, train_loss: 0.5, train_acc: 0.75, val_loss: 0.6, val_acc: 0.7 },
                EpochStats { epoch: 2, train_loss: 0.25, train_acc: 0.9, val_loss: 0.4, val_acc: 0.85 },
            ],
            best_epoch: 2,
            stop_reason: StopReason::MaxEpochs,
        };
        let csv = history.csv();
        assert!(csv.starts_with("epoch,train_loss,train_acc,val_loss,val_acc\n"));
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("2,0.25,0.9,0.4,0.85"));
        assert_eq!(csv, history.csv(), "export is idempotent");

        let json = history.json().unwrap();
        assert!(json.contains("\"best_epoch\": 2"));
        assert!(json.contains("max_epochs"));
        assert_eq!(history.summary(), "{\"epochs\":2,\"best_epoch\":2,\"stop\":\"max_epochs\"}");
    }

    #[test]
    fn metrics_exports() {
        let cm = ConfusionMatrix::new(991, 8, 9, 992);
        let m = metrics(&cm).unwrap();
        let csv = metrics_csv(&cm, &m);
        assert!(csv.starts_with("tp,fp,fn,tn,"));
        assert!(csv.contains("991,8,9,992,0.9915,"));

        let undefined = metrics(&ConfusionMatrix::new(0, 0, 0, 10)).unwrap();
        let csv = metrics_csv(&ConfusionMatrix::new(0, 0, 0, 10), &undefined);
        assert!(csv.contains(",1,,1,,"), "absent metrics are empty fields: {csv}");

        let json = metrics_json(&cm, &m).unwrap();
        assert!(json.contains("\"tp\": 991"));
        assert!(json.contains("\"fn\": 9"));

        let tables = confusion_tables(&cm);
        assert!(tables.contains("991"));
        assert!(tables.contains("0.9910"));
        assert!(tables.contains("0.0080"));
        let lines: Vec<&str> = tables.lines().collect();
        assert_eq!(lines.len(), 7, "two tables with a blank separator:\n{tables}");
    }
}
