//! Training, evaluation and method comparison runs, and the files they write.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint;
use crate::config::{DatasetKind, ExperimentConfig};
use crate::data::{self, BlobLayout, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{mlp_layers, mnist_layers, Architecture, Method, Mode, Model, ModelBlueprint, PassContext};
use crate::optim::Adadelta;
use crate::params::Binder;
use crate::rng::{stream, stream_seed};
use crate::uncertainty::{self, PredictiveSummary, RejectionCurve};

pub const CHECKPOINT_FILE: &str = "checkpoint.sdcn";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARIES_FILE: &str = "summaries.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_HEADER: &str = "method,p,seed,split,accuracy,mean_mi_bits,mean_entropy_bits";

/// How reported numbers are defined; written next to every evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricNotes {
    pub accuracy: String,
    pub mutual_information: String,
    pub entropy: String,
    pub rejection_statistic: String,
}

impl Default for MetricNotes {
    fn default() -> Self {
        Self {
            accuracy: "popular-vote argmax over Monte-Carlo passes, ties to the lowest class".into(),
            mutual_information: "per-sample H[mean softmax] - mean H[pass softmax] in bits, averaged over samples"
                .into(),
            entropy: "per-sample entropy of the mean softmax in bits, averaged over samples".into(),
            rejection_statistic: "mean softmax of the popular-vote class".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Splits> {
    match cfg.dataset {
        DatasetKind::Mnist => {
            let s = data::load_mnist(&cfg.data_dir, &cfg.mnist_files(), &cfg.split_spec())?;
            Ok(Splits {
                train: s.train,
                val: s.val,
                test: s.test,
            })
        }
        DatasetKind::Blobs => {
            let gen = |index: u64, split: Split| -> Result<Dataset> {
                let seed = stream_seed(cfg.seed, stream::DATA, index);
                let mut d = data::synth_blobs(
                    cfg.blob_classes,
                    cfg.blob_per_class,
                    cfg.blob_noise,
                    seed,
                    BlobLayout::Features,
                )?;
                d.split = split;
                Ok(d)
            };
            Ok(Splits {
                train: gen(0, Split::Train)?,
                val: gen(1, Split::Val)?,
                test: gen(2, Split::Test)?,
            })
        }
    }
}

/// Untrained model for `cfg`, initialized from the config's seed.
pub fn build_model(cfg: &ExperimentConfig, sample_shape: &[usize], n_classes: usize) -> Result<Model> {
    let (layers, input_shape) = match cfg.architecture {
        Architecture::MnistCnn => {
            if sample_shape != [1, 28, 28] || n_classes != 10 {
                return Err(Error::Config(format!(
                    "mnist_cnn expects 1x28x28 inputs and 10 classes, data has {sample_shape:?} and {n_classes}"
                )));
            }
            (mnist_layers(), vec![1, 28, 28])
        }
        Architecture::Mlp => {
            let inputs = sample_shape.iter().product();
            (mlp_layers(inputs, cfg.hidden, n_classes), sample_shape.to_vec())
        }
    };
    let mut bp = ModelBlueprint::new(layers, input_shape, n_classes, cfg.method, cfg.rate());
    bp.mask_sites = cfg.mask_sites.clone();
    bp.bayes = cfg.bayes_settings();
    bp.build(stream_seed(cfg.seed, stream::INIT, 0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
    pub val_mean_mi_bits: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

/// Trains one epoch in place; returns the mean minibatch loss.
pub fn train_epoch(
    cfg: &ExperimentConfig,
    model: &mut Model,
    opt: &mut Adadelta,
    train: &Dataset,
    epoch: usize,
) -> Result<f64> {
    let batches = data::batch_indices(
        train.len(),
        cfg.batch_size,
        Some(stream_seed(cfg.seed, stream::SHUFFLE, epoch as u64)),
    )?;
    let mask_master = stream_seed(cfg.seed, stream::TRAIN_MASKS, epoch as u64);
    let bbb = cfg.method == Method::Bbb;
    let n_draws = if bbb { cfg.bbb_train_samples } else { 1 };
    let m = batches.len();
    let mut total = 0.0;
    for (b, idx) in batches.iter().enumerate() {
        let (x, labels) = train.batch(idx)?;
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let xv = tape.constant(x);
        let mut ctx = PassContext::new(Mode::Train, mask_master, b as u64);
        let kl_weight = if bbb { cfg.kl_schedule.weight(b, m) } else { 0.0 };
        let (loss, _) = model.objective(&mut tape, &mut binder, xv, &labels, &mut ctx, n_draws, kl_weight)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {value} at epoch {epoch}, batch {b}"
            )));
        }
        tape.backward(loss)?;
        let grads = binder.take_grads(&mut tape);
        opt.step(&mut model.params, &grads, cfg.learning_rate)
            .map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("{msg} at epoch {epoch}, batch {b}")),
                other => other,
            })?;
        model.apply_bn_updates(&ctx.bn_updates)?;
        total += value;
    }
    Ok(total / m as f64)
}

/// Popular-vote accuracy and mean mutual information of Monte-Carlo summaries.
pub fn summary_metrics(summaries: &[PredictiveSummary], labels: &[usize]) -> (f64, f64, f64) {
    let n = summaries.len() as f64;
    let correct = summaries
        .iter()
        .zip(labels)
        .filter(|(s, &y)| s.popular_class == y)
        .count();
    let mi = summaries.iter().map(|s| s.mutual_information).sum::<f64>() / n;
    let h = summaries.iter().map(|s| s.predictive_entropy).sum::<f64>() / n;
    (correct as f64 / n, mi, h)
}

/// Trains per `cfg`, validating after every epoch, and writes the checkpoint and
/// history into the output directory.
pub fn train(cfg: &ExperimentConfig, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    train_on(cfg, &data, on_epoch)
}

pub fn train_on(cfg: &ExperimentConfig, data: &Splits, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    let mut model = build_model(cfg, data.train.sample_shape(), data.train.n_classes)?;
    let mut opt = Adadelta::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mean_loss = train_epoch(cfg, &mut model, &mut opt, &data.train, epoch)?;
        let val_seed = stream_seed(cfg.seed, stream::VALIDATION, epoch as u64);
        let summaries = uncertainty::mc_predict_batch(&model, &data.val.inputs, cfg.val_passes, val_seed)?;
        let (val_accuracy, val_mean_mi_bits, _) = summary_metrics(&summaries, &data.val.labels);
        let rec = EpochRecord {
            epoch,
            mean_loss,
            val_accuracy,
            val_mean_mi_bits,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    checkpoint::save(&cfg.output_dir.join(CHECKPOINT_FILE), cfg, &model.params)?;
    let mut csv = String::from("epoch,mean_loss,val_accuracy,val_mean_mi_bits\n");
    for r in &history {
        writeln!(
            csv,
            "{},{},{},{}",
            r.epoch, r.mean_loss, r.val_accuracy, r.val_mean_mi_bits
        )
        .unwrap();
    }
    write(&cfg.output_dir.join(HISTORY_FILE), csv.as_bytes())?;
    Ok(TrainOutcome { model, history })
}

/// Rebuilds the model described by `cfg` with the weights stored in `path`.
pub fn load_model(cfg: &ExperimentConfig, path: &Path, sample_shape: &[usize], n_classes: usize) -> Result<Model> {
    let (stored_cfg, params) = checkpoint::load(path)?;
    if stored_cfg.method != cfg.method || stored_cfg.architecture != cfg.architecture {
        return Err(Error::Config(format!(
            "checkpoint was trained as {} / {}, config asks for {} / {}",
            stored_cfg.method,
            stored_cfg.architecture.as_str(),
            cfg.method,
            cfg.architecture.as_str()
        )));
    }
    let mut model = build_model(cfg, sample_shape, n_classes)?;
    checkpoint::restore_into(&mut model.params, params)?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub p: Option<f64>,
    pub seed: u64,
    pub split: Split,
    pub passes: usize,
    pub n_samples: usize,
    pub accuracy: f64,
    pub mean_mi_bits: f64,
    pub mean_entropy_bits: f64,
    pub rejection: RejectionCurve,
    /// Histogram of popular-class softmax values pooled over samples, 10 bins.
    pub popular_softmax_histogram: Vec<usize>,
    pub notes: MetricNotes,
}

impl EvalReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.method,
            self.p.map(|p| p.to_string()).unwrap_or_default(),
            self.seed,
            self.split,
            self.accuracy,
            self.mean_mi_bits,
            self.mean_entropy_bits
        )
    }
}

/// Monte-Carlo evaluation of `model` on `set` with the config's test pass count.
pub fn evaluate_model(
    cfg: &ExperimentConfig,
    model: &Model,
    set: &Dataset,
) -> Result<(EvalReport, Vec<PredictiveSummary>)> {
    let master = stream_seed(cfg.seed, stream::TEST, 0);
    let summaries = uncertainty::mc_predict_batch(model, &set.inputs, cfg.test_passes, master)?;
    let (accuracy, mean_mi_bits, mean_entropy_bits) = summary_metrics(&summaries, &set.labels);
    let rejection = uncertainty::rejection_analysis(&summaries, &set.labels, &uncertainty::default_thresholds())?;
    let mut hist = vec![0; 10];
    for s in &summaries {
        let (_, bins) = uncertainty::histogram_counts(s, 10)?;
        hist.iter_mut().zip(bins).for_each(|(h, b)| *h += b);
    }
    let report = EvalReport {
        method: cfg.method,
        p: cfg.p,
        seed: cfg.seed,
        split: set.split,
        passes: cfg.test_passes,
        n_samples: set.len(),
        accuracy,
        mean_mi_bits,
        mean_entropy_bits,
        rejection,
        popular_softmax_histogram: hist,
        notes: MetricNotes::default(),
    };
    Ok((report, summaries))
}

/// Writes `metrics.csv`, `summaries.jsonl` and `report.json` into `dir`.
pub fn write_eval(dir: &Path, report: &EvalReport, summaries: &[PredictiveSummary]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(
        &dir.join(METRICS_FILE),
        format!("{METRICS_HEADER}\n{}\n", report.csv_row()).as_bytes(),
    )?;
    let mut jsonl = String::new();
    for s in summaries {
        jsonl.push_str(&serde_json::to_string(s).expect("summary serializes"));
        jsonl.push('\n');
    }
    write(&dir.join(SUMMARIES_FILE), jsonl.as_bytes())?;
    write(
        &dir.join(REPORT_FILE),
        serde_json::to_string_pretty(report)
            .expect("report serializes")
            .as_bytes(),
    )
}

/// Loads the checkpoint, evaluates on the test split and writes the result files into
/// the config's output directory.
pub fn evaluate(cfg: &ExperimentConfig, checkpoint_path: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let model = load_model(cfg, checkpoint_path, data.test.sample_shape(), data.test.n_classes)?;
    let (report, summaries) = evaluate_model(cfg, &model, &data.test)?;
    write_eval(&cfg.output_dir, &report, &summaries)?;
    Ok(report)
}

/// Trains then evaluates, writing every file of both steps.
pub fn run(cfg: &ExperimentConfig, data: &Splits, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<EvalReport> {
    cfg.validate()?;
    let outcome = train_on(cfg, data, on_epoch)?;
    let (report, summaries) = evaluate_model(cfg, &outcome.model, &data.test)?;
    write_eval(&cfg.output_dir, &report, &summaries)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: Method,
    pub p: Option<f64>,
    pub seeds: Vec<u64>,
    pub accuracy_mean: f64,
    /// Sample standard deviation; absent with a single seed.
    pub accuracy_sd: Option<f64>,
    pub mi_mean: f64,
    pub mi_sd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub runs: Vec<EvalReport>,
}

impl ComparisonReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,p,n_seeds,accuracy_mean,accuracy_sd,mi_mean_bits,mi_sd_bits\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.method,
                opt(r.p),
                r.seeds.len(),
                r.accuracy_mean,
                opt(r.accuracy_sd),
                r.mi_mean,
                opt(r.mi_sd)
            )
            .unwrap();
        }
        out
    }
}

fn mean_sd(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, sd)
}

/// Groups evaluation reports by method and rate, in first-seen order.
pub fn summarize(runs: Vec<EvalReport>) -> ComparisonReport {
    let mut keys: Vec<(Method, Option<u64>)> = Vec::new();
    let mut groups: BTreeMap<usize, Vec<&EvalReport>> = BTreeMap::new();
    for r in &runs {
        let key = (r.method, r.p.map(f64::to_bits));
        let i = keys.iter().position(|k| *k == key).unwrap_or_else(|| {
            keys.push(key);
            keys.len() - 1
        });
        groups.entry(i).or_default().push(r);
    }
    let rows = groups
        .values()
        .map(|g| {
            let (accuracy_mean, accuracy_sd) = mean_sd(&g.iter().map(|r| r.accuracy).collect::<Vec<_>>());
            let (mi_mean, mi_sd) = mean_sd(&g.iter().map(|r| r.mean_mi_bits).collect::<Vec<_>>());
            ComparisonRow {
                method: g[0].method,
                p: g[0].p,
                seeds: g.iter().map(|r| r.seed).collect(),
                accuracy_mean,
                accuracy_sd,
                mi_mean,
                mi_sd,
            }
        })
        .collect();
    ComparisonReport { rows, runs }
}

/// Data-defining fields; configs compared together must agree on them.
fn data_key(c: &ExperimentConfig) -> String {
    format!(
        "{:?}|{}|{:?}|{}|{}|{}|{:?}|{}|{}|{}|{}",
        c.dataset,
        c.data_dir.display(),
        c.mnist_files(),
        c.architecture.as_str(),
        c.train_size,
        c.val_size,
        c.val_source,
        c.test_size,
        c.blob_classes,
        c.blob_per_class,
        c.blob_noise
    )
}

/// Runs every config and writes `comparison.csv` and `comparison.json` into `out_dir`.
pub fn compare_methods(
    configs: &[ExperimentConfig],
    out_dir: &Path,
    on_epoch: &mut dyn FnMut(&ExperimentConfig, &EpochRecord),
) -> Result<ComparisonReport> {
    let first = configs
        .first()
        .ok_or_else(|| Error::Config("no configs to compare".into()))?;
    for c in configs {
        c.validate()?;
        if data_key(c) != data_key(first) {
            return Err(Error::Config(format!(
                "config for {} (seed {}) uses different data settings",
                c.method, c.seed
            )));
        }
    }
    let mut outputs: Vec<&PathBuf> = configs.iter().map(|c| &c.output_dir).collect();
    outputs.sort();
    if outputs.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config(
            "compared configs must use distinct output directories".into(),
        ));
    }
    let mut runs = Vec::with_capacity(configs.len());
    let mut cached: Option<(u64, Splits)> = None;
    for c in configs {
        // Blob data depends on the seed; MNIST does not.
        let key = if c.dataset == DatasetKind::Blobs { c.seed } else { 0 };
        if cached.as_ref().map(|(k, _)| *k) != Some(key) {
            cached = Some((key, load_data(c)?));
        }
        let data = &cached.as_ref().unwrap().1;
        runs.push(run(c, data, &mut |r| on_epoch(c, r))?);
    }
    let report = summarize(runs);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write(&out_dir.join("comparison.csv"), report.to_csv().as_bytes())?;
    write(
        &out_dir.join("comparison.json"),
        serde_json::to_string_pretty(&report)
            .expect("report serializes")
            .as_bytes(),
    )?;
    Ok(report)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
