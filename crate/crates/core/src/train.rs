//! Training loop, evaluation on the answer / rationale / combined protocol,
//! report writing, and the ablation grid.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::config::{self, parse_bool, KeyValues};
use crate::cvm::ResidualReading;
use crate::data::{Dataset, Instance, Task};
use crate::error::{HglError, Result};
use crate::model::{self, adjacency_mode_name, parse_adjacency_mode, Model, ModelConfig, Prediction};
use crate::optim::{adam_step, AdamConfig, AdamState, PlateauSchedule};
use crate::params::ParameterStore;
use crate::tensor::{Activation, SoftmaxMode};

/// Which instances a run trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskSelection {
    Answer,
    Rationale,
    Both,
}

impl TaskSelection {
    pub fn name(self) -> &'static str {
        match self {
            TaskSelection::Answer => "answer",
            TaskSelection::Rationale => "rationale",
            TaskSelection::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "answer" => Some(TaskSelection::Answer),
            "rationale" => Some(TaskSelection::Rationale),
            "both" => Some(TaskSelection::Both),
            _ => None,
        }
    }

    pub fn includes(self, task: Task) -> bool {
        match self {
            TaskSelection::Both => true,
            TaskSelection::Answer => task == Task::Answer,
            TaskSelection::Rationale => task == Task::Rationale,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dim: usize,
    pub activation: Activation,
    pub use_vahg: bool,
    pub use_qahg: bool,
    pub use_cvm: bool,
    pub adjacency_mode: SoftmaxMode,
    pub residual_reading: ResidualReading,
    pub task: TaskSelection,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            plateau_patience: 2,
            lr_factor: 0.5,
            max_epochs: 20,
            batch_size: 32,
            seed: 0,
            dim: 32,
            activation: Activation::Relu,
            use_vahg: true,
            use_qahg: true,
            use_cvm: true,
            adjacency_mode: SoftmaxMode::Global,
            residual_reading: ResidualReading::Aggregate,
            task: TaskSelection::Both,
            train_data: None,
            val_data: None,
            out_dir: None,
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "weight_decay",
    "plateau_patience",
    "lr_factor",
    "max_epochs",
    "batch_size",
    "seed",
    "dim",
    "activation",
    "use_vahg",
    "use_qahg",
    "use_cvm",
    "adjacency_mode",
    "residual_reading",
    "task",
    "train_data",
    "val_data",
    "out_dir",
];

impl TrainConfig {
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(TRAIN_KEYS)?;
        let mut c = Self::default();
        kv.read("learning_rate", &mut c.learning_rate)?;
        kv.read("adam_beta1", &mut c.adam_beta1)?;
        kv.read("adam_beta2", &mut c.adam_beta2)?;
        kv.read("adam_eps", &mut c.adam_eps)?;
        kv.read("weight_decay", &mut c.weight_decay)?;
        kv.read("plateau_patience", &mut c.plateau_patience)?;
        kv.read("lr_factor", &mut c.lr_factor)?;
        kv.read("max_epochs", &mut c.max_epochs)?;
        kv.read("batch_size", &mut c.batch_size)?;
        kv.read("seed", &mut c.seed)?;
        kv.read("dim", &mut c.dim)?;
        kv.read_with("activation", &mut c.activation, Activation::parse)?;
        kv.read_with("use_vahg", &mut c.use_vahg, parse_bool)?;
        kv.read_with("use_qahg", &mut c.use_qahg, parse_bool)?;
        kv.read_with("use_cvm", &mut c.use_cvm, parse_bool)?;
        kv.read_with("adjacency_mode", &mut c.adjacency_mode, parse_adjacency_mode)?;
        kv.read_with("residual_reading", &mut c.residual_reading, ResidualReading::parse)?;
        kv.read_with("task", &mut c.task, TaskSelection::parse)?;
        let path = |s: &str| Some(Some(PathBuf::from(s)));
        kv.read_with("train_data", &mut c.train_data, path)?;
        kv.read_with("val_data", &mut c.val_data, path)?;
        kv.read_with("out_dir", &mut c.out_dir, path)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HglError::Config(m.to_string()));
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) {
            return bad("learning_rate and adam_eps must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience must be at least 1");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad("lr_factor must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.dim == 0 {
            return bad("batch_size and dim must be positive");
        }
        Ok(())
    }

    /// `key = value` echo of every setting, suitable for reading back.
    pub fn to_key_values(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut pairs = vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("plateau_patience", self.plateau_patience.to_string()),
            ("lr_factor", self.lr_factor.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("dim", self.dim.to_string()),
            ("activation", self.activation.name().to_string()),
            ("use_vahg", self.use_vahg.to_string()),
            ("use_qahg", self.use_qahg.to_string()),
            ("use_cvm", self.use_cvm.to_string()),
            ("adjacency_mode", adjacency_mode_name(self.adjacency_mode).to_string()),
            ("residual_reading", self.residual_reading.name().to_string()),
            ("task", self.task.name().to_string()),
        ];
        for (k, v) in [
            ("train_data", path(&self.train_data)),
            ("val_data", path(&self.val_data)),
            ("out_dir", path(&self.out_dir)),
        ] {
            if let Some(v) = v {
                pairs.push((k, v));
            }
        }
        config::render(&pairs)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn model_config(&self, vocab_size: usize, channels: usize) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            vocab_size,
            channels,
            activation: self.activation,
            use_vahg: self.use_vahg,
            use_qahg: self.use_qahg,
            use_cvm: self.use_cvm,
            adjacency_mode: self.adjacency_mode,
            residual_reading: self.residual_reading,
        }
    }
}

/// One instance's outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct InstancePrediction {
    pub task: Task,
    pub gold: usize,
    pub prediction: Prediction,
    /// `(w_o, w_q)` per candidate.
    pub modality: Vec<(f64, f64)>,
}

impl InstancePrediction {
    pub fn correct(&self) -> bool {
        self.prediction.chosen == self.gold
    }
}

/// Accuracies over a validation set. A metric is `None` when the set has
/// no instance it applies to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalMetrics {
    pub answer_accuracy: Option<f64>,
    pub rationale_accuracy: Option<f64>,
    /// Both the answer and the rationale of a scene correct.
    pub combined_accuracy: Option<f64>,
    pub answer_count: usize,
    pub rationale_count: usize,
    pub pair_count: usize,
    pub mean_w_o: f64,
    pub mean_w_q: f64,
    pub std_w_o: f64,
}

impl EvalMetrics {
    /// The accuracy used for checkpoint selection and the schedule.
    pub fn selection(&self, task: TaskSelection) -> f64 {
        match task {
            TaskSelection::Answer => self.answer_accuracy.unwrap_or(0.0),
            TaskSelection::Rationale => self.rationale_accuracy.unwrap_or(0.0),
            TaskSelection::Both => {
                let (a, r) = (self.answer_accuracy, self.rationale_accuracy);
                match (a, r) {
                    (Some(a), Some(r)) => 0.5 * (a + r),
                    (Some(x), None) | (None, Some(x)) => x,
                    (None, None) => 0.0,
                }
            }
        }
    }
}

pub fn predict_all(store: &ParameterStore, model: &Model, instances: &[Instance]) -> Result<Vec<InstancePrediction>> {
    instances
        .iter()
        .map(|inst| {
            let (prediction, modality) = model::predict(store, model, inst)?;
            Ok(InstancePrediction {
                task: inst.task,
                gold: inst.gold,
                prediction,
                modality,
            })
        })
        .collect()
}

/// Accuracies from per-instance predictions aligned with `ds.instances`.
/// Answer and rationale instances are paired through consecutive runs that
/// share a scene.
pub fn metrics_from_predictions(ds: &Dataset, preds: &[InstancePrediction]) -> Result<EvalMetrics> {
    if preds.len() != ds.len() {
        return Err(HglError::Contract(format!(
            "{} predictions for {} instances",
            preds.len(),
            ds.len()
        )));
    }
    let tally = |task: Task| {
        let hits = preds.iter().filter(|p| p.task == task && p.correct()).count();
        let n = preds.iter().filter(|p| p.task == task).count();
        (n, (n > 0).then(|| hits as f64 / n as f64))
    };
    let (answer_count, answer_accuracy) = tally(Task::Answer);
    let (rationale_count, rationale_accuracy) = tally(Task::Rationale);

    let mut pairs = 0usize;
    let mut both = 0usize;
    for g in ds.scene_groups() {
        let a = g.clone().find(|&i| ds.instances[i].task == Task::Answer);
        let r = g.clone().find(|&i| ds.instances[i].task == Task::Rationale);
        if let (Some(a), Some(r)) = (a, r) {
            pairs += 1;
            if preds[a].correct() && preds[r].correct() {
                both += 1;
            }
        }
    }

    let w_o: Vec<f64> = preds.iter().flat_map(|p| p.modality.iter().map(|m| m.0)).collect();
    let w_q: Vec<f64> = preds.iter().flat_map(|p| p.modality.iter().map(|m| m.1)).collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let (mean_w_o, mean_w_q) = (mean(&w_o), mean(&w_q));
    let std_w_o = if w_o.is_empty() {
        0.0
    } else {
        (w_o.iter().map(|x| (x - mean_w_o).powi(2)).sum::<f64>() / w_o.len() as f64).sqrt()
    };
    Ok(EvalMetrics {
        answer_accuracy,
        rationale_accuracy,
        combined_accuracy: (pairs > 0).then(|| both as f64 / pairs as f64),
        answer_count,
        rationale_count,
        pair_count: pairs,
        mean_w_o,
        mean_w_q,
        std_w_o,
    })
}

pub fn evaluate(store: &ParameterStore, model: &Model, ds: &Dataset) -> Result<(EvalMetrics, Vec<InstancePrediction>)> {
    let preds = predict_all(store, model, &ds.instances)?;
    Ok((metrics_from_predictions(ds, &preds)?, preds))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub metrics: EvalMetrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub config_echo: String,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept; `None` means the initial weights.
    pub best_epoch: Option<usize>,
    /// Validation metrics of the kept weights.
    pub final_metrics: EvalMetrics,
    pub wall_time_secs: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    /// Best-validation weights.
    pub store: ParameterStore,
    pub report: MetricsReport,
}

impl TrainOutcome {
    pub fn checkpoint_meta(&self) -> Vec<(String, String)> {
        let mut meta = self.model.config.to_meta();
        meta.push(("best_epoch".into(), self.report.best_epoch.map_or("none".into(), |e| e.to_string())));
        meta
    }

    /// Writes `checkpoint.bin`, `metrics.csv`, `summary.csv`, `report.txt`
    /// and `timing.txt` under `dir`. Only `timing.txt` varies between
    /// identical runs.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| HglError::io(dir, e))?;
        self.store.save(&dir.join("checkpoint.bin"), &self.checkpoint_meta())?;
        write_file(&dir.join("metrics.csv"), &epochs_csv(&self.report))?;
        write_file(&dir.join("summary.csv"), &metrics_csv(&self.report.final_metrics))?;
        write_file(&dir.join("report.txt"), &report_text(&self.report))?;
        write_file(
            &dir.join("timing.txt"),
            &format!("wall_time_secs = {:.3}\n", self.report.wall_time_secs),
        )
    }
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| HglError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| HglError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, ParameterStore)> {
    let (store, meta) = ParameterStore::load(path)?;
    let config = ModelConfig::from_meta(&meta)?;
    let model = Model::bind(config, &store)?;
    Ok((model, store))
}

/// Checks that a dataset fits a model's vocabulary and grid.
pub fn check_compatible(model: &Model, ds: &Dataset) -> Result<()> {
    let c = &model.config;
    if ds.meta.vocab_size > c.vocab_size || ds.meta.channels != c.channels {
        return Err(HglError::Checkpoint(format!(
            "model expects vocabulary ≤ {} and {} channels, dataset has {} and {}",
            c.vocab_size, c.channels, ds.meta.vocab_size, ds.meta.channels
        )));
    }
    Ok(())
}

/// Trains on the instances of `train_set` selected by `config.task`,
/// validating on the matching part of `val_set` after every epoch.
pub fn train(config: &TrainConfig, train_set: &Dataset, val_set: &Dataset) -> Result<TrainOutcome> {
    train_with_progress(config, train_set, val_set, |_| {})
}

pub fn train_with_progress(
    config: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let mcfg = config.model_config(train_set.meta.vocab_size, train_set.meta.channels);
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);

    let mut store = ParameterStore::new();
    let model = Model::new(mcfg, &mut store, &mut init_rng)?;
    check_compatible(&model, val_set)?;
    check_compatible(&model, train_set)?;
    let train_items: Vec<&Instance> = train_set.instances.iter().filter(|i| config.task.includes(i.task)).collect();
    let val_items = val_set.filter_selection(config.task);

    let mut adam = config.adam();
    let mut state = AdamState::new(&store);
    let mut schedule = PlateauSchedule::new(config.plateau_patience, config.lr_factor);
    let mut best_store = store.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut best_metrics = None;
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train_items.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            store.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for &k in batch {
                let inst = train_items[k];
                let mut tape = Tape::new();
                let trace = model::forward(&mut tape, &store, &model, inst)?;
                let l = model::loss(&mut tape, trace.logits, inst.gold)?;
                loss_sum += tape.value(l).data()[0];
                let grads = tape.backward(l)?;
                store.accumulate(&grads, scale);
            }
            adam_step(&mut store, &mut state, &adam)?;
        }
        let (metrics, _) = evaluate(&store, &model, &val_items)?;
        let record = EpochRecord {
            epoch,
            learning_rate: adam.learning_rate,
            train_loss: if train_items.is_empty() {
                0.0
            } else {
                loss_sum / train_items.len() as f64
            },
            metrics: metrics.clone(),
        };
        on_epoch(&record);
        epochs.push(record);
        let acc = metrics.selection(config.task);
        if acc > best_acc {
            best_acc = acc;
            best_epoch = Some(epoch);
            best_store = store.clone();
            best_metrics = Some(metrics);
        }
        if schedule.observe(acc) {
            adam.learning_rate *= config.lr_factor;
        }
    }
    let final_metrics = match best_metrics {
        Some(m) => m,
        None => evaluate(&best_store, &model, &val_items)?.0,
    };
    Ok(TrainOutcome {
        model,
        store: best_store,
        report: MetricsReport {
            config_echo: config.to_key_values(),
            epochs,
            best_epoch,
            final_metrics,
            wall_time_secs: started.elapsed().as_secs_f64(),
        },
    })
}

impl Dataset {
    /// Validation view for a run: the selected task's instances, or every
    /// instance when both tasks are trained.
    pub fn filter_selection(&self, task: TaskSelection) -> Dataset {
        match task {
            TaskSelection::Both => self.clone(),
            TaskSelection::Answer => self.filter_task(Task::Answer),
            TaskSelection::Rationale => self.filter_task(Task::Rationale),
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |x| format!("{x:.6}"))
}

pub fn epochs_csv(report: &MetricsReport) -> String {
    let mut out = String::from(
        "epoch,learning_rate,train_loss,answer_accuracy,rationale_accuracy,combined_accuracy,mean_w_o,mean_w_q\n",
    );
    for e in &report.epochs {
        let m = &e.metrics;
        let _ = writeln!(
            out,
            "{},{},{:.8},{},{},{},{:.6},{:.6}",
            e.epoch,
            e.learning_rate,
            e.train_loss,
            fmt_opt(m.answer_accuracy),
            fmt_opt(m.rationale_accuracy),
            fmt_opt(m.combined_accuracy),
            m.mean_w_o,
            m.mean_w_q
        );
    }
    out
}

pub fn metrics_csv(m: &EvalMetrics) -> String {
    let mut out = String::from("metric,value\n");
    for (k, v) in [
        ("answer_accuracy", fmt_opt(m.answer_accuracy)),
        ("rationale_accuracy", fmt_opt(m.rationale_accuracy)),
        ("combined_accuracy", fmt_opt(m.combined_accuracy)),
        ("answer_count", m.answer_count.to_string()),
        ("rationale_count", m.rationale_count.to_string()),
        ("pair_count", m.pair_count.to_string()),
        ("mean_w_o", format!("{:.6}", m.mean_w_o)),
        ("mean_w_q", format!("{:.6}", m.mean_w_q)),
        ("std_w_o", format!("{:.6}", m.std_w_o)),
    ] {
        let _ = writeln!(out, "{k},{v}");
    }
    out
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

pub fn metrics_text(m: &EvalMetrics) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>8} {:>8} {:>8}", "", "Q->A", "QA->R", "Q->AR");
    let _ = writeln!(
        out,
        "{:<10} {:>8} {:>8} {:>8}",
        "accuracy",
        pct(m.answer_accuracy),
        pct(m.rationale_accuracy),
        pct(m.combined_accuracy)
    );
    let _ = writeln!(
        out,
        "instances: {} answer, {} rationale, {} pairs",
        m.answer_count, m.rationale_count, m.pair_count
    );
    let _ = writeln!(
        out,
        "modality weights: mean w_o {:.4}, mean w_q {:.4}, std w_o {:.4}",
        m.mean_w_o, m.mean_w_q, m.std_w_o
    );
    out
}

pub fn report_text(report: &MetricsReport) -> String {
    let mut out = String::from("# configuration\n");
    out.push_str(&report.config_echo);
    out.push_str("\n# epochs\n");
    let _ = writeln!(
        out,
        "{:>5} {:>10} {:>10} {:>8} {:>8} {:>8}",
        "epoch", "lr", "loss", "Q->A", "QA->R", "Q->AR"
    );
    for e in &report.epochs {
        let m = &e.metrics;
        let _ = writeln!(
            out,
            "{:>5} {:>10.3e} {:>10.5} {:>8} {:>8} {:>8}",
            e.epoch,
            e.learning_rate,
            e.train_loss,
            pct(m.answer_accuracy),
            pct(m.rationale_accuracy),
            pct(m.combined_accuracy)
        );
    }
    let _ = writeln!(
        out,
        "\n# kept weights: {}\n",
        report.best_epoch.map_or("initial".to_string(), |e| format!("epoch {e}"))
    );
    out.push_str(&metrics_text(&report.final_metrics));
    out
}

/// Per-instance predictions as CSV.
pub fn predictions_csv(preds: &[InstancePrediction]) -> String {
    let mut out = String::from("index,task,gold,chosen,correct,p0,p1,p2,p3,w_o0,w_o1,w_o2,w_o3\n");
    for (i, p) in preds.iter().enumerate() {
        let probs: Vec<String> = p.prediction.probabilities.data().iter().map(|v| format!("{v:.6}")).collect();
        let wo: Vec<String> = p.modality.iter().map(|m| format!("{:.6}", m.0)).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            i,
            p.task.name(),
            p.gold,
            p.prediction.chosen,
            p.correct(),
            probs.join(","),
            wo.join(",")
        );
    }
    out
}

/// One row of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub name: &'static str,
    pub use_vahg: bool,
    pub use_qahg: bool,
    pub use_cvm: bool,
}

/// All eight on/off combinations, from the no-graph baseline to the full model.
pub const ABLATION_GRID: [AblationRow; 8] = [
    AblationRow { name: "baseline", use_vahg: false, use_qahg: false, use_cvm: false },
    AblationRow { name: "baseline+cvm", use_vahg: false, use_qahg: false, use_cvm: true },
    AblationRow { name: "qahg", use_vahg: false, use_qahg: true, use_cvm: false },
    AblationRow { name: "qahg+cvm", use_vahg: false, use_qahg: true, use_cvm: true },
    AblationRow { name: "vahg", use_vahg: true, use_qahg: false, use_cvm: false },
    AblationRow { name: "vahg+cvm", use_vahg: true, use_qahg: false, use_cvm: true },
    AblationRow { name: "vahg+qahg", use_vahg: true, use_qahg: true, use_cvm: false },
    AblationRow { name: "full", use_vahg: true, use_qahg: true, use_cvm: true },
];

impl AblationRow {
    pub fn find(name: &str) -> Option<AblationRow> {
        ABLATION_GRID.iter().copied().find(|r| r.name == name)
    }

    pub fn apply(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            use_vahg: self.use_vahg,
            use_qahg: self.use_qahg,
            use_cvm: self.use_cvm,
            seed,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub row: AblationRow,
    /// `(seed, selection accuracy of the kept weights)`.
    pub runs: Vec<(u64, f64)>,
}

impl AblationResult {
    pub fn mean(&self) -> f64 {
        if self.runs.is_empty() {
            return 0.0;
        }
        self.runs.iter().map(|r| r.1).sum::<f64>() / self.runs.len() as f64
    }
}

/// Trains every row for every seed; `on_run` sees each finished run.
pub fn run_ablation(
    base: &TrainConfig,
    rows: &[AblationRow],
    seeds: &[u64],
    train_set: &Dataset,
    val_set: &Dataset,
    mut on_run: impl FnMut(&AblationRow, u64, &TrainOutcome),
) -> Result<Vec<AblationResult>> {
    let mut results = Vec::new();
    for row in rows {
        let mut runs = Vec::new();
        for &seed in seeds {
            let cfg = row.apply(base, seed);
            let outcome = train(&cfg, train_set, val_set)?;
            runs.push((seed, outcome.report.final_metrics.selection(base.task)));
            on_run(row, seed, &outcome);
        }
        results.push(AblationResult { row: *row, runs });
    }
    Ok(results)
}

pub fn ablation_text(results: &[AblationResult]) -> String {
    let mut out = String::new();
    let seeds: Vec<u64> = results.first().map(|r| r.runs.iter().map(|x| x.0).collect()).unwrap_or_default();
    let _ = write!(out, "{:<14} {:>5} {:>5} {:>5}", "row", "VAHG", "QAHG", "CVM");
    for s in &seeds {
        let _ = write!(out, " {:>8}", format!("seed {s}"));
    }
    let _ = writeln!(out, " {:>8}", "mean");
    let mark = |b: bool| if b { "x" } else { "" };
    for r in results {
        let _ = write!(
            out,
            "{:<14} {:>5} {:>5} {:>5}",
            r.row.name,
            mark(r.row.use_vahg),
            mark(r.row.use_qahg),
            mark(r.row.use_cvm)
        );
        for (_, acc) in &r.runs {
            let _ = write!(out, " {:>8.1}", 100.0 * acc);
        }
        let _ = writeln!(out, " {:>8.1}", 100.0 * r.mean());
    }
    out
}

pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut out = String::from("row,use_vahg,use_qahg,use_cvm,seed,accuracy\n");
    for r in results {
        for (seed, acc) in &r.runs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6}",
                r.row.name, r.row.use_vahg, r.row.use_qahg, r.row.use_cvm, seed, acc
            );
        }
    }
    out
}
