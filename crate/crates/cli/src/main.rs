use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hgl_core::config::KeyValues;
use hgl_core::data::{self, Dataset, GeneratorConfig, Task};
use hgl_core::inspect::{alignment_probe, dump_graphs};
use hgl_core::tensor::SoftmaxMode;
use hgl_core::train::{
    self, ablation_csv, ablation_text, load_checkpoint, metrics_csv, metrics_text, predictions_csv, run_ablation,
    write_file, TrainConfig, ABLATION_GRID,
};

#[derive(Parser)]
#[command(name = "hgl", version, about = "Heterogeneous graph learning on synthetic multiple-choice scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write train.jsonl / val.jsonl.
    Gen(GenArgs),
    /// Train a model and write its best checkpoint and reports.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Dump adjacency and voting matrices for one instance.
    DumpGraphs(DumpArgs),
    /// Train every module on/off combination over several seeds.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum AdjacencyMode {
    Global,
    Row,
}

#[derive(Args)]
struct GenArgs {
    /// Generator settings as `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the 12,000-instance reference corpus (overridden by --config).
    #[arg(long)]
    reference: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunFlags {
    /// Training settings as `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_vahg: bool,
    #[arg(long)]
    no_qahg: bool,
    #[arg(long)]
    no_cvm: bool,
    #[arg(long, value_enum)]
    adjacency_mode: Option<AdjacencyMode>,
    /// Training set; overrides `train_data` in the config.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation set; overrides `val_data` in the config.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Instance index within the dataset file.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Also report the object/action alignment probe over this many instances.
    #[arg(long)]
    probe: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Number of consecutive seeds starting at --seed (or the config seed).
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Comma-separated subset of rows; all eight by default.
    #[arg(long, value_delimiter = ',')]
    rows: Vec<String>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => eval(a),
        Command::DumpGraphs(a) => dump(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let mut cfg = match (&a.config, a.reference) {
        (Some(p), _) => GeneratorConfig::from_key_values(&KeyValues::from_file(p)?)?,
        (None, true) => GeneratorConfig::reference(),
        (None, false) => GeneratorConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let (train_set, val_set) = data::generate_split(&cfg)?;
    data::save(&train_set, &a.out.join("train.jsonl"))?;
    data::save(&val_set, &a.out.join("val.jsonl"))?;
    write_file(&a.out.join("generator.cfg"), &cfg.to_key_values())?;

    let all: Vec<_> = train_set.instances.iter().chain(&val_set.instances).cloned().collect();
    let checker = data::oracle_accuracy(&all, data::symbolic_answer);
    let lexical = data::oracle_accuracy(&all, |i| Some(data::lexical_answer(i)));
    let prior = data::position_prior(&train_set.instances);
    let prior_acc = data::oracle_accuracy(&val_set.instances, |_| Some(prior));
    let summary = format!(
        "train instances: {}\nval instances: {}\nlabel-consistency checker: {:.4}\nlexical overlap oracle: {:.4}\nposition prior oracle (val): {:.4}\n",
        train_set.len(),
        val_set.len(),
        checker,
        lexical,
        prior_acc
    );
    write_file(&a.out.join("oracles.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn train_config(run: &RunFlags) -> Result<TrainConfig> {
    let mut cfg = match &run.config {
        Some(p) => TrainConfig::from_key_values(&KeyValues::from_file(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    cfg.use_vahg &= !run.no_vahg;
    cfg.use_qahg &= !run.no_qahg;
    cfg.use_cvm &= !run.no_cvm;
    if let Some(m) = run.adjacency_mode {
        cfg.adjacency_mode = match m {
            AdjacencyMode::Global => SoftmaxMode::Global,
            AdjacencyMode::Row => SoftmaxMode::PerRow,
        };
    }
    if run.train.is_some() {
        cfg.train_data = run.train.clone();
    }
    if run.val.is_some() {
        cfg.val_data = run.val.clone();
    }
    if run.out.is_some() {
        cfg.out_dir = run.out.clone();
    }
    Ok(cfg)
}

fn load_sets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let (Some(tp), Some(vp)) = (&cfg.train_data, &cfg.val_data) else {
        bail!("training needs both a training and a validation set (--train/--val or train_data/val_data)");
    };
    let t = data::load(tp).with_context(|| format!("loading {}", tp.display()))?;
    let v = data::load(vp).with_context(|| format!("loading {}", vp.display()))?;
    Ok((t, v))
}

fn out_dir(cfg: &TrainConfig) -> Result<&Path> {
    cfg.out_dir
        .as_deref()
        .context("no output directory (--out or out_dir)")
}

fn run_train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a.run)?;
    let (train_set, val_set) = load_sets(&cfg)?;
    let out = out_dir(&cfg)?.to_path_buf();
    let outcome = train::train_with_progress(&cfg, &train_set, &val_set, |e| {
        eprintln!(
            "epoch {:>3}  lr {:.3e}  loss {:.5}  selection accuracy {:.4}",
            e.epoch,
            e.learning_rate,
            e.train_loss,
            e.metrics.selection(cfg.task)
        );
    })?;
    outcome.write(&out)?;
    print!("{}", metrics_text(&outcome.report.final_metrics));
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, store) = load_checkpoint(&a.checkpoint)?;
    let ds = data::load(&a.data)?;
    train::check_compatible(&model, &ds)?;
    let (metrics, preds) = train::evaluate(&store, &model, &ds)?;
    write_file(&a.out.join("summary.csv"), &metrics_csv(&metrics))?;
    write_file(&a.out.join("report.txt"), &metrics_text(&metrics))?;
    write_file(&a.out.join("predictions.csv"), &predictions_csv(&preds))?;
    print!("{}", metrics_text(&metrics));
    Ok(())
}

fn dump(a: DumpArgs) -> Result<()> {
    let (model, store) = load_checkpoint(&a.checkpoint)?;
    let ds = data::load(&a.data)?;
    train::check_compatible(&model, &ds)?;
    let Some(inst) = ds.instances.get(a.index) else {
        bail!("index {} outside a dataset of {} instances", a.index, ds.len());
    };
    let d = dump_graphs(&store, &model, inst)?;
    d.write(inst, &a.out)?;
    print!("{}", d.to_text(inst));
    if let Some(n) = a.probe {
        let answers: Vec<_> = ds.instances.iter().filter(|i| i.task == Task::Answer).take(n).cloned().collect();
        match alignment_probe(&store, &model, &answers)? {
            Some(rate) => {
                let line = format!("alignment probe over {} answer instances: {:.4}\n", answers.len(), rate);
                write_file(&a.out.join("probe.txt"), &line)?;
                print!("{line}");
            }
            None => println!("alignment probe: nothing to probe"),
        }
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = train_config(&a.run)?;
    let (train_set, val_set) = load_sets(&cfg)?;
    let out = out_dir(&cfg)?.to_path_buf();
    let rows = if a.rows.is_empty() {
        ABLATION_GRID.to_vec()
    } else {
        a.rows
            .iter()
            .map(|n| train::AblationRow::find(n).with_context(|| format!("unknown ablation row `{n}`")))
            .collect::<Result<Vec<_>>>()?
    };
    let seeds: Vec<u64> = (0..a.seeds).map(|k| cfg.seed + k).collect();
    let results = run_ablation(&cfg, &rows, &seeds, &train_set, &val_set, |row, seed, o| {
        eprintln!(
            "{:<14} seed {:>3}: {:.4}",
            row.name,
            seed,
            o.report.final_metrics.selection(cfg.task)
        );
    })?;
    let mut text = format!("# configuration\n{}\n", cfg.to_key_values());
    text.push_str(&ablation_text(&results));
    write_file(&out.join("ablation.txt"), &text)?;
    write_file(&out.join("ablation.csv"), &ablation_csv(&results))?;
    print!("{}", ablation_text(&results));
    Ok(())
}
