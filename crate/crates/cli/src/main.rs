use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::warn;
use vinil::datagen::{generate_dataset, save_folder_dataset, split_protocol, DatasetConfig, Preset, Sample, Split};
use vinil::eval::{cross_dataset_eval, session_eval, MetricsReport};
use vinil::models::EncoderConfig;
use vinil::runner::{
    format_table, load_checkpoint, metrics_json, run_experiment, DatasetSource, ExperimentConfig, FolderDataset,
    RunRecord,
};
use vinil::strategies::{Method, Supervision};

#[derive(Parser)]
#[command(name = "vinil", version, about = "Incremental instance learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset to a PPM folder tree.
    GenData(GenDataArgs),
    /// Run every incremental session and write checkpoint and reports.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on the configured gallery.
    Eval(EvalArgs),
    /// Evaluate a checkpoint on another dataset's gallery.
    CrossEval(CrossEvalArgs),
    /// Collect run records into one results table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value = "synthA")]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n_categories: Option<usize>,
    #[arg(long)]
    instances_per_category: Option<usize>,
    #[arg(long)]
    views_per_instance: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// Flags mirror config keys and override the file unless `--force-config`.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    supervision: Option<Supervision>,
    #[arg(long)]
    seed: Option<u64>,
    /// Synthetic preset (synthA or synthB).
    #[arg(long, conflicts_with = "data_dir")]
    preset: Option<Preset>,
    /// PPM folder dataset instead of a synthetic preset.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    min_lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    w_c: Option<f64>,
    #[arg(long)]
    w_b: Option<f64>,
    #[arg(long)]
    memory_fraction: Option<f64>,
    #[arg(long)]
    n_tasks: Option<usize>,
    #[arg(long)]
    categories_per_task: Option<usize>,
    #[arg(long)]
    instance_subtasks: Option<usize>,
    #[arg(long)]
    k_nn: Option<usize>,
    /// Cross-dataset preset evaluated after the last session.
    #[arg(long)]
    cross_preset: Option<Preset>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Let the config file win over conflicting flags.
    #[arg(long, requires = "config")]
    force_config: bool,
    /// Start from the 200-epoch, batch-256, k=100 preset.
    #[arg(long, conflicts_with = "config")]
    full_scale: bool,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config of the run that wrote the checkpoint.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    k_nn: Option<usize>,
}

#[derive(Args)]
struct CrossEvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, conflicts_with = "data_dir", required_unless_present = "data_dir")]
    preset: Option<Preset>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Same-domain Acc the drop is measured against.
    #[arg(long)]
    same_acc: f64,
    #[arg(long)]
    k_nn: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories (holding run_record.json) or record files.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Where to write the combined metrics.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> vinil::Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(*a),
        Command::Eval(a) => eval(a),
        Command::CrossEval(a) => cross_eval(a),
        Command::Report(a) => report(a),
    }
}

fn gen_data(a: GenDataArgs) -> vinil::Result<()> {
    let d = DatasetConfig::default();
    let cfg = DatasetConfig {
        preset: a.preset,
        seed: a.seed,
        n_categories: a.n_categories.unwrap_or(d.n_categories),
        instances_per_category: a.instances_per_category.unwrap_or(d.instances_per_category),
        views_per_instance: a.views_per_instance.unwrap_or(d.views_per_instance),
        image_size: a.image_size.unwrap_or(d.image_size),
        gallery_fraction: d.gallery_fraction,
    };
    let samples = generate_dataset(&cfg)?;
    save_folder_dataset(&a.out, &samples)?;
    println!("wrote {} images to {}", samples.len(), a.out.display());
    Ok(())
}

fn synthetic(cfg: &mut ExperimentConfig) -> &mut DatasetConfig {
    if !matches!(cfg.dataset, DatasetSource::Synthetic(_)) {
        cfg.dataset = DatasetSource::Synthetic(DatasetConfig::default());
    }
    match &mut cfg.dataset {
        DatasetSource::Synthetic(d) => d,
        DatasetSource::Folder(_) => unreachable!(),
    }
}

fn apply(o: Overrides, cfg: &mut ExperimentConfig) -> vinil::Result<()> {
    if let Some(v) = o.method {
        cfg.strategy.method = v;
    }
    if let Some(v) = o.supervision {
        cfg.strategy.supervision = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(p) = o.preset {
        synthetic(cfg).preset = p;
    }
    if let Some(path) = o.data_dir {
        cfg.dataset = DatasetSource::Folder(FolderDataset { path, gallery_fraction: 0.25, seed: o.data_seed.unwrap_or(0) });
    } else if let Some(s) = o.data_seed {
        match &mut cfg.dataset {
            DatasetSource::Synthetic(d) => d.seed = s,
            DatasetSource::Folder(f) => f.seed = s,
        }
    }
    if let Some(kind) = o.encoder {
        let input = cfg.model.encoder.input;
        cfg.model.encoder = match kind.as_str() {
            "mlp" => EncoderConfig { input, ..Default::default() },
            "smallconv" => EncoderConfig { input, ..EncoderConfig::small_conv() },
            other => return Err(vinil::Error::Config(format!("unknown encoder `{other}` (mlp, smallconv)"))),
        };
    }
    let h = &mut cfg.strategy.hyper;
    if let Some(v) = o.epochs {
        h.epochs_per_session = v;
    }
    if let Some(v) = o.batch_size {
        h.batch_size = v;
    }
    if let Some(v) = o.w_c {
        h.w_c = v;
    }
    if let Some(v) = o.w_b {
        h.w_b = v;
    }
    if let Some(v) = o.memory_fraction {
        cfg.strategy.memory_fraction = v;
    }
    if let Some(v) = o.base_lr {
        cfg.optimizer.base_lr = v;
    }
    if let Some(v) = o.min_lr {
        cfg.optimizer.min_lr = v;
    }
    if let Some(v) = o.momentum {
        cfg.optimizer.momentum = v;
    }
    if let Some(v) = o.n_tasks {
        cfg.protocol.n_tasks = v;
    }
    if let Some(v) = o.categories_per_task {
        cfg.protocol.categories_per_task = v;
    }
    if let Some(v) = o.instance_subtasks {
        cfg.protocol.instance_subtasks = v;
    }
    if let Some(v) = o.k_nn {
        cfg.k_nn = v;
    }
    if let Some(p) = o.cross_preset {
        let base = match &cfg.dataset {
            DatasetSource::Synthetic(d) => d.clone(),
            DatasetSource::Folder(_) => DatasetConfig::default(),
        };
        cfg.cross_dataset = Some(DatasetSource::Synthetic(DatasetConfig { preset: p, ..base }));
    }
    if let Some(v) = o.out {
        cfg.output_dir = v;
    }
    Ok(())
}

fn any_override(o: &Overrides) -> bool {
    o.method.is_some()
        || o.supervision.is_some()
        || o.seed.is_some()
        || o.preset.is_some()
        || o.data_dir.is_some()
        || o.data_seed.is_some()
        || o.encoder.is_some()
        || o.epochs.is_some()
        || o.batch_size.is_some()
        || o.base_lr.is_some()
        || o.min_lr.is_some()
        || o.momentum.is_some()
        || o.w_c.is_some()
        || o.w_b.is_some()
        || o.memory_fraction.is_some()
        || o.n_tasks.is_some()
        || o.categories_per_task.is_some()
        || o.instance_subtasks.is_some()
        || o.k_nn.is_some()
        || o.cross_preset.is_some()
        || o.out.is_some()
}

fn resolve(a: TrainArgs) -> vinil::Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if a.full_scale => ExperimentConfig::full_scale(),
        None => ExperimentConfig::default(),
    };
    if a.force_config {
        if any_override(&a.overrides) {
            warn!("--force-config: ignoring command-line overrides");
        }
    } else {
        apply(a.overrides, &mut cfg)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> vinil::Result<()> {
    let print_only = a.print_config;
    let cfg = resolve(a)?;
    if print_only {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    fs::create_dir_all(&cfg.output_dir).map_err(|e| vinil::Error::io(&cfg.output_dir, e))?;
    let snapshot = cfg.output_dir.join("config.json");
    fs::write(&snapshot, cfg.to_json() + "\n").map_err(|e| vinil::Error::io(&snapshot, e))?;
    let record = run_experiment(&cfg)?;
    print!("{}", format_table(&MetricsReport { rows: vec![record.metrics.clone()] }));
    println!("reports in {}", cfg.output_dir.display());
    Ok(())
}

fn eval(a: EvalArgs) -> vinil::Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let (model, _) = load_checkpoint(&a.checkpoint, &cfg.model)?;
    let samples = cfg.dataset.load()?;
    let stream = split_protocol(&samples, &cfg.protocol)?;
    let e = session_eval(&model, &stream.gallery, &stream.gallery_task_ids, stream.len(), a.k_nn.unwrap_or(cfg.k_nn))?;
    for (t, acc) in e.per_task.iter().enumerate() {
        println!("task_{t}\t{acc:.6}");
    }
    println!("overall\t{:.6}", e.overall);
    Ok(())
}

fn cross_eval(a: CrossEvalArgs) -> vinil::Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let (model, _) = load_checkpoint(&a.checkpoint, &cfg.model)?;
    let source = match (a.preset, a.data_dir) {
        (_, Some(path)) => DatasetSource::Folder(FolderDataset { path, gallery_fraction: 0.25, seed: 0 }),
        (Some(preset), None) => {
            let base = match &cfg.dataset {
                DatasetSource::Synthetic(d) => d.clone(),
                DatasetSource::Folder(_) => DatasetConfig::default(),
            };
            DatasetSource::Synthetic(DatasetConfig { preset, ..base })
        }
        (None, None) => unreachable!("clap requires one of them"),
    };
    let gallery: Vec<Sample> = source.load()?.into_iter().filter(|s| s.split == Split::Gallery).collect();
    let r = cross_dataset_eval(&model, &source.name(), &gallery, a.same_acc, a.k_nn.unwrap_or(cfg.k_nn))?;
    println!("dataset\t{}\nacc\t{:.6}\nrel_drop_pct\t{:.3}", r.dataset, r.acc, r.rel_drop_pct);
    Ok(())
}

fn record_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("run_record.json")
    } else {
        p.to_path_buf()
    }
}

fn report(a: ReportArgs) -> vinil::Result<()> {
    let mut rows = Vec::new();
    for run in &a.runs {
        rows.push(RunRecord::load(&record_path(run))?.metrics);
    }
    let report = MetricsReport { rows };
    print!("{}", format_table(&report));
    if let Some(out) = a.out {
        fs::create_dir_all(&out).map_err(|e| vinil::Error::io(&out, e))?;
        let path = out.join("metrics.json");
        fs::write(&path, metrics_json(&report)).map_err(|e| vinil::Error::io(&path, e))?;
    }
    Ok(())
}
