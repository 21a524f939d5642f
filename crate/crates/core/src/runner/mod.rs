//! Session-by-session training, evaluation, checkpointing and reports.

mod checkpoint;
mod config;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use log::{debug, info};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vinil_tensor::{OptimizerState, Tape, Tensor};

pub use checkpoint::{
    decode_tensors, encode_tensors, load_checkpoint, meta_path, read_checkpoint_meta, save_checkpoint, CheckpointMeta,
    MAGIC,
};
pub use config::{DatasetSource, ExperimentConfig, FolderDataset, OptimizerConfig};
pub use report::{
    emit_reports, format_table, format_value, heatmap_csv, heatmap_svg, metrics_json, neighbors_txt, parse_heatmap_csv,
    NEIGHBORS_HEADER,
};

use crate::datagen::{augment_batch, mix_seed, split_protocol, Sample, Split, Task};
use crate::error::{Error, Result};
use crate::eval::{
    accuracy_metric, cross_dataset_eval, embed_gallery, evaluate_index, forgetting_metric, nearest, MetricsRow,
    Neighbor, SessionMatrix,
};
use crate::models::ModelState;
use crate::strategies::{
    ewc_update_after_session, session_loss, Method, ReplayInputs, StrategyConfig, StrategyState, Supervision,
    TrainBatch,
};

const SHUFFLE_STREAM: u64 = 0x5e55;
const CLASSIFIER_STREAM: u64 = 0xc1a5;
const MEMORY_STREAM: u64 = 0x3e30;
const QUERY_STREAM: u64 = 0x9e1b;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
const NEIGHBORS_SHOWN: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryNeighbors {
    pub query_row: usize,
    pub instance_id: usize,
    pub task_id: usize,
    pub neighbors: Vec<Neighbor>,
}

/// Everything a finished run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub dataset: String,
    pub method: Method,
    pub supervision: Supervision,
    pub matrix: SessionMatrix,
    /// Accuracy over the whole gallery after each session.
    pub overall: Vec<f64>,
    pub metrics: MetricsRow,
    pub session_seconds: Vec<f64>,
    pub buffer_size: usize,
    pub checkpoint_paths: Vec<PathBuf>,
    pub neighbors: Vec<QueryNeighbors>,
}

impl RunRecord {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Model and strategy state after a run, for callers that keep training or
/// evaluating in memory.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub model: ModelState,
    pub state: StrategyState,
}

/// Trains one session on `task`. `labels` maps instance ids to classifier
/// rows and is only consulted under label supervision.
pub fn train_session(
    model: &mut ModelState,
    state: &StrategyState,
    task: &Task,
    strategy: &StrategyConfig,
    optimizer: &config::OptimizerConfig,
    labels: &BTreeMap<usize, usize>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let hyper = &strategy.hyper;
    let sup = strategy.supervision;
    if hyper.epochs_per_session == 0 {
        return Ok(());
    }
    let mut opt = OptimizerState::new(optimizer.momentum, optimizer.base_lr, optimizer.min_lr, hyper.epochs_per_session)?;
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let replaying = strategy.method == Method::Replay && !state.memory.is_empty();
    for epoch in 0..hyper.epochs_per_session {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(hyper.batch_size).filter(|c| c.len() >= 2) {
            let images: Vec<&Tensor> = chunk.iter().map(|&i| &task.train[i].image).collect();
            let view = Tensor::stack(&images)?;
            let augmented = augment_batch(&view, rng)?;
            let batch_labels = match sup {
                Supervision::Label => Some(
                    chunk
                        .iter()
                        .map(|&i| {
                            labels.get(&task.train[i].instance_id).copied().ok_or_else(|| {
                                Error::Strategy(format!("instance {} has no classifier row", task.train[i].instance_id))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?,
                ),
                Supervision::SelfSupervised => None,
            };
            let batch = TrainBatch { view, augmented, labels: batch_labels };
            let replay = if replaying {
                let mem = state.memory.replay_batch(chunk.len(), rng)?;
                let augmented = augment_batch(&mem.images, rng)?;
                Some(ReplayInputs { view: mem.images, augmented, labels: mem.labels })
            } else {
                None
            };

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, |n| sup.trains(n));
            let loss = session_loss(&mut tape, &bound, model, &batch, strategy, state, replay.as_ref())?;
            let value = tape.value(loss).item().expect("scalar loss");
            if !value.is_finite() {
                return Err(Error::Strategy(format!("loss became {value} in epoch {epoch}")));
            }
            let grads = tape.backward(loss)?;
            for (name, var) in bound.iter().filter(|(n, _)| sup.trains(n)) {
                let param = model.params_mut().get_mut(name).expect("bound names exist");
                opt.sgd_momentum_step(name, param, grads.get(var))?;
            }
            epoch_loss += value;
            steps += 1;
        }
        debug!("task {} epoch {epoch}: lr {:.6} loss {:.5}", task.id, opt.lr(), epoch_loss / steps.max(1) as f64);
        opt.next_epoch();
    }
    Ok(())
}

/// Updates EwC anchors or the replay memory after the session on `task`.
pub fn end_session(
    model: &ModelState,
    state: &mut StrategyState,
    task: &Task,
    strategy: &StrategyConfig,
    labels: &BTreeMap<usize, usize>,
    seed: u64,
) -> Result<()> {
    match strategy.method {
        Method::Finetune => {}
        Method::Ewc => state.ewc = ewc_update_after_session(model, &task.train, strategy.supervision)?,
        Method::Replay => {
            let labels = (strategy.supervision == Supervision::Label).then_some(labels);
            state.memory.update(task.id, &task.train, strategy.memory_fraction, labels, seed)?;
        }
    }
    Ok(())
}

fn sample_queries(index_rows: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, QUERY_STREAM, 0));
    let mut rows = index::sample(&mut rng, index_rows, count.min(index_rows)).into_vec();
    rows.sort_unstable();
    rows
}

/// Runs every session, evaluates after each, then writes the checkpoint
/// and reports into `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunRecord> {
    Ok(run_experiment_with_state(config)?.record)
}

pub fn run_experiment_with_state(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    let samples = config.dataset.load()?;
    let stream = split_protocol(&samples, &config.protocol)?;
    let strategy = &config.strategy;
    let n_tasks = stream.len();
    info!(
        "{} / {} on {}: {} tasks, {} gallery views",
        strategy.method.name(),
        strategy.supervision.name(),
        config.dataset.name(),
        n_tasks,
        stream.gallery.len()
    );

    let mut model = ModelState::new(config.model.clone(), config.seed)?;
    let mut state = StrategyState::default();
    let mut labels: BTreeMap<usize, usize> = BTreeMap::new();
    let mut matrix = SessionMatrix::new(n_tasks);
    let mut overall = Vec::new();
    let mut session_seconds = Vec::new();

    for task in &stream.tasks {
        let started = Instant::now();
        let s = task.id as u64;
        if strategy.supervision == Supervision::Label {
            for &inst in &task.instance_ids {
                let next = labels.len();
                labels.entry(inst).or_insert(next);
            }
            let grow = labels.len() - model.num_instances();
            if grow > 0 {
                model.expand_classifier(grow, mix_seed(config.seed, CLASSIFIER_STREAM, s))?;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, SHUFFLE_STREAM, s));
        train_session(&mut model, &state, task, strategy, &config.optimizer, &labels, &mut rng)?;
        end_session(&model, &mut state, task, strategy, &labels, mix_seed(config.seed, MEMORY_STREAM, s))?;

        let index = embed_gallery(&model, &stream.gallery, &stream.gallery_task_ids)?;
        let eval = evaluate_index(&index, n_tasks, config.k_nn)?;
        info!(
            "session {}: overall {:.4}, per task {:?}",
            task.id,
            eval.overall,
            eval.per_task.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
        );
        matrix.push_column(eval.per_task)?;
        overall.push(eval.overall);
        session_seconds.push(started.elapsed().as_secs_f64());
    }

    let acc = accuracy_metric(&matrix)?;
    let forgetting = if matrix.n_sessions() >= 2 { Some(forgetting_metric(&matrix)?) } else { None };
    let cross = match &config.cross_dataset {
        None => None,
        Some(src) => {
            let foreign: Vec<Sample> = src.load()?.into_iter().filter(|s| s.split == Split::Gallery).collect();
            Some(cross_dataset_eval(&model, &src.name(), &foreign, acc, config.k_nn)?)
        }
    };

    let index = embed_gallery(&model, &stream.gallery, &stream.gallery_task_ids)?;
    let neighbors = sample_queries(index.len(), config.neighbor_queries, config.seed)
        .into_iter()
        .map(|q| {
            Ok(QueryNeighbors {
                query_row: q,
                instance_id: index.instance_ids()[q],
                task_id: index.task_ids()[q],
                neighbors: nearest(&index, q, NEIGHBORS_SHOWN)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&model, &state, &ckpt)?;

    let record = RunRecord {
        config: config.clone(),
        dataset: config.dataset.name(),
        method: strategy.method,
        supervision: strategy.supervision,
        metrics: MetricsRow {
            method: strategy.method.table_name().to_string(),
            supervision: strategy.supervision.table_name().to_string(),
            acc,
            forgetting,
            cross,
        },
        matrix,
        overall,
        session_seconds,
        buffer_size: state.memory.len(),
        checkpoint_paths: vec![ckpt],
        neighbors,
    };
    emit_reports(&record, dir)?;
    info!("acc {:.4} for {:?}", acc, forgetting);
    Ok(RunOutcome { record, model, state })
}
