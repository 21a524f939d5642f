//! Fine-tuning, EwC and Replay, each with label or self supervision.
//!
//! | method   | label                          | self                                |
//! |----------|--------------------------------|-------------------------------------|
//! | finetune | CE(y, y′)                      | BT(x, x′)                           |
//! | ewc      | w_c·CE + (1−w_c)·Reg           | w_c·BT + (1−w_c)·Reg                |
//! | replay   | w_c·CE + (1−w_c)·CE(yᵐ, yᵐ′)   | w_c·BT(x, x′) + (1−w_c)·BT(xᵐ, xᵐ′) |
//!
//! When the incremental term does not exist yet (no anchor in the first
//! session, empty memory), the loss is the instance term alone.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vinil_tensor::{Tape, Tensor, Var};

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::losses::{barlow_twins, combined_objective, cross_entropy, HyperParams};
use crate::models::{is_classifier, is_projector, Bound, ModelState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Finetune,
    Ewc,
    Replay,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Finetune, Method::Ewc, Method::Replay];

    pub fn name(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::Ewc => "ewc",
            Method::Replay => "replay",
        }
    }

    /// Short label used in report tables.
    pub fn table_name(self) -> &'static str {
        match self {
            Method::Finetune => "FT",
            Method::Ewc => "EwC",
            Method::Replay => "Replay",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "finetune" | "ft" => Ok(Method::Finetune),
            "ewc" => Ok(Method::Ewc),
            "replay" => Ok(Method::Replay),
            _ => Err(format!("unknown method `{s}` (finetune, ewc, replay)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Supervision {
    #[serde(rename = "label")]
    Label,
    #[serde(rename = "self")]
    SelfSupervised,
}

impl Supervision {
    pub fn name(self) -> &'static str {
        match self {
            Supervision::Label => "label",
            Supervision::SelfSupervised => "self",
        }
    }

    pub fn table_name(self) -> &'static str {
        match self {
            Supervision::Label => "Label",
            Supervision::SelfSupervised => "VINIL",
        }
    }

    /// Parameters the optimizer updates under this supervision.
    pub fn trains(self, name: &str) -> bool {
        match self {
            Supervision::Label => !is_projector(name),
            Supervision::SelfSupervised => !is_classifier(name),
        }
    }
}

impl std::str::FromStr for Supervision {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "label" => Ok(Supervision::Label),
            "self" | "vinil" => Ok(Supervision::SelfSupervised),
            _ => Err(format!("unknown supervision `{s}` (label, self)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub method: Method,
    pub supervision: Supervision,
    /// Share of every finished task kept for replay.
    pub memory_fraction: f64,
    pub hyper: HyperParams,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            method: Method::Finetune,
            supervision: Supervision::SelfSupervised,
            memory_fraction: 0.10,
            hyper: HyperParams::default(),
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if !(self.memory_fraction > 0.0 && self.memory_fraction <= 1.0) {
            return Err(Error::Config(format!("memory_fraction must lie in (0, 1], got {}", self.memory_fraction)));
        }
        Ok(())
    }
}

/// Anchor weights and per-parameter importance for the EwC penalty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EwcState {
    pub theta_prev: BTreeMap<String, Tensor>,
    pub importance: BTreeMap<String, Tensor>,
}

impl EwcState {
    pub fn is_empty(&self) -> bool {
        self.theta_prev.is_empty()
    }
}

/// Number of leading rows of `current` that the anchor constrains. Only the
/// classifier may have grown since the anchor was taken.
fn anchored_rows(name: &str, current: &[usize], anchor: &[usize]) -> Result<Option<usize>> {
    if current == anchor {
        return Ok(None);
    }
    if is_classifier(name) && current.len() == anchor.len() && current[1..] == anchor[1..] && current[0] > anchor[0] {
        return Ok(Some(anchor[0]));
    }
    Err(Error::Strategy(format!(
        "EwC anchor for `{name}` has shape {anchor:?}, model has {current:?}"
    )))
}

/// `Σ_p Ω_p (θ_p − θ_prev,p)²` on the tape; a constant zero without anchors.
pub fn ewc_penalty_on(tape: &mut Tape, bound: &Bound, state: &EwcState) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (name, anchor) in &state.theta_prev {
        let omega = state
            .importance
            .get(name)
            .ok_or_else(|| Error::Strategy(format!("no importance for `{name}`")))?;
        if omega.shape() != anchor.shape() {
            return Err(Error::Strategy(format!("importance for `{name}` does not match its anchor")));
        }
        let mut p = bound.var(name)?;
        if let Some(rows) = anchored_rows(name, tape.shape(p), anchor.shape())? {
            p = tape.narrow_rows(p, rows)?;
        }
        let a = tape.constant(anchor.clone());
        let w = tape.constant(omega.clone());
        let diff = tape.sub(p, a)?;
        let sq = tape.mul(diff, diff)?;
        let weighted = tape.mul(sq, w)?;
        let term = tape.sum(weighted)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    })
}

pub fn ewc_penalty(model: &ModelState, state: &EwcState) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let bound = model.bind(&mut tape, |_| false);
    let p = ewc_penalty_on(&mut tape, &bound, state)?;
    Ok(tape.value(p).item().expect("scalar"))
}

/// Snapshots the weights at the end of a session and sets the importance:
/// all ones under self supervision, the diagonal empirical Fisher of the
/// predicted-class log-likelihood under label supervision.
pub fn ewc_update_after_session(model: &ModelState, task: &[Sample], supervision: Supervision) -> Result<EwcState> {
    let theta_prev = model.params().clone();
    let importance = match supervision {
        Supervision::SelfSupervised => theta_prev
            .iter()
            .map(|(k, t)| Ok((k.clone(), Tensor::ones(t.shape())?)))
            .collect::<Result<BTreeMap<_, _>>>()?,
        Supervision::Label => empirical_fisher(model, task)?,
    };
    Ok(EwcState { theta_prev, importance })
}

fn empirical_fisher(model: &ModelState, task: &[Sample]) -> Result<BTreeMap<String, Tensor>> {
    if task.is_empty() {
        return Err(Error::Strategy("label EwC needs the finished task's samples".into()));
    }
    let mut fisher: BTreeMap<String, Vec<f64>> =
        model.params().iter().map(|(k, t)| (k.clone(), vec![0.0; t.numel()])).collect();
    for sample in task {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, |_| true);
        let x = tape.constant(Tensor::stack(&[&sample.image])?);
        let h = model.encode_on(&mut tape, &bound, x)?;
        let logits = model.classify_on(&mut tape, &bound, h)?;
        let row = tape.value(logits).data();
        let predicted = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        let mut mask = vec![0.0; row.len()];
        mask[predicted] = 1.0;
        let mask = tape.constant(Tensor::new(vec![1, mask.len()], mask)?);
        let logp = tape.log_softmax(logits)?;
        let picked = tape.mul(logp, mask)?;
        let loglik = tape.sum(picked)?;
        let grads = tape.backward(loglik)?;
        for (name, var) in bound.iter() {
            if let Some(g) = grads.get(var) {
                for (f, gi) in fisher.get_mut(name).expect("same names").iter_mut().zip(g.data()) {
                    *f += gi * gi;
                }
            }
        }
    }
    let n = task.len() as f64;
    model
        .params()
        .iter()
        .map(|(k, t)| {
            let data = fisher.remove(k).expect("same names").into_iter().map(|v| v / n).collect();
            Ok((k.clone(), Tensor::new(t.shape().to_vec(), data)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryItem {
    pub image: Tensor,
    /// Classifier index; only kept under label supervision.
    pub label: Option<usize>,
    pub task_id: usize,
}

/// Replay memory: a uniform share of every finished task.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryBuffer {
    pub items: Vec<MemoryItem>,
}

/// Images (and labels, under label supervision) drawn for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBatch {
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl MemoryBuffer {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn task_ids(&self) -> Vec<usize> {
        self.items.iter().map(|m| m.task_id).collect()
    }

    /// Stores `round(fraction · |task|)` samples of a finished task, drawn
    /// uniformly without replacement. `labels` maps instance id to classifier
    /// index and must be given exactly under label supervision.
    pub fn update(
        &mut self,
        task_id: usize,
        task: &[Sample],
        fraction: f64,
        labels: Option<&BTreeMap<usize, usize>>,
        seed: u64,
    ) -> Result<usize> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Strategy(format!("memory fraction must lie in (0, 1], got {fraction}")));
        }
        if task.is_empty() {
            return Ok(0);
        }
        let count = ((fraction * task.len() as f64).round() as usize).min(task.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in index::sample(&mut rng, task.len(), count) {
            let s = &task[i];
            let label = match labels {
                Some(map) => Some(*map.get(&s.instance_id).ok_or_else(|| {
                    Error::Strategy(format!("instance {} has no classifier index", s.instance_id))
                })?),
                None => None,
            };
            self.items.push(MemoryItem { image: s.image.clone(), label, task_id });
        }
        Ok(count)
    }

    /// Draws a replay batch: with replacement when the buffer is smaller
    /// than `batch_size`, otherwise without.
    pub fn replay_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<MemoryBatch> {
        if self.items.is_empty() {
            return Err(Error::Strategy("replay memory is empty".into()));
        }
        if batch_size == 0 {
            return Err(Error::Strategy("replay batch size must be positive".into()));
        }
        let picks: Vec<usize> = if self.items.len() < batch_size {
            (0..batch_size).map(|_| rng.gen_range(0..self.items.len())).collect()
        } else {
            index::sample(rng, self.items.len(), batch_size).into_vec()
        };
        let images: Vec<&Tensor> = picks.iter().map(|&i| &self.items[i].image).collect();
        let labels = picks.iter().map(|&i| self.items[i].label).collect::<Option<Vec<_>>>();
        if labels.is_none() && picks.iter().any(|&i| self.items[i].label.is_some()) {
            return Err(Error::Strategy("replay memory mixes labeled and unlabeled items".into()));
        }
        Ok(MemoryBatch { images: Tensor::stack(&images)?, labels })
    }
}

/// Per-method state carried from one session to the next.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StrategyState {
    pub ewc: EwcState,
    pub memory: MemoryBuffer,
}

/// Current-task inputs for one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    /// Clean view `x`.
    pub view: Tensor,
    /// Augmented view `x′`.
    pub augmented: Tensor,
    pub labels: Option<Vec<usize>>,
}

/// Memory inputs for one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayInputs {
    pub view: Tensor,
    pub augmented: Tensor,
    pub labels: Option<Vec<usize>>,
}

/// Clean view, augmented view and optional labels of one batch.
struct Views<'a> {
    view: &'a Tensor,
    augmented: &'a Tensor,
    labels: Option<&'a [usize]>,
}

fn instance_loss(
    tape: &mut Tape,
    bound: &Bound,
    model: &ModelState,
    supervision: Supervision,
    views: Views<'_>,
    w_b: f64,
) -> Result<Var> {
    let Views { view, augmented, labels } = views;
    match supervision {
        Supervision::Label => {
            let labels = labels.ok_or_else(|| Error::Strategy("label supervision needs labeled samples".into()))?;
            let x = tape.constant(augmented.clone());
            let h = model.encode_on(tape, bound, x)?;
            let logits = model.classify_on(tape, bound, h)?;
            cross_entropy(tape, logits, labels)
        }
        Supervision::SelfSupervised => {
            let x = tape.constant(view.clone());
            let x_aug = tape.constant(augmented.clone());
            let h = model.encode_on(tape, bound, x)?;
            let h_aug = model.encode_on(tape, bound, x_aug)?;
            let z = model.project_on(tape, bound, h)?;
            let z_aug = model.project_on(tape, bound, h_aug)?;
            barlow_twins(tape, z, z_aug, w_b)
        }
    }
}

/// Builds the full per-step loss for `strategy` on the tape.
pub fn session_loss(
    tape: &mut Tape,
    bound: &Bound,
    model: &ModelState,
    batch: &TrainBatch,
    strategy: &StrategyConfig,
    state: &StrategyState,
    replay: Option<&ReplayInputs>,
) -> Result<Var> {
    let hyper = &strategy.hyper;
    let sup = strategy.supervision;
    let current = Views { view: &batch.view, augmented: &batch.augmented, labels: batch.labels.as_deref() };
    let l_inst = instance_loss(tape, bound, model, sup, current, hyper.w_b)?;
    let l_incr = match strategy.method {
        Method::Finetune => None,
        Method::Ewc if state.ewc.is_empty() => None,
        Method::Ewc => Some(ewc_penalty_on(tape, bound, &state.ewc)?),
        Method::Replay => match replay {
            None => None,
            Some(mem) => {
                let memory = Views { view: &mem.view, augmented: &mem.augmented, labels: mem.labels.as_deref() };
                Some(instance_loss(tape, bound, model, sup, memory, hyper.w_b)?)
            }
        },
    };
    match l_incr {
        Some(l) => combined_objective(tape, l_inst, l, hyper.w_c),
        None => Ok(l_inst),
    }
}
