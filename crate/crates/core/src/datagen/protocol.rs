use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Sample, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub n_tasks: usize,
    pub categories_per_task: usize,
    /// Each category task is cut into this many instance-level sessions.
    pub instance_subtasks: usize,
    /// Permutes categories before assignment; `None` keeps id order.
    pub shuffle_seed: Option<u64>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            n_tasks: 5,
            categories_per_task: 2,
            instance_subtasks: 1,
            shuffle_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: usize,
    pub categories: Vec<usize>,
    pub instance_ids: Vec<usize>,
    pub train: Vec<Sample>,
}

/// Ordered training sessions plus the shared retrieval gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub gallery: Vec<Sample>,
    /// Task that introduced each gallery row's instance.
    pub gallery_task_ids: Vec<usize>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task_of_instance(&self, instance_id: usize) -> Option<usize> {
        self.tasks
            .iter()
            .find(|t| t.instance_ids.binary_search(&instance_id).is_ok())
            .map(|t| t.id)
    }
}

/// Assigns `categories_per_task` categories to each of `n_tasks` tasks and
/// optionally cuts every task into instance-disjoint subtasks.
pub fn split_protocol(dataset: &[Sample], cfg: &ProtocolConfig) -> Result<TaskStream> {
    if cfg.n_tasks == 0 || cfg.categories_per_task == 0 || cfg.instance_subtasks == 0 {
        return Err(Error::Config(
            "n_tasks, categories_per_task and instance_subtasks must be positive".into(),
        ));
    }
    let mut categories: Vec<usize> = dataset
        .iter()
        .map(|s| s.category_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let needed = cfg.n_tasks * cfg.categories_per_task;
    if needed > categories.len() {
        return Err(Error::Data(format!(
            "{} tasks x {} categories need {needed} categories, dataset has {}",
            cfg.n_tasks,
            cfg.categories_per_task,
            categories.len()
        )));
    }
    if let Some(seed) = cfg.shuffle_seed {
        categories.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }

    let mut instances_by_category: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for s in dataset {
        instances_by_category.entry(s.category_id).or_default().insert(s.instance_id);
    }

    let mut tasks = Vec::new();
    let mut task_of: BTreeMap<usize, usize> = BTreeMap::new();
    for chunk in categories.chunks(cfg.categories_per_task).take(cfg.n_tasks) {
        let mut cats = chunk.to_vec();
        cats.sort_unstable();
        let instances: Vec<usize> = cats
            .iter()
            .flat_map(|c| instances_by_category[c].iter().copied())
            .collect();
        if cfg.instance_subtasks > instances.len() {
            return Err(Error::Data(format!(
                "cannot cut {} instances into {} subtasks",
                instances.len(),
                cfg.instance_subtasks
            )));
        }
        let (base, extra) = (instances.len() / cfg.instance_subtasks, instances.len() % cfg.instance_subtasks);
        let mut start = 0;
        for part in 0..cfg.instance_subtasks {
            let len = base + usize::from(part < extra);
            let mut ids = instances[start..start + len].to_vec();
            ids.sort_unstable();
            start += len;
            let id = tasks.len();
            for &i in &ids {
                task_of.insert(i, id);
            }
            let train = dataset
                .iter()
                .filter(|s| s.split == Split::Train && ids.binary_search(&s.instance_id).is_ok())
                .cloned()
                .collect();
            let task_cats = cats
                .iter()
                .copied()
                .filter(|c| ids.iter().any(|i| instances_by_category[c].contains(i)))
                .collect();
            tasks.push(Task { id, categories: task_cats, instance_ids: ids, train });
        }
    }

    let mut gallery = Vec::new();
    let mut gallery_task_ids = Vec::new();
    for s in dataset.iter().filter(|s| s.split == Split::Gallery) {
        if let Some(&t) = task_of.get(&s.instance_id) {
            gallery.push(s.clone());
            gallery_task_ids.push(t);
        }
    }
    let covered: BTreeSet<usize> = gallery.iter().map(|s| s.instance_id).collect();
    if let Some(missing) = task_of.keys().find(|i| !covered.contains(i)) {
        return Err(Error::Data(format!("instance {missing} has no gallery views")));
    }
    Ok(TaskStream { tasks, gallery, gallery_task_ids })
}
