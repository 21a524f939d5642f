//! Leave-one-out k-NN retrieval over a gallery, the task × session accuracy
//! matrix and the Acc / For / relative-drop metrics derived from it.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use vinil_tensor::Tensor;

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::models::ModelState;

/// Neighbor count used by the standard protocol.
pub const DEFAULT_K: usize = 100;

const EMBED_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    embeddings: Tensor,
    instance_ids: Vec<usize>,
    task_ids: Vec<usize>,
}

impl GalleryIndex {
    pub fn new(embeddings: Tensor, instance_ids: Vec<usize>, task_ids: Vec<usize>) -> Result<Self> {
        if embeddings.rank() != 2 {
            return Err(Error::Eval(format!("embeddings must be [M, D], got {:?}", embeddings.shape())));
        }
        let m = embeddings.shape()[0];
        if instance_ids.len() != m || task_ids.len() != m {
            return Err(Error::Eval(format!(
                "{m} embedding rows but {} instance ids and {} task ids",
                instance_ids.len(),
                task_ids.len()
            )));
        }
        Ok(GalleryIndex { embeddings, instance_ids, task_ids })
    }

    pub fn len(&self) -> usize {
        self.instance_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn instance_ids(&self) -> &[usize] {
        &self.instance_ids
    }

    pub fn task_ids(&self) -> &[usize] {
        &self.task_ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.embeddings.data()[i * d..(i + 1) * d]
    }
}

/// Encodes every gallery sample; `task_ids` is aligned with `gallery`.
pub fn embed_gallery(model: &ModelState, gallery: &[Sample], task_ids: &[usize]) -> Result<GalleryIndex> {
    if gallery.is_empty() {
        return Err(Error::Eval("gallery is empty".into()));
    }
    let mut rows = Vec::with_capacity(gallery.len() * model.embed_dim());
    for chunk in gallery.chunks(EMBED_CHUNK) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        rows.extend_from_slice(model.encode(&Tensor::stack(&images)?)?.data());
    }
    let embeddings = Tensor::new(vec![gallery.len(), model.embed_dim()], rows)?;
    GalleryIndex::new(embeddings, gallery.iter().map(|s| s.instance_id).collect(), task_ids.to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    /// Gallery row.
    pub row: usize,
    pub instance_id: usize,
    pub distance: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` rows closest to row `query`, nearest first, never the query itself.
/// Equal distances are ordered by row.
pub fn nearest(index: &GalleryIndex, query: usize, k: usize) -> Result<Vec<Neighbor>> {
    let m = index.len();
    if query >= m {
        return Err(Error::Eval(format!("query row {query} out of range for {m} rows")));
    }
    if m < 2 {
        return Err(Error::Eval("k-NN needs at least two gallery rows".into()));
    }
    let k = k.clamp(1, m - 1);
    let q = index.row(query);
    let mut cand: Vec<(f64, usize)> =
        (0..m).filter(|&i| i != query).map(|i| (sq_dist(q, index.row(i)), i)).collect();
    let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, by_dist);
        cand.truncate(k);
    }
    cand.sort_by(by_dist);
    Ok(cand
        .into_iter()
        .map(|(d, i)| Neighbor { row: i, instance_id: index.instance_ids[i], distance: d.sqrt() })
        .collect())
}

/// Majority vote over the `k` nearest instance ids; ties go to the smaller
/// summed distance, then the smaller id.
pub fn knn_predict(index: &GalleryIndex, query: usize, k: usize) -> Result<usize> {
    let mut votes: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for n in nearest(index, query, k)? {
        let e = votes.entry(n.instance_id).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += n.distance;
    }
    let best = votes
        .into_iter()
        .min_by(|a, b| {
            b.1 .0
                .cmp(&a.1 .0)
                .then_with(|| a.1 .1.partial_cmp(&b.1 .1).unwrap_or(Ordering::Equal))
                .then(a.0.cmp(&b.0))
        })
        .expect("at least one neighbor");
    Ok(best.0)
}

/// One session's leave-one-out accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEval {
    pub per_task: Vec<f64>,
    pub overall: f64,
}

/// Every gallery row queries the rest of the index; accuracy is grouped by
/// the query's task.
pub fn evaluate_index(index: &GalleryIndex, n_tasks: usize, k: usize) -> Result<SessionEval> {
    let mut hits = vec![0usize; n_tasks];
    let mut totals = vec![0usize; n_tasks];
    for q in 0..index.len() {
        let t = index.task_ids[q];
        if t >= n_tasks {
            return Err(Error::Eval(format!("gallery row {q} belongs to task {t}, only {n_tasks} tasks")));
        }
        totals[t] += 1;
        if knn_predict(index, q, k)? == index.instance_ids[q] {
            hits[t] += 1;
        }
    }
    if let Some(t) = totals.iter().position(|&n| n == 0) {
        return Err(Error::Eval(format!("task {t} has no gallery views")));
    }
    let per_task = hits.iter().zip(&totals).map(|(&h, &n)| h as f64 / n as f64).collect();
    let overall = hits.iter().sum::<usize>() as f64 / index.len() as f64;
    Ok(SessionEval { per_task, overall })
}

pub fn session_eval(
    model: &ModelState,
    gallery: &[Sample],
    gallery_task_ids: &[usize],
    n_tasks: usize,
    k: usize,
) -> Result<SessionEval> {
    evaluate_index(&embed_gallery(model, gallery, gallery_task_ids)?, n_tasks, k)
}

/// `a[t][s]`: accuracy on task `t`'s gallery slice after session `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMatrix {
    n_tasks: usize,
    /// One column per finished session.
    columns: Vec<Vec<f64>>,
}

impl SessionMatrix {
    pub fn new(n_tasks: usize) -> Self {
        SessionMatrix { n_tasks, columns: Vec::new() }
    }

    /// Builds a matrix from rows (`rows[t][s]`).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let sessions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != sessions) {
            return Err(Error::Eval("ragged session matrix".into()));
        }
        let mut m = SessionMatrix::new(rows.len());
        for s in 0..sessions {
            m.push_column(rows.iter().map(|r| r[s]).collect())?;
        }
        Ok(m)
    }

    pub fn push_column(&mut self, column: Vec<f64>) -> Result<()> {
        if column.len() != self.n_tasks {
            return Err(Error::Eval(format!("column has {} entries, expected {}", column.len(), self.n_tasks)));
        }
        if let Some(v) = column.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Eval(format!("accuracy {v} outside [0, 1]")));
        }
        self.columns.push(column);
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn n_sessions(&self) -> usize {
        self.columns.len()
    }

    pub fn get(&self, task: usize, session: usize) -> f64 {
        self.columns[session][task]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_tasks).map(|t| self.columns.iter().map(|c| c[t]).collect()).collect()
    }
}

/// Mean over sessions of the mean accuracy over tasks seen so far.
pub fn accuracy_metric(m: &SessionMatrix) -> Result<f64> {
    if m.n_tasks() == 0 || m.n_sessions() == 0 {
        return Err(Error::Eval("accuracy of an empty session matrix".into()));
    }
    let per_session: Vec<f64> = (0..m.n_sessions())
        .map(|s| {
            let seen = s.min(m.n_tasks() - 1) + 1;
            (0..seen).map(|t| m.get(t, s)).sum::<f64>() / seen as f64
        })
        .collect();
    Ok(per_session.iter().sum::<f64>() / per_session.len() as f64)
}

/// Mean over tasks measured at least twice of best minus final accuracy.
pub fn forgetting_metric(m: &SessionMatrix) -> Result<f64> {
    let last = m.n_sessions().checked_sub(1).filter(|&l| l >= 1);
    let last = last.ok_or_else(|| Error::Eval("forgetting needs at least two sessions".into()))?;
    let drops: Vec<f64> = (0..m.n_tasks())
        .filter(|&t| t < last)
        .map(|t| {
            let best = (t..=last).map(|s| m.get(t, s)).fold(f64::NEG_INFINITY, f64::max);
            best - m.get(t, last)
        })
        .collect();
    Ok(drops.iter().sum::<f64>() / drops.len() as f64)
}

/// `(same − cross) / same`, in percent.
pub fn relative_drop(same: f64, cross: f64) -> Result<f64> {
    if same == 0.0 || !same.is_finite() || !cross.is_finite() {
        return Err(Error::Eval(format!("relative drop undefined for same-domain {same}, cross {cross}")));
    }
    Ok(100.0 * (same - cross) / same)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossDatasetResult {
    pub dataset: String,
    pub acc: f64,
    pub rel_drop_pct: f64,
}

/// Leave-one-out retrieval on a foreign gallery compared with `same_acc`.
pub fn cross_dataset_eval(
    model: &ModelState,
    dataset: &str,
    foreign_gallery: &[Sample],
    same_acc: f64,
    k: usize,
) -> Result<CrossDatasetResult> {
    let index = embed_gallery(model, foreign_gallery, &vec![0; foreign_gallery.len()])?;
    let acc = evaluate_index(&index, 1, k)?.overall;
    Ok(CrossDatasetResult { dataset: dataset.to_string(), acc, rel_drop_pct: relative_drop(same_acc, acc)? })
}

/// One Acc / For line of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub supervision: String,
    pub acc: f64,
    /// Absent for single-session runs.
    #[serde(rename = "for")]
    pub forgetting: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross: Option<CrossDatasetResult>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(rows: Vec<Vec<f64>>, ids: Vec<usize>) -> GalleryIndex {
        let tasks = vec![0; ids.len()];
        GalleryIndex::new(Tensor::matrix(&rows).unwrap(), ids, tasks).unwrap()
    }

    #[test]
    fn duplicate_is_nearest() {
        let idx = index(vec![vec![0.0, 0.0], vec![5.0, 5.0], vec![0.0, 0.0], vec![9.0, 1.0]], vec![1, 2, 3, 4]);
        assert_eq!(knn_predict(&idx, 0, 1).unwrap(), 3);
    }

    #[test]
    fn majority_of_three() {
        let idx = index(vec![vec![0.0], vec![1.0], vec![1.1], vec![1.2], vec![50.0]], vec![9, 4, 4, 7, 4]);
        assert_eq!(knn_predict(&idx, 0, 3).unwrap(), 4);
    }

    #[test]
    fn vote_ties_use_distance_then_id() {
        let idx = index(vec![vec![0.0], vec![1.0], vec![-2.0]], vec![0, 8, 3]);
        assert_eq!(knn_predict(&idx, 0, 2).unwrap(), 8);
        let idx = index(vec![vec![0.0], vec![1.0], vec![-1.0]], vec![0, 8, 3]);
        assert_eq!(knn_predict(&idx, 0, 2).unwrap(), 3);
    }

    #[test]
    fn k_clamps_and_single_row_fails() {
        let idx = index(vec![vec![0.0], vec![1.0], vec![3.0]], vec![0, 1, 1]);
        assert_eq!(nearest(&idx, 0, 100).unwrap().len(), 2);
        assert!(knn_predict(&index(vec![vec![0.0]], vec![0]), 0, 5).is_err());
    }

    #[test]
    fn separated_instances_score_one() {
        let mut rows = Vec::new();
        let mut ids = Vec::new();
        let mut tasks = Vec::new();
        for inst in 0..4 {
            for _ in 0..3 {
                let mut r = vec![0.0; 4];
                r[inst] = 1.0;
                rows.push(r);
                ids.push(inst);
                tasks.push(inst / 2);
            }
        }
        let idx = GalleryIndex::new(Tensor::matrix(&rows).unwrap(), ids, tasks).unwrap();
        let e = evaluate_index(&idx, 2, 2).unwrap();
        assert_eq!(e.per_task, vec![1.0, 1.0]);
        assert_eq!(e.overall, 1.0);
    }

    #[test]
    fn identical_embeddings_follow_base_rate() {
        // with every distance equal the vote is decided by row order, so
        // the brute-force expectation is computed directly
        let ids = vec![0, 0, 0, 1, 1, 2];
        let idx = index(vec![vec![0.5, 0.5]; 6], ids.clone());
        let k = 5;
        let mut hits = 0;
        for q in 0..6 {
            let mut counts = BTreeMap::new();
            for i in (0..6).filter(|&i| i != q) {
                *counts.entry(ids[i]).or_insert(0) += 1;
            }
            let best = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).unwrap().0;
            hits += usize::from(*best == ids[q]);
        }
        let e = evaluate_index(&idx, 1, k).unwrap();
        assert_eq!(e.overall, hits as f64 / 6.0);
        assert_eq!(e.overall, 0.5);
    }

    #[test]
    fn evaluation_needs_every_task() {
        let idx = GalleryIndex::new(Tensor::matrix(&[vec![0.0], vec![1.0]]).unwrap(), vec![0, 1], vec![0, 0]).unwrap();
        assert!(evaluate_index(&idx, 2, 1).is_err());
        assert_eq!(evaluate_index(&idx, 1, 1).unwrap().per_task.len(), 1);
    }

    #[test]
    fn accuracy_examples() {
        let ones = SessionMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(accuracy_metric(&ones).unwrap(), 1.0);
        let single = SessionMatrix::from_rows(&[vec![0.5, 0.7]]).unwrap();
        assert!((accuracy_metric(&single).unwrap() - 0.6).abs() < 1e-15);
        // the upper-triangle entry (task 1 before its session) is ignored
        let two = SessionMatrix::from_rows(&[vec![0.8, 0.6], vec![0.0, 1.0]]).unwrap();
        assert_eq!(accuracy_metric(&two).unwrap(), 0.8);
        assert!(accuracy_metric(&SessionMatrix::new(2)).is_err());
    }

    #[test]
    fn forgetting_examples() {
        let mono = SessionMatrix::from_rows(&[vec![0.2, 0.5, 0.9]]).unwrap();
        assert_eq!(forgetting_metric(&mono).unwrap(), 0.0);
        let curve = SessionMatrix::from_rows(&[vec![0.9, 0.8, 0.6]]).unwrap();
        assert!((forgetting_metric(&curve).unwrap() - 0.3).abs() < 1e-15);
        let two = SessionMatrix::from_rows(&[vec![0.9, 0.6, 0.6], vec![0.0, 0.8, 0.7], vec![0.0, 0.0, 0.5]]).unwrap();
        assert!((forgetting_metric(&two).unwrap() - 0.2).abs() < 1e-15);
        assert!(forgetting_metric(&SessionMatrix::from_rows(&[vec![0.4]]).unwrap()).is_err());
    }

    #[test]
    fn relative_drop_examples() {
        assert_eq!(relative_drop(0.7, 0.7).unwrap(), 0.0);
        assert!((relative_drop(71.450, 59.850).unwrap() - 16.0).abs() < 0.5);
        assert_eq!(relative_drop(80.0, 40.0).unwrap(), 50.0);
        assert!(relative_drop(0.0, 0.3).is_err());
    }

    #[test]
    fn matrix_rejects_bad_columns() {
        let mut m = SessionMatrix::new(2);
        assert!(m.push_column(vec![0.5]).is_err());
        assert!(m.push_column(vec![0.5, 1.5]).is_err());
        m.push_column(vec![0.5, 0.25]).unwrap();
        assert_eq!(m.rows(), vec![vec![0.5], vec![0.25]]);
    }

    #[test]
    fn metrics_row_serializes_for_key() {
        let row = MetricsRow { method: "FT".into(), supervision: "Label".into(), acc: 0.5, forgetting: Some(0.1), cross: None };
        let s = serde_json::to_string(&row).unwrap();
        assert_eq!(s, r#"{"method":"FT","supervision":"Label","acc":0.5,"for":0.1}"#);
        assert_eq!(serde_json::from_str::<MetricsRow>(&s).unwrap(), row);
    }
}
