//! Angle-based out-of-distribution detection.
//!
//! Each class is summarized by the top right-singular vector of its training
//! embeddings. A sample scores the smallest angle between its embedding and
//! any prototype (using |cos|, so prototype sign is irrelevant); large angles
//! suggest out-of-distribution inputs.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{DfaError, Result};
use crate::lossless;
use crate::model::ModelSnapshot;

/// Unit prototypes, one row per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototypeSet {
    pub prototypes: Array2<f64>,
    pub class_counts: Vec<usize>,
    pub source_hash: String,
}

impl ClassPrototypeSet {
    pub fn n_classes(&self) -> usize {
        self.prototypes.nrows()
    }
}

/// Top right-singular vector of `rows`, unit norm, sign fixed so that its
/// largest-magnitude entry is positive.
pub fn top_singular_vector(rows: ArrayView2<f64>) -> Result<Vec<f64>> {
    let (m, d) = rows.dim();
    if m == 0 || d == 0 {
        return Err(DfaError::Input("singular vector of an empty matrix".into()));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(DfaError::Numeric("non-finite embedding in prototype computation".into()));
    }
    let mat = DMatrix::from_fn(m, d, |i, j| rows[[i, j]]);
    let svd = mat.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| DfaError::Numeric("SVD did not produce right singular vectors".into()))?;
    let k = svd
        .singular_values
        .iter()
        .enumerate()
        .fold(0, |best, (i, &s)| if s > svd.singular_values[best] { i } else { best });
    if svd.singular_values[k] == 0.0 {
        return Err(DfaError::Degenerate("class embeddings are all zero".into()));
    }
    let mut v: Vec<f64> = v_t.row(k).iter().copied().collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let pivot = v.iter().fold(0.0f64, |acc, &x| if x.abs() > acc.abs() { x } else { acc });
    let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
    for x in &mut v {
        *x *= sign / norm;
    }
    Ok(v)
}

/// Prototypes from precomputed embeddings.
pub fn prototypes_from_embeddings(v: ArrayView2<f64>, labels: &[usize], n_classes: usize) -> Result<ClassPrototypeSet> {
    if v.nrows() != labels.len() {
        return Err(DfaError::dim("prototype labels", v.nrows(), labels.len()));
    }
    let mut prototypes = Array2::zeros((n_classes, v.ncols()));
    let mut class_counts = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.is_empty() {
            return Err(DfaError::EmptyClass { class });
        }
        let p = top_singular_vector(v.select(Axis(0), &idx).view())?;
        prototypes.row_mut(class).assign(&ArrayView1::from(&p));
        class_counts.push(idx.len());
    }
    Ok(ClassPrototypeSet {
        prototypes,
        class_counts,
        source_hash: String::new(),
    })
}

/// Prototypes of every class of `data` under `snapshot`.
pub fn compute_prototypes(snapshot: &ModelSnapshot, data: &Dataset) -> Result<ClassPrototypeSet> {
    let v = snapshot.embed(data.view())?;
    let mut set = prototypes_from_embeddings(v.view(), &data.labels, snapshot.n_classes())?;
    set.source_hash = snapshot.config_hash.clone();
    Ok(set)
}

/// φ = min_k arccos(|v·p_k| / ‖v‖), in [0, π/2].
pub fn angle_score(v: ArrayView1<f64>, prototypes: &ClassPrototypeSet) -> Result<f64> {
    if v.len() != prototypes.prototypes.ncols() {
        return Err(DfaError::dim("embedding width", prototypes.prototypes.ncols(), v.len()));
    }
    let norm = v.dot(&v).sqrt();
    if !norm.is_finite() {
        return Err(DfaError::Numeric("non-finite embedding".into()));
    }
    if norm == 0.0 {
        return Err(DfaError::Degenerate("zero-norm embedding has no angle".into()));
    }
    let best = prototypes
        .prototypes
        .axis_iter(Axis(0))
        .map(|p| (v.dot(&p).abs() / norm).clamp(0.0, 1.0))
        .fold(0.0f64, f64::max);
    Ok(best.acos())
}

pub fn ood_score(snapshot: &ModelSnapshot, prototypes: &ClassPrototypeSet, x: ArrayView1<f64>) -> Result<f64> {
    let v = snapshot.embed(x.insert_axis(Axis(0)))?;
    angle_score(v.row(0), prototypes)
}

pub fn ood_scores(snapshot: &ModelSnapshot, prototypes: &ClassPrototypeSet, x: ArrayView2<f64>) -> Result<Vec<f64>> {
    let v = snapshot.embed(x)?;
    v.axis_iter(Axis(0)).map(|row| angle_score(row, prototypes)).collect()
}

/// F1 with ID as the positive class; zero when undefined.
pub fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// F1 when predicting ID for every score ≤ `threshold`.
pub fn f1_at(scores: &[f64], is_id: &[bool], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&s, &id) in scores.iter().zip(is_id) {
        match (s <= threshold, id) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    f1_score(tp, fp, fn_)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Sweep {
    #[serde(with = "lossless::f64_field")]
    pub best_threshold: f64,
    pub best_f1: f64,
    #[serde(with = "lossless::f64_vec")]
    pub thresholds: Vec<f64>,
    pub f1: Vec<f64>,
}

/// Sweeps −∞, the midpoints of adjacent distinct scores, and +∞; the first
/// threshold reaching the maximum F1 wins.
pub fn f1_sweep(scores: &[f64], is_id: &[bool]) -> Result<F1Sweep> {
    if scores.len() != is_id.len() {
        return Err(DfaError::dim("sweep labels", scores.len(), is_id.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DfaError::Numeric("NaN OOD score".into()));
    }
    let n_id = is_id.iter().filter(|&&b| b).count();
    if n_id == 0 || n_id == is_id.len() {
        return Err(DfaError::MetricUndefined("F1 sweep needs both ID and OOD samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut thresholds = vec![f64::NEG_INFINITY];
    let mut f1 = vec![f1_score(0, 0, n_id)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if is_id[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let t = if i < order.len() { s + (scores[order[i]] - s) / 2.0 } else { f64::INFINITY };
        thresholds.push(t);
        f1.push(f1_score(tp, fp, n_id - tp));
    }
    let best = (0..f1.len()).fold(0, |b, k| if f1[k] > f1[b] { k } else { b });
    Ok(F1Sweep {
        best_threshold: thresholds[best],
        best_f1: f1[best],
        thresholds,
        f1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OODReport {
    pub scores: Vec<f64>,
    /// `true` for in-distribution samples (the positive class).
    pub is_id: Vec<bool>,
    #[serde(with = "lossless::f64_field")]
    pub best_threshold: f64,
    pub best_f1: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

impl OODReport {
    /// F1 of predicting ID for everything, 2p/(p+1) with p the ID fraction.
    pub fn all_positive_f1(&self) -> f64 {
        f1_score(self.n_id, self.n_ood, 0)
    }
}

pub fn report_from_scores(id_scores: &[f64], ood_scores: &[f64]) -> Result<OODReport> {
    let scores: Vec<f64> = id_scores.iter().chain(ood_scores).copied().collect();
    let is_id: Vec<bool> = std::iter::repeat_n(true, id_scores.len())
        .chain(std::iter::repeat_n(false, ood_scores.len()))
        .collect();
    let sweep = f1_sweep(&scores, &is_id)?;
    Ok(OODReport {
        scores,
        is_id,
        best_threshold: sweep.best_threshold,
        best_f1: sweep.best_f1,
        n_id: id_scores.len(),
        n_ood: ood_scores.len(),
    })
}

/// Scores an ID and an OOD test set against `prototypes` and sweeps F1.
pub fn evaluate_ood(snapshot: &ModelSnapshot, prototypes: &ClassPrototypeSet, id: &Dataset, ood: &Dataset) -> Result<OODReport> {
    let a = ood_scores(snapshot, prototypes, id.view())?;
    let b = ood_scores(snapshot, prototypes, ood.view())?;
    report_from_scores(&a, &b)
}

/// Full-scale reference F1 of the aggregation-trained model with CIFAR-10 as
/// ID and TinyImageNet-crop / LSUN-resize as OOD. Documentation only.
pub const REFERENCE_F1_TIN_CROP: f64 = 0.922;
pub const REFERENCE_F1_LSUN_RESIZE: f64 = 0.937;
