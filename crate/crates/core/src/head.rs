//! The orthogonal classifier: fixed class directions scored by cosine similarity.
//!
//! Weights are drawn once, orthonormalized, and never updated afterwards.
//! There is no bias and no activation; the logits fed to softmax are the
//! cosine scores multiplied by a scale knob that defaults to 1.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DfaError, Result};
use crate::rng::DfaRng;

/// Denominator guard used while training.
pub const TRAIN_NORM_EPS: f64 = 1e-12;

/// How a zero-norm embedding is handled when computing cosine scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormGuard {
    /// Reject zero-norm embeddings with a degenerate-input error.
    Strict,
    /// Add a constant to the embedding norm in the denominator.
    Stabilized(f64),
}

impl NormGuard {
    pub fn training() -> Self {
        NormGuard::Stabilized(TRAIN_NORM_EPS)
    }
}

/// Cosine scores and their softmax for a single embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub scores: Array1<f64>,
    pub probabilities: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalHead {
    weights: Array2<f64>,
    row_norms: Array1<f64>,
    frozen: bool,
}

impl OrthogonalHead {
    /// Draws a Gaussian matrix and orthonormalizes it; rows become unit class directions.
    pub fn init_orthogonal(n_classes: usize, embed_dim: usize, rng: &mut DfaRng) -> Result<Self> {
        if n_classes == 0 {
            return Err(DfaError::param("n_classes", "must be at least 1"));
        }
        if embed_dim < n_classes {
            return Err(DfaError::Capacity { n_classes, embed_dim });
        }
        // Column-major fill keeps the draw order independent of nalgebra internals.
        let mut draws: Vec<f64> = Vec::with_capacity(embed_dim * n_classes);
        for _ in 0..embed_dim * n_classes {
            draws.push(StandardNormal.sample(rng));
        }
        let gaussian = DMatrix::from_vec(embed_dim, n_classes, draws);
        let q = gaussian.qr().q();
        let mut weights = Array2::zeros((n_classes, embed_dim));
        for k in 0..n_classes {
            let column = q.column(k);
            let norm = column.norm();
            for d in 0..embed_dim {
                weights[[k, d]] = column[d] / norm;
            }
        }
        Self::from_weights(weights)
    }

    /// Wraps existing weights (e.g. from a checkpoint). Rows must be nonzero.
    pub fn from_weights(weights: Array2<f64>) -> Result<Self> {
        let row_norms = weights.map_axis(Axis(1), |row| row.dot(&row).sqrt());
        if let Some(k) = row_norms.iter().position(|&n| !(n > 0.0 && n.is_finite())) {
            return Err(DfaError::Degenerate(format!("class weight row {k} has zero or non-finite norm")));
        }
        Ok(Self {
            weights,
            row_norms,
            frozen: true,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Largest |w_k · w_l| over distinct rows.
    pub fn max_offdiag_dot(&self) -> f64 {
        let gram = self.weights.dot(&self.weights.t());
        let mut worst = 0.0f64;
        for k in 0..gram.nrows() {
            for l in 0..gram.ncols() {
                if k != l {
                    worst = worst.max(gram[[k, l]].abs());
                }
            }
        }
        worst
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.embed_dim() {
            return Err(DfaError::dim("cosine scores", self.embed_dim(), d));
        }
        Ok(())
    }

    /// Cosine scores and softmax probabilities for one embedding (evaluation path).
    pub fn cosine_scores(&self, v: ArrayView1<f64>) -> Result<ScoreVector> {
        let batch = v.insert_axis(Axis(0));
        let scores = self.scores_batch(batch, NormGuard::Strict)?.row(0).to_owned();
        let probabilities = softmax(scores.view(), 1.0);
        Ok(ScoreVector { scores, probabilities })
    }

    /// Cosine scores for every row of `v` (rows are embeddings).
    pub fn scores_batch(&self, v: ArrayView2<f64>, guard: NormGuard) -> Result<Array2<f64>> {
        self.check_dim(v.ncols())?;
        let norms = embedding_norms(v, guard)?;
        let mut dots = v.dot(&self.weights.t());
        for (b, mut row) in dots.axis_iter_mut(Axis(0)).enumerate() {
            for (k, s) in row.iter_mut().enumerate() {
                *s /= self.row_norms[k] * norms[b];
            }
        }
        Ok(dots)
    }

    /// Pulls a gradient on the cosine scores back to the embeddings.
    ///
    /// For s_k = w_k·v / (|w_k| (|v| + eps)) the derivative is
    /// ŵ_k / (|v| + eps) − (ŵ_k·v) v / (|v| (|v| + eps)²).
    pub fn scores_backward(&self, v: ArrayView2<f64>, grad_scores: ArrayView2<f64>, guard: NormGuard) -> Result<Array2<f64>> {
        self.check_dim(v.ncols())?;
        if grad_scores.dim() != (v.nrows(), self.n_classes()) {
            return Err(DfaError::dim(
                "score gradient",
                format!("({}, {})", v.nrows(), self.n_classes()),
                format!("{:?}", grad_scores.dim()),
            ));
        }
        let eps = match guard {
            NormGuard::Strict => 0.0,
            NormGuard::Stabilized(eps) => eps,
        };
        let raw_norms = embedding_norms(v, NormGuard::Stabilized(0.0))?;
        // Scale each class gradient by 1/|w_k| so the rows act as unit directions.
        let mut scaled = grad_scores.to_owned();
        for mut row in scaled.axis_iter_mut(Axis(0)) {
            for (k, g) in row.iter_mut().enumerate() {
                *g /= self.row_norms[k];
            }
        }
        let along = scaled.dot(&self.weights); // Σ_k g_k w_k / |w_k|
        let dots = v.dot(&self.weights.t());
        let mut out = Array2::zeros(v.dim());
        for b in 0..v.nrows() {
            let n = raw_norms[b];
            let denom = n + eps;
            if n == 0.0 {
                if eps == 0.0 {
                    return Err(DfaError::Degenerate(format!("embedding {b} has zero norm")));
                }
                out.row_mut(b).assign(&(&along.row(b) / denom));
                continue;
            }
            let proj: f64 = scaled.row(b).dot(&dots.row(b));
            let radial = proj / (n * denom * denom);
            for d in 0..v.ncols() {
                out[[b, d]] = along[[b, d]] / denom - radial * v[[b, d]];
            }
        }
        Ok(out)
    }
}

fn embedding_norms(v: ArrayView2<f64>, guard: NormGuard) -> Result<Array1<f64>> {
    let mut norms = v.map_axis(Axis(1), |row| row.dot(&row).sqrt());
    match guard {
        NormGuard::Strict => {
            if let Some(b) = norms.iter().position(|&n| n == 0.0) {
                return Err(DfaError::Degenerate(format!("embedding {b} has zero norm")));
            }
        }
        NormGuard::Stabilized(eps) => norms.mapv_inplace(|n| n + eps),
    }
    if norms.iter().any(|n| !n.is_finite()) {
        return Err(DfaError::Numeric("embedding norm".into()));
    }
    Ok(norms)
}

/// Softmax of `scale · scores`, computed with the max shift.
pub fn softmax(scores: ArrayView1<f64>, scale: f64) -> Array1<f64> {
    let max = scores.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(scale * s));
    let exps = scores.mapv(|s| (scale * s - max).exp());
    let total = exps.sum();
    exps / total
}

/// Row-wise softmax of `scale · scores`.
pub fn softmax_rows(scores: ArrayView2<f64>, scale: f64) -> Array2<f64> {
    let mut out = Array2::zeros(scores.dim());
    for (row, mut dst) in scores.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        dst.assign(&softmax(row, scale));
    }
    out
}
