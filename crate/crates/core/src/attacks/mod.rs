//! White-box attacks: FGSM, PGD-K and CW-l2.
//!
//! Budgets are l∞ radii on pixels scaled to [0, 1]. Every attack
//! differentiates the model's real inference path, i.e. softmax over scaled
//! cosine scores, so there is no surrogate loss to mask gradients.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{DfaError, Result};
use crate::head::{softmax_rows, NormGuard};
use crate::model::{argmax_rows, Gradients, ModelSnapshot};
use crate::rng::{seeded, DfaRng};

/// What an attack needs from a classifier: scores and input gradients.
pub trait AttackModel {
    fn n_classes(&self) -> usize;

    fn input_len(&self) -> usize;

    /// Multiplier applied to scores before softmax.
    fn logit_scale(&self) -> f64;

    fn class_scores(&self, x: ArrayView2<f64>) -> Result<Array2<f64>>;

    /// Scores of `x` and the gradient with respect to `x` of Σ_b ⟨g_b, scores_b⟩,
    /// where `g = seed(scores)`.
    fn input_gradient(
        &self,
        x: ArrayView2<f64>,
        seed: &mut dyn FnMut(ArrayView2<f64>) -> Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)>;
}

impl AttackModel for ModelSnapshot {
    fn n_classes(&self) -> usize {
        self.head.n_classes()
    }

    fn input_len(&self) -> usize {
        self.extractor.input_len()
    }

    fn logit_scale(&self) -> f64 {
        self.score_scale
    }

    fn class_scores(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.scores(x)
    }

    fn input_gradient(
        &self,
        x: ArrayView2<f64>,
        seed: &mut dyn FnMut(ArrayView2<f64>) -> Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let (v, trace) = self.extractor.forward_traced(x)?;
        let scores = self.head.scores_batch(v.view(), NormGuard::Strict)?;
        let grad_scores = seed(scores.view());
        let grad_v = self.head.scores_backward(v.view(), grad_scores.view(), NormGuard::Strict)?;
        let mut grads = Gradients::zeros_like(&self.extractor);
        let grad_x = self
            .extractor
            .backward(&trace, grad_v, &mut grads, true)
            .expect("input gradient requested");
        Ok((scores, grad_x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMethod {
    Fgsm,
    Pgd,
    Cw,
}

impl std::str::FromStr for AttackMethod {
    type Err = DfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackMethod::Fgsm),
            "pgd" => Ok(AttackMethod::Pgd),
            "cw" => Ok(AttackMethod::Cw),
            other => Err(DfaError::Config(format!("unknown attack method `{other}`"))),
        }
    }
}

impl std::fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Pgd => "pgd",
            AttackMethod::Cw => "cw",
        })
    }
}

/// How CW keeps its iterate inside [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoxConstraint {
    /// Optimize in tanh space around the clean sample.
    #[default]
    Tanh,
    /// Plain gradient steps followed by clipping.
    Project,
}

impl std::str::FromStr for BoxConstraint {
    type Err = DfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(BoxConstraint::Tanh),
            "project" => Ok(BoxConstraint::Project),
            other => Err(DfaError::Config(format!("unknown box constraint `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub epsilon: f64,
    pub step_size: f64,
    /// PGD iterations or CW optimizer steps.
    pub steps: usize,
    pub cw_c: f64,
    pub cw_lr: f64,
    pub cw_box: BoxConstraint,
    pub random_start: bool,
    pub rng_seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::pgd(4.0 / 255.0, 2.0 / 255.0, 8)
    }
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            method: AttackMethod::Fgsm,
            epsilon,
            step_size: epsilon,
            steps: 1,
            cw_c: 0.01,
            cw_lr: 0.01,
            cw_box: BoxConstraint::Tanh,
            random_start: false,
            rng_seed: 0,
        }
    }

    pub fn pgd(epsilon: f64, step_size: f64, steps: usize) -> Self {
        Self {
            method: AttackMethod::Pgd,
            step_size,
            steps,
            random_start: true,
            ..Self::fgsm(epsilon)
        }
    }

    pub fn cw(c: f64, steps: usize) -> Self {
        Self {
            method: AttackMethod::Cw,
            epsilon: 0.0,
            cw_c: c,
            steps,
            ..Self::fgsm(0.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(DfaError::Config(reason));
        match self.method {
            AttackMethod::Fgsm | AttackMethod::Pgd if !(0.0..=1.0).contains(&self.epsilon) => {
                bad(format!("epsilon must lie in [0, 1], got {}", self.epsilon))
            }
            AttackMethod::Pgd if !(self.step_size > 0.0 && self.step_size.is_finite()) => {
                bad(format!("PGD step size must be positive, got {}", self.step_size))
            }
            AttackMethod::Pgd | AttackMethod::Cw if self.steps < 1 => bad("iterative attacks need at least one step".into()),
            AttackMethod::Cw if !(self.cw_c >= 0.0 && self.cw_c.is_finite()) => {
                bad(format!("CW constant must be non-negative, got {}", self.cw_c))
            }
            AttackMethod::Cw if !(self.cw_lr > 0.0 && self.cw_lr.is_finite()) => {
                bad(format!("CW learning rate must be positive, got {}", self.cw_lr))
            }
            _ => Ok(()),
        }
    }

    /// Short human-readable name, e.g. `pgd-8 eps=4/255`.
    pub fn label(&self) -> String {
        let eps = eighths(self.epsilon);
        match self.method {
            AttackMethod::Fgsm => format!("fgsm eps={eps}"),
            AttackMethod::Pgd => format!("pgd-{} eps={eps}", self.steps),
            AttackMethod::Cw => format!("cw c={}", self.cw_c),
        }
    }
}

/// Formats a budget as n/255 when it is one, else as a decimal.
fn eighths(eps: f64) -> String {
    let n = eps * 255.0;
    if (n - n.round()).abs() < 1e-9 {
        format!("{}/255", n.round() as i64)
    } else {
        format!("{eps}")
    }
}

fn check_batch<M: AttackModel + ?Sized>(model: &M, x: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if x.ncols() != model.input_len() {
        return Err(DfaError::dim("attack input width", model.input_len(), x.ncols()));
    }
    if x.nrows() != labels.len() {
        return Err(DfaError::dim("attack labels", x.nrows(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.n_classes()) {
        return Err(DfaError::Input(format!("label {bad} out of range")));
    }
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(DfaError::Input("attack inputs must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Gradient of the summed softmax cross-entropy with respect to the input.
pub fn cross_entropy_input_gradient<M: AttackModel + ?Sized>(
    model: &M,
    x: ArrayView2<f64>,
    labels: &[usize],
) -> Result<Array2<f64>> {
    let scale = model.logit_scale();
    let (_, grad) = model.input_gradient(x, &mut |scores| {
        let mut g = softmax_rows(scores, scale);
        for (b, &y) in labels.iter().enumerate() {
            g[[b, y]] -= 1.0;
        }
        g * scale
    })?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(DfaError::Numeric("non-finite attack gradient".into()));
    }
    Ok(grad)
}

/// Like `signum`, but zero maps to zero.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Largest float interval around `x0` whose points are all within `eps` of it
/// once the difference is computed in floating point.
fn ball_bounds(x0: f64, eps: f64) -> (f64, f64) {
    let mut hi = x0 + eps;
    while hi - x0 > eps {
        hi = hi.next_down();
    }
    let mut lo = x0 - eps;
    while x0 - lo > eps {
        lo = lo.next_up();
    }
    (lo, hi)
}

/// Single signed-gradient step of size ε, clipped to [0, 1].
pub fn fgsm<M: AttackModel + ?Sized>(model: &M, x: ArrayView2<f64>, labels: &[usize], epsilon: f64) -> Result<Array2<f64>> {
    AttackConfig::fgsm(epsilon).validate()?;
    check_batch(model, x, labels)?;
    let grad = cross_entropy_input_gradient(model, x, labels)?;
    let mut out = x.to_owned();
    Zip::from(&mut out).and(&grad).for_each(|o, &g| {
        let (lo, hi) = ball_bounds(*o, epsilon);
        *o = match sign(g) {
            s if s > 0.0 => hi,
            s if s < 0.0 => lo,
            _ => *o,
        }
        .clamp(0.0, 1.0);
    });
    Ok(out)
}

/// Projected gradient descent on the l∞ ball.
pub fn pgd<M: AttackModel + ?Sized>(model: &M, x: ArrayView2<f64>, labels: &[usize], cfg: &AttackConfig) -> Result<Array2<f64>> {
    pgd_observed(model, x, labels, cfg, &mut seeded(cfg.rng_seed), |_, _| {})
}

/// [`pgd`] with an explicit generator and a callback receiving every iterate
/// (including the starting point as iterate 0).
pub fn pgd_observed<M: AttackModel + ?Sized>(
    model: &M,
    x: ArrayView2<f64>,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut DfaRng,
    mut observe: impl FnMut(usize, ArrayView2<f64>),
) -> Result<Array2<f64>> {
    let cfg = AttackConfig {
        method: AttackMethod::Pgd,
        ..*cfg
    };
    cfg.validate()?;
    check_batch(model, x, labels)?;
    let eps = cfg.epsilon;
    let bounds: Array2<(f64, f64)> = x.mapv(|v| {
        let (lo, hi) = ball_bounds(v, eps);
        (lo.max(0.0), hi.min(1.0))
    });
    let mut adv = x.to_owned();
    if cfg.random_start && eps > 0.0 {
        let u = Uniform::new_inclusive(-eps, eps).map_err(|e| DfaError::param("epsilon", e.to_string()))?;
        Zip::from(&mut adv).and(&bounds).for_each(|a, &(lo, hi)| {
            *a = (*a + u.sample(rng)).clamp(lo, hi);
        });
    }
    observe(0, adv.view());
    for k in 1..=cfg.steps {
        let grad = cross_entropy_input_gradient(model, adv.view(), labels)?;
        Zip::from(&mut adv).and(&grad).and(&bounds).for_each(|a, &g, &(lo, hi)| {
            *a = (*a + cfg.step_size * sign(g)).clamp(lo, hi);
        });
        observe(k, adv.view());
    }
    Ok(adv)
}

fn tanh_space(x: f64) -> f64 {
    let limit = 1.0 - 1e-6;
    (2.0 * x - 1.0).clamp(-limit, limit).atanh()
}

fn squash(w: f64) -> f64 {
    (w.tanh() + 1.0) / 2.0
}

/// Gradient of Σ_b c·max(z_true − max_{k≠true} z_k, 0) with respect to the scores.
fn margin_seed(scores: ArrayView2<f64>, labels: &[usize], c: f64) -> (Array2<f64>, Vec<bool>) {
    let mut g = Array2::zeros(scores.dim());
    let mut fooled = Vec::with_capacity(labels.len());
    for (b, row) in scores.axis_iter(Axis(0)).enumerate() {
        let t = labels[b];
        let (mut other, mut best) = (usize::MAX, f64::NEG_INFINITY);
        for (k, &z) in row.iter().enumerate() {
            if k != t && z > best {
                best = z;
                other = k;
            }
        }
        let margin = row[t] - best;
        fooled.push(margin < 0.0);
        if margin > 0.0 && other != usize::MAX {
            g[[b, t]] = c;
            g[[b, other]] = -c;
        }
    }
    (g, fooled)
}

/// Carlini-Wagner l2 attack: minimizes ‖δ‖² + c·max(z_true − max_{k≠true} z_k, 0)
/// with Adam, returning per sample the smallest-distortion iterate that is
/// misclassified, or the clean sample when none is.
pub fn cw<M: AttackModel + ?Sized>(model: &M, x: ArrayView2<f64>, labels: &[usize], cfg: &AttackConfig) -> Result<Array2<f64>> {
    let cfg = AttackConfig {
        method: AttackMethod::Cw,
        ..*cfg
    };
    cfg.validate()?;
    check_batch(model, x, labels)?;
    let (beta1, beta2, adam_eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let w0 = x.mapv(tanh_space);
    let mut u = Array2::<f64>::zeros(x.dim());
    let mut m = Array2::<f64>::zeros(x.dim());
    let mut v = Array2::<f64>::zeros(x.dim());
    let mut best = x.to_owned();
    let mut best_dist = vec![f64::INFINITY; x.nrows()];

    let candidate = |u: &Array2<f64>| -> Array2<f64> {
        match cfg.cw_box {
            BoxConstraint::Tanh => {
                let mut out = x.to_owned();
                Zip::from(&mut out).and(u).and(&w0).for_each(|o, &du, &w| {
                    *o = (*o + (squash(w + du) - squash(w))).clamp(0.0, 1.0);
                });
                out
            }
            BoxConstraint::Project => (&x + u).mapv(|p| p.clamp(0.0, 1.0)),
        }
    };

    for step in 1..=cfg.steps + 1 {
        let adv = candidate(&u);
        let delta = &adv - &x;
        let mut fooled = Vec::new();
        let (_, grad_margin) = model.input_gradient(adv.view(), &mut |scores| {
            let (g, f) = margin_seed(scores, labels, cfg.cw_c);
            fooled = f;
            g
        })?;
        for (b, &hit) in fooled.iter().enumerate() {
            let dist = delta.row(b).mapv(|d| d * d).sum();
            if hit && dist < best_dist[b] {
                best_dist[b] = dist;
                best.row_mut(b).assign(&adv.row(b));
            }
        }
        if step > cfg.steps {
            break;
        }
        // d/dadv of ‖δ‖² + c·margin, then through the box map
        let mut grad = &delta * 2.0 + &grad_margin;
        if cfg.cw_box == BoxConstraint::Tanh {
            Zip::from(&mut grad).and(&u).and(&w0).for_each(|g, &du, &w| {
                let t = (w + du).tanh();
                *g *= (1.0 - t * t) / 2.0;
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(DfaError::Numeric("non-finite CW gradient".into()));
        }
        let t = step as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        Zip::from(&mut u).and(&mut m).and(&mut v).and(&grad).for_each(|u, m, v, &g| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *u -= cfg.cw_lr * (*m / c1) / ((*v / c2).sqrt() + adam_eps);
        });
    }
    Ok(best)
}

/// Runs the configured attack on one batch.
pub fn attack<M: AttackModel + ?Sized>(
    model: &M,
    x: ArrayView2<f64>,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut DfaRng,
) -> Result<Array2<f64>> {
    match cfg.method {
        AttackMethod::Fgsm => fgsm(model, x, labels, cfg.epsilon),
        AttackMethod::Pgd => pgd_observed(model, x, labels, cfg, rng, |_, _| {}),
        AttackMethod::Cw => cw(model, x, labels, cfg),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub label: String,
    pub config: AttackConfig,
    /// Percent of samples still classified correctly.
    pub accuracy: f64,
}

/// Accuracies in percent. `mean` and `std` summarize the attacked columns
/// (population standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub clean_accuracy: f64,
    pub attacks: Vec<AttackResult>,
    pub mean: f64,
    pub std: f64,
    pub n_samples: usize,
}

/// Mean and population standard deviation; (NaN, NaN) for no values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

const EVAL_CHUNK: usize = 128;

fn accuracy_of<M: AttackModel + ?Sized>(model: &M, x: ArrayView2<f64>, labels: &[usize]) -> Result<usize> {
    let pred = argmax_rows(model.class_scores(x)?.view());
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count())
}

/// Clean and per-attack accuracy over `data`.
pub fn evaluate_robustness<M: AttackModel + ?Sized>(model: &M, data: &Dataset, attacks: &[AttackConfig]) -> Result<RobustnessReport> {
    if data.is_empty() {
        return Err(DfaError::Input("robustness evaluation needs a non-empty test set".into()));
    }
    for cfg in attacks {
        cfg.validate()?;
    }
    let n = data.len();
    let mut clean = 0;
    let mut correct = vec![0usize; attacks.len()];
    let mut rngs: Vec<DfaRng> = attacks.iter().map(|c| seeded(c.rng_seed)).collect();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let x = data.images.slice(ndarray::s![start..end, ..]);
        let labels = &data.labels[start..end];
        clean += accuracy_of(model, x, labels)?;
        for ((cfg, rng), hits) in attacks.iter().zip(&mut rngs).zip(&mut correct) {
            let adv = attack(model, x, labels, cfg, rng)?;
            *hits += accuracy_of(model, adv.view(), labels)?;
        }
    }
    let pct = |c: usize| 100.0 * c as f64 / n as f64;
    let results: Vec<AttackResult> = attacks
        .iter()
        .zip(&correct)
        .map(|(cfg, &c)| AttackResult {
            label: cfg.label(),
            config: *cfg,
            accuracy: pct(c),
        })
        .collect();
    let accs: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    let (mean, std) = mean_std(&accs);
    Ok(RobustnessReport {
        clean_accuracy: pct(clean),
        attacks: results,
        mean,
        std,
        n_samples: n,
    })
}

/// Full-scale reference accuracies (percent) of the aggregation-trained
/// WRN-28-10 on CIFAR-10: FGSM 8/255, PGD-8, and the mean over five attacks.
/// Documentation only; desk-scale models are not expected to reach them.
pub const REFERENCE_CIFAR10_FGSM8: f64 = 74.18;
pub const REFERENCE_CIFAR10_PGD8: f64 = 32.12;
pub const REFERENCE_CIFAR10_MEAN: f64 = 56.91;
