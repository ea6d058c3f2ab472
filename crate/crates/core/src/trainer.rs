//! Training loop for the aggregation objective and the mixing baselines.
//!
//! Every mode shares the extractor, the frozen orthogonal head and the
//! optimizer; they differ only in what is mixed and which loss terms apply:
//!
//! | mode             | input to the head                  | loss                      |
//! |------------------|------------------------------------|---------------------------|
//! | `vanilla`        | F(x)                               | CE                        |
//! | `mixup`          | F(λx_i + (1−λ)x_j)                 | mixed CE                  |
//! | `manifold-mixup` | mixed at a random hidden layer     | mixed CE                  |
//! | `dfa`            | F(x̂) and λv_i + (1−λ)v_j           | two mixed CE terms + L_a  |

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregation_loss, aggregation_loss_grad, aggregation_residual, AggregationLossConfig, LossReport, Reduction,
    DEFAULT_SIGMA,
};
use crate::data::Dataset;
use crate::error::{DfaError, Result};
use crate::head::{softmax_rows, NormGuard, OrthogonalHead};
use crate::mixing::{convex_combination, one_hot, pairing_permutation, permute_rows, sample_lambda};
use crate::model::{argmax_rows, Architecture, FeatureExtractor, Gradients, ModelSnapshot, DEFAULT_EMBED_DIM};
use crate::rng::{seeded, DfaRng, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Vanilla,
    Mixup,
    ManifoldMixup,
    Dfa,
}

impl std::str::FromStr for TrainMode {
    type Err = DfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(TrainMode::Vanilla),
            "mixup" => Ok(TrainMode::Mixup),
            "manifold-mixup" | "manifold_mixup" => Ok(TrainMode::ManifoldMixup),
            "dfa" => Ok(TrainMode::Dfa),
            other => Err(DfaError::Config(format!("unknown training mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Vanilla => "vanilla",
            TrainMode::Mixup => "mixup",
            TrainMode::ManifoldMixup => "manifold-mixup",
            TrainMode::Dfa => "dfa",
        })
    }
}

/// Piecewise-constant learning rate: each entry holds for that many epochs;
/// the last rate continues past the end of the list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule(pub Vec<(f64, usize)>);

impl LrSchedule {
    pub fn constant(rate: f64) -> Self {
        LrSchedule(vec![(rate, usize::MAX)])
    }

    /// The 200-epoch full-scale schedule: 0.1, 0.02, 0.004, 0.0008, stepping every 60 epochs.
    pub fn full_scale() -> Self {
        LrSchedule(vec![(0.1, 60), (0.02, 60), (0.004, 60), (0.0008, 20)])
    }

    pub fn rate_at(&self, epoch: usize) -> f64 {
        let mut end = 0usize;
        for &(rate, span) in &self.0 {
            end = end.saturating_add(span);
            if epoch < end {
                return rate;
            }
        }
        self.0.last().map_or(0.0, |&(rate, _)| rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub alpha: f64,
    pub sigma: f64,
    pub reduction: Reduction,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub rng_seed: u64,
    pub embed_dim: usize,
    /// Multiplier on cosine scores before softmax. 1 reproduces the plain cosine softmax.
    pub score_scale: f64,
    /// Expected class count; `None` takes it from the dataset.
    pub n_classes: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Dfa,
            alpha: 1.0,
            sigma: DEFAULT_SIGMA,
            reduction: Reduction::MeanSquared,
            epochs: 10,
            batch_size: 64,
            schedule: LrSchedule::constant(0.05),
            momentum: 0.9,
            weight_decay: 5e-4,
            rng_seed: 0,
            embed_dim: DEFAULT_EMBED_DIM,
            score_scale: 1.0,
            n_classes: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(DfaError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(DfaError::Config("batch_size must be at least 2 for pairing".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(DfaError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(DfaError::Config(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        if self.schedule.0.is_empty() || self.schedule.0.iter().any(|&(r, _)| !(r >= 0.0 && r.is_finite())) {
            return Err(DfaError::Config("learning-rate schedule needs finite non-negative rates".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(DfaError::Config("momentum must be in [0, 1) and weight decay non-negative".into()));
        }
        if !(self.score_scale > 0.0 && self.score_scale.is_finite()) {
            return Err(DfaError::Config("score_scale must be positive".into()));
        }
        Ok(())
    }

    fn aggregation(&self) -> AggregationLossConfig {
        AggregationLossConfig {
            sigma: self.sigma,
            reduction: self.reduction,
            rng_seed: self.rng_seed,
        }
    }
}

fn check_labels(y: ArrayView2<f64>) -> Result<()> {
    for (b, row) in y.axis_iter(Axis(0)).enumerate() {
        let mass = row.sum();
        if (mass - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
            return Err(DfaError::Input(format!("label row {b} is not a probability vector (sum {mass})")));
        }
    }
    Ok(())
}

/// Mean soft-label cross-entropy of softmax(scale · cosine scores of `v`)
/// and its gradient with respect to `v`.
fn soft_cross_entropy(
    head: &OrthogonalHead,
    v: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    scale: f64,
    guard: NormGuard,
) -> Result<(f64, Array2<f64>)> {
    let scores = head.scores_batch(v, guard)?;
    let probs = softmax_rows(scores.view(), scale);
    let batch = v.nrows() as f64;
    let mut loss = 0.0;
    for (s, y) in scores.axis_iter(Axis(0)).zip(targets.axis_iter(Axis(0))) {
        let max = s.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(scale * x));
        let lse = max + s.iter().map(|&x| (scale * x - max).exp()).sum::<f64>().ln();
        loss += y.iter().zip(s.iter()).map(|(&t, &x)| t * (lse - scale * x)).sum::<f64>();
    }
    let grad_scores = (&probs - &targets) * (scale / batch);
    let grad_v = head.scores_backward(v, grad_scores.view(), guard)?;
    Ok((loss / batch, grad_v))
}

/// Sum of two mixed-label cross-entropies: one on the embedding of the mixed
/// input, one on the mixed embeddings. Both are batch means.
#[allow(clippy::too_many_arguments)]
pub fn classification_loss(
    head: &OrthogonalHead,
    v_i: ArrayView2<f64>,
    v_j: ArrayView2<f64>,
    v_hat: ArrayView2<f64>,
    y_i: ArrayView2<f64>,
    y_j: ArrayView2<f64>,
    lam: f64,
    score_scale: f64,
) -> Result<f64> {
    check_labels(y_i)?;
    check_labels(y_j)?;
    let y_mix = &y_i * lam + &y_j * (1.0 - lam);
    let v_mix = &v_i * lam + &v_j * (1.0 - lam);
    let (a, _) = soft_cross_entropy(head, v_hat, y_mix.view(), score_scale, NormGuard::Strict)?;
    let (b, _) = soft_cross_entropy(head, v_mix.view(), y_mix.view(), score_scale, NormGuard::Strict)?;
    Ok(a + b)
}

/// Plain SGD with momentum and L2 weight decay (decay folded into the gradient).
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(extractor: &FeatureExtractor, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: extractor.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn apply(&mut self, extractor: &mut FeatureExtractor, grads: &Gradients, lr: f64) {
        for ((param, grad), vel) in extractor.params_mut().iter_mut().zip(&grads.0).zip(&mut self.velocity) {
            for ((w, &g), v) in param.value.iter_mut().zip(grad).zip(vel.iter_mut()) {
                let g = g + self.weight_decay * *w;
                *v = self.momentum * *v + g;
                *w -= lr * *v;
            }
        }
    }
}

/// Mutable training state: the model, optimizer buffers, and the generator.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub snapshot: ModelSnapshot,
    pub config: TrainConfig,
    optimizer: Sgd,
    rng: DfaRng,
    step: usize,
}

impl Trainer {
    pub fn new(snapshot: ModelSnapshot, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if !snapshot.head.is_frozen() {
            return Err(DfaError::Config("the classifier head must be frozen before training".into()));
        }
        let rng = match snapshot.rng_state {
            Some(state) => state.restore(),
            None => seeded(config.rng_seed.wrapping_add(1)),
        };
        let optimizer = Sgd::new(&snapshot.extractor, config.momentum, config.weight_decay);
        Ok(Self {
            snapshot,
            config,
            optimizer,
            rng,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One optimizer update on a batch of samples with integer labels.
    pub fn train_step(&mut self, x: ArrayView2<f64>, labels: &[usize], lr: f64) -> Result<LossReport> {
        let batch = x.nrows();
        if batch < 2 {
            return Err(DfaError::Input("a training batch needs at least two samples".into()));
        }
        if labels.len() != batch {
            return Err(DfaError::dim("batch labels", batch, labels.len()));
        }
        let y = one_hot(labels, self.snapshot.n_classes())?;
        let mut grads = Gradients::zeros_like(&self.snapshot.extractor);
        let outcome = match self.config.mode {
            TrainMode::Vanilla => self.vanilla_grads(x, y.view(), &mut grads),
            TrainMode::Mixup => self.mixup_grads(x, y.view(), &mut grads, false),
            TrainMode::ManifoldMixup => self.mixup_grads(x, y.view(), &mut grads, true),
            TrainMode::Dfa => self.dfa_grads(x, y.view(), &mut grads),
        };
        let report = match outcome {
            Err(DfaError::Numeric(_)) | Err(DfaError::Degenerate(_)) => {
                return Err(DfaError::Diverged {
                    step: self.step,
                    l_a: f64::NAN,
                    l_c: f64::NAN,
                })
            }
            other => other?,
        };
        if !(report.l_a.is_finite() && report.l_c.is_finite()) || grads.iter_flat().any(|g| !g.is_finite()) {
            return Err(DfaError::Diverged {
                step: self.step,
                l_a: report.l_a,
                l_c: report.l_c,
            });
        }
        self.optimizer.apply(&mut self.snapshot.extractor, &grads, lr);
        self.step += 1;
        Ok(report)
    }

    fn vanilla_grads(&mut self, x: ArrayView2<f64>, y: ArrayView2<f64>, grads: &mut Gradients) -> Result<LossReport> {
        let net = &self.snapshot.extractor;
        let (v, trace) = net.forward_traced(x)?;
        let (l_c, gv) = soft_cross_entropy(&self.snapshot.head, v.view(), y, self.snapshot.score_scale, NormGuard::training())?;
        net.backward(&trace, gv, grads, false);
        Ok(LossReport::new(0.0, l_c))
    }

    fn mixup_grads(&mut self, x: ArrayView2<f64>, y: ArrayView2<f64>, grads: &mut Gradients, hidden: bool) -> Result<LossReport> {
        let lam = sample_lambda(self.config.alpha, &mut self.rng)?.value();
        let perm = pairing_permutation(x.nrows(), &mut self.rng);
        let net = &self.snapshot.extractor;
        // mixing points strictly before the embedding; 0 is the input
        let point = if hidden { self.rng.random_range(0..net.n_stages().max(1)) } else { 0 };
        let y_mix = convex_combination(y, permute_rows(y, &perm).view(), lam)?;

        let mut prefix = net.empty_trace();
        let h = net.forward_range(x.to_owned(), 0, point, Some(&mut prefix))?;
        let h_mix = convex_combination(h.view(), permute_rows(h.view(), &perm).view(), lam)?;
        let mut suffix = net.empty_trace();
        let v = net.forward_range(h_mix, point, net.n_stages(), Some(&mut suffix))?;
        let (l_c, gv) = soft_cross_entropy(&self.snapshot.head, v.view(), y_mix.view(), self.snapshot.score_scale, NormGuard::training())?;
        if point == 0 {
            net.backward(&suffix, gv, grads, false);
        } else {
            let g_mix = net.backward(&suffix, gv, grads, true).expect("input gradient requested");
            let g_h = split_mixed_gradient(g_mix.view(), &perm, lam);
            net.backward(&prefix, g_h, grads, false);
        }
        Ok(LossReport::new(0.0, l_c))
    }

    fn dfa_grads(&mut self, x: ArrayView2<f64>, y: ArrayView2<f64>, grads: &mut Gradients) -> Result<LossReport> {
        let lam = sample_lambda(self.config.alpha, &mut self.rng)?.value();
        let perm = pairing_permutation(x.nrows(), &mut self.rng);
        let agg = self.config.aggregation();
        let noise = agg.draw_noise((x.nrows(), self.snapshot.extractor.embed_dim()), &mut self.rng)?;
        let pair = MixedPair {
            lam,
            perm: &perm,
            noise: noise.as_ref().map(|n| n.view()),
        };
        dfa_objective(&self.snapshot, x, y, &pair, agg.reduction, Some(grads))
    }
}

/// Pairing, coefficient and residual noise for one aggregation step.
#[derive(Debug, Clone)]
pub struct MixedPair<'a> {
    pub lam: f64,
    pub perm: &'a [usize],
    pub noise: Option<ArrayView2<'a, f64>>,
}

/// The aggregation objective L_a + L_c on one batch with fixed randomness.
/// Accumulates extractor gradients of L_a + L_c into `grads` when given.
pub fn dfa_objective(
    model: &ModelSnapshot,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    pair: &MixedPair<'_>,
    reduction: Reduction,
    grads: Option<&mut Gradients>,
) -> Result<LossReport> {
    weighted_objective(model, x, y, pair, reduction, (1.0, 1.0), grads)
}

/// Which part of the objective a gradient is taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Aggregation,
    Classification,
    Total,
}

/// Losses and the extractor gradient of one term of the objective.
pub fn objective_gradient(
    model: &ModelSnapshot,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    pair: &MixedPair<'_>,
    reduction: Reduction,
    term: Term,
) -> Result<(LossReport, Gradients)> {
    let weights = match term {
        Term::Aggregation => (1.0, 0.0),
        Term::Classification => (0.0, 1.0),
        Term::Total => (1.0, 1.0),
    };
    let mut grads = Gradients::zeros_like(&model.extractor);
    let report = weighted_objective(model, x, y, pair, reduction, weights, Some(&mut grads))?;
    Ok((report, grads))
}

fn weighted_objective(
    model: &ModelSnapshot,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    pair: &MixedPair<'_>,
    reduction: Reduction,
    (w_a, w_c): (f64, f64),
    grads: Option<&mut Gradients>,
) -> Result<LossReport> {
    let (lam, perm) = (pair.lam, pair.perm);
    if perm.len() != x.nrows() || y.nrows() != x.nrows() {
        return Err(DfaError::dim("pairing permutation", x.nrows(), perm.len()));
    }
    let net = &model.extractor;
    let head = &model.head;
    let scale = model.score_scale;
    let guard = NormGuard::training();

    let x_hat = convex_combination(x, permute_rows(x, perm).view(), lam)?;
    let y_mix = convex_combination(y, permute_rows(y, perm).view(), lam)?;
    let (v, trace_v) = net.forward_traced(x)?;
    let (v_hat, trace_hat) = net.forward_traced(x_hat.view())?;
    let v_j = permute_rows(v.view(), perm);

    let residual = aggregation_residual(v.view(), v_j.view(), v_hat.view(), lam, pair.noise)?;
    let l_a = aggregation_loss(residual.view(), reduction)?;

    let (ce_hat, g_hat_ce) = soft_cross_entropy(head, v_hat.view(), y_mix.view(), scale, guard)?;
    let v_mix = &v * lam + &v_j * (1.0 - lam);
    let (ce_mix, g_mix) = soft_cross_entropy(head, v_mix.view(), y_mix.view(), scale, guard)?;

    if let Some(grads) = grads {
        let g_res = aggregation_loss_grad(residual.view(), reduction) * w_a;
        // both the residual and the mixed embedding are λ·v + (1−λ)·v[perm]
        let g_pair = &g_res + &(g_mix * w_c);
        let g_v = split_mixed_gradient(g_pair.view(), perm, lam);
        let g_hat = g_hat_ce * w_c - &g_res;
        net.backward(&trace_v, g_v, grads, false);
        net.backward(&trace_hat, g_hat, grads, false);
    }
    Ok(LossReport::new(l_a, ce_hat + ce_mix))
}

/// Gradient of g·(λ·h + (1−λ)·h[perm]) with respect to h.
fn split_mixed_gradient(g: ArrayView2<f64>, perm: &[usize], lam: f64) -> Array2<f64> {
    let mut out = &g * lam;
    let mu = 1.0 - lam;
    for (b, &p) in perm.iter().enumerate() {
        let row = g.row(b).mapv(|x| mu * x);
        let mut dst = out.row_mut(p);
        dst += &row;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub l_a: f64,
    pub l_c: f64,
    pub l_t: f64,
    /// Percent of training samples classified correctly after the epoch.
    pub clean_accuracy: f64,
}

/// Classification accuracy in percent, evaluated in chunks.
pub fn accuracy(snapshot: &ModelSnapshot, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(DfaError::Input("accuracy of an empty dataset".into()));
    }
    let mut correct = 0usize;
    for start in (0..data.len()).step_by(256) {
        let end = (start + 256).min(data.len());
        let x = data.images.slice(ndarray::s![start..end, ..]);
        let pred = argmax_rows(snapshot.head.scores_batch(snapshot.embed(x)?.view(), NormGuard::training())?.view());
        correct += pred.iter().zip(&data.labels[start..end]).filter(|(p, l)| p == l).count();
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// Fresh reference network and orthogonal head for `data`, seeded by the config.
pub fn initial_snapshot(data: &Dataset, config: &TrainConfig) -> Result<ModelSnapshot> {
    let arch = Architecture::reference(data.shape, config.embed_dim);
    initial_snapshot_with(arch, data, config)
}

pub fn initial_snapshot_with(arch: Architecture, data: &Dataset, config: &TrainConfig) -> Result<ModelSnapshot> {
    config.validate()?;
    let n_classes = config.n_classes.unwrap_or(data.n_classes);
    let mut rng = seeded(config.rng_seed);
    ModelSnapshot::initialize(arch, n_classes, config.score_scale, &mut rng)
}

/// Trains the reference network on `data`.
pub fn train(data: &Dataset, config: &TrainConfig) -> Result<(ModelSnapshot, Vec<EpochMetrics>)> {
    let init = initial_snapshot(data, config)?;
    train_from(init, data, config)
}

/// Runs `config.epochs` epochs of shuffled mini-batch updates starting from `init`.
pub fn train_from(init: ModelSnapshot, data: &Dataset, config: &TrainConfig) -> Result<(ModelSnapshot, Vec<EpochMetrics>)> {
    train_observed(init, data, config, |_, _| {})
}

/// Like [`train_from`], calling `observe` after every epoch.
pub fn train_observed(
    init: ModelSnapshot,
    data: &Dataset,
    config: &TrainConfig,
    mut observe: impl FnMut(&ModelSnapshot, &EpochMetrics),
) -> Result<(ModelSnapshot, Vec<EpochMetrics>)> {
    config.validate()?;
    if data.is_empty() {
        return Err(DfaError::Input("training set is empty".into()));
    }
    let n_classes = init.n_classes();
    if config.n_classes.is_some_and(|n| n != n_classes) || data.labels.iter().any(|&l| l >= n_classes) {
        return Err(DfaError::Config(format!(
            "dataset labels do not fit the model's {n_classes} classes"
        )));
    }
    if data.shape.len() != init.extractor.input_len() {
        return Err(DfaError::Config("dataset sample shape does not match the extractor input".into()));
    }
    let start_epoch = init.epoch;
    let mut trainer = Trainer::new(init, config.clone())?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in start_epoch..start_epoch + config.epochs {
        let lr = config.schedule.rate_at(epoch);
        order.shuffle(&mut trainer.rng);
        let (mut sum_a, mut sum_c, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, labels) = data.batch(chunk);
            let report = trainer.train_step(x.view(), &labels, lr)?;
            sum_a += report.l_a;
            sum_c += report.l_c;
            steps += 1;
        }
        trainer.snapshot.epoch = epoch + 1;
        let steps = steps.max(1) as f64;
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            lr,
            l_a: sum_a / steps,
            l_c: sum_c / steps,
            l_t: (sum_a + sum_c) / steps,
            clean_accuracy: accuracy(&trainer.snapshot, data)?,
        };
        observe(&trainer.snapshot, &metrics);
        history.push(metrics);
    }
    trainer.snapshot.rng_state = Some(RngState::capture(&trainer.rng));
    Ok((trainer.snapshot, history))
}

#[cfg(test)]
mod tests;
