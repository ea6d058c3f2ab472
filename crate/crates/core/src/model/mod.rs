//! Feature extractors and model snapshots.
//!
//! A [`FeatureExtractor`] is a sequence of stages. The boundaries between
//! stages are the mixing points used by hidden-layer mixing: point 0 is the
//! input, point `n_stages` is the final embedding.

pub mod checkpoint;
mod layers;

use ndarray::{Array2, ArrayView2, ArrayViewMut1};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use layers::{Activation, ImageShape, Pooling};
use layers::{Cache, Layer};

use crate::error::{DfaError, Result};
use crate::head::{softmax_rows, NormGuard, OrthogonalHead};
use crate::mixing::convex_combination;
use crate::rng::{DfaRng, RngState};

/// Default embedding width of the reference network.
pub const DEFAULT_EMBED_DIM: usize = 64;

/// A named parameter array stored flat in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

impl Param {
    fn zeros(name: String, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name,
            shape,
            value: vec![0.0; len],
        }
    }

    /// View as a matrix whose rows are indexed by the first axis.
    pub(crate) fn matrix(&self) -> ArrayView2<'_, f64> {
        let rows = self.shape[0];
        ArrayView2::from_shape((rows, self.value.len() / rows.max(1)), &self.value).expect("parameter shape")
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Network layout. Serialized into checkpoint manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    /// F(x) = x.
    Identity { input: ImageShape },
    /// F(x) = A x + b.
    Linear { input: ImageShape, embed_dim: usize },
    /// Dense hidden layers, then a dense projection to the embedding.
    Mlp {
        input: ImageShape,
        hidden: Vec<usize>,
        activation: Activation,
        embed_dim: usize,
    },
    /// Conv(same padding) → activation → 2×2 pooling blocks, then a dense projection.
    Conv {
        input: ImageShape,
        channels: Vec<usize>,
        kernel: usize,
        activation: Activation,
        pooling: Pooling,
        embed_dim: usize,
    },
}

impl Architecture {
    /// The reference network: two conv blocks of 8 and 16 channels, 3×3 kernels, ReLU, max pooling.
    pub fn reference(input: ImageShape, embed_dim: usize) -> Self {
        Architecture::Conv {
            input,
            channels: vec![8, 16],
            kernel: 3,
            activation: Activation::Relu,
            pooling: Pooling::Max,
            embed_dim,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Identity { .. } => "identity",
            Architecture::Linear { .. } => "linear",
            Architecture::Mlp { .. } => "mlp",
            Architecture::Conv { .. } => "conv",
        }
    }

    pub fn input(&self) -> ImageShape {
        match self {
            Architecture::Identity { input }
            | Architecture::Linear { input, .. }
            | Architecture::Mlp { input, .. }
            | Architecture::Conv { input, .. } => *input,
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            Architecture::Identity { input } => input.len(),
            Architecture::Linear { embed_dim, .. }
            | Architecture::Mlp { embed_dim, .. }
            | Architecture::Conv { embed_dim, .. } => *embed_dim,
        }
    }
}

/// Per-parameter gradient buffers, aligned with [`FeatureExtractor::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(extractor: &FeatureExtractor) -> Self {
        Gradients(extractor.params.iter().map(|p| vec![0.0; p.len()]).collect())
    }

    pub fn iter_flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().flatten().copied()
    }
}

/// Saved activations for a range of stages.
#[derive(Debug, Clone)]
pub struct Trace {
    from: usize,
    caches: Vec<Vec<Cache>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    arch: Architecture,
    params: Vec<Param>,
    stages: Vec<Vec<Layer>>,
}

impl FeatureExtractor {
    /// Builds the layer graph with zeroed parameters.
    pub fn build(arch: Architecture) -> Result<Self> {
        let mut params = Vec::new();
        let mut stages = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| {
            params.push(Param::zeros(name, shape));
            params.len() - 1
        };
        let input = arch.input();
        if input.is_empty() {
            return Err(DfaError::param("input", "sample shape has zero elements"));
        }
        let dense = |stage: usize, in_dim, out_dim, push: &mut dyn FnMut(String, Vec<usize>) -> usize| Layer::Dense {
            weight: push(format!("stage{stage}.dense.weight"), vec![out_dim, in_dim]),
            bias: push(format!("stage{stage}.dense.bias"), vec![out_dim]),
            in_dim,
            out_dim,
        };
        match &arch {
            Architecture::Identity { .. } => {}
            Architecture::Linear { embed_dim, .. } => {
                stages.push(vec![dense(0, input.len(), *embed_dim, &mut push)]);
            }
            Architecture::Mlp {
                hidden,
                activation,
                embed_dim,
                ..
            } => {
                let mut width = input.len();
                for (s, &h) in hidden.iter().enumerate() {
                    stages.push(vec![dense(s, width, h, &mut push), Layer::Act(*activation)]);
                    width = h;
                }
                stages.push(vec![dense(hidden.len(), width, *embed_dim, &mut push)]);
            }
            Architecture::Conv {
                channels,
                kernel,
                activation,
                pooling,
                embed_dim,
                ..
            } => {
                if kernel % 2 == 0 {
                    return Err(DfaError::param("kernel", "must be odd for same padding"));
                }
                let mut shape = input;
                for (s, &c) in channels.iter().enumerate() {
                    if shape.height < 2 || shape.width < 2 {
                        return Err(DfaError::param("channels", "too many pooling blocks for the input size"));
                    }
                    let conv = Layer::Conv2d {
                        weight: push(format!("stage{s}.conv.weight"), vec![c, shape.channels, *kernel, *kernel]),
                        bias: push(format!("stage{s}.conv.bias"), vec![c]),
                        input: shape,
                        out_channels: c,
                        kernel: *kernel,
                    };
                    let conv_out = ImageShape::new(c, shape.height, shape.width);
                    stages.push(vec![
                        conv,
                        Layer::Act(*activation),
                        Layer::Pool {
                            kind: *pooling,
                            input: conv_out,
                        },
                    ]);
                    shape = ImageShape::new(c, shape.height / 2, shape.width / 2);
                }
                stages.push(vec![dense(channels.len(), shape.len(), *embed_dim, &mut push)]);
            }
        }
        if arch.embed_dim() == 0 {
            return Err(DfaError::param("embed_dim", "must be positive"));
        }
        Ok(Self { arch, params, stages })
    }

    /// Builds the network and draws He-scaled Gaussian weights; biases start at zero.
    pub fn init(arch: Architecture, rng: &mut DfaRng) -> Result<Self> {
        let mut net = Self::build(arch)?;
        let gain = match &net.arch {
            Architecture::Mlp {
                activation: Activation::Relu,
                ..
            }
            | Architecture::Conv {
                activation: Activation::Relu,
                ..
            } => 2.0,
            _ => 1.0,
        };
        for p in net.params.iter_mut().filter(|p| p.shape.len() > 1) {
            let fan_in: usize = p.shape[1..].iter().product();
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
            p.value.iter_mut().for_each(|w| *w = normal.sample(rng));
        }
        Ok(net)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_len(&self) -> usize {
        self.arch.input().len()
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    /// Number of stages; mixing points are `0..=n_stages()`.
    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    /// Visits every parameter entry in a fixed order.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(ArrayViewMut1<f64>)) {
        for p in &mut self.params {
            f(ArrayViewMut1::from(&mut p.value[..]));
        }
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_len() {
            return Err(DfaError::dim("extractor input", self.input_len(), x.ncols()));
        }
        Ok(())
    }

    /// Width of the activations at a mixing point.
    pub fn width_at(&self, point: usize) -> usize {
        let mut width = self.input_len();
        for stage in &self.stages[..point.min(self.stages.len())] {
            for layer in stage {
                width = layer.out_len(width);
            }
        }
        width
    }

    /// Embeds a batch; one row per sample.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        self.run(x.to_owned(), 0, self.stages.len(), None)
    }

    /// Runs stages `from..to` on activations at mixing point `from`, optionally recording a trace.
    pub fn forward_range(&self, h: Array2<f64>, from: usize, to: usize, trace: Option<&mut Trace>) -> Result<Array2<f64>> {
        if from > to || to > self.stages.len() {
            return Err(DfaError::param("layer_index", format!("range {from}..{to} outside 0..={}", self.stages.len())));
        }
        if h.ncols() != self.width_at(from) {
            return Err(DfaError::dim("stage input", self.width_at(from), h.ncols()));
        }
        self.run(h, from, to, trace)
    }

    fn run(&self, mut h: Array2<f64>, from: usize, to: usize, mut trace: Option<&mut Trace>) -> Result<Array2<f64>> {
        if let Some(t) = trace.as_deref_mut() {
            t.from = from;
            t.caches.clear();
        }
        let keep = trace.is_some();
        for stage in &self.stages[from..to] {
            let mut caches = Vec::with_capacity(stage.len());
            for layer in stage {
                let (out, cache) = layer.forward(&self.params, h, keep);
                h = out;
                caches.push(cache);
            }
            if let Some(t) = trace.as_deref_mut() {
                t.caches.push(caches);
            }
        }
        Ok(h)
    }

    /// Forward pass that records everything needed by [`Self::backward`].
    pub fn forward_traced(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Trace)> {
        self.check_input(x)?;
        let mut trace = Trace {
            from: 0,
            caches: Vec::new(),
        };
        let out = self.run(x.to_owned(), 0, self.stages.len(), Some(&mut trace))?;
        Ok((out, trace))
    }

    pub fn empty_trace(&self) -> Trace {
        Trace {
            from: 0,
            caches: Vec::new(),
        }
    }

    /// Back-propagates `grad_out` through the stages recorded in `trace`,
    /// adding parameter gradients into `grads`. Returns the gradient at the
    /// trace's starting point when `need_input` is set.
    pub fn backward(&self, trace: &Trace, grad_out: Array2<f64>, grads: &mut Gradients, need_input: bool) -> Option<Array2<f64>> {
        let mut g = grad_out;
        for (offset, caches) in trace.caches.iter().enumerate().rev() {
            let stage = &self.stages[trace.from + offset];
            for (li, (layer, cache)) in stage.iter().zip(caches).enumerate().rev() {
                let first = offset == 0 && li == 0;
                let want = !first || need_input;
                match layer.backward(&self.params, cache, g, &mut grads.0, want) {
                    Some(next) => g = next,
                    None => return None,
                }
            }
        }
        Some(g)
    }

    /// Runs both inputs to `layer_index`, mixes the activations, and finishes the forward pass.
    pub fn manifold_mix_forward(&self, x_i: ArrayView2<f64>, x_j: ArrayView2<f64>, lam: f64, layer_index: usize) -> Result<Array2<f64>> {
        if layer_index > self.stages.len() {
            return Err(DfaError::param(
                "layer_index",
                format!("{layer_index} exceeds the last mixing point {}", self.stages.len()),
            ));
        }
        self.check_input(x_i)?;
        self.check_input(x_j)?;
        let h_i = self.run(x_i.to_owned(), 0, layer_index, None)?;
        let h_j = self.run(x_j.to_owned(), 0, layer_index, None)?;
        let mixed = convex_combination(h_i.view(), h_j.view(), lam)?;
        self.run(mixed, layer_index, self.stages.len(), None)
    }
}

/// Everything needed to evaluate or resume a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub extractor: FeatureExtractor,
    pub head: OrthogonalHead,
    /// Multiplier applied to cosine scores before softmax.
    pub score_scale: f64,
    pub config_hash: String,
    pub rng_state: Option<RngState>,
    pub epoch: usize,
    pub label: String,
}

impl ModelSnapshot {
    /// Fresh extractor and orthogonal head, both drawn from `rng`.
    pub fn initialize(arch: Architecture, n_classes: usize, score_scale: f64, rng: &mut DfaRng) -> Result<Self> {
        let extractor = FeatureExtractor::init(arch, rng)?;
        let head = OrthogonalHead::init_orthogonal(n_classes, extractor.embed_dim(), rng)?;
        Self::new(extractor, head, score_scale)
    }

    pub fn new(extractor: FeatureExtractor, head: OrthogonalHead, score_scale: f64) -> Result<Self> {
        if extractor.embed_dim() != head.embed_dim() {
            return Err(DfaError::dim("head width", extractor.embed_dim(), head.embed_dim()));
        }
        if !(score_scale > 0.0 && score_scale.is_finite()) {
            return Err(DfaError::param("score_scale", "must be positive and finite"));
        }
        Ok(Self {
            extractor,
            head,
            score_scale,
            config_hash: String::new(),
            rng_state: None,
            epoch: 0,
            label: String::new(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.head.n_classes()
    }

    pub fn embed(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.extractor.forward(x)
    }

    /// Cosine scores on the evaluation path (zero-norm embeddings are errors).
    pub fn scores(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let v = self.embed(x)?;
        self.head.scores_batch(v.view(), NormGuard::Strict)
    }

    pub fn probabilities(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(softmax_rows(self.scores(x)?.view(), self.score_scale))
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(self.scores(x)?.view()))
    }
}

pub fn argmax_rows(scores: ArrayView2<f64>) -> Vec<usize> {
    scores
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &s) in row.iter().enumerate() {
                if s > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
