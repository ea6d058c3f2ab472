//! Convex combination of sample pairs and their labels.
//!
//! One coefficient is drawn per batch from a symmetric Beta distribution and
//! partners are chosen by permuting the batch against itself.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};

use crate::error::{DfaError, Result};
use crate::rng::DfaRng;

/// A mixing coefficient together with the Beta shape it was drawn from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixCoefficient {
    lambda: f64,
    alpha: f64,
    /// Generator word position before the draw; identifies the draw within a seeded stream.
    draw_position: u128,
}

impl MixCoefficient {
    /// A coefficient fixed by hand rather than sampled.
    pub fn fixed(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(DfaError::param("lambda", format!("{lambda} is outside [0, 1]")));
        }
        Ok(Self {
            lambda,
            alpha: f64::NAN,
            draw_position: 0,
        })
    }

    pub fn value(&self) -> f64 {
        self.lambda
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn draw_position(&self) -> u128 {
        self.draw_position
    }
}

/// Draws λ ~ Beta(alpha, alpha).
pub fn sample_lambda(alpha: f64, rng: &mut DfaRng) -> Result<MixCoefficient> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(DfaError::param("alpha", format!("must be positive and finite, got {alpha}")));
    }
    let draw_position = rng.get_word_pos();
    let beta = Beta::new(alpha, alpha).map_err(|e| DfaError::param("alpha", e.to_string()))?;
    let lambda = beta.sample(rng).clamp(0.0, 1.0);
    Ok(MixCoefficient {
        lambda,
        alpha,
        draw_position,
    })
}

/// Two source batches, their mixture, and the mixed soft labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedTriple {
    pub x_i: Array2<f64>,
    pub x_j: Array2<f64>,
    pub x_hat: Array2<f64>,
    pub lambda: f64,
    pub y_mixed: Array2<f64>,
}

/// λ·a + (1−λ)·b elementwise, clamped into the interval spanned by `a` and `b`
/// so that rounding never leaves the segment.
pub fn convex_combination(a: ArrayView2<f64>, b: ArrayView2<f64>, lambda: f64) -> Result<Array2<f64>> {
    if a.dim() != b.dim() {
        return Err(DfaError::dim("convex combination", format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    let mu = 1.0 - lambda;
    let mut out = Array2::zeros(a.dim());
    Zip::from(&mut out).and(&a).and(&b).for_each(|o, &p, &q| {
        let v = lambda * p + mu * q;
        *o = v.clamp(p.min(q), p.max(q));
    });
    Ok(out)
}

/// Mixes two sample batches and their label batches with one coefficient.
pub fn mix(
    x_i: ArrayView2<f64>,
    x_j: ArrayView2<f64>,
    y_i: ArrayView2<f64>,
    y_j: ArrayView2<f64>,
    lam: &MixCoefficient,
) -> Result<MixedTriple> {
    if x_i.dim() != x_j.dim() {
        return Err(DfaError::dim("mix samples", format!("{:?}", x_i.dim()), format!("{:?}", x_j.dim())));
    }
    if y_i.dim() != y_j.dim() || y_i.nrows() != x_i.nrows() {
        return Err(DfaError::dim(
            "mix labels",
            format!("({}, _) matching pair", x_i.nrows()),
            format!("{:?} and {:?}", y_i.dim(), y_j.dim()),
        ));
    }
    let lambda = lam.value();
    Ok(MixedTriple {
        x_i: x_i.to_owned(),
        x_j: x_j.to_owned(),
        x_hat: convex_combination(x_i, x_j, lambda)?,
        lambda,
        y_mixed: convex_combination(y_i, y_j, lambda)?,
    })
}

/// A uniformly random permutation of `0..n`; row `b` of a batch is paired with row `perm[b]`.
pub fn pairing_permutation(n: usize, rng: &mut DfaRng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

/// Gathers rows of `x` in the order given by `perm`.
pub fn permute_rows(x: ArrayView2<f64>, perm: &[usize]) -> Array2<f64> {
    x.select(Axis(0), perm)
}

/// One-hot label rows for integer class labels.
pub fn one_hot(labels: &[usize], n_classes: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((labels.len(), n_classes));
    for (row, &label) in labels.iter().enumerate() {
        if label >= n_classes {
            return Err(DfaError::Input(format!("label {label} out of range for {n_classes} classes")));
        }
        out[[row, label]] = 1.0;
    }
    Ok(out)
}
