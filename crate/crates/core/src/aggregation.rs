//! The feature aggregation regularizer.
//!
//! Pair embeddings are pulled toward the embedding of their convex mixture:
//! residual = λ·v_i + (1−λ)·v_j − v̂ + noise. The residual is reduced either by
//! a mean of squares (the default) or by a batch mean of √‖r‖₂.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DfaError, Result};
use crate::rng::DfaRng;

/// Noise level that worked best at full scale on the ten-class benchmark.
pub const DEFAULT_SIGMA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    #[default]
    MeanSquared,
    RootOfNorm,
}

impl std::str::FromStr for Reduction {
    type Err = DfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-squared" | "mse" => Ok(Reduction::MeanSquared),
            "root-of-norm" => Ok(Reduction::RootOfNorm),
            other => Err(DfaError::Config(format!("unknown reduction `{other}`"))),
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Reduction::MeanSquared => "mean-squared",
            Reduction::RootOfNorm => "root-of-norm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationLossConfig {
    pub sigma: f64,
    pub reduction: Reduction,
    pub rng_seed: u64,
}

impl Default for AggregationLossConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            reduction: Reduction::MeanSquared,
            rng_seed: 0,
        }
    }
}

impl AggregationLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(DfaError::param("sigma", format!("must be finite and non-negative, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Isotropic N(0, σ²) noise of the given shape; `None` when σ = 0.
    pub fn draw_noise(&self, shape: (usize, usize), rng: &mut DfaRng) -> Result<Option<Array2<f64>>> {
        self.validate()?;
        if self.sigma == 0.0 {
            return Ok(None);
        }
        let normal = Normal::new(0.0, self.sigma).map_err(|e| DfaError::param("sigma", e.to_string()))?;
        let mut noise = Array2::zeros(shape);
        noise.iter_mut().for_each(|x| *x = normal.sample(rng));
        Ok(Some(noise))
    }
}

/// Loss components of one step. `l_t` is always `l_a + l_c`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_a: f64,
    pub l_c: f64,
    pub l_t: f64,
}

impl LossReport {
    pub fn new(l_a: f64, l_c: f64) -> Self {
        Self { l_a, l_c, l_t: l_a + l_c }
    }
}

pub fn aggregation_residual(
    v_i: ArrayView2<f64>,
    v_j: ArrayView2<f64>,
    v_hat: ArrayView2<f64>,
    lam: f64,
    noise: Option<ArrayView2<f64>>,
) -> Result<Array2<f64>> {
    if v_i.dim() != v_j.dim() || v_i.dim() != v_hat.dim() {
        return Err(DfaError::dim(
            "aggregation residual",
            format!("{:?}", v_i.dim()),
            format!("{:?} / {:?}", v_j.dim(), v_hat.dim()),
        ));
    }
    let mu = 1.0 - lam;
    let mut r = Array2::zeros(v_i.dim());
    Zip::from(&mut r)
        .and(&v_i)
        .and(&v_j)
        .and(&v_hat)
        .for_each(|r, &a, &b, &h| *r = lam * a + mu * b - h);
    if let Some(noise) = noise {
        if noise.dim() != r.dim() {
            return Err(DfaError::dim("aggregation noise", format!("{:?}", r.dim()), format!("{:?}", noise.dim())));
        }
        r += &noise;
    }
    Ok(r)
}

pub fn aggregation_loss(residual: ArrayView2<f64>, reduction: Reduction) -> Result<f64> {
    if residual.iter().any(|x| !x.is_finite()) {
        return Err(DfaError::Numeric("aggregation residual".into()));
    }
    if residual.is_empty() {
        return Ok(0.0);
    }
    Ok(match reduction {
        Reduction::MeanSquared => residual.iter().map(|x| x * x).sum::<f64>() / residual.len() as f64,
        Reduction::RootOfNorm => {
            let total: f64 = residual
                .axis_iter(Axis(0))
                .map(|row| row.dot(&row).sqrt().sqrt())
                .sum();
            total / residual.nrows() as f64
        }
    })
}

/// d loss / d residual. At a zero row the root-of-norm reduction is not
/// differentiable; its gradient is taken as zero there.
pub fn aggregation_loss_grad(residual: ArrayView2<f64>, reduction: Reduction) -> Array2<f64> {
    match reduction {
        Reduction::MeanSquared => {
            let scale = 2.0 / residual.len().max(1) as f64;
            residual.mapv(|x| scale * x)
        }
        Reduction::RootOfNorm => {
            let batch = residual.nrows().max(1) as f64;
            let mut grad = Array2::zeros(residual.dim());
            for (row, mut out) in residual.axis_iter(Axis(0)).zip(grad.axis_iter_mut(Axis(0))) {
                let norm = row.dot(&row).sqrt();
                if norm > 0.0 {
                    // d √‖r‖ / dr = r / (2 ‖r‖^{3/2})
                    let coeff = 1.0 / (2.0 * norm.powf(1.5) * batch);
                    out.assign(&row.mapv(|x| coeff * x));
                }
            }
            grad
        }
    }
}
