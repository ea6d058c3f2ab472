//! Embedding diagnostics: class compactness and the Lipschitz residual.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{DfaError, Result};
use crate::mixing::{convex_combination, sample_lambda};
use crate::model::ModelSnapshot;
use crate::rng::DfaRng;

/// Spread of embeddings: for a group, the mean over dimensions of the
/// per-dimension population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactnessReport {
    pub per_class_std: Vec<f64>,
    /// The same statistic over all samples pooled.
    pub total_std: f64,
    pub class_counts: Vec<usize>,
}

impl CompactnessReport {
    pub fn mean_class_std(&self) -> f64 {
        self.per_class_std.iter().sum::<f64>() / self.per_class_std.len().max(1) as f64
    }
}

/// Mean over columns of the population standard deviation of each column.
pub fn spread(rows: ArrayView2<f64>) -> f64 {
    if rows.nrows() == 0 || rows.ncols() == 0 {
        return 0.0;
    }
    rows.std_axis(Axis(0), 0.0).mean().unwrap_or(0.0)
}

pub fn compactness_of_embeddings(v: ArrayView2<f64>, labels: &[usize], n_classes: usize) -> Result<CompactnessReport> {
    if v.nrows() != labels.len() {
        return Err(DfaError::dim("compactness labels", v.nrows(), labels.len()));
    }
    let mut per_class_std = Vec::with_capacity(n_classes);
    let mut class_counts = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.is_empty() {
            return Err(DfaError::EmptyClass { class });
        }
        per_class_std.push(spread(v.select(Axis(0), &idx).view()));
        class_counts.push(idx.len());
    }
    Ok(CompactnessReport {
        per_class_std,
        total_std: spread(v),
        class_counts,
    })
}

pub fn compactness(snapshot: &ModelSnapshot, data: &Dataset) -> Result<CompactnessReport> {
    let v = snapshot.embed(data.view())?;
    compactness_of_embeddings(v.view(), &data.labels, data.n_classes)
}

/// Per-pair ‖λF(x_i) + (1−λ)F(x_j) − F(λx_i + (1−λ)x_j)‖₂.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzProbe {
    pub per_pair_residuals: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub mean: f64,
    pub max: f64,
}

/// Residuals for row-aligned pairs `x_i[b]`, `x_j[b]` with coefficient `lambdas[b]`.
pub fn lipschitz_residual(
    snapshot: &ModelSnapshot,
    x_i: ArrayView2<f64>,
    x_j: ArrayView2<f64>,
    lambdas: &[f64],
) -> Result<LipschitzProbe> {
    if x_i.dim() != x_j.dim() {
        return Err(DfaError::dim("probe pairs", format!("{:?}", x_i.dim()), format!("{:?}", x_j.dim())));
    }
    if lambdas.len() != x_i.nrows() {
        return Err(DfaError::dim("probe coefficients", x_i.nrows(), lambdas.len()));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(DfaError::param("lambda", format!("{bad} is outside [0, 1]")));
    }
    let mut x_hat = Array2::zeros(x_i.dim());
    for (b, &lam) in lambdas.iter().enumerate() {
        let row = convex_combination(x_i.slice(ndarray::s![b..b + 1, ..]), x_j.slice(ndarray::s![b..b + 1, ..]), lam)?;
        x_hat.row_mut(b).assign(&row.row(0));
    }
    let v_i = snapshot.embed(x_i)?;
    let v_j = snapshot.embed(x_j)?;
    let v_hat = snapshot.embed(x_hat.view())?;
    let per_pair_residuals: Vec<f64> = lambdas
        .iter()
        .enumerate()
        .map(|(b, &lam)| {
            let r = &v_i.row(b) * lam + &v_j.row(b) * (1.0 - lam) - v_hat.row(b);
            r.dot(&r).sqrt()
        })
        .collect();
    let n = per_pair_residuals.len().max(1) as f64;
    Ok(LipschitzProbe {
        mean: per_pair_residuals.iter().sum::<f64>() / n,
        max: per_pair_residuals.iter().copied().fold(0.0, f64::max),
        lambdas: lambdas.to_vec(),
        per_pair_residuals,
    })
}

/// `count` random index pairs (distinct within a pair) with λ ~ Beta(alpha, alpha).
pub fn sample_pairs(n: usize, count: usize, alpha: f64, rng: &mut DfaRng) -> Result<(Vec<(usize, usize)>, Vec<f64>)> {
    if n < 2 {
        return Err(DfaError::Input("pair sampling needs at least two samples".into()));
    }
    let mut pairs = Vec::with_capacity(count);
    let mut lambdas = Vec::with_capacity(count);
    for _ in 0..count {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        pairs.push((i, j));
        lambdas.push(sample_lambda(alpha, rng)?.value());
    }
    Ok((pairs, lambdas))
}

/// Probe over `count` random pairs of `data`.
pub fn probe_dataset(snapshot: &ModelSnapshot, data: &Dataset, count: usize, rng: &mut DfaRng) -> Result<LipschitzProbe> {
    let (pairs, lambdas) = sample_pairs(data.len(), count, 1.0, rng)?;
    let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let x_i = data.images.select(Axis(0), &a);
    let x_j = data.images.select(Axis(0), &b);
    lipschitz_residual(snapshot, x_i.view(), x_j.view(), &lambdas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Architecture, ImageShape, Pooling};
    use crate::rng::seeded;
    use ndarray::array;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Uniform};

    fn batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = seeded(seed);
        let u = Uniform::new(0.0, 1.0).unwrap();
        Array2::from_shape_fn((rows, cols), |_| u.sample(&mut rng))
    }

    fn conv(activation: Activation, pooling: Pooling, seed: u64) -> ModelSnapshot {
        let arch = Architecture::Conv {
            input: ImageShape::new(1, 8, 8),
            channels: vec![4, 4],
            kernel: 3,
            activation,
            pooling,
            embed_dim: 6,
        };
        ModelSnapshot::initialize(arch, 3, 1.0, &mut seeded(seed)).unwrap()
    }

    #[test]
    fn two_point_class_example() {
        let v = array![[0.0, 0.0], [2.0, 0.0]];
        let r = compactness_of_embeddings(v.view(), &[0, 0], 1).unwrap();
        // per-dimension population stds are (1, 0)
        let oracle = {
            let mean0 = (0.0 + 2.0) / 2.0;
            let sd0 = (((0.0f64 - mean0).powi(2) + (2.0f64 - mean0).powi(2)) / 2.0).sqrt();
            (sd0 + 0.0) / 2.0
        };
        assert_eq!(r.per_class_std, vec![oracle]);
        assert_eq!(oracle, 0.5);
    }

    #[test]
    fn identical_embeddings_have_zero_spread() {
        let v = array![[1.5, -2.0], [1.5, -2.0], [0.0, 3.0], [1.0, 3.0]];
        let r = compactness_of_embeddings(v.view(), &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(r.per_class_std[0], 0.0);
        assert!(r.per_class_std.iter().all(|&s| s >= 0.0));
        assert_eq!(r.class_counts, vec![2, 2]);
    }

    #[test]
    fn pooling_identical_classes_keeps_the_spread() {
        let c = array![[0.0, 1.0], [2.0, 5.0], [1.0, 0.0]];
        let v = ndarray::concatenate(Axis(0), &[c.view(), c.view()]).unwrap();
        let r = compactness_of_embeddings(v.view(), &[0, 0, 0, 1, 1, 1], 2).unwrap();
        assert!((r.total_std - r.per_class_std[0]).abs() < 1e-15);
        assert_eq!(r.per_class_std[0], r.per_class_std[1]);
    }

    #[test]
    fn empty_class_is_an_error() {
        let v = array![[0.0], [1.0]];
        assert!(matches!(compactness_of_embeddings(v.view(), &[0, 0], 2), Err(DfaError::EmptyClass { class: 1 })));
    }

    #[test]
    fn linear_network_has_no_residual() {
        let model = conv(Activation::Identity, Pooling::Average, 1);
        let x_i = batch(20, 64, 2);
        let x_j = batch(20, 64, 3);
        let lambdas: Vec<f64> = (0..20).map(|k| k as f64 / 19.0).collect();
        let p = lipschitz_residual(&model, x_i.view(), x_j.view(), &lambdas).unwrap();
        assert!(p.max < 1e-9, "{}", p.max);
    }

    #[test]
    fn nonlinear_network_has_a_residual() {
        let model = conv(Activation::Relu, Pooling::Max, 4);
        let data = Dataset::new(batch(30, 64, 5), vec![0; 30], ImageShape::new(1, 8, 8), 1).unwrap();
        let p = probe_dataset(&model, &data, 50, &mut seeded(6)).unwrap();
        assert!(p.mean > 0.0);
        assert!(p.per_pair_residuals.iter().all(|&r| r >= 0.0));
        assert_eq!(p.lambdas.len(), 50);
    }

    #[test]
    fn pairs_are_distinct_and_seeded() {
        let (pairs, lambdas) = sample_pairs(5, 200, 1.0, &mut seeded(8)).unwrap();
        assert!(pairs.iter().all(|(i, j)| i != j && *i < 5 && *j < 5));
        assert!(lambdas.iter().all(|l| (0.0..=1.0).contains(l)));
        assert_eq!(sample_pairs(5, 200, 1.0, &mut seeded(8)).unwrap().0, pairs);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn endpoints_have_zero_residual(seed in 0u64..500, one: bool) {
            let model = conv(Activation::Relu, Pooling::Max, seed);
            let x_i = batch(4, 64, seed + 1);
            let x_j = batch(4, 64, seed + 2);
            let lam = if one { 1.0 } else { 0.0 };
            let p = lipschitz_residual(&model, x_i.view(), x_j.view(), &[lam; 4]).unwrap();
            prop_assert!(p.per_pair_residuals.iter().all(|&r| r == 0.0), "{:?}", p.per_pair_residuals);
        }
    }
}
