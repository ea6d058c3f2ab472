use super::*;
use crate::data::{synthetic, SyntheticConfig};
use crate::model::{Activation, ImageShape, Pooling};
use ndarray::array;
use rand_distr::{Distribution, Uniform};

fn smooth_conv() -> Architecture {
    Architecture::Conv {
        input: ImageShape::new(1, 6, 6),
        channels: vec![3],
        kernel: 3,
        activation: Activation::Identity,
        pooling: Pooling::Average,
        embed_dim: 6,
    }
}

fn random_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = seeded(seed);
    let u = Uniform::new(0.0, 1.0).unwrap();
    Array2::from_shape_fn((rows, cols), |_| u.sample(&mut rng))
}

fn toy_model(seed: u64) -> ModelSnapshot {
    ModelSnapshot::initialize(smooth_conv(), 4, 2.0, &mut seeded(seed)).unwrap()
}

#[test]
fn schedule_steps_and_holds_last_rate() {
    let s = LrSchedule::full_scale();
    assert_eq!(s.rate_at(0), 0.1);
    assert_eq!(s.rate_at(59), 0.1);
    assert_eq!(s.rate_at(60), 0.02);
    assert_eq!(s.rate_at(120), 0.004);
    assert_eq!(s.rate_at(180), 0.0008);
    assert_eq!(s.rate_at(500), 0.0008);
    assert_eq!(LrSchedule::constant(0.3).rate_at(10_000), 0.3);
}

#[test]
fn modes_parse_and_print() {
    for mode in [TrainMode::Vanilla, TrainMode::Mixup, TrainMode::ManifoldMixup, TrainMode::Dfa] {
        assert_eq!(mode.to_string().parse::<TrainMode>().unwrap(), mode);
    }
    assert!("cutmix".parse::<TrainMode>().is_err());
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let mut model = toy_model(11);
    let x = random_batch(5, 36, 12);
    let y = one_hot(&[0, 1, 2, 3, 1], 4).unwrap();
    let perm = [3, 0, 4, 1, 2];
    let noise = random_batch(5, 6, 13) * 0.1;
    for reduction in [Reduction::MeanSquared, Reduction::RootOfNorm] {
        let pair = MixedPair {
            lam: 0.37,
            perm: &perm,
            noise: Some(noise.view()),
        };
        let mut grads = Gradients::zeros_like(&model.extractor);
        dfa_objective(&model, x.view(), y.view(), &pair, reduction, Some(&mut grads)).unwrap();
        let h = 1e-6;
        for p in 0..model.extractor.params().len() {
            for k in 0..model.extractor.params()[p].len() {
                let orig = model.extractor.params()[p].value[k];
                model.extractor.params_mut()[p].value[k] = orig + h;
                let up = dfa_objective(&model, x.view(), y.view(), &pair, reduction, None).unwrap().l_t;
                model.extractor.params_mut()[p].value[k] = orig - h;
                let down = dfa_objective(&model, x.view(), y.view(), &pair, reduction, None).unwrap().l_t;
                model.extractor.params_mut()[p].value[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.0[p][k];
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
                assert!(err < 1e-4, "{reduction} param {p}[{k}]: numeric {numeric} analytic {analytic}");
            }
        }
    }
}

#[test]
fn classification_loss_matches_objective_terms() {
    let model = toy_model(3);
    let x = random_batch(4, 36, 4);
    let y = one_hot(&[0, 1, 2, 3], 4).unwrap();
    let perm = [1, 2, 3, 0];
    let lam = 0.6;
    let pair = MixedPair { lam, perm: &perm, noise: None };
    let report = dfa_objective(&model, x.view(), y.view(), &pair, Reduction::MeanSquared, None).unwrap();
    let v = model.embed(x.view()).unwrap();
    let v_j = permute_rows(v.view(), &perm);
    let x_hat = convex_combination(x.view(), permute_rows(x.view(), &perm).view(), lam).unwrap();
    let v_hat = model.embed(x_hat.view()).unwrap();
    let y_j = permute_rows(y.view(), &perm);
    let l_c = classification_loss(&model.head, v.view(), v_j.view(), v_hat.view(), y.view(), y_j.view(), lam, model.score_scale)
        .unwrap();
    assert!((l_c - report.l_c).abs() < 1e-12);
    assert!((report.l_t - report.l_a - report.l_c).abs() < 1e-15);
}

#[test]
fn classification_loss_of_perfect_orthogonal_embeddings() {
    // embeddings equal to the class rows: each CE term is ln(1 + (C−1)·e^{−s}) with s the scale
    let mut rng = seeded(0);
    let head = OrthogonalHead::init_orthogonal(3, 3, &mut rng).unwrap();
    let v = head.weights().to_owned();
    let y = one_hot(&[0, 1, 2], 3).unwrap();
    let l = classification_loss(&head, v.view(), v.view(), v.view(), y.view(), y.view(), 1.0, 4.0).unwrap();
    let expected = 2.0 * (1.0 + 2.0 * (-4.0f64).exp()).ln();
    assert!((l - expected).abs() < 1e-12, "{l} vs {expected}");
    let bad = array![[0.5, 0.2, 0.1], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    assert!(classification_loss(&head, v.view(), v.view(), v.view(), bad.view(), y.view(), 0.5, 1.0).is_err());
}

fn tiny_task() -> Dataset {
    synthetic(&SyntheticConfig {
        n_classes: 4,
        per_class: 8,
        side: 8,
        ..Default::default()
    })
    .unwrap()
}

fn tiny_config(mode: TrainMode) -> TrainConfig {
    TrainConfig {
        mode,
        epochs: 3,
        batch_size: 8,
        embed_dim: 8,
        rng_seed: 5,
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_keeps_parameters_and_head_fixed() {
    let data = tiny_task();
    for mode in [TrainMode::Vanilla, TrainMode::Mixup, TrainMode::ManifoldMixup, TrainMode::Dfa] {
        let config = TrainConfig {
            schedule: LrSchedule::constant(0.0),
            ..tiny_config(mode)
        };
        let init = initial_snapshot(&data, &config).unwrap();
        let (trained, _) = train_from(init.clone(), &data, &config).unwrap();
        assert_eq!(trained.extractor.params(), init.extractor.params(), "{mode}");
        assert_eq!(trained.head, init.head);
    }
}

#[test]
fn head_is_bit_identical_after_training() {
    let data = tiny_task();
    let config = tiny_config(TrainMode::Dfa);
    let init = initial_snapshot(&data, &config).unwrap();
    let (trained, _) = train_from(init.clone(), &data, &config).unwrap();
    assert_ne!(trained.extractor.params(), init.extractor.params());
    assert_eq!(trained.head.weights(), init.head.weights());
    assert_eq!(trained.epoch, 3);
    assert!(trained.rng_state.is_some());
}

#[test]
fn baselines_report_zero_aggregation_loss() {
    let data = tiny_task();
    for mode in [TrainMode::Vanilla, TrainMode::Mixup, TrainMode::ManifoldMixup] {
        let (_, history) = train(&data, &tiny_config(mode)).unwrap();
        assert!(history.iter().all(|m| m.l_a == 0.0 && m.l_t == m.l_c), "{mode}");
    }
    let (_, history) = train(&data, &tiny_config(TrainMode::Dfa)).unwrap();
    assert!(history.iter().all(|m| m.l_a > 0.0));
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = tiny_task();
    let config = tiny_config(TrainMode::Dfa);
    let (a, ha) = train(&data, &config).unwrap();
    let (b, hb) = train(&data, &config).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    let (c, _) = train(&data, &TrainConfig { rng_seed: 6, ..config }).unwrap();
    assert_ne!(a.extractor.params(), c.extractor.params());
}

#[test]
fn resuming_continues_the_same_stream() {
    let data = tiny_task();
    let config = tiny_config(TrainMode::Dfa);
    let (whole, _) = train(&data, &config).unwrap();
    let (first, _) = train(&data, &TrainConfig { epochs: 1, ..config.clone() }).unwrap();
    // momentum buffers restart on resume, so only the epoch count and stream are compared
    let (resumed, history) = train_from(first, &data, &TrainConfig { epochs: 2, ..config }).unwrap();
    assert_eq!(resumed.epoch, whole.epoch);
    assert_eq!(history[0].epoch, 2);
}

#[test]
fn separable_clusters_are_learned_exactly() {
    let shape = ImageShape::new(1, 1, 2);
    let mut rng = seeded(9);
    let u = Uniform::new(-0.1, 0.1).unwrap();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..40 {
        let class = i % 2;
        let centre = if class == 0 { [0.8, 0.2] } else { [0.2, 0.8] };
        rows.extend([centre[0] + u.sample(&mut rng), centre[1] + u.sample(&mut rng)]);
        labels.push(class);
    }
    let data = Dataset::new(Array2::from_shape_vec((40, 2), rows).unwrap(), labels, shape, 2).unwrap();
    for mode in [TrainMode::Vanilla, TrainMode::Dfa] {
        let config = TrainConfig {
            mode,
            epochs: 30,
            batch_size: 10,
            schedule: LrSchedule::constant(0.1),
            score_scale: 5.0,
            ..Default::default()
        };
        let arch = Architecture::Mlp {
            input: shape,
            hidden: vec![8],
            activation: Activation::Relu,
            embed_dim: 4,
        };
        let init = initial_snapshot_with(arch, &data, &config).unwrap();
        let (model, history) = train_from(init, &data, &config).unwrap();
        assert_eq!(accuracy(&model, &data).unwrap(), 100.0, "{mode}");
        assert!(history.last().unwrap().l_c < history[0].l_c);
    }
}

#[test]
fn dfa_aggregation_loss_decreases() {
    // 200 samples, 5 epochs; L_a measured noise-free on a fixed pairing
    let data = synthetic(&SyntheticConfig {
        n_classes: 10,
        per_class: 20,
        side: 8,
        ..Default::default()
    })
    .unwrap();
    let config = TrainConfig {
        epochs: 5,
        batch_size: 20,
        embed_dim: 16,
        ..tiny_config(TrainMode::Dfa)
    };
    let y = one_hot(&data.labels, data.n_classes).unwrap();
    let perm: Vec<usize> = (0..data.len()).map(|i| (i + 7) % data.len()).collect();
    let pair = MixedPair { lam: 0.5, perm: &perm, noise: None };
    let l_a = |m: &ModelSnapshot| {
        dfa_objective(m, data.view(), y.view(), &pair, Reduction::MeanSquared, None)
            .unwrap()
            .l_a
    };
    let init = initial_snapshot(&data, &config).unwrap();
    let (trained, _) = train_from(init.clone(), &data, &config).unwrap();
    let (before, after) = (l_a(&init), l_a(&trained));
    assert!(after < before, "L_a {before} -> {after}");
}

#[test]
fn invalid_configs_and_batches_are_rejected() {
    let data = tiny_task();
    let bad = [
        TrainConfig { batch_size: 1, ..tiny_config(TrainMode::Dfa) },
        TrainConfig { sigma: -0.1, ..tiny_config(TrainMode::Dfa) },
        TrainConfig { alpha: 0.0, ..tiny_config(TrainMode::Dfa) },
        TrainConfig { epochs: 0, ..tiny_config(TrainMode::Dfa) },
        TrainConfig { n_classes: Some(3), ..tiny_config(TrainMode::Dfa) },
    ];
    for config in bad {
        assert!(matches!(train(&data, &config), Err(DfaError::Config(_)) | Err(DfaError::Capacity { .. })), "{config:?}");
    }
    let config = tiny_config(TrainMode::Dfa);
    let mut trainer = Trainer::new(initial_snapshot(&data, &config).unwrap(), config).unwrap();
    let one = data.images.slice(ndarray::s![0..1, ..]);
    assert!(matches!(trainer.train_step(one, &[0], 0.1), Err(DfaError::Input(_))));
}

#[test]
fn non_finite_parameters_diverge() {
    let data = tiny_task();
    let config = tiny_config(TrainMode::Dfa);
    let mut snapshot = initial_snapshot(&data, &config).unwrap();
    let last = snapshot.extractor.params().len() - 1;
    snapshot.extractor.params_mut()[last].value[0] = f64::NAN;
    let mut trainer = Trainer::new(snapshot, config).unwrap();
    let (x, labels) = data.batch(&[0, 1, 2, 3]);
    let err = trainer.train_step(x.view(), &labels, 0.1);
    assert!(matches!(err, Err(DfaError::Diverged { step: 0, .. })), "{err:?}");
}

#[test]
fn split_gradient_is_the_adjoint_of_pair_mixing() {
    let h = random_batch(4, 3, 1);
    let g = random_batch(4, 3, 2);
    let perm = [2, 0, 3, 1];
    let lam = 0.3;
    let mixed = &h * lam + &permute_rows(h.view(), &perm) * (1.0 - lam);
    let split = split_mixed_gradient(g.view(), &perm, lam);
    // <g, M h> == <Mᵀ g, h>
    let lhs = (&g * &mixed).sum();
    let rhs = (&split * &h).sum();
    assert!((lhs - rhs).abs() < 1e-12);
}
