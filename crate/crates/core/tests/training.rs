//! Training-loop behavior on synthetic data: update bookkeeping against a
//! hand-rolled oracle, mixed-level endpoints, determinism, ablation
//! degeneracy, and the penalty's effect on the response gap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cpmlho_core::cuts::build_cut;
use cpmlho_core::data::{ExperimentData, HeldOutTest, ImageDataset, Provenance};
use cpmlho_core::hyperparams::HyperParamVector;
use cpmlho_core::model::{ForwardMode, LossKind, Model, ModelSpec};
use cpmlho_core::tape::Tape;
use cpmlho_core::tensor::Tensor;
use cpmlho_core::training::{
    inner_step, outer_gradients, outer_step, random_search, train_cpmlho, RunLog, ThetaMode,
    TrainConfig,
};

fn synthetic_dataset(n: usize, seed: u64) -> ImageDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageDataset {
        images: Tensor::rand_uniform(&[n, 1, 28, 28], 0.0, 1.0, &mut rng),
        labels: (0..n).map(|i| ((i * 7 + 3) % 10) as u8).collect(),
        provenance: Provenance {
            images_path: "synthetic".into(),
            labels_path: "synthetic".into(),
            images_sha256: String::new(),
            labels_sha256: String::new(),
        },
    }
}

fn synthetic_data(n_train: usize, n_test: usize, seed: u64) -> ExperimentData {
    ExperimentData {
        train: synthetic_dataset(n_train, seed),
        test: HeldOutTest::new(synthetic_dataset(n_test, seed ^ 0xff)),
    }
}

fn small_spec() -> ModelSpec {
    ModelSpec::mlp((12, 8))
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 16,
        alpha_we: 0.05,
        alpha_wh: 0.05,
        alpha_lambda: 0.01,
        ..TrainConfig::default()
    }
}

fn setup(seed: u64) -> (Model, HyperParamVector, Tensor, Vec<usize>) {
    let model = Model::init(small_spec(), seed).unwrap();
    let lambda = model.spec.lambda_init(&[0.3, 0.4, 0.5]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let x = Tensor::rand_uniform(&[4, 784], 0.0, 1.0, &mut rng);
    let labels = vec![0usize, 3, 7, 9];
    (model, lambda, x, labels)
}

#[test]
fn zero_rates_leave_parameters_unchanged() {
    let (mut model, lambda, x, labels) = setup(1);
    let before = model.clone();
    let cut = build_cut(&model, &lambda, 1e-3).unwrap();
    let config = TrainConfig {
        alpha_we: 0.0,
        alpha_wh: 0.0,
        ..quick_config()
    };
    let mut noise = ChaCha8Rng::seed_from_u64(9);
    inner_step(
        (&x, &labels),
        &mut model,
        &lambda,
        Some(&cut),
        &config,
        &mut noise,
        0,
    )
    .unwrap();
    for (a, b) in model.layers.iter().zip(&before.layers) {
        assert_eq!(a.w_e, b.w_e);
        assert_eq!(a.bias, b.bias);
        assert_eq!(a.w_h1, b.w_h1);
        assert_eq!(a.w_h2, b.w_h2);
    }
}

/// The inner update must equal a hand-applied SGD step: w_e by the plain
/// loss gradient, w_h by loss gradient plus μ times the cut subgradient.
#[test]
fn inner_step_matches_hand_rolled_update() {
    let (mut model, lambda, x, labels) = setup(2);
    let reference = model.clone();
    let cut = build_cut(&model, &lambda, 1e-3).unwrap();
    let config = quick_config();

    // Independent gradient computation with the same noise stream.
    let mut noise = ChaCha8Rng::seed_from_u64(42);
    let mut tape = Tape::new();
    let graph = reference.wire(&mut tape, &lambda, true, false).unwrap();
    let xn = tape.constant(x.clone());
    let loss = reference
        .loss_graph(
            &mut tape,
            &graph,
            xn,
            &labels,
            config.loss,
            ForwardMode::Train(&mut noise),
        )
        .unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut noise = ChaCha8Rng::seed_from_u64(42);
    inner_step(
        (&x, &labels),
        &mut model,
        &lambda,
        Some(&cut),
        &config,
        &mut noise,
        0,
    )
    .unwrap();

    for (i, nodes) in graph.layers.iter().enumerate() {
        let mut want_we = reference.layers[i].w_e.clone();
        want_we.scaled_add_assign(-config.alpha_we, grads.expect(nodes.w_e));
        assert_eq!(model.layers[i].w_e, want_we, "w_e layer {i}");

        let mut want_b = reference.layers[i].bias.clone();
        want_b.scaled_add_assign(-config.alpha_we, grads.expect(nodes.bias));
        assert_eq!(model.layers[i].bias, want_b, "bias layer {i}");

        let mut want_h1 = reference.layers[i].w_h1.clone();
        want_h1.scaled_add_assign(-config.alpha_wh, grads.expect(nodes.w_h1));
        want_h1.scaled_add_assign(-config.alpha_wh * config.penalty.mu, &cut.grads()[i].w_h1);
        assert_eq!(model.layers[i].w_h1, want_h1, "w_h1 layer {i}");

        let mut want_h2 = reference.layers[i].w_h2.clone();
        want_h2.scaled_add_assign(-config.alpha_wh, grads.expect(nodes.w_h2));
        want_h2.scaled_add_assign(-config.alpha_wh * config.penalty.mu, &cut.grads()[i].w_h2);
        assert_eq!(model.layers[i].w_h2, want_h2, "w_h2 layer {i}");
    }
}

#[test]
fn disabled_cuts_equal_zero_mu() {
    let (model0, lambda, x, labels) = setup(3);
    let cut = build_cut(&model0, &lambda, 1e-3).unwrap();

    let mut disabled = model0.clone();
    let config_disabled = TrainConfig {
        disable_cuts: true,
        ..quick_config()
    };
    let mut noise = ChaCha8Rng::seed_from_u64(5);
    inner_step(
        (&x, &labels),
        &mut disabled,
        &lambda,
        None,
        &config_disabled,
        &mut noise,
        0,
    )
    .unwrap();

    let mut zero_mu = model0.clone();
    let mut config_zero = quick_config();
    config_zero.penalty.mu = 0.0;
    let mut noise = ChaCha8Rng::seed_from_u64(5);
    inner_step(
        (&x, &labels),
        &mut zero_mu,
        &lambda,
        Some(&cut),
        &config_zero,
        &mut noise,
        0,
    )
    .unwrap();

    for (a, b) in disabled.layers.iter().zip(&zero_mu.layers) {
        assert_eq!(a.w_h1, b.w_h1);
        assert_eq!(a.w_h2, b.w_h2);
        assert_eq!(a.w_e, b.w_e);
    }
}

#[test]
fn missing_cut_without_ablation_is_a_contract_error() {
    let (mut model, lambda, x, labels) = setup(4);
    let mut noise = ChaCha8Rng::seed_from_u64(5);
    let err = inner_step(
        (&x, &labels),
        &mut model,
        &lambda,
        None,
        &quick_config(),
        &mut noise,
        0,
    );
    assert!(err.is_err());
}

#[test]
fn theta_zero_hypergradient_is_bitwise_train_only() {
    let (model, lambda, x, labels) = setup(5);
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let vx = Tensor::rand_uniform(&[4, 784], 0.0, 1.0, &mut rng);
    let vy = vec![1usize, 2, 5, 8];

    let mut noise = ChaCha8Rng::seed_from_u64(61);
    let g = outer_gradients(
        (&x, &labels),
        (&vx, &vy),
        &model,
        &lambda,
        0.0,
        LossKind::CrossEntropy,
        &mut noise,
    )
    .unwrap();
    assert_eq!(g.grad_mixed, g.grad_train);
}

#[test]
fn theta_two_gradient_is_exactly_linear() {
    // θ = 2 scales by a power of two, so the combination is exact in f64.
    let (model, lambda, x, labels) = setup(6);
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let vx = Tensor::rand_uniform(&[4, 784], 0.0, 1.0, &mut rng);
    let vy = vec![4usize, 0, 2, 6];

    let mut noise = ChaCha8Rng::seed_from_u64(62);
    let g = outer_gradients(
        (&x, &labels),
        (&vx, &vy),
        &model,
        &lambda,
        2.0,
        LossKind::CrossEntropy,
        &mut noise,
    )
    .unwrap();
    // Doubling by θ = 2 is exact, but the leaf accumulates contributions
    // from both branches in interleaved order, so agreement is to rounding.
    for i in 0..g.grad_mixed.numel() {
        let recovered = g.grad_mixed.data()[i] - 2.0 * g.grad_val.data()[i];
        let want = g.grad_train.data()[i];
        assert!(
            (recovered - want).abs() <= 1e-14 * want.abs().max(1e-12),
            "entry {i}: {recovered} vs {want}"
        );
    }
}

#[test]
fn huge_theta_points_along_validation_gradient() {
    let (model, lambda, x, labels) = setup(7);
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let vx = Tensor::rand_uniform(&[4, 784], 0.0, 1.0, &mut rng);
    let vy = vec![9usize, 8, 1, 0];

    let mut noise = ChaCha8Rng::seed_from_u64(63);
    let g = outer_gradients(
        (&x, &labels),
        (&vx, &vy),
        &model,
        &lambda,
        1e6,
        LossKind::CrossEntropy,
        &mut noise,
    )
    .unwrap();
    assert!(g.grad_train.l2_norm() > 1e-8);
    assert!(g.grad_val.l2_norm() > 1e-8);
    let cosine = g.grad_mixed.dot_flat(&g.grad_val)
        / (g.grad_mixed.l2_norm() * g.grad_val.l2_norm());
    assert!(cosine >= 0.999, "cosine {cosine}");
}

#[test]
fn outer_step_moves_lambda_and_not_the_model() {
    let (model, mut lambda, x, labels) = setup(8);
    let before_model = model.clone();
    let before_lambda = lambda.raw().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let vx = Tensor::rand_uniform(&[4, 784], 0.0, 1.0, &mut rng);
    let vy = vec![3usize, 3, 4, 4];
    let mut noise = ChaCha8Rng::seed_from_u64(64);
    outer_step(
        (&x, &labels),
        (&vx, &vy),
        &model,
        &mut lambda,
        &quick_config(),
        &mut noise,
        0,
    )
    .unwrap();
    assert_ne!(lambda.raw(), &before_lambda);
    for (a, b) in model.layers.iter().zip(&before_model.layers) {
        assert_eq!(a.w_e, b.w_e);
    }
}

fn strip_walltime(log: &RunLog) -> Vec<(u64, usize, f64, f64, Vec<f64>, f64, f64)> {
    log.records
        .iter()
        .map(|r| {
            (
                r.step,
                r.epoch,
                r.train_loss,
                r.val_loss,
                r.lambdas.clone(),
                r.gap,
                r.phi,
            )
        })
        .collect()
}

#[test]
fn identical_seed_replays_bit_identically() {
    let data = synthetic_data(160, 40, 7);
    let config = TrainConfig {
        epochs: 2,
        batch_size: 16,
        seed: 33,
        val_fraction: 0.25,
        ..quick_config()
    };
    let a = train_cpmlho(&config, &small_spec(), &[0.5, 0.5, 0.5], &data).unwrap();
    let b = train_cpmlho(&config, &small_spec(), &[0.5, 0.5, 0.5], &data).unwrap();
    assert_eq!(strip_walltime(&a), strip_walltime(&b));
    assert_eq!(a.final_report, b.final_report);
    assert!(!a.records.is_empty());
    // Steps strictly increase.
    for w in a.records.windows(2) {
        assert!(w[1].step > w[0].step);
    }
}

#[test]
fn zero_epochs_yield_initial_evaluations_only() {
    let data = synthetic_data(80, 20, 9);
    let config = TrainConfig {
        epochs: 0,
        batch_size: 16,
        val_fraction: 0.25,
        ..quick_config()
    };
    let inits = [0.5, 0.5, 0.5];
    let log = train_cpmlho(&config, &small_spec(), &inits, &data).unwrap();
    assert!(log.records.is_empty());
    let report = log.final_report.unwrap();
    for (got, want) in report.lambdas.iter().zip(inits) {
        assert!((got - want).abs() < 1e-12);
    }
}

/// Hypernet off, cuts off, lambda step zeroed by construction: the loop
/// must match a plain SGD reference step for step.
#[test]
fn ablated_run_degenerates_to_plain_sgd() {
    let data = synthetic_data(96, 24, 11);
    let spec = small_spec();
    let config = TrainConfig {
        epochs: 2,
        batch_size: 16,
        seed: 21,
        theta: 0.0,
        alpha_lambda: f64::MIN_POSITIVE, // no-op update; rates must be > 0
        disable_cuts: true,
        disable_hypernet: true,
        val_fraction: 0.25,
        ..quick_config()
    };
    let inits = [0.3, 0.3, 0.3];
    let log = train_cpmlho(&config, &spec, &inits, &data).unwrap();
    let report = log.final_report.unwrap();

    // Reference: plain SGD over the same batch stream with the same noise
    // stream and frozen lambda, updating only w_e and bias.
    let split =
        cpmlho_core::data::split_train_val(&data.train, config.val_fraction, config.seed).unwrap();
    let mut model = Model::init(
        spec.clone(),
        // Matches the model-init stream derivation inside the loop.
        {
            let s = config.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ 0x9e37_79b9_0000_0001;
            s
        },
    )
    .unwrap();
    model.disable_hypernet();
    let lambda = spec.lambda_init(&inits).unwrap();
    let mut noise = {
        use rand::SeedableRng;
        ChaCha8Rng::seed_from_u64(
            config.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ 0x9e37_79b9_0000_0003,
        )
    };
    for epoch in 0..config.epochs {
        let seed = (config.seed.wrapping_mul(0x2545_f491_4f6c_dd1d)
            ^ 0x9e37_79b9_0000_0002)
            .wrapping_add(epoch as u64);
        for (x, labels) in
            cpmlho_core::data::batches(&data.train, &split.train, config.batch_size, seed)
                .unwrap()
        {
            let mut tape = Tape::new();
            let graph = model.wire(&mut tape, &lambda, true, false).unwrap();
            let xn = tape.constant(x);
            let loss = model
                .loss_graph(
                    &mut tape,
                    &graph,
                    xn,
                    &labels,
                    config.loss,
                    ForwardMode::Train(&mut noise),
                )
                .unwrap();
            let grads = tape.backward(loss).unwrap();
            for (i, nodes) in graph.layers.iter().enumerate() {
                model.layers[i]
                    .w_e
                    .scaled_add_assign(-config.alpha_we, grads.expect(nodes.w_e));
                model.layers[i]
                    .bias
                    .scaled_add_assign(-config.alpha_we, grads.expect(nodes.bias));
            }
        }
    }
    let (val_loss, val_acc) = cpmlho_core::training::evaluate(
        &model,
        &lambda,
        &data.train,
        Some(&split.val),
        config.loss,
    )
    .unwrap();
    assert_eq!(report.val_loss, val_loss);
    assert_eq!(report.val_accuracy, val_acc);
}

/// Same seeds, same data order: the penalty can only pull the hypernet
/// toward the elementary weights, so the end-of-run gap must shrink.
#[test]
fn penalty_reduces_end_of_run_gap_in_the_median() {
    let data = synthetic_data(128, 32, 13);
    let mut with_mu = Vec::new();
    let mut without_mu = Vec::new();
    for seed in [1u64, 2, 3, 4, 5] {
        let base = TrainConfig {
            epochs: 1,
            batch_size: 16,
            seed,
            val_fraction: 0.25,
            ..quick_config()
        };
        let gap_of = |config: &TrainConfig| -> f64 {
            let log = train_cpmlho(config, &small_spec(), &[0.4, 0.4, 0.4], &data).unwrap();
            log.records.last().unwrap().gap
        };
        with_mu.push(gap_of(&base));
        let mut zero = base.clone();
        zero.penalty.mu = 0.0;
        without_mu.push(gap_of(&zero));
    }
    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let m_with = median(with_mu.clone());
    let m_without = median(without_mu.clone());
    assert!(
        m_with < m_without,
        "median gap with mu {m_with} vs without {m_without} ({with_mu:?} / {without_mu:?})"
    );
}

#[test]
fn divergence_carries_partial_log_and_step() {
    // Squared-error loss grows with the squared weights, so a huge rate
    // overflows the loss itself within a few steps. Outer steps are pushed
    // out of the window so the inner divergence check is what trips.
    let data = synthetic_data(64, 16, 15);
    let config = TrainConfig {
        epochs: 3,
        batch_size: 16,
        alpha_we: 1e40,
        loss: LossKind::SquaredError,
        inner_steps_per_outer: 1 << 40,
        val_fraction: 0.25,
        seed: 3,
        ..quick_config()
    };
    let failure = train_cpmlho(&config, &small_spec(), &[0.5, 0.5, 0.5], &data).unwrap_err();
    match failure.error {
        cpmlho_core::Error::TrainingDiverged { step, .. } => {
            assert!(step >= 1, "diverged at step {step}");
        }
        ref other => panic!("unexpected error {other:?}"),
    }
    assert!(failure.partial.final_report.is_none());
}

#[test]
fn random_search_selects_the_argmin_trial() {
    let data = synthetic_data(96, 24, 17);
    let config = TrainConfig {
        epochs: 1,
        batch_size: 16,
        seed: 8,
        val_fraction: 0.25,
        ..quick_config()
    };
    let outcome = random_search(&config, &small_spec(), &data, 4).unwrap();
    assert_eq!(outcome.trials.len(), 4);
    let min = outcome
        .trials
        .iter()
        .map(|t| t.val_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(outcome.trials[outcome.best_trial].val_loss, min);
    assert_eq!(
        outcome.best.final_report.as_ref().unwrap().val_loss,
        min
    );
    // Sampled lambdas live in their constrained ranges.
    for t in &outcome.trials {
        for (v, spec) in t.lambdas.iter().zip(&small_spec().lambda_specs) {
            assert!(*v > 0.0 && *v < spec.kind.upper_bound());
        }
    }
}

#[test]
fn single_trial_random_search_is_one_fixed_lambda_run() {
    let data = synthetic_data(64, 16, 19);
    let config = TrainConfig {
        epochs: 1,
        batch_size: 16,
        seed: 4,
        val_fraction: 0.25,
        ..quick_config()
    };
    let outcome = random_search(&config, &small_spec(), &data, 1).unwrap();
    assert_eq!(outcome.trials.len(), 1);
    assert_eq!(outcome.best_trial, 0);
    assert!(outcome.best.records.is_empty());
    assert!(outcome.best.final_report.is_some());
}
