//! The full training loop: constrained inner updates on the network
//! parameters interleaved with mixed-level outer updates on the
//! hyperparameters, plus the random-search baseline.
//!
//! Update ownership is enforced by the signatures: [`inner_step`] mutates
//! the model and never touches λ, [`outer_step`] mutates λ against a frozen
//! model. Inner steps update `w_e` (and biases) by the plain loss gradient
//! and `(w_h1, w_h2)` by the gradient of `loss + μ·φ`; φ is affine, so its
//! parameter gradient is the cut's frozen subgradient.
//!
//! Every random draw comes from a stream derived from the run seed, so a
//! `(config, seed, dataset)` triple replays bit-identically.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cuts::{build_cut, eval_cut, response_gap, Cut, CutRefresh, PenaltyConfig};
use crate::data::{batches, gather_batch, split_train_val, BatchIter, ExperimentData, ImageDataset};
use crate::error::{Error, Result};
use crate::hyperparams::{HyperParamKind, HyperParamVector};
use crate::model::{accuracy, ForwardMode, LossKind, Model, ModelSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThetaMode {
    /// Outer objective `L_tr + θ·L_val`.
    Mixed,
    /// Pure validation objective, the hypernetwork-style comparator.
    ValOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha_we: f64,
    pub alpha_wh: f64,
    pub alpha_lambda: f64,
    /// Mixing weight on the validation loss in the outer objective.
    pub theta: f64,
    pub penalty: PenaltyConfig,
    pub inner_steps_per_outer: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub seed: u64,
    pub val_fraction: f64,
    /// Ablation: train without any cut penalty.
    pub disable_cuts: bool,
    pub theta_mode: ThetaMode,
    /// Ablation: zero the gate maps and freeze the hypernetwork entirely.
    pub disable_hypernet: bool,
    /// Optional global gradient-norm clip (off by default).
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha_we: 0.01,
            alpha_wh: 0.01,
            alpha_lambda: 0.003,
            theta: 1.0,
            penalty: PenaltyConfig::default(),
            inner_steps_per_outer: 2,
            epochs: 10,
            batch_size: 128,
            loss: LossKind::CrossEntropy,
            seed: 0,
            val_fraction: 1.0 / 6.0,
            disable_cuts: false,
            theta_mode: ThetaMode::Mixed,
            disable_hypernet: false,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_we", self.alpha_we),
            ("alpha_wh", self.alpha_wh),
            ("alpha_lambda", self.alpha_lambda),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return Err(Error::contract("theta must be finite and nonnegative"));
        }
        if self.inner_steps_per_outer == 0 {
            return Err(Error::contract("inner_steps_per_outer must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be >= 1"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::contract("val_fraction must lie in (0,1)"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::contract("grad_clip must be positive"));
            }
        }
        self.penalty.validate()
    }
}

/// One row of the outer-step schedule. λ values are the constrained,
/// task-facing ones.
#[derive(Clone, Debug, PartialEq)]
pub struct OuterRecord {
    pub step: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lambdas: Vec<f64>,
    pub gap: f64,
    pub phi: f64,
    /// Seconds since run start. Excluded from determinism comparisons and
    /// from the schedule CSV.
    pub walltime_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinalReport {
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub lambdas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub lambda_names: Vec<String>,
    pub records: Vec<OuterRecord>,
    /// Absent when a run diverged before final evaluation.
    pub final_report: Option<FinalReport>,
}

/// A diverged run: the error plus everything logged before the failure.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub partial: RunLog,
}

pub type TrainResult<T> = std::result::Result<T, Box<TrainFailure>>;

// Stream salts for deriving independent RNG streams from the run seed.
const SALT_MODEL: u64 = 0x9e37_79b9_0000_0001;
const SALT_EPOCH: u64 = 0x9e37_79b9_0000_0002;
const SALT_INNER_NOISE: u64 = 0x9e37_79b9_0000_0003;
const SALT_OUTER_NOISE: u64 = 0x9e37_79b9_0000_0004;
const SALT_OUTER_TRAIN: u64 = 0x9e37_79b9_0000_0005;
const SALT_OUTER_VAL: u64 = 0x9e37_79b9_0000_0006;
const SALT_RS_LAMBDA: u64 = 0x9e37_79b9_0000_0007;
const SALT_RS_TRIAL: u64 = 0x9e37_79b9_0000_0008;

fn stream(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ salt)
}

fn epoch_seed(seed: u64, salt: u64, epoch: u64) -> u64 {
    (seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ salt).wrapping_add(epoch)
}

/// One constrained inner update (the model side). λ is read-only here.
///
/// `w_e` and the bias follow the plain loss gradient; `w_h1`/`w_h2` follow
/// the penalized gradient `∇l + μ·∂φ` when a cut is active.
pub fn inner_step(
    batch: (&Tensor, &[usize]),
    model: &mut Model,
    lambda: &HyperParamVector,
    cut: Option<&Cut>,
    config: &TrainConfig,
    noise: &mut ChaCha8Rng,
    step: u64,
) -> Result<f64> {
    if cut.is_none() && !config.disable_cuts {
        return Err(Error::contract(
            "inner_step needs a cut unless cuts are disabled",
        ));
    }
    let mut tape = crate::tape::Tape::new();
    let graph = model.wire(&mut tape, lambda, true, false)?;
    let x = tape.constant(batch.0.clone());
    let loss_node = model.loss_graph(
        &mut tape,
        &graph,
        x,
        batch.1,
        config.loss,
        ForwardMode::Train(noise),
    )?;
    let loss = tape.value(loss_node).item();
    if !loss.is_finite() {
        return Err(Error::TrainingDiverged {
            step,
            detail: format!("inner loss is {loss}"),
        });
    }
    let grads = tape.backward(loss_node)?;

    // Optional global-norm clip over the loss gradients.
    let clip_scale = match config.grad_clip {
        None => 1.0,
        Some(limit) => {
            let mut sq = 0.0;
            for nodes in &graph.layers {
                for id in [nodes.w_e, nodes.bias, nodes.w_h1, nodes.w_h2] {
                    let g = grads.expect(id);
                    sq += g.dot_flat(g);
                }
            }
            let norm = sq.sqrt();
            if norm > limit {
                limit / norm
            } else {
                1.0
            }
        }
    };

    let mu = if config.disable_cuts {
        0.0
    } else {
        config.penalty.mu
    };
    for (i, nodes) in graph.layers.iter().enumerate() {
        let layer = &mut model.layers[i];
        layer
            .w_e
            .scaled_add_assign(-config.alpha_we * clip_scale, grads.expect(nodes.w_e));
        layer
            .bias
            .scaled_add_assign(-config.alpha_we * clip_scale, grads.expect(nodes.bias));
        if config.disable_hypernet {
            continue;
        }
        layer
            .w_h1
            .scaled_add_assign(-config.alpha_wh * clip_scale, grads.expect(nodes.w_h1));
        layer
            .w_h2
            .scaled_add_assign(-config.alpha_wh * clip_scale, grads.expect(nodes.w_h2));
        if let Some(cut) = cut {
            if mu != 0.0 {
                let cg = &cut.grads()[i];
                layer
                    .w_h1
                    .scaled_add_assign(-config.alpha_wh * mu, &cg.w_h1);
                layer
                    .w_h2
                    .scaled_add_assign(-config.alpha_wh * mu, &cg.w_h2);
            }
        }
    }
    Ok(loss)
}

/// Hyperparameter gradients of the mixed objective on one pair of batches,
/// all from a single tape and noise realization.
pub struct OuterGradients {
    pub train_loss: f64,
    pub val_loss: f64,
    pub grad_train: Tensor,
    pub grad_val: Tensor,
    pub grad_mixed: Tensor,
}

/// Compute `∇λ L_tr`, `∇λ L_val`, and `∇λ (L_tr + θ·L_val)` on a frozen
/// model. Exposed for the endpoint and linearity checks; the training loop
/// uses [`outer_step`], which backpropagates the chosen objective only.
pub fn outer_gradients(
    train_batch: (&Tensor, &[usize]),
    val_batch: (&Tensor, &[usize]),
    model: &Model,
    lambda: &HyperParamVector,
    theta: f64,
    loss_kind: LossKind,
    noise: &mut ChaCha8Rng,
) -> Result<OuterGradients> {
    let mut tape = crate::tape::Tape::new();
    let graph = model.wire(&mut tape, lambda, false, true)?;
    let x_tr = tape.constant(train_batch.0.clone());
    let l_tr = model.loss_graph(
        &mut tape,
        &graph,
        x_tr,
        train_batch.1,
        loss_kind,
        ForwardMode::Train(noise),
    )?;
    let x_val = tape.constant(val_batch.0.clone());
    let l_val = model.loss_graph(
        &mut tape,
        &graph,
        x_val,
        val_batch.1,
        loss_kind,
        ForwardMode::Train(noise),
    )?;
    let scaled = tape.affine(l_val, theta, 0.0);
    let l_mix = tape.add(l_tr, scaled)?;

    let leaf = graph.lambda.raw;
    let grad_train = tape.backward(l_tr)?.expect(leaf).clone();
    let grad_val = tape.backward(l_val)?.expect(leaf).clone();
    let grad_mixed = tape.backward(l_mix)?.expect(leaf).clone();
    Ok(OuterGradients {
        train_loss: tape.value(l_tr).item(),
        val_loss: tape.value(l_val).item(),
        grad_train,
        grad_val,
        grad_mixed,
    })
}

pub struct OuterInfo {
    pub train_loss: f64,
    pub val_loss: f64,
}

/// One mixed-level outer update (the hyperparameter side). The model is
/// read-only here.
pub fn outer_step(
    train_batch: (&Tensor, &[usize]),
    val_batch: (&Tensor, &[usize]),
    model: &Model,
    lambda: &mut HyperParamVector,
    config: &TrainConfig,
    noise: &mut ChaCha8Rng,
    step: u64,
) -> Result<OuterInfo> {
    let mut tape = crate::tape::Tape::new();
    let graph = model.wire(&mut tape, lambda, false, true)?;
    let x_tr = tape.constant(train_batch.0.clone());
    let l_tr = model.loss_graph(
        &mut tape,
        &graph,
        x_tr,
        train_batch.1,
        config.loss,
        ForwardMode::Train(noise),
    )?;
    let x_val = tape.constant(val_batch.0.clone());
    let l_val = model.loss_graph(
        &mut tape,
        &graph,
        x_val,
        val_batch.1,
        config.loss,
        ForwardMode::Train(noise),
    )?;
    let objective = match config.theta_mode {
        ThetaMode::Mixed => {
            let scaled = tape.affine(l_val, config.theta, 0.0);
            tape.add(l_tr, scaled)?
        }
        ThetaMode::ValOnly => l_val,
    };
    let grad = tape.backward(objective)?;
    let g = grad.expect(graph.lambda.raw);
    if !g.all_finite() {
        return Err(Error::TrainingDiverged {
            step,
            detail: "non-finite hyperparameter gradient".into(),
        });
    }
    let scale = match config.grad_clip {
        Some(limit) => {
            let norm = g.l2_norm();
            if norm > limit {
                limit / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    lambda
        .raw_mut()
        .scaled_add_assign(-config.alpha_lambda * scale, g);
    Ok(OuterInfo {
        train_loss: tape.value(l_tr).item(),
        val_loss: tape.value(l_val).item(),
    })
}

/// Mean loss and accuracy over a split part in eval mode (no
/// regularization).
pub fn evaluate(
    model: &Model,
    lambda: &HyperParamVector,
    ds: &ImageDataset,
    part: Option<&[u32]>,
    kind: LossKind,
) -> Result<(f64, f64)> {
    let all: Vec<u32>;
    let part = match part {
        Some(p) => p,
        None => {
            all = (0..ds.len() as u32).collect();
            &all
        }
    };
    let mut total_loss = 0.0;
    let mut hits = 0.0;
    let mut count = 0usize;
    for chunk in part.chunks(512) {
        let (x, labels) = gather_batch(ds, chunk);
        let mut tape = crate::tape::Tape::new();
        let graph = model.wire(&mut tape, lambda, false, false)?;
        let xn = tape.constant(x);
        let logits = model.forward(&mut tape, &graph, xn, ForwardMode::Eval)?;
        let loss = crate::model::batch_loss(&mut tape, logits, &labels, kind)?;
        total_loss += tape.value(loss).item() * labels.len() as f64;
        hits += accuracy(tape.value(logits), &labels) * labels.len() as f64;
        count += labels.len();
    }
    Ok((total_loss / count as f64, hits / count as f64))
}

/// Endless deterministic batch stream over one split part; reshuffles with
/// a derived seed every wrap.
struct CyclingBatches<'a> {
    ds: &'a ImageDataset,
    part: Vec<u32>,
    batch_size: usize,
    seed: u64,
    salt: u64,
    epoch: u64,
    iter: BatchIter<'a>,
}

impl<'a> CyclingBatches<'a> {
    fn new(
        ds: &'a ImageDataset,
        part: &[u32],
        batch_size: usize,
        seed: u64,
        salt: u64,
    ) -> Result<Self> {
        let iter = batches(ds, part, batch_size, epoch_seed(seed, salt, 0))?;
        Ok(CyclingBatches {
            ds,
            part: part.to_vec(),
            batch_size,
            seed,
            salt,
            epoch: 0,
            iter,
        })
    }

    fn next_batch(&mut self) -> Result<(Tensor, Vec<usize>)> {
        if let Some(b) = self.iter.next() {
            return Ok(b);
        }
        self.epoch += 1;
        self.iter = batches(
            self.ds,
            &self.part,
            self.batch_size,
            epoch_seed(self.seed, self.salt, self.epoch),
        )?;
        Ok(self.iter.next().expect("nonempty part"))
    }
}

struct LoopState {
    records: Vec<OuterRecord>,
    lambda_names: Vec<String>,
}

impl LoopState {
    fn fail(self, error: Error) -> Box<TrainFailure> {
        Box::new(TrainFailure {
            error,
            partial: RunLog {
                lambda_names: self.lambda_names,
                records: self.records,
                final_report: None,
            },
        })
    }
}

/// The full run: per epoch, rebuild the cut, sweep the training batches
/// with inner steps, and run one outer step every
/// `inner_steps_per_outer` inner steps on fresh train/validation batches.
pub fn train_cpmlho(
    config: &TrainConfig,
    spec: &ModelSpec,
    lambda_inits: &[f64],
    data: &ExperimentData,
) -> TrainResult<RunLog> {
    let setup = || -> Result<_> {
        config.validate()?;
        spec.validate()?;
        let split = split_train_val(&data.train, config.val_fraction, config.seed)?;
        let mut model = Model::init(spec.clone(), epoch_seed(config.seed, SALT_MODEL, 0))?;
        if config.disable_hypernet {
            model.disable_hypernet();
        }
        let lambda = spec.lambda_init(lambda_inits)?;
        Ok((split, model, lambda))
    };
    let (split, mut model, mut lambda) = match setup() {
        Ok(v) => v,
        Err(error) => {
            return Err(Box::new(TrainFailure {
                error,
                partial: RunLog {
                    lambda_names: spec.lambda_specs.iter().map(|s| s.name.clone()).collect(),
                    records: Vec::new(),
                    final_report: None,
                },
            }))
        }
    };

    let mut state = LoopState {
        records: Vec::new(),
        lambda_names: lambda.names(),
    };
    let started = Instant::now();

    let mut inner_noise = stream(config.seed, SALT_INNER_NOISE);
    let mut outer_noise = stream(config.seed, SALT_OUTER_NOISE);
    let mut outer_train = match CyclingBatches::new(
        &data.train,
        &split.train,
        config.batch_size,
        config.seed,
        SALT_OUTER_TRAIN,
    ) {
        Ok(v) => v,
        Err(e) => return Err(state.fail(e)),
    };
    let mut outer_val = match CyclingBatches::new(
        &data.train,
        &split.val,
        config.batch_size,
        config.seed,
        SALT_OUTER_VAL,
    ) {
        Ok(v) => v,
        Err(e) => return Err(state.fail(e)),
    };

    let mut cut: Option<Cut> = None;
    let mut inner_count: u64 = 0;
    let mut outer_count: u64 = 0;

    for epoch in 0..config.epochs {
        if !config.disable_cuts {
            if let CutRefresh::PerEpoch = config.penalty.refresh {
                match build_cut(&model, &lambda, config.penalty.eps) {
                    Ok(c) => cut = Some(c),
                    Err(e) => return Err(state.fail(e)),
                }
            }
        }
        let epoch_batches = match batches(
            &data.train,
            &split.train,
            config.batch_size,
            epoch_seed(config.seed, SALT_EPOCH, epoch as u64),
        ) {
            Ok(it) => it,
            Err(e) => return Err(state.fail(e)),
        };
        for (x, labels) in epoch_batches {
            if !config.disable_cuts {
                if let CutRefresh::EverySteps(k) = config.penalty.refresh {
                    if inner_count.is_multiple_of(k) {
                        match build_cut(&model, &lambda, config.penalty.eps) {
                            Ok(c) => cut = Some(c),
                            Err(e) => return Err(state.fail(e)),
                        }
                    }
                }
            }
            if let Err(e) = inner_step(
                (&x, &labels),
                &mut model,
                &lambda,
                cut.as_ref(),
                config,
                &mut inner_noise,
                inner_count,
            ) {
                return Err(state.fail(e));
            }
            inner_count += 1;

            if inner_count.is_multiple_of(config.inner_steps_per_outer) {
                let step_result = (|| -> Result<OuterRecord> {
                    let (tx, ty) = outer_train.next_batch()?;
                    let (vx, vy) = outer_val.next_batch()?;
                    let info = outer_step(
                        (&tx, &ty),
                        (&vx, &vy),
                        &model,
                        &mut lambda,
                        config,
                        &mut outer_noise,
                        outer_count,
                    )?;
                    outer_count += 1;
                    let gap = response_gap(&model, &lambda)?.value;
                    let phi = match &cut {
                        Some(c) => eval_cut(c, &model)?,
                        None => 0.0,
                    };
                    Ok(OuterRecord {
                        step: outer_count,
                        epoch,
                        train_loss: info.train_loss,
                        val_loss: info.val_loss,
                        lambdas: lambda.constrained_all(),
                        gap,
                        phi,
                        walltime_s: started.elapsed().as_secs_f64(),
                    })
                })();
                match step_result {
                    Ok(record) => state.records.push(record),
                    Err(e) => return Err(state.fail(e)),
                }
            }
        }
    }

    let final_report = (|| -> Result<FinalReport> {
        let (val_loss, val_accuracy) =
            evaluate(&model, &lambda, &data.train, Some(&split.val), config.loss)?;
        let test = data.test.for_final_evaluation();
        let (_, test_accuracy) = evaluate(&model, &lambda, test, None, config.loss)?;
        Ok(FinalReport {
            val_loss,
            val_accuracy,
            test_accuracy,
            lambdas: lambda.constrained_all(),
        })
    })();
    match final_report {
        Ok(report) => Ok(RunLog {
            lambda_names: state.lambda_names,
            records: state.records,
            final_report: Some(report),
        }),
        Err(e) => Err(state.fail(e)),
    }
}

/// One random-search trial's outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub lambdas: Vec<f64>,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct RandomSearchOutcome {
    /// Log of the winning trial (empty schedule: no outer steps happen).
    pub best: RunLog,
    pub best_trial: usize,
    pub trials: Vec<TrialRecord>,
}

/// Random-search baseline: sample constrained λ uniformly per trial, train
/// with λ fixed and the hypernetwork disabled, return the best trial by
/// final validation loss. The per-trial step budget divides the full run's
/// inner-step budget so total compute matches.
pub fn random_search(
    config: &TrainConfig,
    spec: &ModelSpec,
    data: &ExperimentData,
    trials: usize,
) -> TrainResult<RandomSearchOutcome> {
    let fail0 = |error: Error| {
        Box::new(TrainFailure {
            error,
            partial: RunLog {
                lambda_names: spec.lambda_specs.iter().map(|s| s.name.clone()).collect(),
                records: Vec::new(),
                final_report: None,
            },
        })
    };
    if trials == 0 {
        return Err(fail0(Error::contract("random search needs trials >= 1")));
    }
    if let Err(e) = config.validate().and_then(|_| spec.validate()) {
        return Err(fail0(e));
    }
    let split = match split_train_val(&data.train, config.val_fraction, config.seed) {
        Ok(s) => s,
        Err(e) => return Err(fail0(e)),
    };
    let batches_per_epoch = split.train.len().div_ceil(config.batch_size);
    let total_steps = (config.epochs * batches_per_epoch) as u64;
    let per_trial = (total_steps / trials as u64).max(1);

    let mut sampler = stream(config.seed, SALT_RS_LAMBDA);
    let mut trial_records = Vec::with_capacity(trials);
    let mut best: Option<(usize, f64, Model, HyperParamVector)> = None;

    for trial in 0..trials {
        let sampled: Vec<f64> = spec
            .lambda_specs
            .iter()
            .map(|s| {
                let hi = match s.kind {
                    HyperParamKind::DropoutRate => 1.0,
                    HyperParamKind::CutoutHoles { max } | HyperParamKind::CutoutLength { max } => {
                        max
                    }
                };
                sampler.gen_range(f64::EPSILON..hi)
            })
            .collect();
        let lambda = match spec.lambda_init(&sampled) {
            Ok(l) => l,
            Err(e) => return Err(fail0(e)),
        };
        let trial_seed = epoch_seed(config.seed, SALT_RS_TRIAL, trial as u64);
        let mut model = match Model::init(spec.clone(), trial_seed) {
            Ok(m) => m,
            Err(e) => return Err(fail0(e)),
        };
        model.disable_hypernet();
        let trial_config = TrainConfig {
            disable_hypernet: true,
            disable_cuts: true,
            ..config.clone()
        };
        let mut noise = stream(trial_seed, SALT_INNER_NOISE);

        let run = (|| -> Result<(f64, f64)> {
            let mut source = CyclingBatches::new(
                &data.train,
                &split.train,
                config.batch_size,
                trial_seed,
                SALT_EPOCH,
            )?;
            for step in 0..per_trial {
                let (x, labels) = source.next_batch()?;
                inner_step(
                    (&x, &labels),
                    &mut model,
                    &lambda,
                    None,
                    &trial_config,
                    &mut noise,
                    step,
                )?;
            }
            evaluate(&model, &lambda, &data.train, Some(&split.val), config.loss)
        })();
        let (val_loss, val_accuracy) = match run {
            Ok(v) => v,
            Err(error) => {
                return Err(Box::new(TrainFailure {
                    error,
                    partial: RunLog {
                        lambda_names: lambda.names(),
                        records: Vec::new(),
                        final_report: None,
                    },
                }))
            }
        };
        trial_records.push(TrialRecord {
            trial,
            lambdas: lambda.constrained_all(),
            val_loss,
            val_accuracy,
        });
        if best.as_ref().is_none_or(|(_, l, _, _)| val_loss < *l) {
            best = Some((trial, val_loss, model, lambda));
        }
    }

    let (best_trial, best_loss, best_model, best_lambda) = best.expect("trials >= 1");
    let final_report = (|| -> Result<FinalReport> {
        let (_, val_accuracy) = evaluate(
            &best_model,
            &best_lambda,
            &data.train,
            Some(&split.val),
            config.loss,
        )?;
        let test = data.test.for_final_evaluation();
        let (_, test_accuracy) = evaluate(&best_model, &best_lambda, test, None, config.loss)?;
        Ok(FinalReport {
            val_loss: best_loss,
            val_accuracy,
            test_accuracy,
            lambdas: best_lambda.constrained_all(),
        })
    })();
    match final_report {
        Ok(report) => Ok(RandomSearchOutcome {
            best: RunLog {
                lambda_names: best_lambda.names(),
                records: Vec::new(),
                final_report: Some(report),
            },
            best_trial,
            trials: trial_records,
        }),
        Err(e) => Err(fail0(e)),
    }
}
