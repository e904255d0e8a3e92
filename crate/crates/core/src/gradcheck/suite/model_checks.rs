//! Composite gradient checks: regularizers, gated layers, the gap graph,
//! the penalized inner loss, and the end-to-end hyperparameter gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SuiteEntry;
use crate::cuts::{build_cut, Cut};
use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::hyperparams::wire_lambda_from;
use crate::model::{
    batch_loss, hyper_forward, ForwardMode, LayerKind, LayerNodes, LossKind, Model, ModelGraph,
    ModelSpec,
};
use crate::regularizers::{relaxed_dropout, soft_cutout};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub(super) fn model_level_entries(
    seed: u64,
    fault_injection: Option<&str>,
) -> Result<Vec<SuiteEntry>> {
    let h = 1e-5;
    let mut entries = Vec::new();
    let mut push = |name: &'static str,
                    points: Vec<Tensor>,
                    build: &dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>|
     -> Result<()> {
        let mut report = grad_check(&build, &points, h)?;
        if fault_injection == Some(name) {
            let leaf = &mut report.leaves[0];
            leaf.analytic.data_mut()[0] += 0.5;
            leaf.max_rel_err = leaf.max_rel_err.max(crate::gradcheck::rel_err(
                leaf.analytic.data()[0],
                leaf.numeric.data()[0],
            ));
            report.max_rel_err = report.max_rel_err.max(leaf.max_rel_err);
        }
        entries.push(SuiteEntry { name, report });
        Ok(())
    };

    // Squared-error loss over logits.
    let mut r = rng(seed, 31);
    push(
        "squared_error_loss",
        vec![Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut r)],
        &|tp, ids| batch_loss(tp, ids[0], &[0, 3, 2], LossKind::SquaredError),
    )?;

    // Dropout: gradient of mean(output) w.r.t. the rate with frozen noise.
    let mut r = rng(seed, 32);
    let x_fixed = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut r);
    let noise_seed = seed ^ 0xd00d;
    push(
        "relaxed_dropout",
        vec![x_fixed.clone(), Tensor::scalar(0.35)],
        &move |tp, ids| {
            let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
            let out = relaxed_dropout(tp, ids[0], ids[1], 0.5, &mut noise)?;
            let total = tp.sum(out);
            Ok(tp.affine(total, 1.0 / 12.0, 0.0))
        },
    )?;

    // Cutout: gradients to fractional hole count and edge length with frozen
    // centers. Keep the count away from integers so ceil() is FD-stable.
    let mut r = rng(seed, 33);
    let img = Tensor::rand_uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut r);
    let weights = Tensor::rand_uniform(&[2, 1, 8, 8], -1.0, 1.0, &mut r);
    let centers_seed = seed ^ 0xc0c0;
    push(
        "soft_cutout",
        vec![Tensor::scalar(1.3), Tensor::scalar(3.7)],
        &move |tp, ids| {
            let image = tp.constant(img.clone());
            let w = tp.constant(weights.clone());
            let mut centers = ChaCha8Rng::seed_from_u64(centers_seed);
            let out = soft_cutout(tp, image, ids[0], ids[1], &mut centers)?;
            let weighted = tp.mul(out, w)?;
            Ok(tp.sum(weighted))
        },
    )?;

    // Gated linear layer: all four parameter blocks plus the raw vector.
    let mut r = rng(seed, 34);
    let x_lin = Tensor::rand_uniform(&[5, 4], -1.0, 1.0, &mut r);
    push(
        "hyper_forward_linear",
        vec![
            Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut r),
            Tensor::rand_uniform(&[3], -0.5, 0.5, &mut r),
            Tensor::rand_uniform(&[3, 2], -0.5, 0.5, &mut r),
            Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut r),
            Tensor::rand_uniform(&[2], -1.0, 1.0, &mut r),
        ],
        &move |tp, ids| {
            let x = tp.constant(x_lin.clone());
            let raw_col = tp.reshape(ids[4], vec![2, 1])?;
            let layer = LayerNodes {
                kind: LayerKind::Linear { inp: 4, out: 3 },
                w_e: ids[0],
                bias: ids[1],
                w_h1: ids[2],
                w_h2: ids[3],
            };
            let y = hyper_forward(tp, &layer, x, raw_col)?;
            let sq = tp.mul(y, y)?;
            Ok(tp.sum(sq))
        },
    )?;

    // Gated conv layer.
    let mut r = rng(seed, 35);
    let x_conv = Tensor::rand_uniform(&[2, 1, 6, 6], -1.0, 1.0, &mut r);
    push(
        "hyper_forward_conv",
        vec![
            Tensor::rand_uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut r),
            Tensor::rand_uniform(&[2], -0.5, 0.5, &mut r),
            Tensor::rand_uniform(&[2, 2], -0.5, 0.5, &mut r),
            Tensor::rand_uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut r),
            Tensor::rand_uniform(&[2], -1.0, 1.0, &mut r),
        ],
        &move |tp, ids| {
            let x = tp.constant(x_conv.clone());
            let raw_col = tp.reshape(ids[4], vec![2, 1])?;
            let layer = LayerNodes {
                kind: LayerKind::Conv {
                    inp_ch: 1,
                    out_ch: 2,
                    ksize: 3,
                    stride: 1,
                    pad: 1,
                },
                w_e: ids[0],
                bias: ids[1],
                w_h1: ids[2],
                w_h2: ids[3],
            };
            let y = hyper_forward(tp, &layer, x, raw_col)?;
            let sq = tp.mul(y, y)?;
            Ok(tp.sum(sq))
        },
    )?;

    // The response-gap graph shape: sum(abs(w_e - scale_rows(w_h1·λ, w_h2))).
    let mut r = rng(seed, 36);
    let raw_fixed = Tensor::rand_uniform(&[2], -1.0, 1.0, &mut r);
    push(
        "response_gap_graph",
        vec![
            Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut r),
            Tensor::rand_uniform(&[3, 2], -0.5, 0.5, &mut r),
            Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut r),
        ],
        &move |tp, ids| {
            let raw = tp.constant(raw_fixed.clone());
            let raw_col = tp.reshape(raw, vec![2, 1])?;
            let gate_col = tp.matmul(ids[1], raw_col)?;
            let gate = tp.reshape(gate_col, vec![3])?;
            let realized = tp.scale_rows(gate, ids[2])?;
            let diff = tp.sub(ids[0], realized)?;
            let a = tp.abs(diff);
            Ok(tp.sum(a))
        },
    )?;

    // Penalized inner loss: d(l + μ·φ)/d(w_h1, w_h2) through the graph, on
    // the top two layers of a tiny model with frozen dropout noise.
    let (model, lambda) = tiny_model(seed);
    let cut = build_cut(&model, &lambda, 1e-3)?;
    let batch = small_batch(seed, 3);
    let noise_seed = seed ^ 0xfeed;
    {
        let model = model.clone();
        let lambda = lambda.clone();
        let cut: Cut = cut.clone();
        let (x, labels) = batch.clone();
        push(
            "penalized_inner_loss",
            vec![
                model.layers[1].w_h1.clone(),
                model.layers[1].w_h2.clone(),
                model.layers[2].w_h1.clone(),
                model.layers[2].w_h2.clone(),
            ],
            &move |tp, ids| {
                let graph = wire_partial(tp, &model, &lambda, |layer, block| {
                    match (layer, block) {
                        (1, Block::WH1) => Some(ids[0]),
                        (1, Block::WH2) => Some(ids[1]),
                        (2, Block::WH1) => Some(ids[2]),
                        (2, Block::WH2) => Some(ids[3]),
                        _ => None,
                    }
                })?;
                let xn = tp.constant(x.clone());
                let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
                let loss = model.loss_graph(
                    tp,
                    &graph,
                    xn,
                    &labels,
                    LossKind::CrossEntropy,
                    ForwardMode::Train(&mut noise),
                )?;
                let phi = cut.phi_graph(tp, &graph)?;
                let weighted = tp.affine(phi, 0.1, 0.0);
                tp.add(loss, weighted)
            },
        )?;
    }

    // Inner loss over every parameter block of the tiny model plus the raw
    // hyperparameter vector, all leaves at once.
    {
        let model = model.clone();
        let lambda = lambda.clone();
        let (x, labels) = batch.clone();
        let noise_seed = seed ^ 0xbeef;
        let mut points: Vec<Tensor> = Vec::new();
        for layer in &model.layers {
            points.push(layer.w_e.clone());
            points.push(layer.bias.clone());
            points.push(layer.w_h1.clone());
            points.push(layer.w_h2.clone());
        }
        points.push(lambda.raw().clone());
        push(
            "inner_loss_full_model",
            points,
            &move |tp, ids| {
                let lambda_nodes =
                    wire_lambda_from(tp, lambda.specs(), ids[ids.len() - 1])?;
                let layers = model
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(i, layer)| LayerNodes {
                        kind: layer.kind,
                        w_e: ids[4 * i],
                        bias: ids[4 * i + 1],
                        w_h1: ids[4 * i + 2],
                        w_h2: ids[4 * i + 3],
                    })
                    .collect();
                let graph = ModelGraph {
                    layers,
                    lambda: lambda_nodes,
                };
                let xn = tp.constant(x.clone());
                let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
                model.loss_graph(
                    tp,
                    &graph,
                    xn,
                    &labels,
                    LossKind::CrossEntropy,
                    ForwardMode::Train(&mut noise),
                )
            },
        )?;
    }

    // End-to-end hyperparameter gradient of the mixed loss on a frozen
    // model: λ_raw is the only leaf; both batches and both noise draws are
    // fixed.
    let val_batch = small_batch(seed ^ 0xab, 3);
    {
        let model = model.clone();
        let lambda = lambda.clone();
        let (x_tr, y_tr) = batch.clone();
        let (x_val, y_val) = val_batch.clone();
        let tr_seed = seed ^ 0x7777;
        let val_seed = seed ^ 0x8888;
        push(
            "lambda_hypergradient",
            vec![lambda.raw().clone()],
            &move |tp, ids| {
                let nodes = wire_lambda_from(tp, lambda.specs(), ids[0])?;
                let graph = model.wire_with(tp, nodes, false)?;
                let xn = tp.constant(x_tr.clone());
                let mut noise = ChaCha8Rng::seed_from_u64(tr_seed);
                let l_tr = model.loss_graph(
                    tp,
                    &graph,
                    xn,
                    &y_tr,
                    LossKind::CrossEntropy,
                    ForwardMode::Train(&mut noise),
                )?;
                let xv = tp.constant(x_val.clone());
                let mut noise = ChaCha8Rng::seed_from_u64(val_seed);
                let l_val = model.loss_graph(
                    tp,
                    &graph,
                    xv,
                    &y_val,
                    LossKind::CrossEntropy,
                    ForwardMode::Train(&mut noise),
                )?;
                let weighted = tp.affine(l_val, 1.0, 0.0);
                tp.add(l_tr, weighted)
            },
        )?;
    }

    Ok(entries)
}

fn tiny_model(seed: u64) -> (Model, crate::hyperparams::HyperParamVector) {
    let spec = ModelSpec::mlp((6, 5));
    let mut model = Model::init(spec, seed ^ 0x51).expect("valid spec");
    // Scale the gate maps up so no row's gate sits near zero: near-zero
    // gates give near-zero w_h2 gradients whose relative FD error is all
    // noise floor.
    for layer in &mut model.layers {
        layer.w_h1 = layer.w_h1.map(|v| 4.0 * v);
    }
    let lambda = model.spec.lambda_init(&[0.3, 0.4, 0.45]).expect("in range");
    (model, lambda)
}

fn small_batch(seed: u64, b: usize) -> (Tensor, Vec<usize>) {
    let mut r = rng(seed, 40);
    let x = Tensor::rand_uniform(&[b, 784], 0.0, 1.0, &mut r);
    let labels = (0..b).map(|i| (i * 3 + 1) % 10).collect();
    (x, labels)
}

enum Block {
    WH1,
    WH2,
}

/// Wire a model with selected blocks taken from existing leaf nodes and
/// everything else recorded as constants.
fn wire_partial(
    tape: &mut Tape,
    model: &Model,
    lambda: &crate::hyperparams::HyperParamVector,
    pick: impl Fn(usize, Block) -> Option<NodeId>,
) -> Result<ModelGraph> {
    let lambda_nodes = crate::hyperparams::wire_lambda(tape, lambda, false)?;
    let mut layers = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let w_h1 = match pick(i, Block::WH1) {
            Some(id) => id,
            None => tape.constant(layer.w_h1.clone()),
        };
        let w_h2 = match pick(i, Block::WH2) {
            Some(id) => id,
            None => tape.constant(layer.w_h2.clone()),
        };
        layers.push(LayerNodes {
            kind: layer.kind,
            w_e: tape.constant(layer.w_e.clone()),
            bias: tape.constant(layer.bias.clone()),
            w_h1,
            w_h2,
        });
    }
    Ok(ModelGraph {
        layers,
        lambda: lambda_nodes,
    })
}
