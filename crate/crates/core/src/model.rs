//! Hypernetwork best-response layers and the two experiment architectures.
//!
//! Every layer carries an elementary weight `w_e` plus a hypernetwork pair
//! `(w_h1, w_h2)`. The effective weight is affine in the raw hyperparameter
//! vector:
//!
//! ```text
//! W(λ) = w_e + diag(w_h1 · λ_raw) · w_h2
//! ```
//!
//! with the gate applied per output row (per output channel for
//! convolutions). Biases live in `w_e`'s layer only and are not gated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hyperparams::{wire_lambda, HyperParamKind, HyperParamSpec, HyperParamVector, LambdaNodes};
use crate::regularizers::{relaxed_dropout, soft_cutout};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Linear {
        inp: usize,
        out: usize,
    },
    Conv {
        inp_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
    },
}

impl LayerKind {
    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::Linear { inp, out } => vec![out, inp],
            LayerKind::Conv {
                inp_ch,
                out_ch,
                ksize,
                ..
            } => vec![out_ch, inp_ch, ksize, ksize],
        }
    }

    pub fn out_units(&self) -> usize {
        match *self {
            LayerKind::Linear { out, .. } => out,
            LayerKind::Conv { out_ch, .. } => out_ch,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Linear { inp, .. } => inp,
            LayerKind::Conv { inp_ch, ksize, .. } => inp_ch * ksize * ksize,
        }
    }
}

/// Per-layer parameter triple realizing the affine response, plus the
/// ungated bias.
#[derive(Clone, Debug)]
pub struct HyperLayerParams {
    pub kind: LayerKind,
    pub w_e: Tensor,
    pub bias: Tensor,
    /// Maps the raw hyperparameter vector to one gate per output unit.
    pub w_h1: Tensor,
    /// Same shape as `w_e`.
    pub w_h2: Tensor,
}

impl HyperLayerParams {
    pub fn init(kind: LayerKind, n_lambda: usize, rng: &mut ChaCha8Rng) -> Self {
        let wshape = kind.weight_shape();
        let he = (2.0 / kind.fan_in() as f64).sqrt();
        let w_e = Tensor::rand_normal(&wshape, 0.0, he, rng);
        let bias = Tensor::zeros(&[kind.out_units()]);
        let w_h1 = Tensor::rand_normal(&[kind.out_units(), n_lambda], 0.0, 0.1, rng);
        let w_h2 = Tensor::rand_normal(&wshape, 0.0, he, rng);
        HyperLayerParams {
            kind,
            w_e,
            bias,
            w_h1,
            w_h2,
        }
    }

    pub fn validate(&self, n_lambda: usize) -> Result<()> {
        if self.w_e.shape() != self.kind.weight_shape().as_slice() {
            return Err(Error::contract("w_e shape does not match layer kind"));
        }
        if self.w_e.shape() != self.w_h2.shape() {
            return Err(Error::DimensionMismatch {
                op: "hyper_layer",
                lhs: self.w_e.shape().to_vec(),
                rhs: self.w_h2.shape().to_vec(),
            });
        }
        if self.w_h1.shape() != [self.kind.out_units(), n_lambda] {
            return Err(Error::DimensionMismatch {
                op: "hyper_layer",
                lhs: self.w_h1.shape().to_vec(),
                rhs: vec![self.kind.out_units(), n_lambda],
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// 784 → hidden.0 → hidden.1 → 10, three gated linear layers.
    Mlp { hidden: (usize, usize) },
    /// Two gated conv blocks (3x3, stride 1, pad 1, 2x2 max-pool) and a
    /// gated linear head.
    Cnn { channels: (usize, usize) },
}

/// Where the cutout hyperparameters live in the vector, for CNN runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutoutSite {
    pub holes_idx: usize,
    pub length_idx: usize,
}

#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub arch: Architecture,
    /// `(layer index, lambda index)`: dropout applied to that layer's input.
    pub dropout_sites: Vec<(usize, usize)>,
    pub cutout: Option<CutoutSite>,
    pub lambda_specs: Vec<HyperParamSpec>,
    /// Concrete-dropout relaxation temperature.
    pub temperature: f64,
}

pub const IMAGE_SIDE: usize = 28;
pub const NUM_CLASSES: usize = 10;

impl ModelSpec {
    pub fn mlp(hidden: (usize, usize)) -> ModelSpec {
        let lambda_specs = (0..3)
            .map(|i| HyperParamSpec::new(format!("dropout{i}"), HyperParamKind::DropoutRate))
            .collect();
        ModelSpec {
            arch: Architecture::Mlp { hidden },
            dropout_sites: vec![(0, 0), (1, 1), (2, 2)],
            cutout: None,
            lambda_specs,
            temperature: 0.5,
        }
    }

    pub fn cnn(channels: (usize, usize), holes_max: f64, length_max: f64) -> ModelSpec {
        let mut lambda_specs: Vec<HyperParamSpec> = (0..3)
            .map(|i| HyperParamSpec::new(format!("dropout{i}"), HyperParamKind::DropoutRate))
            .collect();
        lambda_specs.push(HyperParamSpec::new(
            "cutout_holes",
            HyperParamKind::CutoutHoles { max: holes_max },
        ));
        lambda_specs.push(HyperParamSpec::new(
            "cutout_length",
            HyperParamKind::CutoutLength { max: length_max },
        ));
        ModelSpec {
            arch: Architecture::Cnn { channels },
            dropout_sites: vec![(0, 0), (1, 1), (2, 2)],
            cutout: Some(CutoutSite {
                holes_idx: 3,
                length_idx: 4,
            }),
            lambda_specs,
            temperature: 0.5,
        }
    }

    pub fn n_lambda(&self) -> usize {
        self.lambda_specs.len()
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        match self.arch {
            Architecture::Mlp { hidden } => vec![
                LayerKind::Linear {
                    inp: IMAGE_SIDE * IMAGE_SIDE,
                    out: hidden.0,
                },
                LayerKind::Linear {
                    inp: hidden.0,
                    out: hidden.1,
                },
                LayerKind::Linear {
                    inp: hidden.1,
                    out: NUM_CLASSES,
                },
            ],
            Architecture::Cnn { channels } => vec![
                LayerKind::Conv {
                    inp_ch: 1,
                    out_ch: channels.0,
                    ksize: 3,
                    stride: 1,
                    pad: 1,
                },
                LayerKind::Conv {
                    inp_ch: channels.0,
                    out_ch: channels.1,
                    ksize: 3,
                    stride: 1,
                    pad: 1,
                },
                LayerKind::Linear {
                    // Two 2x2 pools: 28 -> 14 -> 7.
                    inp: channels.1 * (IMAGE_SIDE / 4) * (IMAGE_SIDE / 4),
                    out: NUM_CLASSES,
                },
            ],
        }
    }

    /// Every lambda entry must be referenced by exactly one site.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_lambda();
        let mut refs = vec![0usize; n];
        for &(layer, idx) in &self.dropout_sites {
            if layer >= self.layer_kinds().len() || idx >= n {
                return Err(Error::contract(format!(
                    "dropout site ({layer},{idx}) out of range"
                )));
            }
            refs[idx] += 1;
        }
        if let Some(c) = self.cutout {
            if c.holes_idx >= n || c.length_idx >= n {
                return Err(Error::contract("cutout site out of range"));
            }
            refs[c.holes_idx] += 1;
            refs[c.length_idx] += 1;
        }
        if let Some(i) = refs.iter().position(|&c| c != 1) {
            return Err(Error::contract(format!(
                "lambda entry {i} referenced {} times, expected exactly once",
                refs[i]
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::contract("temperature must be positive"));
        }
        Ok(())
    }

    /// Hyperparameter vector at the given task-facing initial values.
    pub fn lambda_init(&self, inits: &[f64]) -> Result<HyperParamVector> {
        HyperParamVector::from_constrained(self.lambda_specs.clone(), inits)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<HyperLayerParams>,
}

impl Model {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = spec.n_lambda();
        let layers = spec
            .layer_kinds()
            .into_iter()
            .map(|kind| HyperLayerParams::init(kind, n, &mut rng))
            .collect();
        Ok(Model { spec, layers })
    }

    /// Zero the lambda-to-gate maps so the model degenerates to a plain
    /// network: `W(λ) == w_e` for every λ.
    pub fn disable_hypernet(&mut self) {
        for layer in &mut self.layers {
            layer.w_h1 = Tensor::zeros(layer.w_h1.shape());
        }
    }

    pub fn wire(
        &self,
        tape: &mut Tape,
        lambda: &HyperParamVector,
        weights_differentiable: bool,
        lambda_differentiable: bool,
    ) -> Result<ModelGraph> {
        if lambda.len() != self.spec.n_lambda() {
            return Err(Error::DimensionMismatch {
                op: "wire_lambda",
                lhs: vec![lambda.len()],
                rhs: vec![self.spec.n_lambda()],
            });
        }
        let lambda_nodes = wire_lambda(tape, lambda, lambda_differentiable)?;
        self.wire_with(tape, lambda_nodes, weights_differentiable)
    }

    /// Wire the layers on top of already-wired hyperparameter nodes.
    pub fn wire_with(
        &self,
        tape: &mut Tape,
        lambda_nodes: LambdaNodes,
        weights_differentiable: bool,
    ) -> Result<ModelGraph> {
        let n_lambda = self.spec.n_lambda();
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            layer.validate(n_lambda)?;
            let put = |tape: &mut Tape, t: &Tensor| {
                if weights_differentiable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            };
            layers.push(LayerNodes {
                kind: layer.kind,
                w_e: put(tape, &layer.w_e),
                bias: put(tape, &layer.bias),
                w_h1: put(tape, &layer.w_h1),
                w_h2: put(tape, &layer.w_h2),
            });
        }
        Ok(ModelGraph {
            layers,
            lambda: lambda_nodes,
        })
    }

    /// Logits for a batch node `x` (`[b,784]` or `[b,1,28,28]`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        graph: &ModelGraph,
        x: NodeId,
        mut mode: ForwardMode,
    ) -> Result<NodeId> {
        let batch = tape.value(x).shape()[0];
        match self.spec.arch {
            Architecture::Mlp { .. } => {
                let mut h = if tape.value(x).shape().len() == 2 {
                    x
                } else {
                    tape.reshape(x, vec![batch, IMAGE_SIDE * IMAGE_SIDE])?
                };
                let last = graph.layers.len() - 1;
                for (i, layer) in graph.layers.iter().enumerate() {
                    h = self.apply_dropout_site(tape, graph, h, i, &mut mode)?;
                    h = hyper_forward(tape, layer, h, graph.lambda.raw_col)?;
                    if i < last {
                        h = tape.relu(h);
                    }
                }
                Ok(h)
            }
            Architecture::Cnn { channels } => {
                let mut h = if tape.value(x).shape().len() == 4 {
                    x
                } else {
                    tape.reshape(x, vec![batch, 1, IMAGE_SIDE, IMAGE_SIDE])?
                };
                if let (Some(site), ForwardMode::Train(rng)) = (self.spec.cutout, &mut mode) {
                    h = soft_cutout(
                        tape,
                        h,
                        graph.lambda.constrained[site.holes_idx],
                        graph.lambda.constrained[site.length_idx],
                        rng,
                    )?;
                }
                for (i, layer) in graph.layers.iter().take(2).enumerate() {
                    h = self.apply_dropout_site(tape, graph, h, i, &mut mode)?;
                    h = hyper_forward(tape, layer, h, graph.lambda.raw_col)?;
                    h = tape.relu(h);
                    h = tape.max_pool2(h)?;
                }
                let flat = channels.1 * (IMAGE_SIDE / 4) * (IMAGE_SIDE / 4);
                h = tape.reshape(h, vec![batch, flat])?;
                h = self.apply_dropout_site(tape, graph, h, 2, &mut mode)?;
                hyper_forward(tape, &graph.layers[2], h, graph.lambda.raw_col)
            }
        }
    }

    fn apply_dropout_site(
        &self,
        tape: &mut Tape,
        graph: &ModelGraph,
        x: NodeId,
        layer_index: usize,
        mode: &mut ForwardMode,
    ) -> Result<NodeId> {
        let ForwardMode::Train(rng) = mode else {
            return Ok(x);
        };
        let Some(&(_, lambda_idx)) = self
            .spec
            .dropout_sites
            .iter()
            .find(|(l, _)| *l == layer_index)
        else {
            return Ok(x);
        };
        relaxed_dropout(
            tape,
            x,
            graph.lambda.constrained[lambda_idx],
            self.spec.temperature,
            rng,
        )
    }

    /// Forward plus loss over a labeled batch.
    pub fn loss_graph(
        &self,
        tape: &mut Tape,
        graph: &ModelGraph,
        x: NodeId,
        labels: &[usize],
        kind: LossKind,
        mode: ForwardMode,
    ) -> Result<NodeId> {
        let logits = self.forward(tape, graph, x, mode)?;
        batch_loss(tape, logits, labels, kind)
    }
}

/// Node ids of one wired layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerNodes {
    pub kind: LayerKind,
    pub w_e: NodeId,
    pub bias: NodeId,
    pub w_h1: NodeId,
    pub w_h2: NodeId,
}

/// All node ids of one wired model.
pub struct ModelGraph {
    pub layers: Vec<LayerNodes>,
    pub lambda: LambdaNodes,
}

pub enum ForwardMode<'a> {
    /// Regularizers active, noise drawn from the given stream.
    Train(&'a mut ChaCha8Rng),
    /// Deterministic pass without regularization.
    Eval,
}

/// One gated layer application: `W(λ)·x + bias`, by matmul or conv2d.
pub fn hyper_forward(
    tape: &mut Tape,
    layer: &LayerNodes,
    x: NodeId,
    raw_col: NodeId,
) -> Result<NodeId> {
    let n_cols = tape.value(layer.w_h1).shape()[1];
    let n_raw = tape.value(raw_col).shape()[0];
    if n_cols != n_raw {
        return Err(Error::DimensionMismatch {
            op: "hyper_forward",
            lhs: tape.value(layer.w_h1).shape().to_vec(),
            rhs: tape.value(raw_col).shape().to_vec(),
        });
    }
    let gate_col = tape.matmul(layer.w_h1, raw_col)?;
    let out_units = tape.value(gate_col).shape()[0];
    let gate = tape.reshape(gate_col, vec![out_units])?;
    let hyper = tape.scale_rows(gate, layer.w_h2)?;
    let w_eff = tape.add(layer.w_e, hyper)?;
    match layer.kind {
        LayerKind::Linear { .. } => {
            let wt = tape.transpose(w_eff)?;
            let y = tape.matmul(x, wt)?;
            tape.add_row_vector(y, layer.bias)
        }
        LayerKind::Conv { stride, pad, .. } => {
            let y = tape.conv2d(x, w_eff, stride, pad)?;
            tape.add_channel_bias(y, layer.bias)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Mean over the batch of the summed squared one-hot residual.
    SquaredError,
    /// Mean softmax cross-entropy.
    CrossEntropy,
}

/// Mean per-example loss of `logits[b,10]` against integer labels.
pub fn batch_loss(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[usize],
    kind: LossKind,
) -> Result<NodeId> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::DimensionMismatch {
            op: "batch_loss",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    if labels.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let (b, k) = (shape[0], shape[1]);
    match kind {
        LossKind::CrossEntropy => tape.softmax_cross_entropy(logits, labels),
        LossKind::SquaredError => {
            if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
                return Err(Error::data(format!(
                    "label {bad} out of range for {k} classes"
                )));
            }
            let mut onehot = Tensor::zeros(&[b, k]);
            for (r, &label) in labels.iter().enumerate() {
                onehot.data_mut()[r * k + label] = 1.0;
            }
            let target = tape.constant(onehot);
            let diff = tape.sub(logits, target)?;
            let sq = tape.mul(diff, diff)?;
            let total = tape.sum(sq);
            Ok(tape.affine(total, 1.0 / b as f64, 0.0))
        }
    }
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    debug_assert_eq!(b, labels.len());
    let mut hits = 0usize;
    for r in 0..b {
        let row = &logits.data()[r * k..(r + 1) * k];
        let mut best = 0usize;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == labels[r] {
            hits += 1;
        }
    }
    hits as f64 / b as f64
}
