//! Response-gap measurement and linearized cutting-plane penalties.
//!
//! The gap `g` is the entrywise L1 discrepancy between each layer's
//! elementary weight and the realized hypernetwork contribution
//! `H(λ) = diag(w_h1·λ_raw)·w_h2`, summed over all layers, with λ frozen at
//! the current raw value. A [`Cut`] snapshots `g`, the parameters, and the
//! subgradients at one training iterate; evaluating it elsewhere gives the
//! affine function
//!
//! ```text
//! φ = g_k + <∂g/∂w_e, w_e - w_e^k> + <∂g/∂w_h, w_h - w_h^k> - ε²
//! ```
//!
//! which is added to the inner loss as `μ·φ` when updating the
//! hypernetwork.

use crate::error::{Error, Result};
use crate::model::{Model, ModelGraph};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Subgradients of the gap for one layer's blocks.
#[derive(Clone, Debug)]
pub struct GapGrads {
    pub w_e: Tensor,
    pub w_h1: Tensor,
    pub w_h2: Tensor,
}

/// Value and per-block subgradients of the response gap.
#[derive(Clone, Debug)]
pub struct ResponseGap {
    pub value: f64,
    pub layers: Vec<GapGrads>,
}

/// Gap and subgradients at the current parameters, with λ frozen.
///
/// Built on a throwaway tape: per layer,
/// `sum(abs(w_e - scale_rows(w_h1·λ, w_h2)))`. The |·| subgradient at zero
/// is taken as 0, so exactly matched entries exert no force.
pub fn response_gap(model: &Model, lambda: &crate::hyperparams::HyperParamVector) -> Result<ResponseGap> {
    if model.layers.is_empty() {
        return Err(Error::contract("model has no layers"));
    }
    let mut tape = Tape::new();
    let raw = tape.constant(lambda.raw().clone());
    let raw_col = tape.reshape(raw, vec![lambda.len(), 1])?;

    let mut leaf_ids = Vec::with_capacity(model.layers.len());
    let mut total: Option<NodeId> = None;
    for layer in &model.layers {
        let w_e = tape.leaf(layer.w_e.clone());
        let w_h1 = tape.leaf(layer.w_h1.clone());
        let w_h2 = tape.leaf(layer.w_h2.clone());
        leaf_ids.push((w_e, w_h1, w_h2));

        let gate_col = tape.matmul(w_h1, raw_col)?;
        let units = tape.value(gate_col).shape()[0];
        let gate = tape.reshape(gate_col, vec![units])?;
        let realized = tape.scale_rows(gate, w_h2)?;
        // Conv weights are 4-D; compare flat against the same layout.
        let flat_len = tape.value(w_e).numel();
        let w_e_flat = tape.reshape(w_e, vec![units, flat_len / units])?;
        let realized_flat = tape.reshape(realized, vec![units, flat_len / units])?;
        let diff = tape.sub(w_e_flat, realized_flat)?;
        let a = tape.abs(diff);
        let s = tape.sum(a);
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let total = total.expect("at least one layer");
    let value = tape.value(total).item();
    if !value.is_finite() {
        return Err(Error::contract("response gap is not finite"));
    }
    let grads = tape.backward(total)?;
    let layers = leaf_ids
        .into_iter()
        .map(|(w_e, w_h1, w_h2)| GapGrads {
            w_e: grads.expect(w_e).clone(),
            w_h1: grads.expect(w_h1).clone(),
            w_h2: grads.expect(w_h2).clone(),
        })
        .collect();
    Ok(ResponseGap { value, layers })
}

#[derive(Clone, Debug)]
struct LayerSnapshot {
    w_e: Tensor,
    w_h1: Tensor,
    w_h2: Tensor,
}

/// Immutable linearization of the gap constraint around one iterate.
#[derive(Clone, Debug)]
pub struct Cut {
    gap: f64,
    eps: f64,
    lambda_raw: Tensor,
    snapshots: Vec<LayerSnapshot>,
    grads: Vec<GapGrads>,
}

impl Cut {
    /// Gap value at the snapshot.
    pub fn gap(&self) -> f64 {
        self.gap
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Raw λ frozen when the cut was built.
    pub fn lambda_raw(&self) -> &Tensor {
        &self.lambda_raw
    }

    /// Snapshot subgradients per layer.
    pub fn grads(&self) -> &[GapGrads] {
        &self.grads
    }
}

/// Linearize the gap at the model's current parameters.
pub fn build_cut(
    model: &Model,
    lambda: &crate::hyperparams::HyperParamVector,
    eps: f64,
) -> Result<Cut> {
    if eps <= 0.0 {
        return Err(Error::contract("cut eps must be positive"));
    }
    let gap = response_gap(model, lambda)?;
    if !gap.value.is_finite() || gap.layers.iter().any(|g| {
        !(g.w_e.all_finite() && g.w_h1.all_finite() && g.w_h2.all_finite())
    }) {
        return Err(Error::contract(
            "non-finite response gap while building cut",
        ));
    }
    let snapshots = model
        .layers
        .iter()
        .map(|l| LayerSnapshot {
            w_e: l.w_e.clone(),
            w_h1: l.w_h1.clone(),
            w_h2: l.w_h2.clone(),
        })
        .collect();
    Ok(Cut {
        gap: gap.value,
        eps,
        lambda_raw: lambda.raw().clone(),
        snapshots,
        grads: gap.layers,
    })
}

/// Evaluate the cut's affine function at the model's current parameters.
pub fn eval_cut(cut: &Cut, model: &Model) -> Result<f64> {
    if cut.snapshots.len() != model.layers.len() {
        return Err(Error::contract(format!(
            "cut built for {} layers, model has {}",
            cut.snapshots.len(),
            model.layers.len()
        )));
    }
    let mut phi = cut.gap - cut.eps * cut.eps;
    for ((layer, snap), grad) in model
        .layers
        .iter()
        .zip(&cut.snapshots)
        .zip(&cut.grads)
    {
        for (current, reference, g) in [
            (&layer.w_e, &snap.w_e, &grad.w_e),
            (&layer.w_h1, &snap.w_h1, &grad.w_h1),
            (&layer.w_h2, &snap.w_h2, &grad.w_h2),
        ] {
            if current.shape() != reference.shape() {
                return Err(Error::DimensionMismatch {
                    op: "eval_cut",
                    lhs: current.shape().to_vec(),
                    rhs: reference.shape().to_vec(),
                });
            }
            for ((c, r), gv) in current
                .data()
                .iter()
                .zip(reference.data())
                .zip(g.data())
            {
                phi += gv * (c - r);
            }
        }
    }
    Ok(phi)
}

impl Cut {
    /// φ as a tape node over a wired model, linear in the parameter nodes.
    pub fn phi_graph(&self, tape: &mut Tape, graph: &ModelGraph) -> Result<NodeId> {
        if self.snapshots.len() != graph.layers.len() {
            return Err(Error::contract(format!(
                "cut built for {} layers, graph has {}",
                self.snapshots.len(),
                graph.layers.len()
            )));
        }
        let mut acc = tape.constant_scalar(self.gap - self.eps * self.eps);
        for ((nodes, snap), grad) in graph
            .layers
            .iter()
            .zip(&self.snapshots)
            .zip(&self.grads)
        {
            for (node, reference, g) in [
                (nodes.w_e, &snap.w_e, &grad.w_e),
                (nodes.w_h1, &snap.w_h1, &grad.w_h1),
                (nodes.w_h2, &snap.w_h2, &grad.w_h2),
            ] {
                if tape.value(node).shape() != reference.shape() {
                    return Err(Error::DimensionMismatch {
                        op: "phi_graph",
                        lhs: tape.value(node).shape().to_vec(),
                        rhs: reference.shape().to_vec(),
                    });
                }
                let snap_node = tape.constant(reference.clone());
                let grad_node = tape.constant(g.clone());
                let diff = tape.sub(node, snap_node)?;
                let prod = tape.mul(grad_node, diff)?;
                let s = tape.sum(prod);
                acc = tape.add(acc, s)?;
            }
        }
        Ok(acc)
    }
}

/// Lagrange-penalty configuration for the constrained inner updates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PenaltyConfig {
    /// Lagrange multiplier on φ; zero disables the pull entirely.
    pub mu: f64,
    pub eps: f64,
    /// How often the cut is rebuilt.
    pub refresh: CutRefresh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CutRefresh {
    /// Rebuild once at the start of every training epoch.
    PerEpoch,
    /// Rebuild every `n` inner steps.
    EverySteps(u64),
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            mu: 0.1,
            eps: 1e-3,
            refresh: CutRefresh::PerEpoch,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::contract("mu must be finite and nonnegative"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::contract("eps must be finite and positive"));
        }
        if let CutRefresh::EverySteps(0) = self.refresh {
            return Err(Error::contract("cut refresh cadence must be nonzero"));
        }
        Ok(())
    }
}

/// Inner loss plus `μ·φ` as one scalar node. Returns `(total, loss, phi)`.
pub fn penalized_inner_loss(
    tape: &mut Tape,
    model: &Model,
    graph: &ModelGraph,
    x: NodeId,
    labels: &[usize],
    kind: crate::model::LossKind,
    mode: crate::model::ForwardMode,
    cut: &Cut,
    penalty: &PenaltyConfig,
) -> Result<(NodeId, NodeId, NodeId)> {
    penalty.validate()?;
    let loss = model.loss_graph(tape, graph, x, labels, kind, mode)?;
    let phi = cut.phi_graph(tape, graph)?;
    let weighted = tape.affine(phi, penalty.mu, 0.0);
    let total = tape.add(loss, weighted)?;
    Ok((total, loss, phi))
}
