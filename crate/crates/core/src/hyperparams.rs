//! The tunable hyperparameter vector.
//!
//! Gradients flow through the unconstrained raw entries; task-facing code
//! sees constrained values produced by strictly monotone sigmoid transforms,
//! so rates stay in (0,1) and cutout magnitudes stay in (0,max) for any raw
//! value.

use crate::error::{Error, Result};
use crate::tape::{logit, sigmoid, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum HyperParamKind {
    /// Constrained to (0,1) via sigmoid.
    DropoutRate,
    /// Constrained to (0,max) via scaled sigmoid.
    CutoutHoles { max: f64 },
    /// Constrained to (0,max) via scaled sigmoid.
    CutoutLength { max: f64 },
}

impl HyperParamKind {
    pub fn upper_bound(&self) -> f64 {
        match self {
            HyperParamKind::DropoutRate => 1.0,
            HyperParamKind::CutoutHoles { max } | HyperParamKind::CutoutLength { max } => *max,
        }
    }

    pub fn constrain(&self, raw: f64) -> f64 {
        self.upper_bound() * sigmoid(raw)
    }

    pub fn unconstrain(&self, value: f64) -> Result<f64> {
        let max = self.upper_bound();
        if !(value > 0.0 && value < max) {
            return Err(Error::contract(format!(
                "initial value {value} outside (0, {max})"
            )));
        }
        Ok(logit(value / max))
    }
}

#[derive(Clone, Debug)]
pub struct HyperParamSpec {
    pub name: String,
    pub kind: HyperParamKind,
}

impl HyperParamSpec {
    pub fn new(name: impl Into<String>, kind: HyperParamKind) -> Self {
        HyperParamSpec {
            name: name.into(),
            kind,
        }
    }
}

/// Raw hyperparameter vector plus the per-entry transform specifications.
#[derive(Clone, Debug)]
pub struct HyperParamVector {
    raw: Tensor,
    specs: Vec<HyperParamSpec>,
}

impl HyperParamVector {
    /// Build from task-facing initial values (one per spec entry).
    pub fn from_constrained(specs: Vec<HyperParamSpec>, inits: &[f64]) -> Result<Self> {
        if specs.len() != inits.len() {
            return Err(Error::contract(format!(
                "{} specs vs {} initial values",
                specs.len(),
                inits.len()
            )));
        }
        if specs.is_empty() {
            return Err(Error::contract("hyperparameter vector cannot be empty"));
        }
        let raw: Result<Vec<f64>> = specs
            .iter()
            .zip(inits)
            .map(|(s, &v)| s.kind.unconstrain(v))
            .collect();
        Ok(HyperParamVector {
            raw: Tensor::new(vec![specs.len()], raw?)?,
            specs,
        })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn raw(&self) -> &Tensor {
        &self.raw
    }

    pub fn raw_mut(&mut self) -> &mut Tensor {
        &mut self.raw
    }

    pub fn specs(&self) -> &[HyperParamSpec] {
        &self.specs
    }

    pub fn names(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.name.clone()).collect()
    }

    pub fn constrained(&self, i: usize) -> f64 {
        self.specs[i].kind.constrain(self.raw.data()[i])
    }

    pub fn constrained_all(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.constrained(i)).collect()
    }
}

/// Tape wiring of the hyperparameter vector for one forward pass.
pub struct LambdaNodes {
    /// Raw vector node (leaf when the pass differentiates hyperparameters).
    pub raw: NodeId,
    /// Raw vector reshaped to a column for the hypernetwork gate product.
    pub raw_col: NodeId,
    /// Constrained scalar node per entry, in spec order.
    pub constrained: Vec<NodeId>,
}

/// Put the hyperparameter vector on a tape.
///
/// `differentiable` decides whether the raw vector is a leaf (outer steps)
/// or a constant (inner steps and plain evaluation).
pub fn wire_lambda(
    tape: &mut Tape,
    params: &HyperParamVector,
    differentiable: bool,
) -> Result<LambdaNodes> {
    let raw = if differentiable {
        tape.leaf(params.raw().clone())
    } else {
        tape.constant(params.raw().clone())
    };
    wire_lambda_from(tape, params.specs(), raw)
}

/// Wire the transforms on top of an existing raw vector node.
pub fn wire_lambda_from(
    tape: &mut Tape,
    specs: &[HyperParamSpec],
    raw: NodeId,
) -> Result<LambdaNodes> {
    let n = specs.len();
    if tape.value(raw).shape() != [n] {
        return Err(Error::DimensionMismatch {
            op: "wire_lambda",
            lhs: tape.value(raw).shape().to_vec(),
            rhs: vec![n],
        });
    }
    let raw_col = tape.reshape(raw, vec![n, 1])?;
    let mut constrained = Vec::with_capacity(n);
    for (i, spec) in specs.iter().enumerate() {
        let entry = tape.index(raw, i)?;
        let sig = tape.sigmoid(entry);
        let bound = spec.kind.upper_bound();
        let node = if bound == 1.0 {
            sig
        } else {
            tape.affine(sig, bound, 0.0)
        };
        constrained.push(node);
    }
    Ok(LambdaNodes {
        raw,
        raw_col,
        constrained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transforms_round_trip_and_stay_in_bounds() {
        let kinds = [
            HyperParamKind::DropoutRate,
            HyperParamKind::CutoutHoles { max: 3.0 },
            HyperParamKind::CutoutLength { max: 16.0 },
        ];
        for kind in kinds {
            for v in [0.05, 0.3, 0.73] {
                let value = v * kind.upper_bound();
                let raw = kind.unconstrain(value).unwrap();
                assert!((kind.constrain(raw) - value).abs() < 1e-12);
            }
            // Monotone over the representable training range, always inside
            // the open interval. (Past |raw| ~ 37 the sigmoid saturates in
            // f64.)
            let mut prev = kind.constrain(-30.0);
            for step in -29..=30 {
                let c = kind.constrain(step as f64);
                assert!(c > 0.0 && c < kind.upper_bound());
                assert!(c > prev);
                prev = c;
            }
        }
    }

    #[test]
    fn rejects_out_of_range_inits() {
        let spec = vec![HyperParamSpec::new("dropout0", HyperParamKind::DropoutRate)];
        assert!(HyperParamVector::from_constrained(spec.clone(), &[0.0]).is_err());
        assert!(HyperParamVector::from_constrained(spec.clone(), &[1.0]).is_err());
        assert!(HyperParamVector::from_constrained(spec, &[0.5]).is_ok());
    }

    #[test]
    fn constrained_nodes_match_direct_transforms() {
        let specs = vec![
            HyperParamSpec::new("dropout0", HyperParamKind::DropoutRate),
            HyperParamSpec::new("cutout_length", HyperParamKind::CutoutLength { max: 16.0 }),
        ];
        let hp = HyperParamVector::from_constrained(specs, &[0.35, 6.0]).unwrap();
        let mut tape = Tape::new();
        let nodes = wire_lambda(&mut tape, &hp, true).unwrap();
        for i in 0..hp.len() {
            assert!(
                (tape.value(nodes.constrained[i]).item() - hp.constrained(i)).abs() < 1e-12
            );
        }
    }
}
