//! Finite-difference verification of analytic gradients.
//!
//! [`grad_check`] evaluates a scalar-valued graph builder at a point, runs
//! the backward pass, and compares every leaf gradient against central
//! finite differences computed by re-running the builder at perturbed
//! points. Builders must be deterministic: any noise they sample has to come
//! from a seed they own, so repeated invocations see the same realization.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Comparison of analytic and numeric gradients for one leaf.
#[derive(Clone, Debug)]
pub struct LeafCheck {
    pub leaf_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
    /// Elementwise max of |a - f| / max(|a|, |f|, 1e-8).
    pub max_rel_err: f64,
    /// Non-finite analytic entries are flagged here rather than raised.
    pub nonfinite_analytic: bool,
}

#[derive(Clone, Debug)]
pub struct GradientReport {
    pub leaves: Vec<LeafCheck>,
    pub max_rel_err: f64,
    pub any_nonfinite: bool,
}

impl GradientReport {
    pub fn passes(&self, tol: f64) -> bool {
        !self.any_nonfinite && self.max_rel_err <= tol
    }
}

pub fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
}

/// Check the gradients of `build` at `points` with central differences of
/// step `h`.
///
/// `build` receives a fresh tape and one leaf per entry of `points` (in
/// order) and returns the scalar loss node.
pub fn grad_check<F>(build: &F, points: &[Tensor], h: f64) -> Result<GradientReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::contract("grad_check step h must be positive"));
    }
    if points.is_empty() {
        return Err(Error::contract("grad_check needs at least one leaf"));
    }

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        if !tape.value(loss).is_scalar() {
            return Err(Error::contract("grad_check builder must return a scalar"));
        }
        Ok(tape.value(loss).item())
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = points.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;

    let mut leaves = Vec::with_capacity(points.len());
    let mut max_rel = 0.0f64;
    let mut any_nonfinite = false;

    for (li, id) in ids.iter().enumerate() {
        let analytic = grads.expect(*id).clone();
        let mut numeric = Tensor::zeros(points[li].shape());
        let mut leaf_max = 0.0f64;
        for e in 0..points[li].numel() {
            let mut plus = points.to_vec();
            plus[li].data_mut()[e] += h;
            let mut minus = points.to_vec();
            minus[li].data_mut()[e] -= h;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            numeric.data_mut()[e] = fd;
            leaf_max = leaf_max.max(rel_err(analytic.data()[e], fd));
        }
        let nonfinite = !analytic.all_finite();
        any_nonfinite |= nonfinite;
        max_rel = max_rel.max(leaf_max);
        leaves.push(LeafCheck {
            leaf_index: li,
            analytic,
            numeric,
            max_rel_err: leaf_max,
            nonfinite_analytic: nonfinite,
        });
    }

    Ok(GradientReport {
        leaves,
        max_rel_err: max_rel,
        any_nonfinite,
    })
}

mod suite;
pub use suite::{run_standard_suite, SuiteEntry, STANDARD_TOL};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_gradients_at_2_3() {
        // f(x, y) = x*y -> df/dx = y, df/dy = x.
        let build = |tape: &mut Tape, ids: &[NodeId]| tape.mul(ids[0], ids[1]);
        let report = grad_check(
            &build,
            &[Tensor::scalar(2.0), Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!((report.leaves[0].analytic.item() - 3.0).abs() < 1e-12);
        assert!((report.leaves[1].analytic.item() - 2.0).abs() < 1e-12);
        assert!(report.passes(1e-7), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn dead_leaf_gets_zero_on_both_sides() {
        // The second leaf never reaches the loss.
        let build = |tape: &mut Tape, ids: &[NodeId]| {
            let sq = tape.mul(ids[0], ids[0])?;
            Ok(tape.sum(sq))
        };
        let report = grad_check(
            &build,
            &[
                Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(),
                Tensor::scalar(5.0),
            ],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.leaves[1].analytic.data(), &[0.0]);
        assert!(report.leaves[1].numeric.data()[0].abs() < 1e-9);
        // loss = sum(x^2), grad = 2x.
        assert_eq!(report.leaves[0].analytic.data(), &[2.0, 4.0, 6.0]);
        assert!(report.passes(1e-9));
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_k() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 10]));
        let loss = tape.softmax_cross_entropy(logits, &[4]).unwrap();
        assert!((tape.value(loss).item() - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_gradcheck() {
        let labels = vec![0usize, 2, 1];
        let build = move |tape: &mut Tape, ids: &[NodeId]| {
            tape.softmax_cross_entropy(ids[0], &labels)
        };
        let logits = Tensor::new(
            vec![3, 3],
            vec![0.3, -0.7, 1.2, 0.05, 0.9, -1.1, 0.4, 0.41, 0.0],
        )
        .unwrap();
        let report = grad_check(&build, &[logits], 1e-5).unwrap();
        assert!(report.passes(1e-6), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn rejects_bad_step() {
        let build = |tape: &mut Tape, ids: &[NodeId]| Ok(tape.sum(ids[0]));
        assert!(grad_check(&build, &[Tensor::scalar(1.0)], 0.0).is_err());
    }
}
