//! The registered-op verification suite behind the `gradcheck` command.
//!
//! One entry per differentiable operation plus composite checks for the
//! regularizers, the response-gap graph, the penalized loss, and the
//! end-to-end hyperparameter gradient on a tiny frozen model. Every entry is
//! checked against central finite differences with frozen noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{grad_check, GradientReport};
use crate::error::Result;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Release-gate tolerance for every entry of the standard suite.
pub const STANDARD_TOL: f64 = 1e-4;

pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradientReport,
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

/// Run every registered gradient check.
///
/// `fault_injection` deliberately corrupts the analytic gradient of the
/// named entry before error computation; it exists so the failure path of
/// the release gate can be exercised end to end.
pub fn run_standard_suite(seed: u64, fault_injection: Option<&str>) -> Result<Vec<SuiteEntry>> {
    let h = 1e-5;
    let mut entries: Vec<SuiteEntry> = Vec::new();

    let check = |name: &'static str,
                     points: Vec<Tensor>,
                     build: &dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>|
     -> Result<GradientReport> {
        let mut report = grad_check(&build, &points, h)?;
        if fault_injection == Some(name) {
            // Push the first analytic entry off by a visible margin.
            let leaf = &mut report.leaves[0];
            leaf.analytic.data_mut()[0] += 0.5;
            leaf.max_rel_err = leaf.max_rel_err.max(super::rel_err(
                leaf.analytic.data()[0],
                leaf.numeric.data()[0],
            ));
            report.max_rel_err = report.max_rel_err.max(leaf.max_rel_err);
        }
        Ok(report)
    };

    macro_rules! entry {
        ($name:literal, $points:expr, $build:expr) => {
            let report = check($name, $points, &$build)?;
            entries.push(SuiteEntry {
                name: $name,
                report,
            });
        };
    }

    let mut r = rng(seed, 1);
    entry!("add", vec![t(&[2, 3], &mut r), t(&[2, 3], &mut r)], |tp: &mut Tape,
                                                                 ids: &[NodeId]| {
        let s = tp.add(ids[0], ids[1])?;
        Ok(tp.sum(s))
    });

    let mut r = rng(seed, 2);
    entry!("sub", vec![t(&[2, 3], &mut r), t(&[2, 3], &mut r)], |tp: &mut Tape,
                                                                 ids: &[NodeId]| {
        let s = tp.sub(ids[0], ids[1])?;
        let sq = tp.mul(s, s)?;
        Ok(tp.sum(sq))
    });

    let mut r = rng(seed, 3);
    entry!("mul", vec![t(&[4], &mut r), t(&[4], &mut r)], |tp: &mut Tape,
                                                           ids: &[NodeId]| {
        let m = tp.mul(ids[0], ids[1])?;
        Ok(tp.sum(m))
    });

    let mut r = rng(seed, 4);
    entry!("affine", vec![t(&[5], &mut r)], |tp: &mut Tape, ids: &[NodeId]| {
        let a = tp.affine(ids[0], -2.5, 0.75);
        let sq = tp.mul(a, a)?;
        Ok(tp.sum(sq))
    });

    let mut r = rng(seed, 5);
    entry!(
        "add_scalar",
        vec![t(&[3, 2], &mut r), Tensor::scalar(0.37)],
        |tp: &mut Tape, ids: &[NodeId]| {
            let a = tp.add_scalar(ids[0], ids[1])?;
            let sq = tp.mul(a, a)?;
            Ok(tp.sum(sq))
        }
    );

    let mut r = rng(seed, 6);
    entry!(
        "mul_scalar",
        vec![t(&[3, 2], &mut r), Tensor::scalar(-1.3)],
        |tp: &mut Tape, ids: &[NodeId]| {
            let a = tp.mul_scalar(ids[0], ids[1])?;
            let sq = tp.mul(a, a)?;
            Ok(tp.sum(sq))
        }
    );

    let mut r = rng(seed, 7);
    entry!(
        "recip",
        vec![Tensor::rand_uniform(&[4], 0.5, 2.0, &mut r)],
        |tp: &mut Tape, ids: &[NodeId]| {
            let a = tp.recip(ids[0])?;
            Ok(tp.sum(a))
        }
    );

    let mut r = rng(seed, 8);
    entry!(
        "log",
        vec![Tensor::rand_uniform(&[4], 0.2, 3.0, &mut r)],
        |tp: &mut Tape, ids: &[NodeId]| {
            let a = tp.log(ids[0])?;
            Ok(tp.sum(a))
        }
    );

    let mut r = rng(seed, 9);
    entry!("sigmoid", vec![t(&[6], &mut r)], |tp: &mut Tape, ids: &[NodeId]| {
        let a = tp.sigmoid(ids[0]);
        let sq = tp.mul(a, a)?;
        Ok(tp.sum(sq))
    });

    // Keep ReLU inputs away from the kink where the derivative is undefined.
    let mut r = rng(seed, 10);
    let relu_point = Tensor::rand_uniform(&[8], -1.0, 1.0, &mut r)
        .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    entry!("relu", vec![relu_point], |tp: &mut Tape, ids: &[NodeId]| {
        let a = tp.relu(ids[0]);
        let sq = tp.mul(a, a)?;
        Ok(tp.sum(sq))
    });

    let mut r = rng(seed, 11);
    let abs_point = Tensor::rand_uniform(&[8], -1.0, 1.0, &mut r)
        .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    entry!("abs", vec![abs_point], |tp: &mut Tape, ids: &[NodeId]| {
        let a = tp.abs(ids[0]);
        Ok(tp.sum(a))
    });

    let mut r = rng(seed, 12);
    entry!("transpose", vec![t(&[3, 4], &mut r)], |tp: &mut Tape,
                                                   ids: &[NodeId]| {
        let a = tp.transpose(ids[0])?;
        let sq = tp.mul(a, a)?;
        Ok(tp.sum(sq))
    });

    let mut r = rng(seed, 13);
    entry!(
        "matmul",
        vec![t(&[3, 4], &mut r), t(&[4, 2], &mut r)],
        |tp: &mut Tape, ids: &[NodeId]| {
            let m = tp.matmul(ids[0], ids[1])?;
            Ok(tp.sum(m))
        }
    );

    let mut r = rng(seed, 14);
    entry!(
        "scale_rows",
        vec![t(&[3], &mut r), t(&[3, 5], &mut r)],
        |tp: &mut Tape, ids: &[NodeId]| {
            let m = tp.scale_rows(ids[0], ids[1])?;
            let sq = tp.mul(m, m)?;
            Ok(tp.sum(sq))
        }
    );

    let mut r = rng(seed, 15);
    entry!(
        "add_row_vector",
        vec![t(&[4, 3], &mut r), t(&[3], &mut r)],
        |tp: &mut Tape, ids: &[NodeId]| {
            let m = tp.add_row_vector(ids[0], ids[1])?;
            let sq = tp.mul(m, m)?;
            Ok(tp.sum(sq))
        }
    );

    let mut r = rng(seed, 16);
    entry!(
        "add_channel_bias",
        vec![t(&[2, 3, 2, 2], &mut r), t(&[3], &mut r)],
        |tp: &mut Tape, ids: &[NodeId]| {
            let m = tp.add_channel_bias(ids[0], ids[1])?;
            let sq = tp.mul(m, m)?;
            Ok(tp.sum(sq))
        }
    );

    let mut r = rng(seed, 17);
    entry!(
        "conv2d",
        vec![t(&[2, 3, 8, 8], &mut r), t(&[4, 3, 3, 3], &mut r)],
        |tp: &mut Tape, ids: &[NodeId]| {
            let m = tp.conv2d(ids[0], ids[1], 1, 0)?;
            let sq = tp.mul(m, m)?;
            Ok(tp.sum(sq))
        }
    );

    let mut r = rng(seed, 18);
    entry!(
        "conv2d_strided_padded",
        vec![t(&[1, 2, 7, 7], &mut r), t(&[3, 2, 3, 3], &mut r)],
        |tp: &mut Tape, ids: &[NodeId]| {
            let m = tp.conv2d(ids[0], ids[1], 2, 1)?;
            let sq = tp.mul(m, m)?;
            Ok(tp.sum(sq))
        }
    );

    let mut r = rng(seed, 19);
    entry!("max_pool2", vec![t(&[2, 2, 4, 4], &mut r)], |tp: &mut Tape,
                                                         ids: &[NodeId]| {
        let m = tp.max_pool2(ids[0])?;
        let sq = tp.mul(m, m)?;
        Ok(tp.sum(sq))
    });

    let mut r = rng(seed, 20);
    entry!("reshape", vec![t(&[2, 6], &mut r)], |tp: &mut Tape, ids: &[NodeId]| {
        let m = tp.reshape(ids[0], vec![3, 4])?;
        let sq = tp.mul(m, m)?;
        Ok(tp.sum(sq))
    });

    let mut r = rng(seed, 21);
    entry!("index", vec![t(&[5], &mut r)], |tp: &mut Tape, ids: &[NodeId]| {
        let a = tp.index(ids[0], 3)?;
        let b = tp.mul(a, a)?;
        Ok(tp.sum(b))
    });

    let mut r = rng(seed, 22);
    entry!("sum", vec![t(&[7], &mut r)], |tp: &mut Tape, ids: &[NodeId]| {
        let sq = tp.mul(ids[0], ids[0])?;
        Ok(tp.sum(sq))
    });

    let mut r = rng(seed, 23);
    entry!(
        "softmax_cross_entropy",
        vec![t(&[4, 5], &mut r)],
        |tp: &mut Tape, ids: &[NodeId]| tp.softmax_cross_entropy(ids[0], &[0, 3, 2, 4])
    );

    entries.extend(model_level_entries(seed, fault_injection)?);
    Ok(entries)
}

mod model_checks;
use model_checks::model_level_entries;
