//! Differentiable regularization: concrete-relaxed dropout and soft cutout.
//!
//! Both operators keep their hyperparameters (rate, hole count, hole length)
//! on the gradient path. Sampled noise — uniform draws for dropout masks,
//! hole centers for cutout — is recorded on the tape as constants, so the
//! backward pass and any frozen-noise finite-difference replay agree.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{logit, NodeId, Tape};
use crate::tensor::Tensor;

/// Logistic scale giving the cutout edge a transition width of about one
/// pixel.
const EDGE_SOFTNESS: f64 = 0.25;

/// Concrete-relaxed dropout.
///
/// Per unit, with `u ~ Uniform(0,1)` frozen on the tape:
/// `m = sigmoid((logit(u) + logit(1 - rate)) / temperature)`, output
/// `x ⊙ m / (1 - rate)`. As temperature drops the mask approaches a
/// Bernoulli(1 - rate) keep mask; the rate stays differentiable at any
/// temperature.
pub fn relaxed_dropout(
    tape: &mut Tape,
    x: NodeId,
    rate: NodeId,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let rate_value = tape.value(rate).item();
    if !(rate_value > 0.0 && rate_value < 1.0) {
        return Err(Error::contract(format!(
            "dropout rate {rate_value} outside (0,1)"
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::contract("dropout temperature must be positive"));
    }

    let shape = tape.value(x).shape().to_vec();
    let numel = tape.value(x).numel();
    // logit(u) precomputed; u in the open interval, so the logit is finite.
    let noise: Vec<f64> = (0..numel)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            logit(u)
        })
        .collect();
    let noise = tape.constant(Tensor::new(shape, noise)?);

    // logit(1 - rate) = log(1 - rate) - log(rate).
    let one_minus_rate = tape.affine(rate, -1.0, 1.0);
    let log_keep = tape.log(one_minus_rate)?;
    let log_rate = tape.log(rate)?;
    let logit_keep = tape.sub(log_keep, log_rate)?;

    let shifted = tape.add_scalar(noise, logit_keep)?;
    let z = tape.affine(shifted, 1.0 / temperature, 0.0);
    let mask = tape.sigmoid(z);

    let masked = tape.mul(x, mask)?;
    let inv_keep = tape.recip(one_minus_rate)?;
    tape.mul_scalar(masked, inv_keep)
}

/// Centers of the candidate holes for one image, sampled uniformly over the
/// pixel grid.
fn sample_centers(count: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    (0..count)
        .map(|_| {
            let cy = rng.gen_range(0.0..(h as f64 - 1.0).max(f64::MIN_POSITIVE));
            let cx = rng.gen_range(0.0..(w as f64 - 1.0).max(f64::MIN_POSITIVE));
            (cy, cx)
        })
        .collect()
}

/// Soft square occlusion with differentiable hole count and edge length.
///
/// `ceil(holes)` candidate centers are sampled per image; whole holes get
/// unit weight and the last gets the fractional remainder straight-through,
/// so the occlusion mass is differentiable in `holes`. Each hole is the
/// product of two soft-box profiles `sigmoid((d + L/2)/s) - sigmoid((d -
/// L/2)/s)` in the two image axes, which vanishes identically at zero length
/// and ramps over roughly one pixel at the square's edge. Works on `[c,h,w]`
/// or `[n,c,h,w]` inputs; batched inputs get independent centers per image.
pub fn soft_cutout(
    tape: &mut Tape,
    image: NodeId,
    holes: NodeId,
    length: NodeId,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let shape = tape.value(image).shape().to_vec();
    let (n, h, w) = match shape.len() {
        3 => (1, shape[1], shape[2]),
        4 => (shape[0], shape[2], shape[3]),
        _ => {
            return Err(Error::contract(format!(
                "soft_cutout wants [c,h,w] or [n,c,h,w], got {shape:?}"
            )))
        }
    };
    let holes_value = tape.value(holes).item();
    let length_value = tape.value(length).item();
    if holes_value < 0.0 || length_value < 0.0 {
        return Err(Error::contract(format!(
            "cutout holes {holes_value} / length {length_value} must be nonnegative"
        )));
    }
    if length_value > h.min(w) as f64 {
        return Err(Error::contract(format!(
            "cutout length {length_value} exceeds image extent {}",
            h.min(w)
        )));
    }

    let candidates = holes_value.ceil() as usize;
    if candidates == 0 {
        return Ok(image);
    }
    let whole = holes_value.floor();
    let numel = tape.value(image).numel();
    let per_image = numel / n;

    let half = tape.affine(length, 0.5, 0.0);
    let neg_half = tape.affine(length, -0.5, 0.0);

    let mut keep: Option<NodeId> = None;
    for hole in 0..candidates {
        // Signed distance grids to this hole's center, one center per image,
        // broadcast over channels.
        let mut dy = vec![0.0; numel];
        let mut dx = vec![0.0; numel];
        for img in 0..n {
            let (cy, cx) = sample_centers(1, h, w, rng)[0];
            let base = img * per_image;
            for k in 0..per_image {
                let row = (k / w) % h;
                let col = k % w;
                dy[base + k] = row as f64 - cy;
                dx[base + k] = col as f64 - cx;
            }
        }
        let dy = tape.constant(Tensor::new(shape.clone(), dy)?);
        let dx = tape.constant(Tensor::new(shape.clone(), dx)?);

        let profile = |tape: &mut Tape, d: NodeId| -> Result<NodeId> {
            let lo = tape.add_scalar(d, half)?;
            let lo = tape.affine(lo, 1.0 / EDGE_SOFTNESS, 0.0);
            let lo = tape.sigmoid(lo);
            let hi = tape.add_scalar(d, neg_half)?;
            let hi = tape.affine(hi, 1.0 / EDGE_SOFTNESS, 0.0);
            let hi = tape.sigmoid(hi);
            tape.sub(lo, hi)
        };
        let box_y = profile(tape, dy)?;
        let box_x = profile(tape, dx)?;
        let mask = tape.mul(box_y, box_x)?;

        // Whole holes carry unit weight; the last candidate carries the
        // fractional remainder with unit slope toward `holes`.
        let weighted = if (hole as f64) < whole {
            mask
        } else {
            let frac = tape.affine(holes, 1.0, -whole);
            tape.mul_scalar(mask, frac)?
        };
        let hole_keep = tape.affine(weighted, -1.0, 1.0);
        keep = Some(match keep {
            None => hole_keep,
            Some(prev) => tape.mul(prev, hole_keep)?,
        });
    }

    tape.mul(image, keep.expect("at least one candidate"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rate_node(tape: &mut Tape, rate: f64) -> NodeId {
        tape.constant(Tensor::scalar(rate))
    }

    #[test]
    fn tiny_rate_is_near_identity() {
        // raw lambda -> -8 corresponds to rate = sigmoid(-8) ~ 3.4e-4. The
        // mask saturates to 1 except for uniform draws within a few rate
        // widths of zero, so a fixed seed with unexceptional draws sees the
        // identity to 1e-2.
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[64]));
        let rate = rate_node(&mut tape, crate::tape::sigmoid(-8.0));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let out = relaxed_dropout(&mut tape, x, rate, 0.5, &mut rng).unwrap();
        for (o, i) in tape.value(out).data().iter().zip(tape.value(x).data()) {
            assert!((o - i).abs() / i.abs() < 1e-2, "{o} vs {i}");
        }
    }

    #[test]
    fn mask_mean_matches_keep_probability() {
        // At rate 0.5 the concrete mask is symmetric around 1/2.
        let mut tape = Tape::new();
        let n = 100_000;
        let x = tape.constant(Tensor::ones(&[n]));
        let rate = rate_node(&mut tape, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let out = relaxed_dropout(&mut tape, x, rate, 0.5, &mut rng).unwrap();
        // output = mask / (1 - rate); recover the mask mean.
        let mean_mask: f64 =
            tape.value(out).data().iter().sum::<f64>() / n as f64 * (1.0 - 0.5);
        assert!(
            (0.48..=0.52).contains(&mean_mask),
            "mask mean {mean_mask}"
        );
    }

    #[test]
    fn rejects_degenerate_rate() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[4]));
        let rate = rate_node(&mut tape, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(relaxed_dropout(&mut tape, x, rate, 0.5, &mut rng).is_err());
    }

    #[test]
    fn zero_holes_is_exact_identity() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = tape.constant(Tensor::rand_uniform(&[1, 8, 8], 0.0, 1.0, &mut rng));
        let holes = tape.constant(Tensor::scalar(0.0));
        let length = tape.constant(Tensor::scalar(4.0));
        let out = soft_cutout(&mut tape, img, holes, length, &mut rng).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn zero_length_is_identity_within_1e6() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = tape.constant(Tensor::rand_uniform(&[1, 8, 8], 0.0, 1.0, &mut rng));
        let holes = tape.constant(Tensor::scalar(2.0));
        let length = tape.constant(Tensor::scalar(0.0));
        let out = soft_cutout(&mut tape, img, holes, length, &mut rng).unwrap();
        for (o, i) in tape.value(out).data().iter().zip(tape.value(img).data()) {
            assert!((o - i).abs() < 1e-6);
        }
    }

    #[test]
    fn occluded_mass_of_unit_hole() {
        // One length-4 hole on an all-ones 28x28 image: the soft square has
        // nominal area 16; boundary clipping can only lose mass. The
        // brute-force oracle is the direct sum over the output.
        for seed in [1u64, 2, 3, 9, 17] {
            let mut tape = Tape::new();
            let img = tape.constant(Tensor::ones(&[1, 28, 28]));
            let holes = tape.constant(Tensor::scalar(1.0));
            let length = tape.constant(Tensor::scalar(4.0));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = soft_cutout(&mut tape, img, holes, length, &mut rng).unwrap();
            let occluded: f64 = 784.0 - tape.value(out).data().iter().sum::<f64>();
            assert!(
                (12.0..=25.0).contains(&occluded),
                "seed {seed}: occluded mass {occluded}"
            );
        }
    }

    #[test]
    fn pixels_outside_hole_support_are_untouched() {
        // The sigmoid tails underflow past ~10 pixels from the center, so a
        // 28x28 image always keeps a wide ring of bitwise-identical pixels
        // while the hole region is clearly occluded.
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::ones(&[1, 28, 28]));
        let holes = tape.constant(Tensor::scalar(1.0));
        let length = tape.constant(Tensor::scalar(3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = soft_cutout(&mut tape, img, holes, length, &mut rng).unwrap();
        let exact = tape
            .value(out)
            .data()
            .iter()
            .filter(|v| **v == 1.0)
            .count();
        let occluded = tape
            .value(out)
            .data()
            .iter()
            .filter(|v| **v < 0.5)
            .count();
        assert!(exact >= 200, "exactly-preserved {exact} of 784");
        assert!((4..=25).contains(&occluded), "occluded {occluded}");
    }
}

