//! Central finite-difference verification of [`Tape::backward`].

use rand::Rng;

use super::{DiffError, NodeId, Op, Tape, Tensor, ZERO_NORM};
use crate::rng::{self, Stream, StreamRng};

/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
///
/// The floor keeps entries whose true gradient is near zero from turning
/// finite-difference roundoff into a huge ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Builds `trials` graphs with `build`, differentiates each, and compares
/// every gradient entry of the returned leaves to a central difference with
/// step `epsilon`. Returns the worst relative error seen.
pub fn check_gradients<F>(mut build: F, epsilon: f64, trials: usize, seed: u64) -> Result<f64, DiffError>
where
    F: FnMut(&mut StreamRng, &mut Tape) -> Result<(NodeId, Vec<NodeId>), DiffError>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(DiffError::Contract(format!("epsilon {epsilon} outside (0, 1e-3]")));
    }
    if trials == 0 {
        return Err(DiffError::Contract("at least one trial is required".into()));
    }
    let mut rng = rng::stream(seed, Stream::GradCheck);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let mut tape = Tape::new();
        let (loss, leaves) = build(&mut rng, &mut tape)?;
        let grads = tape.backward(loss)?;
        for leaf in leaves {
            let analytic = grads
                .get(leaf)
                .ok_or_else(|| DiffError::Contract(format!("node {} is not a parameter leaf", leaf.index())))?
                .clone();
            let original = tape.value(leaf).clone();
            for k in 0..original.len() {
                let mut plus = original.clone();
                plus.data_mut()[k] += epsilon;
                tape.set_leaf(leaf, plus)?;
                tape.replay()?;
                let f_plus = tape.value(loss).item();

                let mut minus = original.clone();
                minus.data_mut()[k] -= epsilon;
                tape.set_leaf(leaf, minus)?;
                tape.replay()?;
                let f_minus = tape.value(loss).item();

                let numeric = (f_plus - f_minus) / (2.0 * epsilon);
                worst = worst.max(relative_error(analytic.data()[k], numeric));
            }
            tape.set_leaf(leaf, original)?;
            tape.replay()?;
        }
    }
    Ok(worst)
}

fn random_tensor(rng: &mut StreamRng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng::uniform(rng, -1.0, 1.0)).collect())
}

/// Builds one random graph mixing every primitive family on `tape`.
///
/// All shapes are at most 8 wide. Graphs whose non-smooth points (relu and
/// hinge inputs, zero norms, zero distances) fall within `kink_margin` of
/// the evaluation point are rejected and redrawn.
pub fn random_graph(rng: &mut StreamRng, tape: &mut Tape, kink_margin: f64) -> Result<(NodeId, Vec<NodeId>), DiffError> {
    loop {
        let mut candidate = Tape::new();
        let built = build_random(rng, &mut candidate)?;
        if smooth_enough(&candidate, kink_margin) {
            *tape = candidate;
            return Ok(built);
        }
    }
}

fn build_random(rng: &mut StreamRng, tape: &mut Tape) -> Result<(NodeId, Vec<NodeId>), DiffError> {
    let rows = rng.random_range(1..=4);
    let d_in = rng.random_range(2..=8);
    let hidden = rng.random_range(2..=8);
    let mut leaves = Vec::new();
    let mut leaf = |tape: &mut Tape, rng: &mut StreamRng, r: usize, c: usize| {
        let id = tape.param(random_tensor(rng, r, c));
        leaves.push(id);
        id
    };

    let x = leaf(tape, rng, rows, d_in);
    let w1 = leaf(tape, rng, d_in, hidden);
    let b1 = leaf(tape, rng, 1, hidden);
    let mut h = tape.matmul(x, w1)?;
    h = tape.add_row(h, b1)?;
    let mut width = hidden;

    for _ in 0..rng.random_range(2..=5) {
        h = match rng.random_range(0..12) {
            0 => tape.relu(h)?,
            1 => tape.sigmoid(h)?,
            2 => tape.tanh(h)?,
            3 => {
                let t = rng::uniform(rng, 0.5, 3.0);
                tape.softmax(h, t)?
            }
            4 => tape.l2_normalize(h)?,
            5 => {
                let other = leaf(tape, rng, rows, width);
                tape.mul(h, other)?
            }
            6 => {
                let other = leaf(tape, rng, rows, 2);
                width += 2;
                tape.concat(&[h, other])?
            }
            7 => {
                let out = rng.random_range(2..=8);
                let w = leaf(tape, rng, width, out);
                width = out;
                tape.matmul(h, w)?
            }
            8 => {
                let s = leaf(tape, rng, rows, 1);
                tape.scale_rows(h, s)?
            }
            9 => {
                let sq = tape.square(h)?;
                let shifted = tape.add_scalar(sq, 0.5)?;
                tape.sqrt(shifted)?
            }
            10 => {
                let other = leaf(tape, rng, rows, width);
                let d = tape.sub(h, other)?;
                tape.add(d, h)?
            }
            _ => {
                let col = rng.random_range(0..width);
                let c = tape.column(h, col)?;
                let scaled = tape.mul_scalar(c, 1.5)?;
                tape.scale_rows(h, scaled)?
            }
        };
    }

    let loss = match rng.random_range(0..8) {
        0 => tape.mean(h)?,
        1 => tape.sum(h)?,
        2 => {
            let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..width)).collect();
            tape.cross_entropy(h, &targets)?
        }
        3 => {
            let t = Tensor::matrix(rows, width, (0..rows * width).map(|_| f64::from(rng.random_range(0..2u8))).collect());
            tape.bce_with_logits(h, t)?
        }
        4 => {
            let other = leaf(tape, rng, rows, width);
            tape.mse(h, other)?
        }
        5 => {
            let other = leaf(tape, rng, rows, width);
            let c = tape.cosine(h, other)?;
            tape.mean(c)?
        }
        6 => {
            let other = leaf(tape, rng, rows, width);
            let d = tape.euclidean(h, other)?;
            let hinge_in = tape.add_scalar(d, -0.3)?;
            let hinge = tape.hinge(hinge_in)?;
            let rs = tape.row_sum(h)?;
            let total = tape.add(hinge, rs)?;
            tape.sum(total)?
        }
        _ => {
            let s = tape.sigmoid(h)?;
            let l = tape.log(s)?;
            tape.mean(l)?
        }
    };
    Ok((loss, leaves))
}

fn smooth_enough(tape: &Tape, margin: f64) -> bool {
    tape.node_ids().all(|node| {
        match tape.op(node) {
            Op::Relu(a) => tape.value(*a).data().iter().all(|x| x.abs() >= margin),
            Op::L2Normalize(a) => row_norms(tape.value(*a)).all(|n| n >= margin.max(ZERO_NORM)),
            Op::Cosine(a, b) => {
                row_norms(tape.value(*a)).all(|n| n >= margin) && row_norms(tape.value(*b)).all(|n| n >= margin)
            }
            Op::Euclidean(..) => tape.value(node).data().iter().all(|d| *d >= margin),
            _ => true,
        }
    })
}

fn row_norms(t: &Tensor) -> impl Iterator<Item = f64> + '_ {
    (0..t.rows()).map(move |r| t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_epsilon_and_zero_trials() {
        let build = |_: &mut StreamRng, t: &mut Tape| {
            let x = t.param(Tensor::scalar(1.0));
            Ok((x, vec![x]))
        };
        assert!(check_gradients(build, 0.0, 1, 0).is_err());
        assert!(check_gradients(build, 1e-2, 1, 0).is_err());
        assert!(check_gradients(build, 1e-5, 0, 0).is_err());
    }

    #[test]
    fn quadratic_graph_is_exact() {
        let err = check_gradients(
            |rng, t| {
                let x = t.param(random_tensor(rng, 3, 4));
                let w = t.param(random_tensor(rng, 3, 4));
                let p = t.mul(x, w)?;
                let sq = t.square(x)?;
                let s = t.add(p, sq)?;
                let loss = t.sum(s)?;
                Ok((loss, vec![x, w]))
            },
            1e-5,
            10,
            0,
        )
        .unwrap();
        assert!(err < 1e-8, "quadratic error {err}");
    }

    #[test]
    fn relu_graph_away_from_kinks() {
        let err = check_gradients(
            |rng, t| {
                // entries in ±[0.2, 1], far from the kink at 0
                let data = (0..12)
                    .map(|_| {
                        let m = rng::uniform(rng, 0.2, 1.0);
                        if rng.random::<bool>() { m } else { -m }
                    })
                    .collect();
                let x = t.param(Tensor::matrix(3, 4, data));
                let r = t.relu(x)?;
                let s = t.tanh(r)?;
                let loss = t.sum(s)?;
                Ok((loss, vec![x]))
            },
            1e-5,
            10,
            1,
        )
        .unwrap();
        assert!(err < 1e-4, "relu error {err}");
    }

    #[test]
    fn random_mixed_graphs() {
        let err = check_gradients(|rng, t| random_graph(rng, t, 1e-3), 1e-5, 20, 0).unwrap();
        assert!(err < 1e-4, "mixed graph error {err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-6).abs() < 1e-15);
    }
}
