//! Central finite-difference checks of recorded gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Default finite-difference step.
pub const FD_STEP: f32 = 3e-3;

/// Lower bound on the gradient scale in the relative error, so that
/// gradients which vanish entirely compare on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// How random inputs are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputDist {
    /// Independent uniform values in `[-1, 1]`.
    Uniform,
    /// A shuffled grid of values in `[-1, 1]` spaced well beyond the
    /// finite-difference step, for ops with min/max or abs kinks.
    Separated,
}

/// Outcome of a check. The error of one input is normwise,
/// `max_k |a_k - n_k| / max(max_k |a_k|, max_k |n_k|)`, and `max_rel_err`
/// is the largest over all inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Input index and element of the largest absolute disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Normwise relative error between an analytic and a numeric gradient.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(REL_ERR_FLOOR, |m, v| m.max(v.abs()));
    let (worst, diff) = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .enumerate()
        .fold((0, 0.0), |best, (k, d)| {
            if d > best.1 || d.is_nan() {
                (k, d)
            } else {
                best
            }
        });
    (diff / scale, worst)
}

pub fn random_tensor(dims: &[usize], dist: InputDist, rng: &mut impl Rng) -> Tensor {
    let n: usize = dims.iter().product();
    match dist {
        InputDist::Uniform => Tensor::from_fn(dims.to_vec(), |_| rng.random_range(-1.0..=1.0)),
        InputDist::Separated => {
            let spacing = 2.0 / n.max(1) as f32;
            let mut vals: Vec<f32> = (0..n).map(|i| -1.0 + spacing * (i as f32 + 0.5)).collect();
            vals.shuffle(rng);
            Tensor::new(dims.to_vec(), vals).expect("extent")
        }
    }
}

type OpUnderTest<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Vec<Var>> + 'a;

/// Projects every output onto fixed random weights and sums, in `f64`.
fn projected(outputs: &[&Tensor], weights: &[Tensor]) -> f64 {
    outputs
        .iter()
        .zip(weights)
        .map(|(o, r)| {
            o.data()
                .iter()
                .zip(r.data())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>()
        })
        .sum()
}

fn evaluate(
    op: &OpUnderTest<'_>,
    inputs: &[Tensor],
    weights: Option<&[Tensor]>,
) -> Result<(Vec<Tensor>, f64)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let outs = op(&mut tape, &vars)?;
    let values: Vec<Tensor> = outs.iter().map(|&o| tape.value(o).clone()).collect();
    let loss = weights.map_or(0.0, |w| projected(&values.iter().collect::<Vec<_>>(), w));
    Ok((values, loss))
}

/// Checks `op` on explicit inputs against central differences of a random
/// linear projection of its outputs.
pub fn grad_check_inputs(
    op: impl Fn(&mut Tape, &[Var]) -> Result<Vec<Var>>,
    inputs: &[Tensor],
    seed: u64,
) -> Result<GradCheckReport> {
    grad_check_inputs_with_step(op, inputs, seed, FD_STEP)
}

/// [`grad_check_inputs`] with an explicit finite-difference step.
pub fn grad_check_inputs_with_step(
    op: impl Fn(&mut Tape, &[Var]) -> Result<Vec<Var>>,
    inputs: &[Tensor],
    seed: u64,
    step: f32,
) -> Result<GradCheckReport> {
    let op: &OpUnderTest<'_> = &op;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let (outputs, _) = evaluate(op, inputs, None)?;
    let weights: Vec<Tensor> = outputs
        .iter()
        .map(|o| random_tensor(o.dims(), InputDist::Uniform, &mut rng))
        .collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let outs = op(&mut tape, &vars)?;
    let mut total = None;
    for (o, r) in outs.iter().zip(&weights) {
        let r = tape.constant(r.clone());
        let prod = tape.mul(*o, r)?;
        let s = tape.sum(prod);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    let loss = total.expect("op produced outputs");
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut perturbed = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*var) {
            Some(g) => g.data().iter().map(|&v| v as f64).collect(),
            None => vec![0.0; inputs[which].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..inputs[which].numel() {
            let x0 = inputs[which].data()[k];
            let (xp, xm) = (x0 + step, x0 - step);
            perturbed[which].data_mut()[k] = xp;
            let (_, lp) = evaluate(op, &perturbed, Some(&weights))?;
            perturbed[which].data_mut()[k] = xm;
            let (_, lm) = evaluate(op, &perturbed, Some(&weights))?;
            perturbed[which].data_mut()[k] = x0;
            numeric.push((lp - lm) / (xp as f64 - xm as f64));
        }
        let (err, k) = relative_error(&analytic, &numeric);
        if err > report.max_rel_err || !err.is_finite() {
            report = GradCheckReport {
                max_rel_err: err,
                worst: (which, k),
                analytic: analytic[k],
                numeric: numeric[k],
            };
        }
    }
    Ok(report)
}

/// Draws inputs of the given shapes from `seed` and runs [`grad_check_inputs`].
pub fn grad_check(
    op: impl Fn(&mut Tape, &[Var]) -> Result<Vec<Var>>,
    shapes: &[&[usize]],
    dist: InputDist,
    seed: u64,
) -> Result<GradCheckReport> {
    let inputs = random_inputs(shapes, dist, seed);
    grad_check_inputs(op, &inputs, seed)
}

/// The inputs [`grad_check`] draws for `seed`.
pub fn random_inputs(shapes: &[&[usize]], dist: InputDist, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|s| random_tensor(s, dist, &mut rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normwise_error() {
        let (e, k) = relative_error(&[1.0, 0.0, -2.0], &[1.0, 1e-3, -2.0]);
        assert!((e - 5e-4).abs() < 1e-12);
        assert_eq!(k, 1);
        assert_eq!(relative_error(&[0.0], &[0.0]).0, 0.0);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // relu's gradient is exact; `abs` used as if it were identity is not.
        let ok = grad_check(
            |t, v| Ok(vec![t.relu(v[0])]),
            &[&[4, 4]],
            InputDist::Separated,
            1,
        )
        .unwrap();
        assert!(ok.max_rel_err < 1e-3, "{ok:?}");
        let bad = grad_check_inputs(
            |t, v| {
                let a = t.abs(v[0]);
                let d = t.detach(a);
                // value of |x| but gradient of x
                let s = t.sub(v[0], v[0])?;
                Ok(vec![t.add(d, s)?, v[0]])
            },
            &[Tensor::new([2], vec![-0.5, 0.5]).unwrap()],
            1,
        )
        .unwrap();
        assert!(bad.max_rel_err > 0.1, "{bad:?}");
    }
}
