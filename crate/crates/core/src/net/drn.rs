//! Domain representation normalization.
//!
//! A feature map `X` is split into an instance-normalized part `F` (domain
//! invariant) and the residual `Res = X - F` (domain variant). A 3x3 fusion
//! convolution over `cat(Res, mu, sigma)` produces `DV`, and the output is
//! `Y = F + DV`.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DRN_EPS: f32 = 1e-5;
pub const FUSION_KERNEL: usize = 3;

/// Identity initialization of the fusion conv for `c` channels: the centre
/// tap passes `Res` channel `i` to output `i`; statistic planes and bias start at 0.
pub fn drn_identity(c: usize) -> (Tensor, Tensor) {
    let k = FUSION_KERNEL;
    let mut w = Tensor::zeros([c, 3 * c, k, k]);
    let centre = (k / 2) * k + k / 2;
    for i in 0..c {
        w.data_mut()[(i * 3 * c + i) * k * k + centre] = 1.0;
    }
    (w, Tensor::zeros([c]))
}

/// Forward pass of one module given its fusion `weight` `[C, 3C, 3, 3]` and `bias` `[C]`.
///
/// `Y = F + DV` is evaluated as `X + (DV - Res)`, which is algebraically the
/// same and returns `X` bit for bit at identity initialization.
pub fn drn_forward(tape: &mut Tape, x: Var, weight: Var, bias: Var, eps: f32) -> Result<Var> {
    let (_, c, h, w) = tape.value(x).nchw("drn")?;
    let wc = tape.value(weight).dims()[0];
    if wc != c {
        return Err(Error::Dimension {
            op: "drn",
            axis: "channels",
            expected: wc,
            got: c,
        });
    }
    let norm = tape.instance_norm(x, eps)?;
    let res = tape.sub(x, norm.normalized)?;
    let mu = tape.broadcast_spatial(norm.mean, h, w)?;
    let sigma = tape.broadcast_spatial(norm.std, h, w)?;
    let cat = tape.concat_channels(&[res, mu, sigma])?;
    let dv = tape.conv2d(cat, weight, bias, 1, FUSION_KERNEL / 2)?;
    let delta = tape.sub(dv, res)?;
    tape.add(x, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{grad_check_inputs_with_step, random_inputs, InputDist};

    #[test]
    fn identity_at_init_is_exact() {
        let x = Tensor::from_fn([2, 4, 6, 6], |i| ((i * 37 % 101) as f32 / 13.0).sin() * 3.0);
        let (w, b) = drn_identity(4);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w);
        let bv = tape.constant(b);
        let y = drn_forward(&mut tape, xv, wv, bv, DRN_EPS).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn constant_channel_statistics() {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::full([1, 1, 4, 4], 0.7));
        let norm = tape.instance_norm(xv, DRN_EPS).unwrap();
        let res = tape.sub(xv, norm.normalized).unwrap();
        assert!(tape.value(norm.normalized).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(res).data().iter().all(|&v| v == 0.7));
        assert_eq!(tape.value(norm.mean).data(), &[0.7]);
        assert!((tape.value(norm.std).data()[0] - DRN_EPS.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn channel_mismatch() {
        let (w, b) = drn_identity(3);
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::zeros([1, 4, 4, 4]));
        let wv = tape.constant(w);
        let bv = tape.constant(b);
        assert!(matches!(
            drn_forward(&mut tape, xv, wv, bv, DRN_EPS),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let inputs = random_inputs(&[&[1, 2, 5, 5], &[2, 6, 3, 3], &[2]], InputDist::Uniform, 3);
        let report = grad_check_inputs_with_step(
            |tape, v| {
                let y = drn_forward(tape, v[0], v[1], v[2], DRN_EPS)?;
                let sq = tape.mul(y, y)?;
                Ok(vec![tape.sum(sq)])
            },
            &inputs,
            3,
            1e-2,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }
}
