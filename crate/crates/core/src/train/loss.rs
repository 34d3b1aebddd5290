//! Unsupervised adaptation losses and the supervised source loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::{dark_channel_on_tape, vs_on_tape};

/// Weights of the phase, amplitude, dark channel and color attenuation terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_a: f64,
    pub lambda_d: f64,
    pub lambda_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_p: 1.0,
            lambda_a: 1.0,
            lambda_d: 1e-3,
            lambda_c: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_p: 0.0,
            lambda_a: 0.0,
            lambda_d: 0.0,
            lambda_c: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.lambda_p, self.lambda_a, self.lambda_d, self.lambda_c]
    }

    pub fn validate(&self) -> Result<()> {
        let names = ["lambda_p", "lambda_a", "lambda_d", "lambda_c"];
        for (n, w) in names.iter().zip(self.as_array()) {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight {n} = {w} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }

    /// Weighted sum of plain loss values.
    pub fn combine(&self, parts: &LossParts) -> Result<f64> {
        self.validate()?;
        Ok(self
            .as_array()
            .iter()
            .zip(parts.as_array())
            .map(|(&w, p)| w * p)
            .sum())
    }
}

/// Values of the four adaptation terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub phase: f64,
    pub amplitude: f64,
    pub dcp: f64,
    pub cap: f64,
}

impl LossParts {
    pub fn as_array(&self) -> [f64; 4] {
        [self.phase, self.amplitude, self.dcp, self.cap]
    }
}

/// The four loss terms on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub phase: Var,
    pub amplitude: Var,
    pub dcp: Var,
    pub cap: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossParts {
        let v = |x: Var| tape.value(x).data()[0] as f64;
        LossParts {
            phase: v(self.phase),
            amplitude: v(self.amplitude),
            dcp: v(self.dcp),
            cap: v(self.cap),
        }
    }
}

fn check_pair(tape: &Tape, what: &str, a: Var, b: Var) -> Result<(usize, usize, usize, usize)> {
    let (da, db) = (tape.value(a).dims(), tape.value(b).dims());
    if da != db {
        return Err(Error::Usage(format!(
            "{what}: shapes {da:?} and {db:?} differ"
        )));
    }
    let dims = tape.value(a).nchw("loss")?;
    if dims.2 < 2 || dims.3 == 0 {
        return Err(Error::Usage(format!(
            "{what}: spatial extent {}x{} too small",
            dims.2, dims.3
        )));
    }
    Ok(dims)
}

/// `2 / (U V)` times the L1 distance over rows `u < U/2` of two `[N, C, U, V]`
/// spectra, averaged over the `N C` planes.
pub fn half_spectrum_l1(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (n, c, u, v) = check_pair(tape, "half-spectrum L1", a, b)?;
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    let half = tape.narrow(d, 2, 0, u / 2)?;
    let s = tape.sum(half);
    Ok(tape.scale(s, 2.0 / (u * v * n * c) as f32))
}

fn phase_term(tape: &mut Tape, student: Var, teacher: Var, wrap: bool) -> Result<Var> {
    let (n, c, u, v) = check_pair(tape, "phase loss", student, teacher)?;
    let (sr, si) = tape.fft2(student)?;
    let (_, sp) = tape.amp_phase(sr, si)?;
    let (tr, ti) = tape.fft2(teacher)?;
    let (_, tp) = tape.amp_phase(tr, ti)?;
    if !wrap {
        return half_spectrum_l1(tape, sp, tp);
    }
    let d = tape.sub(sp, tp)?;
    let d = tape.wrap_angle(d);
    let d = tape.abs(d);
    let half = tape.narrow(d, 2, 0, u / 2)?;
    let s = tape.sum(half);
    Ok(tape.scale(s, 2.0 / (u * v * n * c) as f32))
}

/// Structure loss: phase L1 between student and teacher outputs and between
/// every pair of taps, all terms weighted equally.
///
/// With `wrap` set, phase differences are measured as angles in `(-pi, pi]`.
pub fn phase_loss(
    tape: &mut Tape,
    student_out: Var,
    teacher_out: Var,
    student_taps: &[Var],
    teacher_taps: &[Var],
    wrap: bool,
) -> Result<Var> {
    if student_taps.len() != teacher_taps.len() {
        return Err(Error::Usage(format!(
            "phase loss: {} student taps vs {} teacher taps",
            student_taps.len(),
            teacher_taps.len()
        )));
    }
    let mut total = phase_term(tape, student_out, teacher_out, wrap)?;
    for (&s, &t) in student_taps.iter().zip(teacher_taps) {
        let term = phase_term(tape, s, t, wrap)?;
        total = tape.add(total, term)?;
    }
    Ok(tape.scale(total, 1.0 / (1 + student_taps.len()) as f32))
}

/// Style loss: amplitude L1 between the student output and the CLAHE reference.
pub fn amplitude_loss(tape: &mut Tape, student_out: Var, clahe_ref: Var) -> Result<Var> {
    check_pair(tape, "amplitude loss", student_out, clahe_ref)?;
    let (sr, si) = tape.fft2(student_out)?;
    let (sa, _) = tape.amp_phase(sr, si)?;
    let (rr, ri) = tape.fft2(clahe_ref)?;
    let (ra, _) = tape.amp_phase(rr, ri)?;
    half_spectrum_l1(tape, sa, ra)
}

/// Mean of the dark channel.
pub fn dcp_loss(tape: &mut Tape, out: Var, patch: usize) -> Result<Var> {
    let dark = dark_channel_on_tape(tape, out, patch)?;
    Ok(tape.mean(dark))
}

/// Mean of `|V - S|` in HSV.
pub fn cap_loss(tape: &mut Tape, out: Var) -> Result<Var> {
    let (v, s) = vs_on_tape(tape, out)?;
    let d = tape.sub(v, s)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

/// Weighted sum of the four terms. Terms with zero weight are left out of
/// the graph entirely.
pub fn total_loss(tape: &mut Tape, parts: &LossVars, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let terms = [
        (parts.phase, w.lambda_p),
        (parts.amplitude, w.lambda_a),
        (parts.dcp, w.lambda_d),
        (parts.cap, w.lambda_c),
    ];
    let mut total = None;
    for (v, lambda) in terms {
        if !tape.value(v).is_scalar() {
            return Err(Error::Usage("loss terms must be scalars".into()));
        }
        if lambda == 0.0 {
            continue;
        }
        let t = tape.scale(v, lambda as f32);
        total = Some(match total {
            None => t,
            Some(acc) => tape.add(acc, t)?,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => tape.scale(parts.phase, 0.0),
    })
}

/// Mean absolute error, the supervised source-training objective.
pub fn l1_loss(tape: &mut Tape, out: Var, target: Var) -> Result<Var> {
    check_pair(tape, "L1 loss", out, target)?;
    tape.l1(out, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::image::ImageRGB;

    fn textured(seed: usize) -> Tensor {
        Tensor::from_fn([1, 3, 8, 8], |i| ((i + seed) * 37 % 101) as f32 / 101.0)
    }

    fn phase_of(a: &Tensor, b: &Tensor) -> f32 {
        let mut tape = Tape::new();
        let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let l = phase_loss(&mut tape, x, y, &[], &[], false).unwrap();
        tape.value(l).data()[0]
    }

    #[test]
    fn phase_loss_properties() {
        let (a, b) = (textured(0), textured(5));
        assert_eq!(phase_of(&a, &a), 0.0);
        assert!((phase_of(&a, &b) - phase_of(&b, &a)).abs() < 1e-7);
        assert!(phase_of(&a, &a.map(|v| 2.0 * v)) < 1e-5);
        assert!(phase_of(&a, &b) > 0.1);
    }

    #[test]
    fn amplitude_loss_closed_forms() {
        let r = textured(2);
        let eval = |s: &Tensor| {
            let mut tape = Tape::new();
            let (x, y) = (tape.constant(s.clone()), tape.constant(r.clone()));
            let l = amplitude_loss(&mut tape, x, y).unwrap();
            tape.value(l).data()[0] as f64
        };
        assert_eq!(eval(&r), 0.0);
        let shifted = ImageRGB::from_tensor(&r, 0).unwrap().roll(3, 2).to_tensor();
        assert!(eval(&shifted) < 1e-5);
        // zero output: loss is the mean half-spectrum amplitude of the reference
        let spec = crate::spectral::decompose_tensor(&r).unwrap();
        let mut expected = 0.0;
        for c in 0..3 {
            for u in 0..4 {
                for v in 0..8 {
                    expected += spec.amplitude.data()[(c * 8 + u) * 8 + v] as f64;
                }
            }
        }
        expected *= 2.0 / 64.0 / 3.0;
        assert!((eval(&Tensor::zeros([1, 3, 8, 8])) - expected).abs() < 1e-4 * expected);
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([1, 3, 8, 8]));
        let b = tape.constant(Tensor::zeros([1, 3, 8, 4]));
        assert!(matches!(
            amplitude_loss(&mut tape, a, b),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            phase_loss(&mut tape, a, b, &[], &[], false),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn prior_losses_on_flat_images() {
        let eval = |rgb: [f32; 3]| {
            let mut tape = Tape::new();
            let x = tape.constant(ImageRGB::filled(8, 8, rgb).to_tensor());
            let d = dcp_loss(&mut tape, x, 15).unwrap();
            let c = cap_loss(&mut tape, x).unwrap();
            (tape.value(d).data()[0], tape.value(c).data()[0])
        };
        assert_eq!(eval([0.0; 3]).0, 0.0);
        assert_eq!(eval([1.0; 3]).0, 1.0);
        assert_eq!(eval([1.0, 0.0, 0.0]).1, 0.0);
        assert!((eval([0.4; 3]).1 - 0.4).abs() < 1e-7);
    }

    #[test]
    fn weighted_total() {
        let parts = LossParts {
            phase: 0.2,
            amplitude: 0.3,
            dcp: 10.0,
            cap: 20.0,
        };
        assert!((LossWeights::default().combine(&parts).unwrap() - 0.53).abs() < 1e-12);
        assert_eq!(LossWeights::zero().combine(&parts).unwrap(), 0.0);
        let bad = LossWeights {
            lambda_d: -1.0,
            ..Default::default()
        };
        assert!(matches!(bad.combine(&parts), Err(Error::Config(_))));

        let mut tape = Tape::new();
        let v = |t: &mut Tape, x: f64| t.constant(Tensor::scalar(x as f32));
        let vars = LossVars {
            phase: v(&mut tape, 0.2),
            amplitude: v(&mut tape, 0.3),
            dcp: v(&mut tape, 10.0),
            cap: v(&mut tape, 20.0),
        };
        let t = total_loss(&mut tape, &vars, &LossWeights::default()).unwrap();
        assert!((tape.value(t).data()[0] - 0.53).abs() < 1e-6);
        let z = total_loss(&mut tape, &vars, &LossWeights::zero()).unwrap();
        assert_eq!(tape.value(z).data()[0], 0.0);
    }
}
