//! Gradient and spectral property suites, shared by the `selftest` command
//! and the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

mod reference;

use reference::Term;

use crate::autodiff::gradcheck::{
    grad_check_inputs, grad_check_inputs_with_step, random_inputs, relative_error, InputDist,
};
use crate::autodiff::{fft, Tape, Tensor, Var};
use crate::error::Result;
use crate::haze::{apply_scattering, gen_clean_scene, gen_depth, DomainConfig, PairedSet};
use crate::image::{clahe, ClaheConfig, DEFAULT_DCP_PATCH};
use crate::net::{drn_forward, Checkpoint, ParamSet, SourceNet, StudentNet, TapPoint, DRN_EPS};
use crate::spectral::{decompose_tensor, exchange_tensors, Clamping};
use crate::train::{
    amplitude_loss, cap_loss, dcp_loss, phase_loss, total_loss, LossVars, LossWeights,
};

/// Tolerance on the normwise relative gradient error.
pub const GRAD_TOL: f64 = 1e-3;

/// Finite-difference step for checks whose output is a scalar loss.
pub const LOSS_FD_STEP: f32 = 1e-2;

/// Number of seeds each gradient case runs over.
pub const GRAD_SEEDS: u64 = 10;

/// One measured property: passes when `value < tolerance`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
}

impl Check {
    fn new(suite: &'static str, name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            value,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.value.is_finite() && self.value < self.tolerance
    }
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(Check::passed)
}

type Case = (&'static str, fn(u64) -> Result<f64>);

const GRADIENT_CASES: [Case; 11] = [
    ("conv2d stride 1", conv_stride1),
    ("conv2d stride 2", conv_stride2),
    ("instance_norm", instance_norm),
    ("fft2 + amp_phase", fft_amp_phase),
    ("drn_forward", drn),
    ("phase loss", |s| loss_on_image(s, Term::Phase)),
    ("amplitude loss", |s| loss_on_image(s, Term::Amplitude)),
    ("dcp loss", |s| loss_on_image(s, Term::Dcp(3))),
    ("cap loss", |s| loss_on_image(s, Term::Cap)),
    ("student losses wrt DRN", student_each_loss),
    ("student total loss wrt DRN", student_total),
];

/// Worst normwise relative error of every differentiable operation over
/// seeds `0..seeds`.
pub fn gradient_suite(seeds: u64) -> Result<Vec<Check>> {
    GRADIENT_CASES
        .iter()
        .map(|(name, case)| {
            let mut worst = 0.0f64;
            for seed in 0..seeds {
                let e = case(seed)?;
                worst = if e.is_nan() { e } else { worst.max(e) };
            }
            Ok(Check::new("gradient", *name, worst, GRAD_TOL))
        })
        .collect()
}

fn conv_stride1(seed: u64) -> Result<f64> {
    let inputs = random_inputs(
        &[&[1, 2, 5, 5], &[3, 2, 3, 3], &[3]],
        InputDist::Uniform,
        seed,
    );
    Ok(grad_check_inputs(
        |t, v| Ok(vec![t.conv2d(v[0], v[1], v[2], 1, 1)?]),
        &inputs,
        seed,
    )?
    .max_rel_err)
}

fn conv_stride2(seed: u64) -> Result<f64> {
    let inputs = random_inputs(
        &[&[2, 2, 6, 6], &[2, 2, 3, 3], &[2]],
        InputDist::Uniform,
        seed,
    );
    Ok(grad_check_inputs(
        |t, v| Ok(vec![t.conv2d(v[0], v[1], v[2], 2, 1)?]),
        &inputs,
        seed,
    )?
    .max_rel_err)
}

fn instance_norm(seed: u64) -> Result<f64> {
    let inputs = random_inputs(&[&[1, 3, 6, 6]], InputDist::Uniform, seed);
    let report = grad_check_inputs(
        |t, v| {
            let out = t.instance_norm(v[0], DRN_EPS)?;
            Ok(vec![out.normalized, out.mean, out.std])
        },
        &inputs,
        seed,
    )?;
    Ok(report.max_rel_err)
}

fn fft_amp_phase(seed: u64) -> Result<f64> {
    let inputs = random_inputs(&[&[1, 1, 8, 8]], InputDist::Uniform, seed);
    let report = grad_check_inputs(
        |t, v| {
            let (re, im) = t.fft2(v[0])?;
            let (a, p) = t.amp_phase(re, im)?;
            Ok(vec![a, p])
        },
        &inputs,
        seed,
    )?;
    Ok(report.max_rel_err)
}

fn drn(seed: u64) -> Result<f64> {
    let inputs = random_inputs(
        &[&[1, 2, 5, 5], &[2, 6, 3, 3], &[2]],
        InputDist::Uniform,
        seed,
    );
    let report = grad_check_inputs_with_step(
        |t, v| {
            let y = drn_forward(t, v[0], v[1], v[2], DRN_EPS)?;
            let sq = t.mul(y, y)?;
            Ok(vec![t.sum(sq)])
        },
        &inputs,
        seed,
        LOSS_FD_STEP,
    )?;
    Ok(report.max_rel_err)
}

/// A loss differentiated directly with respect to the `1x3x8x8` image it
/// scores, with values in `[0.1, 1]`, against `f64` reference differences.
fn loss_on_image(seed: u64, term: Term) -> Result<f64> {
    let dims: &[usize] = &[1, 3, 8, 8];
    let image = random_inputs(&[dims], InputDist::Uniform, seed)[0].map(|v| 0.55 + 0.45 * v);
    let reference =
        random_inputs(&[dims], InputDist::Uniform, seed ^ 0x5EED)[0].map(|v| 0.5 + 0.5 * v);

    let mut t = Tape::new();
    let x = t.param(image.clone());
    let r = t.constant(reference.clone());
    let loss = match term {
        Term::Phase => phase_loss(&mut t, x, r, &[], &[], false)?,
        Term::Amplitude => amplitude_loss(&mut t, x, r)?,
        Term::Dcp(patch) => dcp_loss(&mut t, x, patch)?,
        Term::Cap => cap_loss(&mut t, x)?,
    };
    let value = t.value(loss).data()[0] as f64;
    let grads = t.backward(loss)?;
    let analytic: Vec<f64> = match grads.get(x) {
        Some(g) => g.data().iter().map(|&v| v as f64).collect(),
        None => vec![0.0; image.numel()],
    };

    let reference = reference::Map::from_tensor(&reference);
    let mut probe = reference::Map::from_tensor(&image);
    let ref_value = reference::loss_on_map(term, &probe, &reference);
    if let Some(gap) = value_gap(value, ref_value) {
        return Ok(gap);
    }
    let h = REFERENCE_FD_STEP;
    let mut numeric = Vec::with_capacity(analytic.len());
    for k in 0..probe.data.len() {
        let x0 = probe.data[k];
        probe.data[k] = x0 + h;
        let lp = reference::loss_on_map(term, &probe, &reference);
        probe.data[k] = x0 - h;
        let lm = reference::loss_on_map(term, &probe, &reference);
        probe.data[k] = x0;
        numeric.push((lp - lm) / (2.0 * h));
    }
    Ok(relative_error(&analytic, &numeric).0)
}

/// The relative gap between a tape loss value and its reference, as a
/// failing error, when it exceeds [`REFERENCE_VALUE_TOL`].
fn value_gap(tape: f64, reference: f64) -> Option<f64> {
    let gap = (tape - reference).abs() / reference.abs().max(1.0);
    (gap > REFERENCE_VALUE_TOL || gap.is_nan()).then_some(gap.max(GRAD_TOL))
}

/// Step of the `f64` central differences in the end-to-end checks. The
/// network is piecewise smooth, so the step must be small enough that ReLU
/// and phase kinks are almost never crossed.
pub const REFERENCE_FD_STEP: f64 = 1e-6;

/// Relative disagreement tolerated between the tape's `f32` loss values and
/// the `f64` reference at the unperturbed point.
const REFERENCE_VALUE_TOL: f64 = 1e-4;

/// A student built on a randomly initialized source network, with every DRN
/// module perturbed away from the identity. The teacher scores an unrelated
/// crop, so student and teacher phases differ everywhere.
struct StudentFixture {
    teacher: SourceNet,
    student: StudentNet,
    hazy: Tensor,
    teacher_input: Tensor,
    clahe_ref: Tensor,
    bias_names: Vec<String>,
}

fn student_fixture(seed: u64) -> Result<StudentFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Small source noise keeps the output inside (0, 1), so the clamp ahead
    // of the prior losses stays inactive.
    let mut source = SourceNet::init(seed).into_params().into_map();
    perturb(source.values_mut(), 0.01, &mut rng);
    let teacher = SourceNet::from_params(ParamSet::from_map(source))?;
    let ckpt: Checkpoint = teacher.to_checkpoint(seed, 0);
    let mut student = StudentNet::assemble(&ckpt, &TapPoint::ALL)?;
    let mut drn = student.drn_params().clone().into_map();
    perturb(drn.values_mut(), 0.05, &mut rng);
    let bias_names = drn
        .keys()
        .filter(|k| k.ends_with(".bias"))
        .cloned()
        .collect();
    *student.drn_params_mut() = ParamSet::from_map(drn);

    let mut domain = DomainConfig::target(rng.random());
    domain.image_size = 32;
    let sample = PairedSet::generate(&domain, 0, 1)?;
    let patch = sample.hazy[0].crop(8, 8, 16, 16)?;
    let other = sample.hazy[0].crop(0, 16, 16, 16)?;
    let cfg = ClaheConfig {
        tiles: (2, 2),
        ..ClaheConfig::default()
    };
    Ok(StudentFixture {
        teacher,
        student,
        hazy: patch.to_tensor(),
        teacher_input: other.to_tensor(),
        clahe_ref: clahe(&patch, &cfg)?.to_tensor(),
        bias_names,
    })
}

fn perturb<'a>(tensors: impl Iterator<Item = &'a mut Tensor>, std: f32, rng: &mut impl Rng) {
    let noise = Normal::new(0.0f32, std).expect("positive std");
    for t in tensors {
        for v in t.data_mut() {
            *v += noise.sample(rng);
        }
    }
}

/// The student's four loss terms with the DRN biases taken from `biases`.
fn student_losses(f: &StudentFixture, t: &mut Tape, biases: &[Var]) -> Result<LossVars> {
    let (t_out, t_taps) = f.teacher.infer(&f.teacher_input)?;
    let mut b = f.student.bind(t);
    for (name, &v) in f.bias_names.iter().zip(biases) {
        b.drn.replace(name, v)?;
    }
    let x = t.constant(f.hazy.clone());
    let out = f.student.forward(t, &b, x)?;
    let s_taps: Vec<Var> = out.taps.iter().map(|&(_, v)| v).collect();
    let t_taps: Vec<Var> = t_taps.into_iter().map(|(_, v)| t.constant(v)).collect();
    let t_out = t.constant(t_out);
    let r = t.constant(f.clahe_ref.clone());
    let clamped = t.clamp(out.output, 0.0, 1.0);
    Ok(LossVars {
        phase: phase_loss(t, out.output, t_out, &s_taps, &t_taps, false)?,
        amplitude: amplitude_loss(t, out.output, r)?,
        dcp: dcp_loss(t, clamped, DEFAULT_DCP_PATCH)?,
        cap: cap_loss(t, clamped)?,
    })
}

/// Tape gradients of the weighted total loss with respect to each DRN
/// bias, and the loss values.
fn tape_gradients(f: &StudentFixture, weights: &LossWeights) -> Result<(Vec<Vec<f64>>, [f64; 4])> {
    let mut t = Tape::new();
    let vars: Vec<Var> = f
        .bias_names
        .iter()
        .map(|n| Ok(t.param(f.student.drn_params().get(n)?.clone())))
        .collect::<Result<_>>()?;
    let l = student_losses(f, &mut t, &vars)?;
    let terms = [l.phase, l.amplitude, l.dcp, l.cap];
    let values = terms.map(|v| t.value(v).data()[0] as f64);
    let total = total_loss(&mut t, &l, weights)?;
    let grads = t.backward(total)?;
    let g = vars
        .iter()
        .zip(&f.bias_names)
        .map(|(&v, n)| match grads.get(v) {
            Some(g) => Ok(g.data().iter().map(|&x| x as f64).collect()),
            None => Ok(vec![0.0; f.student.drn_params().get(n)?.numel()]),
        })
        .collect::<Result<_>>()?;
    Ok((g, values))
}

/// Per-loss derivatives indexed `[bias][element][loss]`.
type LossDerivatives = Vec<Vec<[f64; 4]>>;

/// Central differences of all four loss terms through the `f64` reference,
/// and the reference loss values.
fn reference_differences(f: &StudentFixture) -> Result<(LossDerivatives, [f64; 4])> {
    let (t_out, t_taps) = f.teacher.infer(&f.teacher_input)?;
    let refs = reference::References {
        output: reference::Map::from_tensor(&t_out),
        taps: t_taps
            .iter()
            .map(|(_, t)| reference::Map::from_tensor(t))
            .collect(),
        clahe: reference::Map::from_tensor(&f.clahe_ref),
    };
    let net = reference::Student {
        source: f.teacher.params(),
        drn: f.student.drn_params(),
    };
    let x = reference::Map::from_tensor(&f.hazy);
    let mut biases: Vec<(String, Vec<f64>)> = f
        .bias_names
        .iter()
        .map(|n| {
            let b = f.student.drn_params().get(n)?;
            Ok((n.clone(), b.data().iter().map(|&v| v as f64).collect()))
        })
        .collect::<Result<_>>()?;
    let eval = |biases: &[(String, Vec<f64>)]| -> Result<[f64; 4]> {
        let (out, taps) = net.forward(&x, biases)?;
        Ok(reference::losses(&out, &taps, &refs, DEFAULT_DCP_PATCH))
    };
    let values = eval(&biases)?;
    let h = REFERENCE_FD_STEP;
    let mut diffs = Vec::with_capacity(biases.len());
    for i in 0..biases.len() {
        let mut per = Vec::with_capacity(biases[i].1.len());
        for k in 0..biases[i].1.len() {
            let x0 = biases[i].1[k];
            biases[i].1[k] = x0 + h;
            let lp = eval(&biases)?;
            biases[i].1[k] = x0 - h;
            let lm = eval(&biases)?;
            biases[i].1[k] = x0;
            per.push(std::array::from_fn(|j| (lp[j] - lm[j]) / (2.0 * h)));
        }
        diffs.push(per);
    }
    Ok((diffs, values))
}

/// Worst normwise error of the tape gradient of each weighted loss
/// combination against the reference differences. A mismatch in the loss
/// values themselves is reported instead when it exceeds its tolerance.
fn student_errors(seed: u64, combos: &[LossWeights]) -> Result<f64> {
    let f = student_fixture(seed)?;
    let (diffs, ref_values) = reference_differences(&f)?;
    let mut worst = 0.0f64;
    for weights in combos {
        let (grads, values) = tape_gradients(&f, weights)?;
        let w = weights.as_array();
        for (&a, &b) in values.iter().zip(&ref_values) {
            if let Some(gap) = value_gap(a, b) {
                return Ok(gap);
            }
        }
        for (g, d) in grads.iter().zip(&diffs) {
            let numeric: Vec<f64> = d
                .iter()
                .map(|l| l.iter().zip(&w).map(|(x, w)| x * w).sum())
                .collect();
            let (err, _) = relative_error(g, &numeric);
            worst = if err.is_nan() { err } else { worst.max(err) };
        }
    }
    Ok(worst)
}

fn student_each_loss(seed: u64) -> Result<f64> {
    let unit = |k: usize| {
        let mut w = LossWeights::zero();
        *[
            &mut w.lambda_p,
            &mut w.lambda_a,
            &mut w.lambda_d,
            &mut w.lambda_c,
        ][k] = 1.0;
        w
    };
    student_errors(seed, &[unit(0), unit(1), unit(2), unit(3)])
}

fn student_total(seed: u64) -> Result<f64> {
    student_errors(seed, &[LossWeights::default()])
}

/// Tolerances of the spectral suite.
pub const ROUND_TRIP_TOL: f64 = 1e-5;
pub const PARSEVAL_TOL: f64 = 1e-4;
pub const SHIFT_TOL: f64 = 1e-5;
pub const EXCHANGE_EXACT_TOL: f64 = 1e-5;
pub const EXCHANGE_CLAMPED_TOL: f64 = 2e-2;

fn uniform(dims: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(dims.to_vec(), |_| rng.random_range(0.0..1.0))
}

/// Largest `|a - b|` relative to the largest entry of `b`.
fn peak_relative(a: &Tensor, b: &Tensor) -> f64 {
    let peak = b
        .data()
        .iter()
        .fold(0.0f32, |m, v| m.max(v.abs()))
        .max(f32::MIN_POSITIVE);
    (a.max_abs_diff(b) / peak) as f64
}

fn roll(t: &Tensor, dy: usize, dx: usize) -> Result<Tensor> {
    let (planes, h, w) = t.planes("roll")?;
    let mut out = vec![0.0; t.numel()];
    for p in 0..planes {
        for y in 0..h {
            for x in 0..w {
                out[(p * h + (y + dy) % h) * w + (x + dx) % w] = t.data()[(p * h + y) * w + x];
            }
        }
    }
    Tensor::new(t.dims().to_vec(), out)
}

/// FFT round trip, Parseval, amplitude shift invariance and the exchange
/// properties on seeded inputs.
pub fn spectral_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let (mut round_trip, mut parseval) = (0.0f64, 0.0f64);
    for dims in [[1, 16, 16], [3, 64, 64], [2, 24, 40], [1, 17, 9]] {
        let x = uniform(&dims, &mut rng);
        let (re, im) = fft::fft2(&x)?;
        round_trip = round_trip.max(fft::ifft2(&re, &im)?.max_abs_diff(&x) as f64);
        let energy: f64 = x.data().iter().map(|&v| (v as f64).powi(2)).sum();
        let spectral: f64 = decompose_tensor(&x)?
            .amplitude
            .data()
            .iter()
            .map(|&a| (a as f64).powi(2))
            .sum();
        let n = (dims[1] * dims[2]) as f64;
        parseval = parseval.max((energy - spectral / n).abs() / energy);
    }
    checks.push(Check::new(
        "spectral",
        "fft round trip (abs)",
        round_trip,
        ROUND_TRIP_TOL,
    ));
    checks.push(Check::new(
        "spectral",
        "parseval (rel)",
        parseval,
        PARSEVAL_TOL,
    ));

    let img = uniform(&[3, 32, 32], &mut rng);
    let amp = decompose_tensor(&img)?.amplitude;
    let mut shift = 0.0f64;
    for _ in 0..20 {
        let (dy, dx) = (rng.random_range(0..32), rng.random_range(0..32));
        shift = shift.max(peak_relative(
            &decompose_tensor(&roll(&img, dy, dx)?)?.amplitude,
            &amp,
        ));
    }
    checks.push(Check::new(
        "spectral",
        "amplitude shift invariance (rel to peak)",
        shift,
        SHIFT_TOL,
    ));

    // One scene under two haze densities. Clamping only perturbs the
    // involution slightly when the two spectra are this close; for unrelated
    // scenes the recombinations leave [0, 1] by a wide margin.
    let clean = gen_clean_scene(rng.random(), 64)?;
    let depth = gen_depth(rng.random(), 64)?;
    let a = apply_scattering(&clean, &depth, 0.6, [0.9; 3])?
        .hazy
        .to_tensor();
    let b = apply_scattering(&clean, &depth, 0.9, [0.9; 3])?
        .hazy
        .to_tensor();

    let (s1, s2) = exchange_tensors(&a, &a, Clamping::Clamp)?;
    let self_ex = s1.max_abs_diff(&a).max(s2.max_abs_diff(&a)) as f64;
    checks.push(Check::new(
        "spectral",
        "exchange(x, x) == (x, x)",
        self_ex,
        EXCHANGE_EXACT_TOL,
    ));

    for (clamping, label, tol) in [
        (Clamping::Raw, "unclamped", EXCHANGE_EXACT_TOL),
        (Clamping::Clamp, "clamped", EXCHANGE_CLAMPED_TOL),
    ] {
        let (ab, ba) = exchange_tensors(&a, &b, clamping)?;
        let donor = peak_relative(
            &decompose_tensor(&ab)?.amplitude,
            &decompose_tensor(&a)?.amplitude,
        )
        .max(peak_relative(
            &decompose_tensor(&ba)?.amplitude,
            &decompose_tensor(&b)?.amplitude,
        ));
        checks.push(Check::new(
            "spectral",
            format!("exchange keeps donor amplitude ({label})"),
            donor,
            tol,
        ));
        let (a2, b2) = exchange_tensors(&ab, &ba, clamping)?;
        let inv = a2.max_abs_diff(&a).max(b2.max_abs_diff(&b)) as f64;
        checks.push(Check::new(
            "spectral",
            format!("exchange involution ({label})"),
            inv,
            tol,
        ));
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_seed_gradients() {
        let checks = gradient_suite(1).unwrap();
        assert_eq!(checks.len(), GRADIENT_CASES.len());
        for c in &checks {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn spectral_properties() {
        let checks = spectral_suite(7).unwrap();
        assert!(all_passed(&checks), "{checks:#?}");
    }

    #[test]
    fn failing_check() {
        assert!(!Check::new("x", "y", 2.0, 1.0).passed());
        assert!(!Check::new("x", "y", f64::NAN, 1.0).passed());
    }
}
