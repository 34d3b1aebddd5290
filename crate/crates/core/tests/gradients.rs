use dehaze_core::autodiff::gradcheck::{grad_check, grad_check_inputs, random_inputs, InputDist};
use dehaze_core::autodiff::{Tape, Var};
use dehaze_core::net::DRN_EPS;
use dehaze_core::selftest::{gradient_suite, GRAD_SEEDS};
use dehaze_core::Result;

type Op = fn(&mut Tape, &[Var]) -> Result<Vec<Var>>;

fn worst(op: Op, shapes: &[&[usize]], dist: InputDist) -> f64 {
    (0..5)
        .map(|seed| grad_check(op, shapes, dist, seed).unwrap().max_rel_err)
        .fold(0.0, f64::max)
}

#[test]
fn conv2d_small() {
    let e = worst(
        |t, v| Ok(vec![t.conv2d(v[0], v[1], v[2], 1, 1)?]),
        &[&[1, 2, 5, 5], &[3, 2, 3, 3], &[3]],
        InputDist::Uniform,
    );
    assert!(e < 1e-4, "{e}");
}

#[test]
fn instance_norm_small() {
    let e = worst(
        |t, v| {
            let o = t.instance_norm(v[0], DRN_EPS)?;
            Ok(vec![o.normalized, o.mean, o.std])
        },
        &[&[1, 3, 6, 6]],
        InputDist::Uniform,
    );
    assert!(e < 1e-4, "{e}");
}

#[test]
fn amp_phase_of_fft2() {
    let e = worst(
        |t, v| {
            let (re, im) = t.fft2(v[0])?;
            let (a, p) = t.amp_phase(re, im)?;
            Ok(vec![a, p])
        },
        &[&[1, 1, 8, 8]],
        InputDist::Uniform,
    );
    assert!(e < 1e-3, "{e}");
}

#[test]
fn structural_ops() {
    let cases: [(&str, Op, &[&[usize]]); 6] = [
        (
            "add",
            |t, v| Ok(vec![t.add(v[0], v[1])?]),
            &[&[2, 3, 4, 4], &[2, 3, 4, 4]],
        ),
        (
            "concat",
            |t, v| Ok(vec![t.concat_channels(&[v[0], v[1]])?]),
            &[&[2, 1, 3, 3], &[2, 2, 3, 3]],
        ),
        (
            "broadcast",
            |t, v| Ok(vec![t.broadcast_spatial(v[0], 3, 5)?]),
            &[&[2, 3]],
        ),
        ("mean", |t, v| Ok(vec![t.mean(v[0])]), &[&[2, 3, 4]]),
        (
            "upsample",
            |t, v| Ok(vec![t.upsample2x(v[0])?]),
            &[&[1, 2, 3, 5]],
        ),
        (
            "downsample",
            |t, v| Ok(vec![t.downsample2x(v[0])?]),
            &[&[1, 2, 4, 6]],
        ),
    ];
    for (name, op, shapes) in cases {
        let e = worst(op, shapes, InputDist::Uniform);
        assert!(e < 1e-3, "{name}: {e}");
    }
}

#[test]
fn kinked_ops_away_from_kinks() {
    let cases: [(&str, Op, &[&[usize]]); 3] = [
        ("relu", |t, v| Ok(vec![t.relu(v[0])]), &[&[3, 4, 4]]),
        ("abs", |t, v| Ok(vec![t.abs(v[0])]), &[&[3, 4, 4]]),
        (
            "l1",
            |t, v| Ok(vec![t.l1(v[0], v[1])?]),
            &[&[3, 4, 4], &[3, 4, 4]],
        ),
    ];
    for (name, op, shapes) in cases {
        let e = worst(op, shapes, InputDist::Separated);
        assert!(e < 1e-3, "{name}: {e}");
    }
}

#[test]
fn catches_a_wrong_gradient() {
    let inputs = random_inputs(&[&[2, 3]], InputDist::Uniform, 0);
    let report = grad_check_inputs(
        |t, v| {
            let y = t.mul(v[0], v[0])?;
            let frozen = t.detach(y);
            Ok(vec![t.add(frozen, v[0])?])
        },
        &inputs,
        0,
    )
    .unwrap();
    assert!(report.max_rel_err > 0.1, "{report:?}");
}

#[test]
fn every_case_over_all_seeds() {
    let checks = gradient_suite(GRAD_SEEDS).unwrap();
    for c in &checks {
        println!("{:<28} {:.3e}", c.name, c.value);
    }
    assert!(checks.iter().all(|c| c.passed()), "{checks:#?}");
}
