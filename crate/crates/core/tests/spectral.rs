use std::f64::consts::PI;

use dehaze_core::haze::gen_clean_scene;
use dehaze_core::image::ImageRGB;
use dehaze_core::selftest::spectral_suite;
use dehaze_core::spectral::{amplitude_view, decompose, exchange, phase_view, recompose};
use proptest::prelude::*;

/// Direct `O(N^2)` DFT of one channel, `sum f(y, x) exp(-2 pi i (u y / H + v x / W))`.
fn naive_dft(img: &ImageRGB, c: usize, u: usize, v: usize) -> (f64, f64) {
    let (h, w) = (img.height(), img.width());
    let (mut re, mut im) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let f = img.pixel(y, x)[c] as f64;
            let a = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
            re += f * a.cos();
            im += f * a.sin();
        }
    }
    (re, im)
}

fn image(h: usize, w: usize, values: &[f32]) -> ImageRGB {
    ImageRGB::new(h, w, values[..h * w * 3].to_vec()).unwrap()
}

#[test]
fn decomposition_matches_a_direct_dft() {
    let (h, w) = (6, 10);
    let img = ImageRGB::from_fn(h, w, |y, x| {
        let s = (y * 7 + x * 3) as f32;
        [
            (s * 0.37).sin() * 0.5 + 0.5,
            (s * 0.11).cos() * 0.4 + 0.5,
            ((y * x) % 5) as f32 / 5.0,
        ]
    });
    let spec = decompose(&img).unwrap();
    let (amp, phase) = (spec.amplitude.data(), spec.phase.data());
    let mut worst = 0.0f64;
    for c in 0..3 {
        for u in 0..h {
            for v in 0..w {
                let i = (c * h + u) * w + v;
                let (re, im) = naive_dft(&img, c, u, v);
                let (a, p) = (amp[i] as f64, phase[i] as f64);
                worst = worst.max((a * p.cos() - re).hypot(a * p.sin() - im));
            }
        }
    }
    assert!(worst < 1e-4, "{worst}");
    assert!(spec.symmetry_error() < 1e-4);
}

#[test]
fn suite_passes_for_several_seeds() {
    for seed in [1, 2024, 99] {
        for check in spectral_suite(seed).unwrap() {
            assert!(check.passed(), "seed {seed}: {check:?}");
        }
    }
}

#[test]
fn views_are_displayable() {
    let img = gen_clean_scene(3, 32).unwrap();
    let spec = decompose(&img).unwrap();
    for view in [amplitude_view(&spec).unwrap(), phase_view(&spec).unwrap()] {
        assert_eq!((view.height(), view.width()), (32, 32));
        assert!(view.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn recompose_inverts_decompose(
        h in 1usize..12,
        w in 1usize..12,
        values in prop::collection::vec(0.0f32..=1.0, 12 * 12 * 3),
    ) {
        let img = image(h, w, &values);
        let back = recompose(&decompose(&img).unwrap()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn exchanging_an_image_with_itself_changes_nothing(
        values in prop::collection::vec(0.0f32..=1.0, 8 * 8 * 3),
    ) {
        let img = image(8, 8, &values);
        let (x, y) = exchange(&img, &img).unwrap();
        for out in [x, y] {
            for (a, b) in img.data().iter().zip(out.data()) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }
    }
}
