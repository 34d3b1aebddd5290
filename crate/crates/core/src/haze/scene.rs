//! Procedural clean scenes and depth fields.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DepthField;
use crate::error::{Error, Result};
use crate::image::ImageRGB;

pub const MIN_SCENE_SIZE: usize = 32;

fn check_size(size: usize) -> Result<()> {
    if size < MIN_SCENE_SIZE {
        return Err(Error::Config(format!(
            "scene size {size} must be at least {MIN_SCENE_SIZE}"
        )));
    }
    Ok(())
}

/// HSV to RGB with `h` in `[0, 1)`.
fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.fract() * 6.0).min(5.999_999);
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Saturated, reasonably bright colors: haze-free statistics with a low dark
/// channel and a small value/saturation gap.
fn scene_color(rng: &mut impl Rng) -> [f32; 3] {
    hsv(
        rng.random(),
        rng.random_range(0.7..1.0),
        rng.random_range(0.5..1.0),
    )
}

enum Shape {
    Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
    Ellipse { cy: f32, cx: f32, ry: f32, rx: f32 },
}

impl Shape {
    fn contains(&self, y: f32, x: f32) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

/// Deterministic scene of layered rectangles and ellipses over a smooth
/// two-color gradient, modulated by a low-frequency texture.
pub fn gen_clean_scene(seed: u64, size: usize) -> Result<ImageRGB> {
    check_size(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (top, bottom) = (scene_color(&mut rng), scene_color(&mut rng));
    let n_shapes = rng.random_range(4..10);
    let shapes: Vec<(Shape, [f32; 3])> = (0..n_shapes)
        .map(|_| {
            let cy = rng.random_range(0.0..1.0f32);
            let cx = rng.random_range(0.0..1.0f32);
            let ry = rng.random_range(0.08..0.35f32);
            let rx = rng.random_range(0.08..0.35f32);
            let shape = if rng.random_bool(0.5) {
                Shape::Rect {
                    y0: cy - ry,
                    x0: cx - rx,
                    y1: cy + ry,
                    x1: cx + rx,
                }
            } else {
                Shape::Ellipse { cy, cx, ry, rx }
            };
            (shape, scene_color(&mut rng))
        })
        .collect();
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(1.0..6.0f32),
                rng.random_range(1.0..6.0f32),
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(0.02..0.06f32),
            )
        })
        .collect();
    let inv = 1.0 / size as f32;
    Ok(ImageRGB::from_fn(size, size, |y, x| {
        let (fy, fx) = ((y as f32 + 0.5) * inv, (x as f32 + 0.5) * inv);
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = top[k] + fy * (bottom[k] - top[k]);
        }
        for (shape, color) in &shapes {
            if shape.contains(fy, fx) {
                c = *color;
            }
        }
        let tex: f32 = waves
            .iter()
            .map(|&(ky, kx, ph, amp)| {
                amp * (std::f32::consts::TAU * (ky * fy + kx * fx) + ph).sin()
            })
            .sum();
        c.map(|v| (v * (1.0 + tex)).clamp(0.0, 1.0))
    }))
}

/// Smooth depth: a planar ramp plus a radial bowl, normalized to `[0, 1]`.
pub fn gen_depth(seed: u64, size: usize) -> Result<DepthField> {
    check_size(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = rng.random_range(0.0..std::f32::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    let bowl_weight = rng.random_range(0.0..0.5f32);
    let (cy, cx) = (rng.random_range(0.2..0.8f32), rng.random_range(0.2..0.8f32));
    let inv = 1.0 / size as f32;
    let raw: Vec<f32> = (0..size * size)
        .map(|i| {
            let (fy, fx) = ((i / size) as f32 * inv, (i % size) as f32 * inv);
            let ramp = fy * dy + fx * dx;
            let bowl = (fy - cy).powi(2) + (fx - cx).powi(2);
            ramp + bowl_weight * bowl
        })
        .collect();
    let lo = raw.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = raw.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let data = raw
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    DepthField::new(size, size, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::dark_channel;

    #[test]
    fn scenes_are_deterministic_and_diverse() {
        let a = gen_clean_scene(7, 48).unwrap();
        assert_eq!(a, gen_clean_scene(7, 48).unwrap());
        let b = gen_clean_scene(8, 48).unwrap();
        let differing = a.pixels().zip(b.pixels()).filter(|(p, q)| p != q).count();
        assert!(differing * 2 > 48 * 48, "{differing}");
    }

    #[test]
    fn scenes_have_dark_channels() {
        let mean: f64 = (0..50)
            .map(|s| {
                dark_channel(&gen_clean_scene(s, 64).unwrap(), 15)
                    .unwrap()
                    .mean()
            })
            .sum::<f64>()
            / 50.0;
        assert!(mean < 0.25, "{mean}");
    }

    #[test]
    fn depth_is_normalized_and_smooth() {
        for seed in 0..20 {
            let d = gen_depth(seed, 32).unwrap();
            assert_eq!(d, gen_depth(seed, 32).unwrap());
            let lo = d.data().iter().copied().fold(1.0, f32::min);
            let hi = d.data().iter().copied().fold(0.0, f32::max);
            assert_eq!((lo, hi), (0.0, 1.0));
            let w = d.width();
            for y in 0..d.height() {
                for x in 0..w {
                    let v = d.data()[y * w + x];
                    if x + 1 < w {
                        assert!((v - d.data()[y * w + x + 1]).abs() <= 0.1);
                    }
                    if y + 1 < d.height() {
                        assert!((v - d.data()[(y + 1) * w + x]).abs() <= 0.1);
                    }
                }
            }
        }
    }

    #[test]
    fn small_sizes_rejected() {
        assert!(gen_clean_scene(0, 16).is_err());
        assert!(gen_depth(0, 31).is_err());
    }
}
