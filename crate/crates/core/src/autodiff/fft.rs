//! Two-dimensional discrete Fourier transforms over the trailing two axes.
//!
//! The forward transform is unnormalized,
//! `F(u, v) = sum_{h, w} x(h, w) exp(-2 pi i (h u / H + w v / W))`,
//! and the inverse carries the `1 / (H W)` factor. Arbitrary extents are
//! supported (mixed radix with Bluestein fallback), all arithmetic runs in
//! `f64` and results are rounded to `f32` once at the end.

use rustfft::num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Largest imaginary residue tolerated when an inverse transform is expected
/// to produce a real image.
pub const REAL_RESIDUE_TOL: f64 = 1e-3;

fn transform(
    re: &[f32],
    im: Option<&[f32]>,
    planes: usize,
    h: usize,
    w: usize,
    direction: FftDirection,
) -> Vec<Complex<f64>> {
    let mut planner = FftPlanner::<f64>::new();
    let row = planner.plan_fft(w, direction);
    let col = planner.plan_fft(h, direction);
    let mut out: Vec<Complex<f64>> = match im {
        Some(im) => re
            .iter()
            .zip(im)
            .map(|(&r, &i)| Complex::new(r as f64, i as f64))
            .collect(),
        None => re.iter().map(|&r| Complex::new(r as f64, 0.0)).collect(),
    };
    if h == 0 || w == 0 {
        return out;
    }
    let mut scratch = vec![Complex::new(0.0, 0.0); h.max(w)];
    let mut transposed = vec![Complex::new(0.0, 0.0); h * w];
    for plane in out.chunks_exact_mut(h * w) {
        row.process(plane);
        for y in 0..h {
            for x in 0..w {
                transposed[x * h + y] = plane[y * w + x];
            }
        }
        for column in transposed.chunks_exact_mut(h) {
            col.process_with_scratch(column, &mut scratch[..col.get_inplace_scratch_len()]);
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = transposed[x * h + y];
            }
        }
    }
    debug_assert_eq!(out.len(), planes * h * w);
    out
}

fn split(values: &[Complex<f64>], dims: &[usize], scale: f64) -> (Tensor, Tensor) {
    let re = values.iter().map(|c| (c.re * scale) as f32).collect();
    let im = values.iter().map(|c| (c.im * scale) as f32).collect();
    (
        Tensor::new(dims.to_vec(), re).expect("same extent"),
        Tensor::new(dims.to_vec(), im).expect("same extent"),
    )
}

/// Forward transform of a real tensor. Returns `(real, imag)` planes.
///
/// Self-conjugate bins (DC and Nyquist rows and columns) are exactly real,
/// so their phase is 0 or pi rather than depending on rounding noise.
pub fn fft2(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (planes, h, w) = x.planes("fft2")?;
    let mut spec = transform(x.data(), None, planes, h, w, FftDirection::Forward);
    if h > 0 && w > 0 {
        for plane in spec.chunks_exact_mut(h * w) {
            for u in (0..h).filter(|u| 2 * u % h == 0) {
                for v in (0..w).filter(|v| 2 * v % w == 0) {
                    plane[u * w + v].im = 0.0;
                }
            }
        }
    }
    Ok(split(&spec, x.dims(), 1.0))
}

/// Forward transform of a complex tensor given as separate planes.
pub fn fft2_complex(re: &Tensor, im: &Tensor) -> Result<(Tensor, Tensor)> {
    check_pair("fft2", re, im)?;
    let (planes, h, w) = re.planes("fft2")?;
    let spec = transform(
        re.data(),
        Some(im.data()),
        planes,
        h,
        w,
        FftDirection::Forward,
    );
    Ok(split(&spec, re.dims(), 1.0))
}

/// Inverse transform with `1 / (H W)` normalization, keeping both parts.
pub fn ifft2_complex(re: &Tensor, im: &Tensor) -> Result<(Tensor, Tensor)> {
    check_pair("ifft2", re, im)?;
    let (planes, h, w) = re.planes("ifft2")?;
    let out = transform(
        re.data(),
        Some(im.data()),
        planes,
        h,
        w,
        FftDirection::Inverse,
    );
    Ok(split(&out, re.dims(), 1.0 / (h * w).max(1) as f64))
}

/// Inverse transform of a spectrum that should originate from a real signal.
///
/// Fails when the discarded imaginary part exceeds [`REAL_RESIDUE_TOL`].
pub fn ifft2(re: &Tensor, im: &Tensor) -> Result<Tensor> {
    check_pair("ifft2", re, im)?;
    let (planes, h, w) = re.planes("ifft2")?;
    let out = transform(
        re.data(),
        Some(im.data()),
        planes,
        h,
        w,
        FftDirection::Inverse,
    );
    let scale = 1.0 / (h * w).max(1) as f64;
    let residue = out.iter().map(|c| (c.im * scale).abs()).fold(0.0, f64::max);
    if residue > REAL_RESIDUE_TOL {
        return Err(Error::Numerical(format!(
            "inverse transform left imaginary residue {residue:.3e} (> {REAL_RESIDUE_TOL:e}); \
             spectrum is not conjugate symmetric"
        )));
    }
    let data = out.iter().map(|c| (c.re * scale) as f32).collect();
    Tensor::new(re.dims().to_vec(), data)
}

fn check_pair(op: &'static str, re: &Tensor, im: &Tensor) -> Result<()> {
    if re.dims() != im.dims() {
        return Err(Error::shape(
            op,
            format!(
                "real dims {:?} differ from imag dims {:?}",
                re.dims(),
                im.dims()
            ),
        ));
    }
    Ok(())
}

/// Polar form of a complex plane: amplitude and principal phase in `(-pi, pi]`.
///
/// The origin maps to amplitude 0 and phase 0.
pub fn polar(re: f32, im: f32) -> (f32, f32) {
    if re == 0.0 && im == 0.0 {
        return (0.0, 0.0);
    }
    let (r, i) = (re as f64, im as f64);
    let amp = r.hypot(i) as f32;
    let mut phase = i.atan2(r) as f32;
    if phase <= -std::f32::consts::PI {
        phase = std::f32::consts::PI;
    }
    (amp, phase)
}

/// Inverse of [`polar`].
pub fn rect(amp: f32, phase: f32) -> (f32, f32) {
    let (a, p) = (amp as f64, phase as f64);
    ((a * p.cos()) as f32, (a * p.sin()) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_dc_only() {
        let x = Tensor::full([1, 1, 4, 6], 2.5);
        let (re, im) = fft2(&x).unwrap();
        assert_eq!(re.data()[0], 2.5 * 24.0);
        for k in 1..24 {
            assert!(re.data()[k].abs() < 1e-5 && im.data()[k].abs() < 1e-5);
        }
        assert!(im.data()[0].abs() < 1e-6);
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut x = Tensor::zeros([5, 7]);
        x.data_mut()[0] = 1.0;
        let (re, im) = fft2(&x).unwrap();
        assert!(re.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        assert!(im.data().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn inverse_of_zero_and_dc() {
        let z = Tensor::zeros([3, 4]);
        assert_eq!(ifft2(&z, &z).unwrap(), z);
        let mut re = Tensor::zeros([3, 4]);
        re.data_mut()[0] = 12.0;
        let x = ifft2(&re, &z).unwrap();
        assert!(x.data().iter().all(|&v| (v - 1.0).abs() < 1e-7));
    }

    #[test]
    fn asymmetric_spectrum_is_rejected() {
        let re = Tensor::zeros([4, 4]);
        let mut im = Tensor::zeros([4, 4]);
        im.data_mut()[1] = 1.0;
        assert!(matches!(ifft2(&re, &im), Err(Error::Numerical(_))));
    }

    #[test]
    fn polar_conventions() {
        let (a, p) = polar(3.0, 4.0);
        assert_eq!(a, 5.0);
        assert!((p - 0.927_295_2).abs() < 1e-6);
        assert_eq!(polar(0.0, 0.0), (0.0, 0.0));
        assert_eq!(polar(-0.0, -0.0), (0.0, 0.0));
        assert_eq!(polar(-1.0, -0.0).1, std::f32::consts::PI);
        let (r, i) = rect(5.0, p);
        assert!((r - 3.0).abs() < 1e-5 && (i - 4.0).abs() < 1e-5);
    }
}
