//! Amplitude/phase decomposition of images and the cross-recombination
//! ("exchange") experiment: haze and color style travel with the amplitude
//! spectrum while scene structure travels with the phase.
//!
//! Spectra stay in native DFT index order (no fftshift).

use crate::autodiff::fft::{self, polar, rect};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::image::ImageRGB;

/// Per-channel amplitude and phase planes, both `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumPair {
    pub amplitude: Tensor,
    pub phase: Tensor,
}

/// Whether recombined images are clamped into `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Clamping {
    Clamp,
    /// Leaves the raw inverse transform untouched, so exact identities can be checked.
    Raw,
}

impl SpectrumPair {
    pub fn height(&self) -> usize {
        self.amplitude.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.amplitude.dims()[2]
    }

    /// Largest `|F(u, v) - conj F(-u, -v)|` over all bins, in spectrum units.
    pub fn symmetry_error(&self) -> f32 {
        let (c, h, w) = (self.amplitude.dims()[0], self.height(), self.width());
        let mut worst = 0.0f32;
        for ch in 0..c {
            for u in 0..h {
                for v in 0..w {
                    let i = (ch * h + u) * w + v;
                    let j = (ch * h + (h - u) % h) * w + (w - v) % w;
                    let (r1, i1) = rect(self.amplitude.data()[i], self.phase.data()[i]);
                    let (r2, i2) = rect(self.amplitude.data()[j], self.phase.data()[j]);
                    worst = worst.max((r1 - r2).hypot(i1 + i2));
                }
            }
        }
        worst
    }
}

fn planes_of(t: &Tensor) -> Result<Tensor> {
    let (planes, h, w) = t.planes("spectrum")?;
    t.clone().reshape([planes, h, w])
}

/// Forward transform of every `[H, W]` plane of `t`, in polar form.
pub fn decompose_tensor(t: &Tensor) -> Result<SpectrumPair> {
    let t = planes_of(t)?;
    let (re, im) = fft::fft2(&t)?;
    let (amp, phase): (Vec<f32>, Vec<f32>) = re
        .data()
        .iter()
        .zip(im.data())
        .map(|(&r, &i)| polar(r, i))
        .unzip();
    Ok(SpectrumPair {
        amplitude: Tensor::new(t.dims().to_vec(), amp)?,
        phase: Tensor::new(t.dims().to_vec(), phase)?,
    })
}

pub fn decompose(img: &ImageRGB) -> Result<SpectrumPair> {
    decompose_tensor(&img.to_tensor())
}

/// Inverse transform of a polar spectrum into `[C, H, W]` planes.
///
/// Fails with a numerical-consistency error when the spectrum is not
/// conjugate symmetric, i.e. cannot come from a real image.
pub fn recompose_tensor(spec: &SpectrumPair, clamping: Clamping) -> Result<Tensor> {
    if spec.amplitude.dims() != spec.phase.dims() || spec.amplitude.dims().len() != 3 {
        return Err(Error::shape(
            "recompose",
            format!(
                "amplitude {:?} and phase {:?} must be matching [C, H, W] planes",
                spec.amplitude.dims(),
                spec.phase.dims()
            ),
        ));
    }
    let (re, im): (Vec<f32>, Vec<f32>) = spec
        .amplitude
        .data()
        .iter()
        .zip(spec.phase.data())
        .map(|(&a, &p)| rect(a, p))
        .unzip();
    let dims = spec.amplitude.dims().to_vec();
    let out = fft::ifft2(&Tensor::new(dims.clone(), re)?, &Tensor::new(dims, im)?)?;
    Ok(match clamping {
        Clamping::Clamp => out.map(|v| v.clamp(0.0, 1.0)),
        Clamping::Raw => out,
    })
}

/// Recombines a three-channel spectrum into an image clamped to `[0, 1]`.
pub fn recompose(spec: &SpectrumPair) -> Result<ImageRGB> {
    let planes = recompose_tensor(spec, Clamping::Clamp)?;
    let [c, h, w] = planes.dims()[..] else {
        unreachable!("checked rank")
    };
    if c != 3 {
        return Err(Error::Dimension {
            op: "recompose",
            axis: "channels",
            expected: 3,
            got: c,
        });
    }
    ImageRGB::from_tensor(&planes.reshape([1, 3, h, w])?, 0)
}

/// Cross-recombination on tensors: `(amp(a) + phase(b), amp(b) + phase(a))`.
pub fn exchange_tensors(a: &Tensor, b: &Tensor, clamping: Clamping) -> Result<(Tensor, Tensor)> {
    if a.dims() != b.dims() {
        return Err(Error::Usage(format!(
            "exchange needs equally sized inputs, got {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (sa, sb) = (decompose_tensor(a)?, decompose_tensor(b)?);
    let amp_a_phase_b = SpectrumPair {
        amplitude: sa.amplitude.clone(),
        phase: sb.phase.clone(),
    };
    let amp_b_phase_a = SpectrumPair {
        amplitude: sb.amplitude,
        phase: sa.phase,
    };
    let x = recompose_tensor(&amp_a_phase_b, clamping)?.reshape(a.dims().to_vec())?;
    let y = recompose_tensor(&amp_b_phase_a, clamping)?.reshape(a.dims().to_vec())?;
    Ok((x, y))
}

/// Returns `(amplitude of a with phase of b, amplitude of b with phase of a)`.
pub fn exchange(a: &ImageRGB, b: &ImageRGB) -> Result<(ImageRGB, ImageRGB)> {
    let (x, y) = exchange_tensors(&a.to_tensor(), &b.to_tensor(), Clamping::Clamp)?;
    Ok((ImageRGB::from_tensor(&x, 0)?, ImageRGB::from_tensor(&y, 0)?))
}

/// `log(1 + A)` per channel, scaled so the channel maximum maps to 1.
pub fn amplitude_view(spec: &SpectrumPair) -> Result<ImageRGB> {
    let (h, w) = (spec.height(), spec.width());
    let logs: Vec<f32> = spec.amplitude.data().iter().map(|a| a.ln_1p()).collect();
    let maxes: Vec<f32> = logs
        .chunks_exact(h * w)
        .map(|p| p.iter().copied().fold(0.0, f32::max))
        .collect();
    let planes = Tensor::new(
        [1, spec.amplitude.dims()[0], h, w],
        logs.iter()
            .enumerate()
            .map(|(i, v)| {
                let m = maxes[i / (h * w)];
                if m > 0.0 {
                    v / m
                } else {
                    0.0
                }
            })
            .collect(),
    )?;
    ImageRGB::from_tensor(&planes, 0)
}

/// Phase mapped linearly from `(-pi, pi]` to `[0, 1]`.
pub fn phase_view(spec: &SpectrumPair) -> Result<ImageRGB> {
    let (c, h, w) = (spec.amplitude.dims()[0], spec.height(), spec.width());
    let pi = std::f32::consts::PI;
    let planes = spec
        .phase
        .map(|p| (p + pi) / (2.0 * pi))
        .reshape([1, c, h, w])?;
    ImageRGB::from_tensor(&planes, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(h: usize, w: usize, k: f32) -> ImageRGB {
        ImageRGB::from_fn(h, w, |y, x| {
            let t = (y as f32 * 0.7 + x as f32 * k).sin() * 0.4 + 0.5;
            [t, (t * 3.1).fract(), 1.0 - t]
        })
    }

    #[test]
    fn constant_image_spectrum() {
        let s = decompose(&ImageRGB::filled(6, 10, [0.5, 0.25, 1.0])).unwrap();
        for (c, val) in [0.5f32, 0.25, 1.0].iter().enumerate() {
            let plane = &s.amplitude.data()[c * 60..(c + 1) * 60];
            assert!((plane[0] - val * 60.0).abs() < 1e-4);
            assert!(plane[1..].iter().all(|&a| a < 1e-4));
        }
    }

    #[test]
    fn recompose_special_cases() {
        let mut amp = Tensor::zeros([3, 4, 4]);
        for c in 0..3 {
            amp.data_mut()[c * 16] = 16.0;
        }
        let spec = SpectrumPair {
            amplitude: amp,
            phase: Tensor::zeros([3, 4, 4]),
        };
        assert_eq!(recompose(&spec).unwrap(), ImageRGB::filled(4, 4, [1.0; 3]));
        let zero = SpectrumPair {
            amplitude: Tensor::zeros([3, 4, 4]),
            phase: Tensor::zeros([3, 4, 4]),
        };
        assert_eq!(recompose(&zero).unwrap(), ImageRGB::filled(4, 4, [0.0; 3]));
    }

    #[test]
    fn round_trip_and_symmetry() {
        let img = textured(12, 10, 0.45);
        let s = decompose(&img).unwrap();
        assert!(s.symmetry_error() < 1e-4);
        assert!(s.amplitude.data().iter().all(|&a| a >= 0.0));
        let back = recompose_tensor(&s, Clamping::Raw).unwrap();
        assert!(back.max_abs_diff(&img.to_tensor().reshape([3, 12, 10]).unwrap()) < 1e-5);
    }

    #[test]
    fn asymmetric_spectrum_rejected() {
        let img = textured(8, 8, 0.3);
        let mut s = decompose(&img).unwrap();
        s.phase.data_mut()[1] += 1.0;
        assert!(matches!(recompose(&s), Err(Error::Numerical(_))));
    }

    #[test]
    fn shift_keeps_amplitude_changes_phase() {
        let img = textured(16, 16, 0.9);
        let a = decompose(&img).unwrap();
        let b = decompose(&img.roll(3, 5)).unwrap();
        assert!(a.amplitude.max_abs_diff(&b.amplitude) < 1e-3);
        assert!(a.phase.max_abs_diff(&b.phase) > 0.1);
    }

    #[test]
    fn exchange_rejects_mismatch() {
        let a = textured(8, 8, 0.1);
        let b = textured(8, 10, 0.1);
        assert!(matches!(exchange(&a, &b), Err(Error::Usage(_))));
    }

    #[test]
    fn views_are_in_range() {
        let s = decompose(&textured(8, 8, 0.2)).unwrap();
        let a = amplitude_view(&s).unwrap();
        let p = phase_view(&s).unwrap();
        assert!(a.data().contains(&1.0));
        assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
