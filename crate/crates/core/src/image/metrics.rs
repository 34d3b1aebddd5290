//! Full-reference quality metrics for `[0, 1]` images.

use super::ImageRGB;
use crate::error::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_size(a: &ImageRGB, b: &ImageRGB) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Usage(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over all channels, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    same_size(a, b)?;
    let n = a.data().len().max(1) as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter without padding ("valid" region).
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * src[y * w + x + i])
                .sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * wo + x])
                .sum();
        }
    }
    out
}

/// Single-scale SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels.
pub fn ssim(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    same_size(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Usage(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps();
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.channel(c).data.iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.channel(c).data.iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &taps));
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (m1, m2) = (mx[i], my[i]);
            let v1 = sxx[i] - m1 * m1;
            let v2 = syy[i] - m2 * m2;
            let cov = sxy[i] - m1 * m2;
            acc += ((2.0 * m1 * m2 + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((m1 * m1 + m2 * m2 + SSIM_C1) * (v1 + v2 + SSIM_C2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let a = ImageRGB::filled(8, 8, [0.3, 0.5, 0.7]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let b = ImageRGB::filled(8, 8, [0.25, 0.25, 0.25]);
        let c = ImageRGB::filled(8, 8, [0.75, 0.75, 0.75]);
        assert!((psnr(&b, &c).unwrap() - 6.020_599_913_279_624).abs() < 1e-9);
    }

    #[test]
    fn size_mismatch() {
        let a = ImageRGB::filled(12, 12, [0.5; 3]);
        let b = ImageRGB::filled(12, 13, [0.5; 3]);
        assert!(matches!(psnr(&a, &b), Err(Error::Usage(_))));
        assert!(matches!(ssim(&a, &b), Err(Error::Usage(_))));
        let small = ImageRGB::filled(10, 10, [0.5; 3]);
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn ssim_identity_and_ordering() {
        let img = ImageRGB::from_fn(24, 24, |y, x| {
            let v = ((y * 7 + x * 3) % 11) as f32 / 10.0;
            [v, 1.0 - v, 0.5 * v]
        });
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
        let neg = ImageRGB::from_fn(24, 24, |y, x| img.pixel(y, x).map(|v| 1.0 - v));
        assert!(ssim(&img, &neg).unwrap() < ssim(&img, &img).unwrap());
    }
}
