use serde::{Deserialize, Serialize};

use super::predict_batch;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::haze::PairedSet;
use crate::image::{psnr, ssim, ImageRGB};

/// Mean full-reference quality over a paired set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub count: usize,
}

const EVAL_CHUNK: usize = 8;

/// Scores `predict` (an `[N, 3, H, W] -> [N, 3, H, W]` map whose outputs are
/// clamped to `[0, 1]`) against the clean images of `set`.
pub fn evaluate(
    predict: &dyn Fn(&Tensor) -> Result<Tensor>,
    set: &PairedSet,
) -> Result<EvalMetrics> {
    if set.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    let (mut p, mut s) = (0.0, 0.0);
    let mut i = 0;
    while i < set.len() {
        // chunks of equally sized images
        let (h, w) = (set.hazy[i].height(), set.hazy[i].width());
        let mut j = i;
        while j < set.len()
            && j - i < EVAL_CHUNK
            && (set.hazy[j].height(), set.hazy[j].width()) == (h, w)
        {
            j += 1;
        }
        let hazy: Vec<&ImageRGB> = set.hazy[i..j].iter().collect();
        let out = if h % 4 == 0 && w % 4 == 0 {
            predict_batch(predict, &hazy)?
        } else {
            hazy.iter()
                .map(|img| dehaze_image(predict, img))
                .collect::<Result<_>>()?
        };
        for (o, clean) in out.iter().zip(&set.clean[i..j]) {
            p += psnr(o, clean)?;
            s += ssim(o, clean)?;
        }
        i = j;
    }
    let n = set.len() as f64;
    Ok(EvalMetrics {
        psnr: p / n,
        ssim: s / n,
        count: set.len(),
    })
}

/// Edge-replicates `img` up to the next multiple of `m` in both extents.
pub fn pad_to_multiple(img: &ImageRGB, m: usize) -> ImageRGB {
    let (h, w) = (img.height().div_ceil(m) * m, img.width().div_ceil(m) * m);
    ImageRGB::from_fn(h, w, |y, x| {
        img.pixel(y.min(img.height() - 1), x.min(img.width() - 1))
    })
}

/// Runs `predict` on a single image of any size, padding to a multiple of 4
/// and cropping back; the result is clamped to `[0, 1]`.
pub fn dehaze_image(
    predict: &dyn Fn(&Tensor) -> Result<Tensor>,
    img: &ImageRGB,
) -> Result<ImageRGB> {
    let padded = pad_to_multiple(img, 4);
    let out = ImageRGB::from_tensor(&predict(&padded.to_tensor())?, 0)?;
    out.crop(0, 0, img.height(), img.width())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_predictor_scores_the_input() {
        let clean = ImageRGB::from_fn(16, 16, |y, x| [y as f32 / 16.0, x as f32 / 16.0, 0.5]);
        let hazy = ImageRGB::filled(16, 16, [0.6; 3]);
        let set = PairedSet {
            names: vec!["a".into(), "b".into()],
            hazy: vec![clean.clone(), hazy.clone()],
            clean: vec![clean.clone(), clean.clone()],
        };
        let m = evaluate(&|t: &Tensor| Ok(t.clone()), &set).unwrap();
        let expected = (99.0 + psnr(&hazy, &clean).unwrap()) / 2.0;
        assert!((m.psnr - expected).abs() < 1e-9);
        assert!((m.ssim - (1.0 + ssim(&hazy, &clean).unwrap()) / 2.0).abs() < 1e-12);
        assert_eq!(m.count, 2);
    }

    #[test]
    fn padding_round_trip() {
        let img = ImageRGB::from_fn(5, 7, |y, x| [y as f32 / 5.0, x as f32 / 7.0, 0.1]);
        let p = pad_to_multiple(&img, 4);
        assert_eq!((p.height(), p.width()), (8, 8));
        assert_eq!(p.pixel(7, 7), img.pixel(4, 6));
        let out = dehaze_image(&|t: &Tensor| Ok(t.clone()), &img).unwrap();
        assert_eq!(out, img);
    }
}
