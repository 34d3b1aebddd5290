//! RGB images in `[0, 1]` and the classical operators used as priors and metrics.

mod clahe;
mod color;
mod dark;
mod io;
mod metrics;

pub use clahe::{clahe, tile_luts, ClaheConfig, TileLut};
pub use color::{rgb_to_vs, vs_on_tape};
pub use dark::{dark_channel, dark_channel_on_tape, DEFAULT_DCP_PATCH};
pub use io::{load_image, save_image};
pub use metrics::{psnr, ssim, PSNR_CAP_DB};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Interleaved `H x W x 3` image with every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRGB {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Single-channel `H x W` plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }
}

impl ImageRGB {
    /// Builds an image from interleaved RGB values, clamping into `[0, 1]`.
    pub fn new(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(
                "image",
                format!(
                    "{height}x{width}x3 image needs {} values, got {}",
                    height * width * 3,
                    data.len()
                ),
            ));
        }
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data).expect("extent")
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x));
            }
        }
        Self::new(height, width, data).expect("extent")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Planar `[1, 3, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.height * self.width;
        Tensor::from_fn([1, 3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            self.data[p * 3 + c]
        })
    }

    /// Inverse of [`ImageRGB::to_tensor`] for sample `n` of an `[N, 3, H, W]`
    /// tensor; values are clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let (batch, c, h, w) = t.nchw("image")?;
        if c != 3 {
            return Err(Error::Dimension {
                op: "image",
                axis: "channels",
                expected: 3,
                got: c,
            });
        }
        if n >= batch {
            return Err(Error::Usage(format!(
                "sample {n} out of range for batch {batch}"
            )));
        }
        let plane = h * w;
        let src = &t.data()[n * 3 * plane..(n + 1) * 3 * plane];
        let data = (0..plane * 3)
            .map(|i| src[(i % 3) * plane + i / 3])
            .collect();
        Self::new(h, w, data)
    }

    /// Stacks equally sized images into one `[N, 3, H, W]` tensor.
    pub fn stack(images: &[&ImageRGB]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Usage("empty image batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if (img.height, img.width) != (h, w) {
                return Err(Error::shape(
                    "stack",
                    format!("image {}x{} differs from {h}x{w}", img.height, img.width),
                ));
            }
            data.extend_from_slice(img.to_tensor().data());
        }
        Tensor::new([images.len(), 3, h, w], data)
    }

    /// Window `[y, y + h) x [x, x + w)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if y + h > self.height || x + w > self.width {
            return Err(Error::Usage(format!(
                "crop {h}x{w}+{y}+{x} exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    /// Circular shift by `(dy, dx)`.
    pub fn roll(&self, dy: usize, dx: usize) -> Self {
        Self::from_fn(self.height, self.width, |y, x| {
            self.pixel(
                (y + self.height - dy % self.height) % self.height,
                (x + self.width - dx % self.width) % self.width,
            )
        })
    }

    pub fn channel(&self, c: usize) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().skip(c).step_by(3).copied().collect(),
        }
    }
}
