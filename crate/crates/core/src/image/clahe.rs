//! Contrast limited adaptive histogram equalization on the luma channel.

use serde::{Deserialize, Serialize};

use super::ImageRGB;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaheConfig {
    /// Tile grid as `(rows, cols)`.
    pub tiles: (usize, usize),
    /// Histogram clip height as a multiple of the uniform bin height.
    pub clip_limit: f32,
    pub bins: usize,
}

impl Default for ClaheConfig {
    fn default() -> Self {
        Self {
            tiles: (8, 8),
            clip_limit: 2.0,
            bins: 256,
        }
    }
}

impl ClaheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tiles.0 < 1 || self.tiles.1 < 1 {
            return Err(Error::Config(format!(
                "CLAHE tile grid {:?} must be at least 1x1",
                self.tiles
            )));
        }
        if !(self.clip_limit >= 1.0) {
            return Err(Error::Config(format!(
                "CLAHE clip limit {} must be >= 1",
                self.clip_limit
            )));
        }
        if self.bins < 2 {
            return Err(Error::Config(format!(
                "CLAHE needs at least 2 bins, got {}",
                self.bins
            )));
        }
        Ok(())
    }
}

/// Luminance remapping of one tile.
#[derive(Clone, Debug, PartialEq)]
pub enum TileLut {
    /// The tile holds a single histogram bin; values map to themselves.
    Identity,
    /// Output luminance per bin, non-decreasing.
    Table(Vec<f32>),
}

impl TileLut {
    fn apply(&self, y: f32) -> f32 {
        match self {
            TileLut::Identity => y,
            TileLut::Table(t) => t[bin_of(y, t.len())],
        }
    }
}

fn bin_of(y: f32, bins: usize) -> usize {
    ((y * bins as f32) as usize).min(bins - 1)
}

fn luma([r, g, b]: [f32; 3]) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn bounds(i: usize, tiles: usize, extent: usize) -> (usize, usize) {
    (i * extent / tiles, (i + 1) * extent / tiles)
}

fn check_size(h: usize, w: usize, cfg: &ClaheConfig) -> Result<()> {
    cfg.validate()?;
    if h < cfg.tiles.0 || w < cfg.tiles.1 {
        return Err(Error::Config(format!(
            "{h}x{w} image is smaller than the {}x{} CLAHE tile grid",
            cfg.tiles.0, cfg.tiles.1
        )));
    }
    Ok(())
}

/// Per-tile mappings of a luminance plane, row-major over the tile grid.
pub fn tile_luts(lum: &[f32], h: usize, w: usize, cfg: &ClaheConfig) -> Result<Vec<TileLut>> {
    check_size(h, w, cfg)?;
    let (rows, cols) = cfg.tiles;
    let bins = cfg.bins;
    let mut luts = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (y0, y1) = bounds(r, rows, h);
        for c in 0..cols {
            let (x0, x1) = bounds(c, cols, w);
            let mut hist = vec![0.0f64; bins];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[bin_of(lum[y * w + x], bins)] += 1.0;
                }
            }
            if hist.iter().filter(|&&n| n > 0.0).count() <= 1 {
                luts.push(TileLut::Identity);
                continue;
            }
            let total = ((y1 - y0) * (x1 - x0)) as f64;
            let clip = (cfg.clip_limit as f64 * total / bins as f64).max(1.0);
            let mut excess = 0.0;
            for n in &mut hist {
                if *n > clip {
                    excess += *n - clip;
                    *n = clip;
                }
            }
            let bonus = excess / bins as f64;
            let mut cdf = 0.0;
            let table = hist
                .iter()
                .map(|n| {
                    cdf += n + bonus;
                    (cdf / total).min(1.0) as f32
                })
                .collect();
            luts.push(TileLut::Table(table));
        }
    }
    Ok(luts)
}

/// Fractional tile coordinate of a pixel along one axis, relative to tile centers.
fn tile_coord(p: usize, tiles: usize, extent: usize) -> (usize, usize, f32) {
    let size = extent as f32 / tiles as f32;
    let g = ((p as f32 + 0.5) / size - 0.5).clamp(0.0, (tiles - 1) as f32);
    let i0 = g.floor() as usize;
    (i0, (i0 + 1).min(tiles - 1), g - i0 as f32)
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

/// Equalizes luminance tile by tile with clipped histograms, blending the
/// four surrounding tile mappings bilinearly. Chroma is preserved by adding
/// the luminance change to every channel.
pub fn clahe(img: &ImageRGB, cfg: &ClaheConfig) -> Result<ImageRGB> {
    let (h, w) = (img.height(), img.width());
    let lum: Vec<f32> = img.pixels().map(luma).collect();
    let luts = tile_luts(&lum, h, w, cfg)?;
    let (rows, cols) = cfg.tiles;
    let cols_coord: Vec<_> = (0..w).map(|x| tile_coord(x, cols, w)).collect();
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        let (r0, r1, fy) = tile_coord(y, rows, h);
        for x in 0..w {
            let (c0, c1, fx) = cols_coord[x];
            let yv = lum[y * w + x];
            let top = lerp(
                luts[r0 * cols + c0].apply(yv),
                luts[r0 * cols + c1].apply(yv),
                fx,
            );
            let bottom = lerp(
                luts[r1 * cols + c0].apply(yv),
                luts[r1 * cols + c1].apply(yv),
                fx,
            );
            let delta = lerp(top, bottom, fy) - yv;
            data.extend(img.pixel(y, x).map(|v| v + delta));
        }
    }
    ImageRGB::new(h, w, data)
}
