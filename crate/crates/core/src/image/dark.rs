use super::{ImageRGB, Plane};
use crate::autodiff::{min_filter, Tape, Var};
use crate::error::{Error, Result};

/// Canonical dark channel window.
pub const DEFAULT_DCP_PATCH: usize = 15;

/// Minimum over channels followed by a `patch x patch` minimum filter with
/// replicate padding.
pub fn dark_channel(img: &ImageRGB, patch: usize) -> Result<Plane> {
    if patch.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "dark channel patch {patch} must be odd"
        )));
    }
    let mins: Vec<f32> = img.pixels().map(|[r, g, b]| r.min(g).min(b)).collect();
    let mut data = Vec::with_capacity(mins.len());
    min_filter(&mins, img.height(), img.width(), patch, |v, _| data.push(v));
    Ok(Plane {
        height: img.height(),
        width: img.width(),
        data,
    })
}

/// Differentiable dark channel of an `[N, C, H, W]` tensor, shaped `[N, 1, H, W]`.
pub fn dark_channel_on_tape(tape: &mut Tape, x: Var, patch: usize) -> Result<Var> {
    if patch.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "dark channel patch {patch} must be odd"
        )));
    }
    let mins = tape.channel_min(x)?;
    tape.min_pool(mins, patch)
}
