use super::{ImageRGB, Plane};
use crate::autodiff::{Tape, Var};
use crate::error::Result;

/// HSV value and saturation planes. Saturation is 0 where the value is 0.
pub fn rgb_to_vs(img: &ImageRGB) -> (Plane, Plane) {
    let (mut v, mut s) = (Vec::new(), Vec::new());
    for [r, g, b] in img.pixels() {
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        v.push(max);
        s.push(if max == 0.0 { 0.0 } else { (max - min) / max });
    }
    let plane = |data| Plane {
        height: img.height(),
        width: img.width(),
        data,
    };
    (plane(v), plane(s))
}

/// Differentiable value and saturation of an `[N, 3, H, W]` tensor, each `[N, 1, H, W]`.
pub fn vs_on_tape(tape: &mut Tape, rgb: Var) -> Result<(Var, Var)> {
    let value = tape.channel_max(rgb)?;
    let min = tape.channel_min(rgb)?;
    let chroma = tape.sub(value, min)?;
    let saturation = tape.safe_div(chroma, value)?;
    Ok((value, saturation))
}
