use std::path::Path;

use image::{ImageFormat, RgbImage};

use super::ImageRGB;
use crate::error::{Error, Result};

fn format_for(path: &Path) -> Result<ImageFormat> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("ppm") | Some("pnm") => Ok(ImageFormat::Pnm),
        _ => Err(Error::Format {
            path: path.to_owned(),
            msg: "unsupported format (expected .png or .ppm)".into(),
        }),
    }
}

/// Reads an 8-bit PNG or binary PPM; alpha is dropped and values become `v / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRGB> {
    let path = path.as_ref();
    let format = format_for(path)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded =
        image::load_from_memory_with_format(&bytes, format).map_err(|e| Error::Format {
            path: path.to_owned(),
            msg: e.to_string(),
        })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb
        .into_raw()
        .into_iter()
        .map(|b| b as f32 / 255.0)
        .collect();
    ImageRGB::new(h as usize, w as usize, data)
}

/// Writes an 8-bit PNG or binary PPM (`P6`) chosen by extension.
pub fn save_image(img: &ImageRGB, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = format_for(path)?;
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes).expect("extent");
    buf.save_with_format(path, format).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_owned(),
            msg: other.to_string(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageRGB::from_fn(7, 9, |y, x| {
            [
                (y * 9 + x) as f32 / 63.0,
                0.123,
                (x as f32 * 0.37).sin().abs(),
            ]
        });
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            let err = img
                .data()
                .iter()
                .zip(back.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max);
            assert!(err <= 0.5 / 255.0 + 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn black_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("black.png");
        let img = ImageRGB::filled(4, 5, [0.0; 3]);
        save_image(&img, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.png");
        save_image(&ImageRGB::filled(16, 16, [0.3, 0.6, 0.9]), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_image(&p), Err(Error::Format { .. })));
        let q = dir.path().join("t.ppm");
        std::fs::write(&q, b"P6\n4 4\n255\n\x01\x02").unwrap();
        assert!(matches!(load_image(&q), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_and_unsupported() {
        assert!(matches!(
            load_image("/nonexistent/x.png"),
            Err(Error::Io { .. })
        ));
        assert!(matches!(load_image("x.gif"), Err(Error::Format { .. })));
    }
}
