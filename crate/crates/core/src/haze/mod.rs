//! Synthetic hazy domains built from the atmospheric scattering model
//! `I = J t + A (1 - t)` with `t = exp(-beta d)`.

mod domain;
mod scene;

pub use domain::{
    load_paired_dir, load_unlabeled_dir, sample_domain, write_dataset, DatasetManifest,
    DomainConfig, ManifestEntry, PairedSet, UnlabeledSet,
};
pub use scene::{gen_clean_scene, gen_depth, MIN_SCENE_SIZE};

use crate::error::{Error, Result};
use crate::image::{ImageRGB, Plane};

/// Normalized scene depth in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthField(Plane);

impl DepthField {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "depth",
                format!("{height}x{width} depth needs {} values", height * width),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("depth value {v} outside [0, 1]")));
        }
        Ok(Self(Plane {
            height,
            width,
            data,
        }))
    }

    pub fn constant(height: usize, width: usize, d: f32) -> Result<Self> {
        Self::new(height, width, vec![d; height * width])
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }
}

/// One synthesized observation and everything needed to explain it.
#[derive(Clone, Debug, PartialEq)]
pub struct HazeSample {
    /// Haze-free radiance `J`.
    pub clean: ImageRGB,
    /// Transmission `t`, strictly positive.
    pub transmission: Plane,
    /// Global atmospheric light `A`.
    pub airlight: [f32; 3],
    pub beta: f32,
    /// Exact scattering-model composition.
    pub hazy: ImageRGB,
    /// What the camera delivers: `hazy` after any sensor-side degradation.
    pub observed: ImageRGB,
}

/// Composes a hazy image from a clean scene and a depth field.
pub fn apply_scattering(
    clean: &ImageRGB,
    depth: &DepthField,
    beta: f32,
    airlight: [f32; 3],
) -> Result<HazeSample> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!(
            "scattering coefficient {beta} must be positive"
        )));
    }
    if (depth.height(), depth.width()) != (clean.height(), clean.width()) {
        return Err(Error::shape(
            "apply_scattering",
            format!(
                "depth {}x{} vs image {}x{}",
                depth.height(),
                depth.width(),
                clean.height(),
                clean.width()
            ),
        ));
    }
    if let Some(a) = airlight.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Config(format!(
            "airlight component {a} outside [0, 1]"
        )));
    }
    let trans: Vec<f32> = depth
        .data()
        .iter()
        .map(|&d| ((-(beta as f64) * d as f64).exp() as f32).max(f32::MIN_POSITIVE))
        .collect();
    let mut data = Vec::with_capacity(clean.data().len());
    for (px, &t) in clean.pixels().zip(&trans) {
        for c in 0..3 {
            data.push(px[c] * t + airlight[c] * (1.0 - t));
        }
    }
    let hazy = ImageRGB::new(clean.height(), clean.width(), data)?;
    Ok(HazeSample {
        clean: clean.clone(),
        transmission: Plane {
            height: clean.height(),
            width: clean.width(),
            data: trans,
        },
        airlight,
        beta,
        observed: hazy.clone(),
        hazy,
    })
}
