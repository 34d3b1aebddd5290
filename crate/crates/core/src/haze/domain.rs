//! Domain presets, seeded sampling and dataset directories.

use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{apply_scattering, gen_clean_scene, gen_depth, HazeSample};
use crate::error::{Error, Result};
use crate::image::{load_image, save_image, ImageRGB};

/// Sampling ranges for one hazy domain. Every interval is inclusive `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub beta_range: (f32, f32),
    /// Per-channel airlight interval.
    pub airlight_range: [(f32, f32); 3],
    /// Draw one airlight value (from the first interval) for all channels.
    pub gray_airlight: bool,
    /// Per-channel multiplicative drift applied to the observed image.
    pub color_cast: [(f32, f32); 3],
    pub noise_sigma: f32,
    /// Tone-curve exponent applied to the observed image.
    pub gamma_range: (f32, f32),
    pub image_size: usize,
    pub seed: u64,
}

impl DomainConfig {
    /// Light, gray, clean-sensor haze: the synthetic training domain.
    pub fn source(seed: u64) -> Self {
        Self {
            beta_range: (0.4, 1.0),
            airlight_range: [(0.8, 1.0); 3],
            gray_airlight: true,
            color_cast: [(1.0, 1.0); 3],
            noise_sigma: 0.0,
            gamma_range: (1.0, 1.0),
            image_size: 64,
            seed,
        }
    }

    /// Denser, warm-tinted haze seen through a noisy, tone-mapped sensor.
    pub fn target(seed: u64) -> Self {
        Self {
            beta_range: (1.0, 2.0),
            airlight_range: [(0.85, 1.0), (0.8, 0.95), (0.7, 0.9)],
            gray_airlight: false,
            color_cast: [(1.0, 1.0); 3],
            noise_sigma: 0.01,
            gamma_range: (0.8, 1.2),
            image_size: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let interval = |name: &str, (lo, hi): (f32, f32), min: f32, max: f32| -> Result<()> {
            if !(lo <= hi && lo >= min && hi <= max) {
                return Err(Error::Config(format!(
                    "{name} interval [{lo}, {hi}] must lie within [{min}, {max}]"
                )));
            }
            Ok(())
        };
        interval("beta_range", self.beta_range, f32::MIN_POSITIVE, f32::MAX)?;
        for r in self.airlight_range {
            interval("airlight_range", r, 0.5, 1.0)?;
        }
        for r in self.color_cast {
            interval("color_cast", r, 0.0, f32::MAX)?;
        }
        interval("gamma_range", self.gamma_range, 0.5, 2.0)?;
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "noise sigma {} must be non-negative",
                self.noise_sigma
            )));
        }
        if self.image_size < super::MIN_SCENE_SIZE {
            return Err(Error::Config(format!(
                "image size {} must be at least {}",
                self.image_size,
                super::MIN_SCENE_SIZE
            )));
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw(rng: &mut impl Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Sample `index` of the domain: scene, depth and haze parameters are all
/// keyed by `(cfg.seed, index)`. Degradations touch only `observed`.
pub fn sample_domain(cfg: &DomainConfig, index: u64) -> Result<HazeSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ splitmix(index)));
    let scene_seed = rng.next_u64();
    let depth_seed = rng.next_u64();
    let beta = draw(&mut rng, cfg.beta_range);
    let airlight = if cfg.gray_airlight {
        [draw(&mut rng, cfg.airlight_range[0]); 3]
    } else {
        cfg.airlight_range.map(|r| draw(&mut rng, r))
    };
    let cast = cfg.color_cast.map(|r| draw(&mut rng, r));
    let gamma = draw(&mut rng, cfg.gamma_range);

    let clean = gen_clean_scene(scene_seed, cfg.image_size)?;
    let depth = gen_depth(depth_seed, cfg.image_size)?;
    let mut sample = apply_scattering(&clean, &depth, beta, airlight)?;

    if cast == [1.0; 3] && gamma == 1.0 && cfg.noise_sigma == 0.0 {
        return Ok(sample);
    }
    let noise = Normal::new(0.0f32, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let data = sample
        .hazy
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let v = (v * cast[i % 3]).clamp(0.0, 1.0).powf(gamma);
            let n = if cfg.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            v + n
        })
        .collect();
    sample.observed = ImageRGB::new(cfg.image_size, cfg.image_size, data)?;
    Ok(sample)
}

/// Paired hazy/clean data; the clean images are for supervision or evaluation.
#[derive(Clone, Debug, Default)]
pub struct PairedSet {
    pub names: Vec<String>,
    pub hazy: Vec<ImageRGB>,
    pub clean: Vec<ImageRGB>,
}

impl PairedSet {
    pub fn generate(cfg: &DomainConfig, start: u64, count: usize) -> Result<Self> {
        let mut set = Self::default();
        for i in start..start + count as u64 {
            let s = sample_domain(cfg, i)?;
            set.names.push(format!("{i:05}"));
            set.hazy.push(s.observed);
            set.clean.push(s.clean);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.hazy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hazy.is_empty()
    }

    /// Drops the labels.
    pub fn unlabeled(&self) -> UnlabeledSet {
        UnlabeledSet {
            names: self.names.clone(),
            images: self.hazy.clone(),
        }
    }
}

/// Hazy images without ground truth. This is the only data type the
/// adaptation loop accepts.
#[derive(Clone, Debug, Default)]
pub struct UnlabeledSet {
    pub names: Vec<String>,
    pub images: Vec<ImageRGB>,
}

impl UnlabeledSet {
    pub fn generate(cfg: &DomainConfig, start: u64, count: usize) -> Result<Self> {
        let mut set = Self::default();
        for i in start..start + count as u64 {
            set.names.push(format!("{i:05}"));
            set.images.push(sample_domain(cfg, i)?.observed);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub index: u64,
    pub beta: f32,
    pub airlight: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DomainConfig,
    pub samples: Vec<ManifestEntry>,
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(str::to_ascii_lowercase)
                    .as_deref(),
                Some("png" | "ppm")
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Writes `clean/`, `hazy/` and `trans/` PNG triplets plus `manifest.json`.
/// The hazy images are the observed (degraded) ones.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    cfg: &DomainConfig,
    count: usize,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    for sub in ["clean", "hazy", "trans"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let s = sample_domain(cfg, i)?;
        let name = format!("{i:05}");
        let file = format!("{name}.png");
        save_image(&s.clean, dir.join("clean").join(&file))?;
        save_image(&s.observed, dir.join("hazy").join(&file))?;
        let t = &s.transmission;
        let trans = ImageRGB::new(
            t.height,
            t.width,
            t.data.iter().flat_map(|&v| [v; 3]).collect(),
        )?;
        save_image(&trans, dir.join("trans").join(&file))?;
        samples.push(ManifestEntry {
            name,
            index: i,
            beta: s.beta,
            airlight: s.airlight,
        });
    }
    let manifest = DatasetManifest {
        config: cfg.clone(),
        samples,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Every PNG/PPM in `dir`, sorted by file name.
pub fn load_unlabeled_dir(dir: impl AsRef<Path>) -> Result<UnlabeledSet> {
    let mut set = UnlabeledSet::default();
    for p in image_files(dir.as_ref())? {
        set.names.push(stem(&p));
        set.images.push(load_image(&p)?);
    }
    Ok(set)
}

/// Pairs files with equal names in `hazy_dir` and `clean_dir`.
pub fn load_paired_dir(
    hazy_dir: impl AsRef<Path>,
    clean_dir: impl AsRef<Path>,
) -> Result<PairedSet> {
    let clean_dir = clean_dir.as_ref();
    let mut set = PairedSet::default();
    for p in image_files(hazy_dir.as_ref())? {
        let name = p.file_name().expect("listed file");
        let q = clean_dir.join(name);
        if !q.exists() {
            return Err(Error::Usage(format!(
                "no counterpart for {} in {}",
                p.display(),
                clean_dir.display()
            )));
        }
        set.names.push(stem(&p));
        set.hazy.push(load_image(&p)?);
        set.clean.push(load_image(&q)?);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        DomainConfig::source(1).validate().unwrap();
        DomainConfig::target(1).validate().unwrap();
        let mut bad = DomainConfig::source(1);
        bad.gamma_range = (0.2, 1.0);
        assert!(bad.validate().is_err());
        bad = DomainConfig::source(1);
        bad.airlight_range[1] = (0.3, 0.9);
        assert!(bad.validate().is_err());
        bad = DomainConfig::source(1);
        bad.beta_range = (0.0, 1.0);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn source_domain_is_pure_scattering() {
        let cfg = DomainConfig::source(11);
        let s = sample_domain(&cfg, 3).unwrap();
        assert_eq!(s.observed, s.hazy);
        assert!(s.airlight[0] == s.airlight[1] && s.airlight[1] == s.airlight[2]);
        assert_eq!(s, sample_domain(&cfg, 3).unwrap());
    }

    #[test]
    fn target_degradations_leave_clean_alone() {
        let cfg = DomainConfig::target(11);
        let s = sample_domain(&cfg, 3).unwrap();
        assert_ne!(s.observed, s.hazy);
        let reference = gen_clean_scene(
            {
                let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ splitmix(3)));
                rng.next_u64()
            },
            cfg.image_size,
        )
        .unwrap();
        assert_eq!(s.clean, reference);
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = DomainConfig::target(5);
        cfg.image_size = 32;
        let manifest = write_dataset(dir.path(), &cfg, 3).unwrap();
        assert_eq!(manifest.samples.len(), 3);
        let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let parsed: DatasetManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed, manifest);
        let paired = load_paired_dir(dir.path().join("hazy"), dir.path().join("clean")).unwrap();
        assert_eq!(paired.names, vec!["00000", "00001", "00002"]);
        let unlabeled = load_unlabeled_dir(dir.path().join("hazy")).unwrap();
        assert_eq!(unlabeled.len(), 3);
    }
}
