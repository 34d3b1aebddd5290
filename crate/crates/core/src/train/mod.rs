//! Loss functions, supervised source training and source-free adaptation.

mod adapt;
pub mod desk;
mod eval;
mod loss;

pub use adapt::{
    adapt_sfuda, AdaptConfig, AdaptOutput, AdaptReport, EpochRecord, EvalHook, StepRecord,
};
pub use eval::{dehaze_image, evaluate, pad_to_multiple, EvalMetrics};
pub use loss::{
    amplitude_loss, cap_loss, dcp_loss, half_spectrum_l1, l1_loss, phase_loss, total_loss,
    LossParts, LossVars, LossWeights,
};

pub use crate::autodiff::cosine_lr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Tape, Tensor};
use crate::error::{Error, Result};
use crate::haze::PairedSet;
use crate::image::ImageRGB;
use crate::net::{Checkpoint, SourceNet};

/// Optimizer and schedule settings shared by both training loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    /// Initial learning rate, annealed to 0 along a cosine.
    pub lr: f64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub epochs: usize,
    pub batch: usize,
    /// Square training crop; a positive multiple of 4.
    pub patch: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 10,
            batch: 6,
            patch: 64,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        for (n, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{n} = {b} must lie in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "Adam eps {} must be positive",
                self.eps
            )));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be positive".into()));
        }
        if self.patch == 0 || !self.patch.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "patch {} must be a positive multiple of 4",
                self.patch
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Number of optimizer steps for `n` training images.
    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch)
    }
}

pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shuffled index batches for one epoch.
pub(crate) fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
        seed,
        epoch as u64 + 1,
    )));
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Random `patch x patch` window of an image.
pub(crate) fn crop_offsets(
    img: &ImageRGB,
    patch: usize,
    rng: &mut impl Rng,
) -> Result<(usize, usize)> {
    if img.height() < patch || img.width() < patch {
        return Err(Error::Config(format!(
            "training patch {patch} exceeds {}x{} image",
            img.height(),
            img.width()
        )));
    }
    Ok((
        rng.random_range(0..=img.height() - patch),
        rng.random_range(0..=img.width() - patch),
    ))
}

/// Result of [`train_source`].
#[derive(Clone, Debug)]
pub struct SourceTraining {
    pub net: SourceNet,
    pub checkpoint: Checkpoint,
    /// Mean L1 loss of every epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

/// Supervised L1 training of a freshly initialized [`SourceNet`] on paired data.
pub fn train_source(set: &PairedSet, cfg: &OptimConfig, seed: u64) -> Result<SourceTraining> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::Usage(
            "source training needs at least one pair".into(),
        ));
    }
    let mut net = SourceNet::init(mix_seed(seed, 0x5EED));
    let mut adam = Adam::new(cfg.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xC409));
    let total = cfg.total_steps(set.len());
    let mut step = 0;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(set.len(), cfg.batch, seed, epoch);
        for idx in &batches {
            let mut hazy = Vec::with_capacity(idx.len());
            let mut clean = Vec::with_capacity(idx.len());
            for &i in idx {
                let (y, x) = crop_offsets(&set.hazy[i], cfg.patch, &mut rng)?;
                hazy.push(set.hazy[i].crop(y, x, cfg.patch, cfg.patch)?);
                clean.push(set.clean[i].crop(y, x, cfg.patch, cfg.patch)?);
            }
            let lr = cosine_lr(step, total, cfg.lr) as f32;
            let mut tape = Tape::new();
            let bound = net.params().bind(&mut tape);
            let xv = tape.constant(ImageRGB::stack(&hazy.iter().collect::<Vec<_>>())?);
            let yv = tape.constant(ImageRGB::stack(&clean.iter().collect::<Vec<_>>())?);
            let out = net.forward(&mut tape, &bound, xv)?;
            let loss = l1_loss(&mut tape, out.output, yv)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Training {
                    step,
                    msg: format!("source loss became {value}"),
                });
            }
            let mut grads = tape.backward(loss)?;
            net.params_mut()
                .apply_adam(&bound, &mut grads, &mut adam, lr)
                .map_err(|e| Error::Training {
                    step,
                    msg: e.to_string(),
                })?;
            sum += value;
            step += 1;
        }
        epoch_loss.push(sum / batches.len() as f64);
    }
    let checkpoint = net.to_checkpoint(seed, step as u64);
    Ok(SourceTraining {
        net,
        checkpoint,
        epoch_loss,
        steps: step,
    })
}

/// Runs `predict` over equally sized images in chunks, returning clamped images.
pub(crate) fn predict_batch(
    predict: &dyn Fn(&Tensor) -> Result<Tensor>,
    images: &[&ImageRGB],
) -> Result<Vec<ImageRGB>> {
    let out = predict(&ImageRGB::stack(images)?)?;
    (0..images.len())
        .map(|n| ImageRGB::from_tensor(&out, n))
        .collect()
}
