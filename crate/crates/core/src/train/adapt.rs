//! Source-free adaptation: a frozen teacher supervises a student whose only
//! trainable parameters live in its DRN modules.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{
    amplitude_loss, cap_loss, dcp_loss, phase_loss, total_loss, LossVars, LossWeights,
};
use super::{cosine_lr, crop_offsets, epoch_batches, mix_seed, EvalMetrics, OptimConfig};
use crate::autodiff::{Adam, Tape};
use crate::error::{Error, Result};
use crate::haze::UnlabeledSet;
use crate::image::{clahe, ClaheConfig, ImageRGB, DEFAULT_DCP_PATCH};
use crate::net::{Checkpoint, SourceNet, StudentNet, TapPoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub optim: OptimConfig,
    pub weights: LossWeights,
    pub points: Vec<TapPoint>,
    pub clahe: ClaheConfig,
    pub dcp_patch: usize,
    /// Measure phase differences as wrapped angles instead of plain differences.
    pub wrap_phase: bool,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            weights: LossWeights::default(),
            points: TapPoint::ALL.to_vec(),
            clahe: ClaheConfig::default(),
            dcp_patch: DEFAULT_DCP_PATCH,
            wrap_phase: false,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.weights.validate()?;
        self.clahe.validate()?;
        if self.dcp_patch.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "dark channel patch {} must be odd",
                self.dcp_patch
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub phase: f64,
    pub amplitude: f64,
    pub dcp: f64,
    pub cap: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total: f64,
    /// Held-out metrics, when an evaluation hook was supplied.
    pub metrics: Option<EvalMetrics>,
    /// Checksum of the frozen source parameters at the end of the epoch.
    pub frozen_checksum: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub initial_checksum: String,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl AdaptReport {
    /// True when every recorded checksum equals the one taken before training.
    pub fn checksum_constant(&self) -> bool {
        self.epochs
            .iter()
            .all(|e| e.frozen_checksum == self.initial_checksum)
    }

    /// Per-step loss breakdown as CSV with a header row.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record([
            "step",
            "epoch",
            "lr",
            "phase",
            "amplitude",
            "dcp",
            "cap",
            "total",
        ])
        .map_err(|e| csv_error(path, e))?;
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                s.epoch.to_string(),
                format!("{:e}", s.lr),
                format!("{:.8e}", s.phase),
                format!("{:.8e}", s.amplitude),
                format!("{:.8e}", s.dcp),
                format!("{:.8e}", s.cap),
                format!("{:.8e}", s.total),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Called at the end of every epoch with the current student.
pub type EvalHook<'a> = dyn FnMut(&StudentNet) -> Result<EvalMetrics> + 'a;

#[derive(Clone, Debug)]
pub struct AdaptOutput {
    pub student: StudentNet,
    pub checkpoint: Checkpoint,
    pub report: AdaptReport,
}

/// Adapts a source checkpoint to unlabeled target images.
///
/// Every step crops a batch of hazy patches, runs the frozen teacher, builds
/// the CLAHE reference of the hazy batch, runs the student and takes one Adam
/// step on the DRN parameters. The loop sees hazy images only; held-out
/// labels, if any, stay behind `eval`.
pub fn adapt_sfuda(
    source: &Checkpoint,
    target: &UnlabeledSet,
    cfg: &AdaptConfig,
    mut eval: Option<&mut EvalHook<'_>>,
) -> Result<AdaptOutput> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(Error::Usage(
            "adaptation needs at least one target image".into(),
        ));
    }
    let teacher = SourceNet::from_checkpoint(source)?;
    let mut student = StudentNet::assemble(source, &cfg.points)?;
    let initial_checksum = student.frozen_checksum();
    let optim = &cfg.optim;
    let mut adam = Adam::new(optim.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xADA7));
    let total_steps = optim.total_steps(target.len());
    let mut report = AdaptReport {
        initial_checksum: initial_checksum.clone(),
        ..Default::default()
    };
    let mut step = 0;
    for epoch in 0..optim.epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(target.len(), optim.batch, cfg.seed, epoch);
        for idx in &batches {
            let mut patches = Vec::with_capacity(idx.len());
            for &i in idx {
                let img = &target.images[i];
                let (y, x) = crop_offsets(img, optim.patch, &mut rng)?;
                patches.push(img.crop(y, x, optim.patch, optim.patch)?);
            }
            let refs: Vec<ImageRGB> = patches
                .iter()
                .map(|p| clahe(p, &cfg.clahe))
                .collect::<Result<_>>()?;
            let hazy = ImageRGB::stack(&patches.iter().collect::<Vec<_>>())?;
            let (t_out, t_taps) = teacher.infer(&hazy)?;

            let lr = cosine_lr(step, total_steps, optim.lr);
            let mut tape = Tape::new();
            let bound = student.bind(&mut tape);
            let xv = tape.constant(hazy);
            let clahe_ref = tape.constant(ImageRGB::stack(&refs.iter().collect::<Vec<_>>())?);
            let t_out = tape.constant(t_out);
            let out = student.forward(&mut tape, &bound, xv)?;
            let mut s_taps = Vec::new();
            let mut tt = Vec::new();
            for ((sp, sv), (tp, tv)) in out.taps.iter().zip(t_taps) {
                debug_assert_eq!(*sp, tp);
                s_taps.push(*sv);
                tt.push(tape.constant(tv));
            }
            let clamped = tape.clamp(out.output, 0.0, 1.0);
            let parts = LossVars {
                phase: phase_loss(&mut tape, out.output, t_out, &s_taps, &tt, cfg.wrap_phase)?,
                amplitude: amplitude_loss(&mut tape, out.output, clahe_ref)?,
                dcp: dcp_loss(&mut tape, clamped, cfg.dcp_patch)?,
                cap: cap_loss(&mut tape, clamped)?,
            };
            let total = total_loss(&mut tape, &parts, &cfg.weights)?;
            let values = parts.values(&tape);
            let total_value = tape.value(total).data()[0] as f64;
            if !total_value.is_finite() {
                return Err(Error::Training {
                    step,
                    msg: format!("adaptation loss became {total_value}"),
                });
            }
            let mut grads = tape.backward(total)?;
            bound.source.check_no_grad(&grads)?;
            student
                .drn_params_mut()
                .apply_adam(&bound.drn, &mut grads, &mut adam, lr as f32)
                .map_err(|e| match e {
                    Error::Frozen(_) => e,
                    other => Error::Training {
                        step,
                        msg: other.to_string(),
                    },
                })?;
            report.steps.push(StepRecord {
                step,
                epoch,
                lr,
                phase: values.phase,
                amplitude: values.amplitude,
                dcp: values.dcp,
                cap: values.cap,
                total: total_value,
            });
            sum += total_value;
            step += 1;
        }
        let metrics = match eval.as_mut() {
            Some(f) => Some(f(&student)?),
            None => None,
        };
        report.epochs.push(EpochRecord {
            epoch,
            mean_total: sum / batches.len() as f64,
            metrics,
            frozen_checksum: student.frozen_checksum(),
        });
    }
    let checkpoint = student.to_checkpoint(cfg.seed, step as u64);
    Ok(AdaptOutput {
        student,
        checkpoint,
        report,
    })
}
