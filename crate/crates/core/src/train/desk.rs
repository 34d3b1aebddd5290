//! The seeded desk-scale experiment: train a source network on one synthetic
//! domain, adapt it without labels to a shifted domain, and score both on
//! held-out target pairs.

use serde::{Deserialize, Serialize};

use super::{
    adapt_sfuda, evaluate, mix_seed, train_source, AdaptConfig, AdaptOutput, EvalMetrics,
    LossWeights,
};
use super::{OptimConfig, SourceTraining};
use crate::error::Result;
use crate::haze::{DomainConfig, PairedSet, UnlabeledSet};
use crate::net::{Checkpoint, SourceNet, StudentNet};

/// Offset separating held-out sample indices from training indices.
pub const HELD_OUT_OFFSET: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeskConfig {
    pub seed: u64,
    pub source_domain: DomainConfig,
    pub target_domain: DomainConfig,
    pub source_train: usize,
    pub source_test: usize,
    pub target_train: usize,
    pub target_test: usize,
    pub source_optim: OptimConfig,
    pub adapt: AdaptConfig,
}

impl DeskConfig {
    pub fn new(seed: u64) -> Self {
        let source_domain = DomainConfig::source(mix_seed(seed, 1));
        let target_domain = DomainConfig::target(mix_seed(seed, 2));
        Self {
            seed,
            source_domain,
            target_domain,
            source_train: 400,
            source_test: 32,
            target_train: 200,
            target_test: 32,
            source_optim: OptimConfig {
                lr: 1e-3,
                epochs: 10,
                ..OptimConfig::default()
            },
            adapt: AdaptConfig {
                seed: mix_seed(seed, 3),
                ..AdaptConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.source_domain.validate()?;
        self.target_domain.validate()?;
        self.source_optim.validate()?;
        self.adapt.validate()
    }

    pub fn source_sets(&self) -> Result<(PairedSet, PairedSet)> {
        Ok((
            PairedSet::generate(&self.source_domain, 0, self.source_train)?,
            PairedSet::generate(&self.source_domain, HELD_OUT_OFFSET, self.source_test)?,
        ))
    }

    /// Unlabeled adaptation images and held-out labeled target pairs.
    pub fn target_sets(&self) -> Result<(UnlabeledSet, PairedSet)> {
        Ok((
            UnlabeledSet::generate(&self.target_domain, 0, self.target_train)?,
            PairedSet::generate(&self.target_domain, HELD_OUT_OFFSET, self.target_test)?,
        ))
    }
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self::new(2024)
    }
}

/// Scores the identity map (hazy input as output).
pub fn identity_metrics(set: &PairedSet) -> Result<EvalMetrics> {
    evaluate(&|t| Ok(t.clone()), set)
}

pub fn source_metrics(net: &SourceNet, set: &PairedSet) -> Result<EvalMetrics> {
    evaluate(&|t| Ok(net.infer(t)?.0), set)
}

pub fn student_metrics(net: &StudentNet, set: &PairedSet) -> Result<EvalMetrics> {
    evaluate(&|t| Ok(net.infer(t)?.0), set)
}

#[derive(Clone, Debug)]
pub struct DeskSource {
    pub training: SourceTraining,
    /// Identity baseline on held-out source pairs.
    pub baseline: EvalMetrics,
    pub held_out: EvalMetrics,
}

pub fn run_source(cfg: &DeskConfig) -> Result<DeskSource> {
    cfg.validate()?;
    let (train, test) = cfg.source_sets()?;
    let training = train_source(&train, &cfg.source_optim, cfg.seed)?;
    Ok(DeskSource {
        baseline: identity_metrics(&test)?,
        held_out: source_metrics(&training.net, &test)?,
        training,
    })
}

#[derive(Clone, Debug)]
pub struct DeskAdapt {
    /// Frozen source network on held-out target pairs.
    pub teacher: EvalMetrics,
    /// Adapted student on the same pairs.
    pub student: EvalMetrics,
    pub output: AdaptOutput,
}

/// Adapts `source` with the given loss weights; held-out labels are used
/// only to score the networks afterwards.
pub fn run_adapt(cfg: &DeskConfig, source: &Checkpoint, weights: LossWeights) -> Result<DeskAdapt> {
    cfg.validate()?;
    let (train, test) = cfg.target_sets()?;
    let adapt = AdaptConfig {
        weights,
        ..cfg.adapt.clone()
    };
    let teacher = source_metrics(&SourceNet::from_checkpoint(source)?, &test)?;
    let output = adapt_sfuda(source, &train, &adapt, None)?;
    Ok(DeskAdapt {
        teacher,
        student: student_metrics(&output.student, &test)?,
        output,
    })
}
