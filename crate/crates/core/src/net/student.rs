//! Frozen source network with DRN modules at chosen tap points.

use std::collections::BTreeMap;

use super::checkpoint::Checkpoint;
use super::drn::{drn_forward, drn_identity, DRN_EPS};
use super::params::{Bound, ParamSet};
use super::source::{ForwardOut, SourceNet, TapPoint, SOURCE_ARCH};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const STUDENT_ARCH: &str = "sfdehaze-student-v1";

const SOURCE_PREFIX: &str = "source.";
const DRN_PREFIX: &str = "drn.";

/// Tape variables of a bound student.
#[derive(Clone, Debug)]
pub struct StudentBinding {
    pub source: Bound,
    pub drn: Bound,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentNet {
    source: SourceNet,
    drn: ParamSet,
    points: Vec<TapPoint>,
    eps: f32,
}

fn drn_names(p: TapPoint) -> (String, String) {
    (format!("{}.weight", p.name()), format!("{}.bias", p.name()))
}

impl StudentNet {
    /// Loads and freezes the source network and inserts identity-initialized
    /// DRN modules at `points`.
    pub fn assemble(source: &Checkpoint, points: &[TapPoint]) -> Result<Self> {
        let mut net = SourceNet::from_checkpoint(source)?;
        net.params_mut().freeze();
        let mut points = points.to_vec();
        points.sort();
        if points.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!(
                "duplicate DRN insertion points in {points:?}"
            )));
        }
        let mut drn = ParamSet::new();
        for &p in &points {
            let (w, b) = drn_identity(p.channels());
            let (wn, bn) = drn_names(p);
            drn.insert(wn, w)?;
            drn.insert(bn, b)?;
        }
        Ok(Self {
            source: net,
            drn,
            points,
            eps: DRN_EPS,
        })
    }

    pub fn points(&self) -> &[TapPoint] {
        &self.points
    }

    pub fn source(&self) -> &SourceNet {
        &self.source
    }

    /// The trainable DRN parameters.
    pub fn drn_params(&self) -> &ParamSet {
        &self.drn
    }

    pub fn drn_params_mut(&mut self) -> &mut ParamSet {
        &mut self.drn
    }

    /// Checksum of the frozen source parameters.
    pub fn frozen_checksum(&self) -> String {
        self.source.params().checksum()
    }

    pub fn trainable_count(&self) -> usize {
        self.drn.numel()
    }

    /// Drops the DRN modules, returning the untouched source network.
    pub fn without_drn(&self) -> SourceNet {
        let mut p = self.source.params().clone();
        p = ParamSet::from_map(p.into_map());
        SourceNet::from_params(p).expect("source params stay valid")
    }

    /// Binds the source as constants and the DRN parameters as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> StudentBinding {
        StudentBinding {
            source: self.source.params().bind(tape),
            drn: self.drn.bind(tape),
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &StudentBinding, x: Var) -> Result<ForwardOut> {
        let eps = self.eps;
        let points = &self.points;
        let drn = &b.drn;
        self.source
            .forward_with(tape, &b.source, x, &mut |tape, point, v| {
                if !points.contains(&point) {
                    return Ok(v);
                }
                let (wn, bn) = drn_names(point);
                drn_forward(tape, v, drn.var(&wn)?, drn.var(&bn)?, eps)
            })
    }

    /// Inference on an `[N, 3, H, W]` batch: unclamped output and taps.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Vec<(TapPoint, Tensor)>)> {
        let mut tape = Tape::new();
        let b = StudentBinding {
            source: self.source.params().bind_constants(&mut tape),
            drn: self.drn.bind_constants(&mut tape),
        };
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &b, xv)?;
        let taps = out
            .taps
            .iter()
            .map(|&(k, v)| (k, tape.value(v).clone()))
            .collect();
        Ok((tape.value(out.output).clone(), taps))
    }

    pub fn to_checkpoint(&self, seed: u64, step: u64) -> Checkpoint {
        let mut c = Checkpoint::new(STUDENT_ARCH, seed, step);
        let names: Vec<&str> = self.points.iter().map(|p| p.name()).collect();
        c.metadata
            .insert("insertion_points".into(), names.join(","));
        c.metadata
            .insert("source_checksum".into(), self.frozen_checksum());
        for (k, t) in self.source.params().iter() {
            c.tensors.insert(format!("{SOURCE_PREFIX}{k}"), t.clone());
        }
        for (k, t) in self.drn.iter() {
            c.tensors.insert(format!("{DRN_PREFIX}{k}"), t.clone());
        }
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_arch(STUDENT_ARCH)?;
        let points = match ckpt.metadata.get("insertion_points") {
            None => {
                return Err(Error::Checkpoint(
                    "student checkpoint lacks insertion_points".into(),
                ))
            }
            Some(s) if s.is_empty() => vec![],
            Some(s) => s
                .split(',')
                .map(TapPoint::parse)
                .collect::<Result<Vec<_>>>()?,
        };
        let mut source = BTreeMap::new();
        let mut drn = BTreeMap::new();
        for (k, t) in &ckpt.tensors {
            if let Some(n) = k.strip_prefix(SOURCE_PREFIX) {
                source.insert(n.to_string(), t.clone());
            } else if let Some(n) = k.strip_prefix(DRN_PREFIX) {
                drn.insert(n.to_string(), t.clone());
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor {k}")));
            }
        }
        let source_ckpt = Checkpoint {
            tensors: source,
            ..Checkpoint::new(SOURCE_ARCH, ckpt.seed, 0)
        };
        let mut net = Self::assemble(&source_ckpt, &points)?;
        let drn_ckpt = Checkpoint {
            tensors: drn,
            ..Checkpoint::new("drn", 0, 0)
        };
        let shapes: Vec<(String, Vec<usize>)> = net
            .drn
            .iter()
            .map(|(k, t)| (k.clone(), t.dims().to_vec()))
            .collect();
        drn_ckpt
            .expect_tensors(shapes.iter().map(|(k, d)| (k.as_str(), d.as_slice())))
            .map_err(|e| Error::Checkpoint(format!("DRN section: {e}")))?;
        net.drn = ParamSet::from_map(drn_ckpt.tensors);
        if let Some(sum) = ckpt.metadata.get("source_checksum") {
            if *sum != net.frozen_checksum() {
                return Err(Error::Checkpoint(
                    "source section does not match its recorded checksum".into(),
                ));
            }
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trained_like_source() -> Checkpoint {
        // Perturb the zero output layer so the teacher is not the identity.
        let mut net = SourceNet::init(3);
        let mut p = net.params().as_map().clone();
        let w = p.get_mut("dec2.weight").unwrap();
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            *v = ((i * 7 % 13) as f32 - 6.0) * 0.01;
        }
        net = SourceNet::from_params(ParamSet::from_map(p)).unwrap();
        net.to_checkpoint(3, 10)
    }

    #[test]
    fn student_equals_teacher_at_assembly() {
        let ckpt = trained_like_source();
        let teacher = SourceNet::from_checkpoint(&ckpt).unwrap();
        let student = StudentNet::assemble(&ckpt, &TapPoint::ALL).unwrap();
        let x = Tensor::from_fn([2, 3, 16, 16], |i| ((i * 31 % 97) as f32) / 96.0);
        let (ts, tt) = teacher.infer(&x).unwrap();
        let (ss, st) = student.infer(&x).unwrap();
        assert_eq!(ts, ss);
        for ((_, a), (_, b)) in tt.iter().zip(&st) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn trainable_count_is_drn_only() {
        let student = StudentNet::assemble(&trained_like_source(), &TapPoint::ALL).unwrap();
        let expected: usize = TapPoint::ALL
            .iter()
            .map(|p| {
                let c = p.channels();
                c * 3 * c * 9 + c
            })
            .sum();
        assert_eq!(student.trainable_count(), expected);
        let empty = StudentNet::assemble(&trained_like_source(), &[]).unwrap();
        assert_eq!(empty.trainable_count(), 0);
        assert_eq!(
            empty.without_drn(),
            SourceNet::from_checkpoint(&trained_like_source()).unwrap()
        );
    }

    #[test]
    fn source_gets_no_gradient() {
        let student = StudentNet::assemble(&trained_like_source(), &TapPoint::ALL).unwrap();
        let mut tape = Tape::new();
        let b = student.bind(&mut tape);
        let x = tape.constant(Tensor::full([1, 3, 8, 8], 0.5));
        let out = student.forward(&mut tape, &b, x).unwrap();
        let loss = tape.mean(out.output);
        let grads = tape.backward(loss).unwrap();
        b.source.check_no_grad(&grads).unwrap();
        assert!(grads.get(b.drn.var("enc1.weight").unwrap()).is_some());
    }

    #[test]
    fn student_checkpoint_round_trip() {
        let mut student =
            StudentNet::assemble(&trained_like_source(), &[TapPoint::Enc2, TapPoint::Enc1])
                .unwrap();
        let mut map = student.drn_params().as_map().clone();
        map.get_mut("enc1.bias").unwrap().data_mut()[0] = 0.25;
        *student.drn_params_mut() = ParamSet::from_map(map);
        let c = student.to_checkpoint(1, 2);
        assert_eq!(c.metadata["insertion_points"], "enc1,enc2");
        let back =
            StudentNet::from_checkpoint(&Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap())
                .unwrap();
        assert_eq!(back, student);
        assert!(back.source().params().is_frozen());
        assert!(matches!(
            StudentNet::assemble(&c, &[]),
            Err(Error::Checkpoint(_))
        ));
    }
}
