//! Compact encoder/body/decoder dehazing network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::params::{conv_init, Bound, ParamSet};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const SOURCE_ARCH: &str = "sfdehaze-source-v1";

const RES_BLOCKS: usize = 3;

/// Intermediate feature locations exposed by the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TapPoint {
    /// End of encoder stage 1, 16 channels at half resolution.
    Enc1,
    /// End of encoder stage 2, 32 channels at quarter resolution.
    Enc2,
    /// Output of the residual body, 32 channels at quarter resolution.
    Body,
}

impl TapPoint {
    pub const ALL: [TapPoint; 3] = [TapPoint::Enc1, TapPoint::Enc2, TapPoint::Body];

    pub fn name(self) -> &'static str {
        match self {
            TapPoint::Enc1 => "enc1",
            TapPoint::Enc2 => "enc2",
            TapPoint::Body => "body",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            TapPoint::Enc1 => 16,
            TapPoint::Enc2 | TapPoint::Body => 32,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown insertion point {s:?} (expected enc1, enc2 or body)"
                ))
            })
    }
}

/// Output and taps of one forward pass, taps in network order.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    /// Unclamped estimate; consumers clamp to `[0, 1]`.
    pub output: Var,
    pub taps: Vec<(TapPoint, Var)>,
}

/// Callback applied to the features at every tap point.
pub type TapHook<'a> = dyn FnMut(&mut Tape, TapPoint, Var) -> Result<Var> + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct SourceNet {
    params: ParamSet,
}

/// `(name, cout, cin)` of every 3x3 convolution.
fn layers() -> Vec<(String, usize, usize)> {
    let mut l = vec![("enc1".to_string(), 16, 3), ("enc2".to_string(), 32, 16)];
    for i in 0..RES_BLOCKS {
        l.push((format!("body.{i}.conv1"), 32, 32));
        l.push((format!("body.{i}.conv2"), 32, 32));
    }
    l.push(("dec1".into(), 16, 32));
    l.push(("dec2".into(), 3, 16));
    l
}

fn conv(tape: &mut Tape, p: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = p.var(&format!("{name}.weight"))?;
    let b = p.var(&format!("{name}.bias"))?;
    tape.conv2d(x, w, b, stride, 1)
}

impl SourceNet {
    /// He-initialized weights; the second conv of each residual block is
    /// scaled down and the final layer is zero, so the untrained net returns its input.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, cout, cin) in layers() {
            let gain = if name.ends_with("conv2") { 0.1 } else { 1.0 };
            let (mut w, b) = conv_init(&mut rng, cout, cin, 3, gain);
            if name == "dec2" {
                w = Tensor::zeros(w.dims());
            }
            params
                .insert(format!("{name}.weight"), w)
                .expect("unique layer names");
            params
                .insert(format!("{name}.bias"), b)
                .expect("unique layer names");
        }
        Self { params }
    }

    /// Expected `(name, dims)` of every parameter.
    pub fn param_shapes() -> Vec<(String, Vec<usize>)> {
        layers()
            .into_iter()
            .flat_map(|(name, cout, cin)| {
                [
                    (format!("{name}.weight"), vec![cout, cin, 3, 3]),
                    (format!("{name}.bias"), vec![cout]),
                ]
            })
            .collect()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        let ckpt = Checkpoint {
            tensors: params.as_map().clone(),
            ..Checkpoint::new(SOURCE_ARCH, 0, 0)
        };
        Self::validate(&ckpt)?;
        Ok(Self { params })
    }

    fn validate(ckpt: &Checkpoint) -> Result<()> {
        ckpt.expect_arch(SOURCE_ARCH)?;
        let shapes = Self::param_shapes();
        ckpt.expect_tensors(shapes.iter().map(|(n, d)| (n.as_str(), d.as_slice())))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::validate(ckpt)?;
        Ok(Self {
            params: ParamSet::from_map(ckpt.tensors.clone()),
        })
    }

    pub fn to_checkpoint(&self, seed: u64, step: u64) -> Checkpoint {
        Checkpoint {
            tensors: self.params.as_map().clone(),
            ..Checkpoint::new(SOURCE_ARCH, seed, step)
        }
    }

    /// Forward pass with `hook` applied at each tap point; taps record the
    /// hooked features.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        hook: &mut TapHook<'_>,
    ) -> Result<ForwardOut> {
        let (_, c, h, w) = tape.value(x).nchw("source_forward")?;
        if c != 3 {
            return Err(Error::Dimension {
                op: "source_forward",
                axis: "channels",
                expected: 3,
                got: c,
            });
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "source_forward",
                format!("input {h}x{w} must have extents that are positive multiples of 4; pad the image first"),
            ));
        }
        let mut taps = Vec::with_capacity(3);
        let mut tap = |tape: &mut Tape, point: TapPoint, v: Var| -> Result<Var> {
            let v = hook(tape, point, v)?;
            taps.push((point, v));
            Ok(v)
        };

        let e1 = conv(tape, p, "enc1", x, 2)?;
        let e1 = tape.relu(e1);
        let e1 = tap(tape, TapPoint::Enc1, e1)?;
        let e2 = conv(tape, p, "enc2", e1, 2)?;
        let e2 = tape.relu(e2);
        let mut b = tap(tape, TapPoint::Enc2, e2)?;
        for i in 0..RES_BLOCKS {
            let r = conv(tape, p, &format!("body.{i}.conv1"), b, 1)?;
            let r = tape.relu(r);
            let r = conv(tape, p, &format!("body.{i}.conv2"), r, 1)?;
            b = tape.add(b, r)?;
        }
        let b = tap(tape, TapPoint::Body, b)?;
        let d1 = tape.upsample2x(b)?;
        let d1 = conv(tape, p, "dec1", d1, 1)?;
        let d1 = tape.relu(d1);
        let d1 = tape.add(d1, e1)?;
        let d2 = tape.upsample2x(d1)?;
        let d2 = conv(tape, p, "dec2", d2, 1)?;
        let output = tape.add(x, d2)?;
        Ok(ForwardOut { output, taps })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<ForwardOut> {
        self.forward_with(tape, p, x, &mut |_, _, v| Ok(v))
    }

    /// Inference on an `[N, 3, H, W]` batch: unclamped output and tap values.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Vec<(TapPoint, Tensor)>)> {
        let mut tape = Tape::new();
        let p = self.params.bind_constants(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &p, xv)?;
        let taps = out
            .taps
            .iter()
            .map(|&(k, v)| (k, tape.value(v).clone()))
            .collect();
        Ok((tape.value(out.output).clone(), taps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untrained_net_is_identity() {
        let net = SourceNet::init(1);
        let x = Tensor::from_fn([2, 3, 8, 12], |i| (i % 17) as f32 / 16.0);
        let (y, taps) = net.infer(&x).unwrap();
        assert_eq!(y, x);
        let chans: Vec<usize> = taps.iter().map(|(_, t)| t.dims()[1]).collect();
        assert_eq!(chans, vec![16, 32, 32]);
        assert_eq!(taps[0].1.dims(), &[2, 16, 4, 6]);
        assert_eq!(taps[2].1.dims(), &[2, 32, 2, 3]);
    }

    #[test]
    fn parameter_count_and_names() {
        let net = SourceNet::init(1);
        assert_eq!(net.params().numel(), 65_635);
        assert_eq!(net.params().len(), SourceNet::param_shapes().len());
    }

    #[test]
    fn rejects_unpadded_input() {
        let net = SourceNet::init(1);
        let err = net.infer(&Tensor::zeros([1, 3, 10, 8])).unwrap_err();
        assert!(err.to_string().contains("pad"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let net = SourceNet::init(5);
        let ckpt = net.to_checkpoint(5, 0);
        assert_eq!(SourceNet::from_checkpoint(&ckpt).unwrap(), net);
        let mut missing = ckpt.clone();
        missing.tensors.remove("dec1.bias");
        let err = SourceNet::from_checkpoint(&missing)
            .unwrap_err()
            .to_string();
        assert!(err.contains("dec1.bias"), "{err}");
        let mut other = ckpt;
        other.arch = "something-else".into();
        assert!(matches!(
            SourceNet::from_checkpoint(&other),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn tap_point_names() {
        for p in TapPoint::ALL {
            assert_eq!(TapPoint::parse(p.name()).unwrap(), p);
        }
        assert!(TapPoint::parse("dec1").is_err());
    }
}
