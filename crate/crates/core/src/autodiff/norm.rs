use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outputs of [`Tape::instance_norm`].
#[derive(Clone, Copy, Debug)]
pub struct InstanceNormOut {
    /// `(x - mean) / std`, same dims as the input.
    pub normalized: Var,
    /// `[N, C]` spatial means.
    pub mean: Var,
    /// `[N, C]` values of `sqrt(var + eps)`.
    pub std: Var,
}

impl Tape {
    /// Per-sample, per-channel standardization over the spatial axes,
    /// with the biased variance and `std = sqrt(var + eps)`.
    pub fn instance_norm(&mut self, x: Var, eps: f32) -> Result<InstanceNormOut> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!(
                "instance norm eps must be positive, got {eps}"
            )));
        }
        let (_, _, h, w) = self.value(x).nchw("instance_norm")?;
        let mean = self.spatial_mean(x)?;
        let mean_planes = self.broadcast_spatial(mean, h, w)?;
        let centered = self.sub(x, mean_planes)?;
        let sq = self.mul(centered, centered)?;
        let var = self.spatial_mean(sq)?;
        let var = self.add_scalar(var, eps);
        let std = self.sqrt(var);
        let std_planes = self.broadcast_spatial(std, h, w)?;
        let normalized = self.div(centered, std_planes)?;
        Ok(InstanceNormOut {
            normalized,
            mean,
            std,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn constant_channel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 2, 3, 3], 0.25));
        let out = tape.instance_norm(x, 1e-5).unwrap();
        assert!(tape.value(out.normalized).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(out.mean).data().iter().all(|&v| v == 0.25));
        let s = 1e-5f32.sqrt();
        assert!(tape
            .value(out.std)
            .data()
            .iter()
            .all(|&v| (v - s).abs() < 1e-9));
    }

    #[test]
    fn two_point_symmetry() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 1, 1, 2], vec![0.0, 2.0]).unwrap());
        let out = tape.instance_norm(x, 1e-12).unwrap();
        let n = tape.value(out.normalized).data();
        assert!((n[0] + 1.0).abs() < 1e-6 && (n[1] - 1.0).abs() < 1e-6);
        assert_eq!(tape.value(out.mean).data(), &[1.0]);
        assert!((tape.value(out.std).data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 1, 2, 2]));
        assert!(matches!(tape.instance_norm(x, 0.0), Err(Error::Config(_))));
    }
}
