//! Adam with bias correction and the cosine annealing schedule.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of one parameter plus its step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u32,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(
    param: &mut [f32],
    grad: &[f32],
    state: &mut Moments,
    lr: f32,
    cfg: AdamConfig,
) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "param {} / grad {} / moments {},{} lengths differ",
                param.len(),
                grad.len(),
                state.m.len(),
                state.v.len()
            ),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..param.len() {
        let g = grad[i] as f64;
        let m = b1 * state.m[i] as f64 + (1.0 - b1) * g;
        let v = b2 * state.v[i] as f64 + (1.0 - b2) * g * g;
        state.m[i] = m as f32;
        state.v[i] = v as f32;
        let update = lr as f64 * (m / c1) / ((v / c2).sqrt() + cfg.eps as f64);
        param[i] = (param[i] as f64 - update) as f32;
    }
    Ok(())
}

/// Adam over a set of named parameters.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.state.get(name)
    }

    /// Updates `param` from `grad`, creating zeroed moments on first use.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f32) -> Result<()> {
        if param.dims() != grad.dims() {
            return Err(Error::shape(
                "adam",
                format!(
                    "{name}: param dims {:?} vs grad dims {:?}",
                    param.dims(),
                    grad.dims()
                ),
            ));
        }
        let state = self
            .state
            .entry(name.to_owned())
            .or_insert_with(|| Moments::zeros(param.numel()));
        adam_step(param.data_mut(), grad.data(), state, lr, self.config)
    }
}

/// `lr0 * (1 + cos(pi * step / total)) / 2`, floored at 0.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    (lr0 * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.5f32; 4];
        let mut st = Moments::zeros(4);
        adam_step(&mut p, &[1.0; 4], &mut st, 0.1, AdamConfig::default()).unwrap();
        for v in p {
            assert!((v - 0.4).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.5f32, -1.0];
        let mut st = Moments::zeros(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, 0.1, AdamConfig::default()).unwrap();
        assert_eq!(p, vec![0.5, -1.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        let cfg = AdamConfig::default();
        let (lr, g, p0) = (0.01f64, 0.3f64, 1.0f64);
        let (b1, b2, eps) = (0.9f64, 0.999f64, cfg.eps as f64);
        let (mut m, mut v, mut p) = (0.0, 0.0, p0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        let mut param = vec![p0 as f32];
        let mut st = Moments::zeros(1);
        for _ in 0..2 {
            adam_step(&mut param, &[g as f32], &mut st, lr as f32, cfg).unwrap();
        }
        assert!((param[0] as f64 - p).abs() < 1e-7, "{} vs {p}", param[0]);
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 1e-4), 1e-4);
        assert_eq!(cosine_lr(100, 100, 1e-4), 0.0);
        assert!((cosine_lr(50, 100, 1e-4) - 5e-5).abs() < 1e-15);
        let lrs: Vec<f64> = (0..=10).map(|s| cosine_lr(s, 10, 1.0)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
