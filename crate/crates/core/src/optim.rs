//! Adam with bias correction, global-norm gradient clipping, and the
//! linear warmup / linear decay learning-rate schedule.

use crate::config::TrainConfig;
use crate::model::FmtModel;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, parallel to the model's parameter
/// registry, plus the number of updates applied so far.
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(model: &FmtModel) -> Self {
        let zeros: Vec<Tensor> = model
            .params()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Learning rate for a 0-based step: linear ramp to `peak_lr` over
/// `warmup_steps`, then linear decay to zero at `total_steps`. When the run
/// is shorter than the warmup, the whole run is ramp.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    let s = (step + 1) as f64;
    let warm = config.warmup_steps.max(1) as f64;
    if s <= warm {
        return config.peak_lr * s / warm;
    }
    let total = config.total_steps as f64;
    if total <= warm {
        return config.peak_lr;
    }
    config.peak_lr * ((total - s) / (total - warm)).max(0.0)
}

/// Scale all gradients so their global L2 norm is at most `clip`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], clip: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for &v in g.data() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > clip && norm > 0.0 {
        let factor = clip / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
    norm
}

/// One Adam update over every parameter. Parameters off the gradient path
/// still tick their moment decay, so resumed and uninterrupted runs agree.
pub fn adam_update(model: &mut FmtModel, grads: &[Tensor], state: &mut AdamState, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for idx in 0..grads.len() {
        let g = grads[idx].data();
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        let mut updated = model.params()[idx].1.clone();
        let w = updated.data_mut();
        for i in 0..g.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        model.set_param_data(idx, updated);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tc(total: u64, warmup: u64) -> TrainConfig {
        TrainConfig {
            total_steps: total,
            warmup_steps: warmup,
            peak_lr: 0.01,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_ramps_then_decays() {
        let config = tc(1000, 100);
        assert!((lr_at(0, &config) - 0.0001).abs() < 1e-12);
        assert!((lr_at(99, &config) - 0.01).abs() < 1e-12);
        assert!(lr_at(500, &config) < 0.01);
        assert!(lr_at(998, &config) > lr_at(999, &config));
        assert!(lr_at(999, &config) >= 0.0);
    }

    #[test]
    fn run_shorter_than_warmup_is_pure_ramp() {
        let config = tc(50, 100);
        assert!(lr_at(49, &config) < 0.01);
        assert!(lr_at(10, &config) < lr_at(40, &config));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut grads = vec![Tensor::full(vec![2, 2], 3.0)];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 6.0).abs() < 1e-12);
        let new_sq: f64 = grads[0].data().iter().map(|v| v * v).sum();
        assert!((new_sq.sqrt() - 1.0).abs() < 1e-12);
        // under the cap: untouched
        let mut small = vec![Tensor::full(vec![1, 2], 0.1)];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.1, 0.1]);
    }
}
