use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{shape_err, Error, Phase, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update with a learning rate per parameter.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lrs: &[f64],
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || lrs.len() != params.len() || state.m.len() != params.len() {
        return shape_err(format!(
            "adam_step got {} params, {} grads, {} rates, {} moments",
            params.len(),
            grads.len(),
            lrs.len(),
            state.m.len()
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return shape_err(format!("gradient shape {:?} vs parameter {:?}", g.shape(), p.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                op: "adam_step",
                phase: Phase::Backward,
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let (p, g) = (params[i].data_mut(), grads[i].data());
        for k in 0..p.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lrs[i] * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_step(p: &mut f64, g: f64, state: &mut AdamState, lr: f64) {
        let mut params = vec![Tensor::vector(vec![*p])];
        adam_step(&mut params, &[Tensor::vector(vec![g])], state, &[lr], &AdamConfig::default()).unwrap();
        *p = params[0].data()[0];
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut state = AdamState::new(&params);
        state.m[0] = Tensor::vector(vec![0.5, 0.5]);
        adam_step(&mut params, &[Tensor::zeros(&[2])], &mut state, &[0.1], &AdamConfig::default()).unwrap();
        assert_eq!(state.m[0].data(), &[0.45, 0.45]);
        // moments that were zero stay zero, so the step is exactly zero only
        // when both moments vanish
        let mut params = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &[Tensor::zeros(&[2])], &mut state, &[0.1], &AdamConfig::default()).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [0.3, -7.0, 1e-3] {
            let mut p = 1.0;
            let mut state = AdamState::new(&[Tensor::vector(vec![p])]);
            scalar_step(&mut p, g, &mut state, 0.01);
            let expected = 1.0 - 0.01 * g.signum() * g.abs() / (g.abs() + 1e-8);
            assert!((p - expected).abs() < 1e-15, "{g}: {p}");
        }
    }

    #[test]
    fn two_steps_match_hand_trace() {
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let mut p = 0.5;
        let mut state = AdamState::new(&[Tensor::vector(vec![p])]);
        scalar_step(&mut p, 2.0, &mut state, lr);
        scalar_step(&mut p, -1.0, &mut state, lr);
        let (mut m, mut v, mut want) = (0.0, 0.0, 0.5);
        for (t, g) in [(1, 2.0), (2, -1.0)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            want -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p - want).abs() < 1e-15);
        // m = 0.08, v ≈ 0.004999, so the second step still points downhill
        assert!(p < 0.5 - 0.1);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut params = vec![Tensor::vector(vec![1.0])];
        let mut state = AdamState::new(&params);
        let r = adam_step(&mut params, &[Tensor::vector(vec![f64::NAN])], &mut state, &[0.1], &AdamConfig::default());
        assert!(matches!(r, Err(Error::NonFinite { op: "adam_step", .. })));
        assert_eq!(params[0].data(), &[1.0]);
        assert_eq!(state.t, 0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::vector(vec![3.0]), Tensor::vector(vec![4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((g[1].data()[0] - 0.8).abs() < 1e-15);
        let mut small = vec![Tensor::vector(vec![0.1])];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.1]);
    }
}
