use serde::{Deserialize, Serialize};

use crate::encoder::ModelParams;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
        }
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub m: ModelParams,
    pub v: ModelParams,
    /// Per-tensor update counts; tensors that never got a gradient stay at 0.
    pub steps: Vec<u64>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ModelParams) -> Self {
        let zeros = params.map(|_, t| Tensor::zeros(t.shape().to_vec()));
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; params.named().len()],
        }
    }

    /// Applies one update. `grads` follow the canonical parameter order;
    /// a tensor whose gradient is identically zero is left untouched.
    /// Returns the global gradient norm before clipping.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>], lr: f64) -> Result<f64> {
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {norm}")));
        }
        let clip = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        let c = self.cfg;
        let (m, v) = (self.m.values_mut(), self.v.values_mut());
        for (i, ((p, g), (m, v))) in params.values_mut().into_iter().zip(grads).zip(m.into_iter().zip(v)).enumerate() {
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let (m, v) = (m.data_mut(), v.data_mut());
            for (k, (w, &g)) in p.data_mut().iter_mut().zip(g).enumerate() {
                let g = g * clip;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps) + c.weight_decay * *w;
                *w -= lr * update;
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn small() -> ModelParams {
        ModelParams::init(&EncoderConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 8,
            max_len: 32,
            ..EncoderConfig::default()
        })
        .unwrap()
    }

    fn grads(p: &ModelParams, v: f64) -> Vec<Vec<f64>> {
        p.named().iter().map(|(_, t)| vec![v; t.len()]).collect()
    }

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let mut p = small();
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let g = grads(&p, 0.3);
        opt.step(&mut p, &g, 0.0).unwrap();
        assert_eq!(p.flatten(), before.flatten());
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut p = small();
        let before = p.flatten();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            grad_clip: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        let g = grads(&p, 0.5);
        opt.step(&mut p, &g, 1e-3).unwrap();
        for (a, b) in p.flatten().iter().zip(&before) {
            assert!((b - a - 1e-3).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_gradient_tensor_is_frozen() {
        let mut p = small();
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let mut g = grads(&p, 0.1);
        g[0].iter_mut().for_each(|x| *x = 0.0);
        opt.step(&mut p, &g, 1e-2).unwrap();
        assert_eq!(p.tok_emb, before.tok_emb);
        assert_ne!(p.layers[0].wq, before.layers[0].wq);
        assert_eq!(opt.steps[0], 0);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = small();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let mut g = grads(&p, 0.1);
        g[1][0] = f64::NAN;
        assert!(opt.step(&mut p, &g, 1e-2).is_err());
    }
}
