use std::f64::consts::PI;

use tapegrad::Tensor;

use super::config::OptimConfig;
use crate::error::{Error, Result};

/// Linear warmup to the base rate, then cosine decay to zero at `total`.
pub fn learning_rate(cfg: &OptimConfig, step: u64, total: u64) -> f64 {
    let warmup = cfg.warmup_steps;
    if step < warmup {
        return cfg.learning_rate * (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return cfg.learning_rate;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    cfg.learning_rate * 0.5 * (1.0 + (PI * progress).cos())
}

/// Adam with decoupled weight decay over a flat list of tensors. Rank-1 and
/// scalar tensors (biases, norms, temperature) are not decayed.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: OptimConfig,
    /// Steps taken so far.
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, params: &[&Tensor<f32>]) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<f32>], grads: &[Tensor<f32>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c = &self.cfg;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = c.eps as f32;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Contract(format!(
                    "parameter {:?} got gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let decay = if p.rank() >= 2 { (1.0 - lr * c.weight_decay) as f32 } else { 1.0 };
            for (((x, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *x *= decay;
                *x -= step_size * *m / (v.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = OptimConfig {
            warmup_steps: 10,
            ..OptimConfig::default()
        };
        assert!((learning_rate(&cfg, 0, 110) - 1e-4).abs() < 1e-12);
        assert!((learning_rate(&cfg, 9, 110) - 1e-3).abs() < 1e-12);
        assert!((learning_rate(&cfg, 10, 110) - 1e-3).abs() < 1e-12);
        assert!((learning_rate(&cfg, 60, 110) - 5e-4).abs() < 1e-12);
        assert!(learning_rate(&cfg, 110, 110).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // with bias correction the first update is lr·sign(g) up to eps
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut p = Tensor::new(&[2], vec![1.0f32, -1.0]).unwrap();
        let mut opt = AdamW::new(cfg, &[&p]);
        let g = Tensor::new(&[2], vec![0.5f32, -3.0]).unwrap();
        opt.step(&mut [&mut p], &[g], 0.01).unwrap();
        assert!((p.data()[0] - 0.99).abs() < 1e-5);
        assert!((p.data()[1] + 0.99).abs() < 1e-5);
    }

    #[test]
    fn decay_applies_to_matrices_only() {
        let mut w = Tensor::full(&[1, 2], 2.0f32);
        let mut b = Tensor::full(&[2], 2.0f32);
        let mut opt = AdamW::new(OptimConfig::default(), &[&w, &b]);
        let zero = [Tensor::zeros(&[1, 2]), Tensor::zeros(&[2])];
        opt.step(&mut [&mut w, &mut b], &zero, 0.5).unwrap();
        assert!((w.data()[0] - 2.0 * 0.95).abs() < 1e-6);
        assert_eq!(b.data()[0], 2.0);
    }
}
