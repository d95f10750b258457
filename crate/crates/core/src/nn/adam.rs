use std::f64::consts::PI;

use super::mlp::{Gradients, MlpTransform};
use crate::error::{Error, Result};

/// Cosine-annealed learning rate: `lr0 · ½ · (1 + cos(π · epoch / epochs))`.
pub fn cosine_lr(lr0: f64, epoch: usize, epochs: usize) -> f64 {
    lr0 * 0.5 * (1.0 + (PI * epoch as f64 / epochs.max(1) as f64).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// First and second moment estimates for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(net: &MlpTransform, config: AdamConfig) -> Self {
        let shapes: Vec<usize> = net
            .blocks()
            .iter()
            .flat_map(|b| {
                let mut s = vec![b.weight.as_slice().len(), b.bias.len()];
                if let Some(n) = &b.norm {
                    s.extend([n.gamma.len(), n.beta.len()]);
                }
                s
            })
            .collect();
        Self {
            config,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One bias-corrected Adam update. `step` is 1-based.
    pub fn step(&mut self, net: &mut MlpTransform, grads: &Gradients, step: u64, lr: f64) -> Result<()> {
        if step == 0 {
            return Err(Error::invalid("adam step index is 1-based"));
        }
        let gs = grads.slices();
        if gs.len() != self.m.len() || gs.iter().zip(&self.m).any(|(g, m)| g.len() != m.len()) {
            return Err(Error::invalid("gradient layout does not match the optimizer state"));
        }
        for (i, g) in gs.iter().enumerate() {
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter group {i}, entry {j}"
                )));
            }
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powf(step as f64);
        let bc2 = 1.0 - beta2.powf(step as f64);
        for (((p, g), m), v) in net
            .param_slices_mut()
            .into_iter()
            .zip(gs)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        if !net.is_finite() {
            return Err(Error::Numeric("parameters became non-finite after update".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Block, BatchNormConfig, BlockGrads, Matrix};

    fn scalar_net(w: f64) -> MlpTransform {
        MlpTransform::from_blocks(
            vec![Block {
                weight: Matrix::from_vec(1, 1, vec![w]).unwrap(),
                bias: vec![0.0],
                norm: None,
            }],
            BatchNormConfig::default(),
        )
        .unwrap()
    }

    fn grads(gw: f64, gb: f64) -> Gradients {
        Gradients {
            blocks: vec![BlockGrads {
                weight: Matrix::from_vec(1, 1, vec![gw]).unwrap(),
                bias: vec![gb],
                gamma: None,
                beta: None,
            }],
            input: Matrix::zeros(1, 1),
        }
    }

    #[test]
    fn zero_gradients_leave_everything_unchanged() {
        let mut net = scalar_net(0.7);
        let mut adam = Adam::new(&net, AdamConfig::default());
        for step in 1..=3 {
            adam.step(&mut net, &grads(0.0, 0.0), step, 1e-3).unwrap();
        }
        assert_eq!(net.flat_params(), vec![0.7, 0.0]);
        assert!(adam.first_moments().iter().flatten().all(|&m| m == 0.0));
        assert!(adam.second_moments().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 at step 1, so the update is lr / (1 + eps).
        let lr = 1e-4;
        let mut net = scalar_net(0.5);
        let mut adam = Adam::new(&net, AdamConfig::default());
        adam.step(&mut net, &grads(1.0, 0.0), 1, lr).unwrap();
        let delta = net.flat_params()[0] - 0.5;
        assert!((delta + lr / (1.0 + 1e-8)).abs() < 1e-15);
        assert!((delta + lr).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut net = scalar_net(0.5);
        let mut adam = Adam::new(&net, AdamConfig::default());
        let err = adam.step(&mut net, &grads(f64::NAN, 0.0), 1, 1e-3).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(net.flat_params(), vec![0.5, 0.0]);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-4, 0, 50), 1e-4);
        assert!(cosine_lr(1e-4, 50, 50).abs() < 1e-12);
        assert!((cosine_lr(1e-4, 25, 50) - 5e-5).abs() < 1e-18);
    }
}
