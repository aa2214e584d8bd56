use serde::{Deserialize, Serialize};

use crate::params::Parameters;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer; moments mirror the parameter structure.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<P> {
    pub config: AdamConfig,
    pub first: P,
    pub second: P,
    pub steps: u64,
}

impl<P: Parameters + Clone> Adam<P> {
    pub fn new(config: AdamConfig, params: &P) -> Self {
        Self {
            config,
            first: params.zeros_like(),
            second: params.zeros_like(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut P, grad: &P) {
        self.steps += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .params_mut()
            .into_iter()
            .zip(grad.params())
            .zip(self.first.params_mut())
            .zip(self.second.params_mut())
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * gi;
                v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m.data[i] / c1;
                let v_hat = v.data[i] / c2;
                p.data[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::output::AdaptiveWeights;
    use ndarray::array;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = AdaptiveWeights {
            w: array![1.0, 2.0],
            w_aggregate: 0.5,
            alpha: 1.0,
            beta: 2.0,
        };
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::with_lr(1e-3), &p);
        let g = p.zeros_like();
        opt.step(&mut p, &g);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = AdaptiveWeights::uniform(1, 0.0, 0.0);
        let mut g = p.zeros_like();
        g.alpha = 3.0;
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &p);
        opt.step(&mut p, &g);
        assert!((p.alpha + 0.1).abs() < 1e-6);
    }
}
