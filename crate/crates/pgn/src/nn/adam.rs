//! Adam optimizer over the parameters reachable from a [`Layer`].

use super::{Layer, Scalar};
use ndarray::ArrayD;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// Optimizer state: first/second moment estimates per parameter tensor, in
/// the order parameters are visited. One `Adam` instance must always be
/// stepped against the same network.
pub struct Adam<F: Scalar> {
    cfg: AdamConfig,
    t: u64,
    moments: Vec<(ArrayD<F>, ArrayD<F>)>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update using the gradients currently accumulated in the
    /// network's parameters. Gradients are not cleared.
    pub fn step(&mut self, net: &mut dyn Layer<F>) {
        self.t += 1;
        let b1 = F::from_f64c(self.cfg.beta1);
        let b2 = F::from_f64c(self.cfg.beta2);
        let eps = F::from_f64c(self.cfg.eps);
        let bias1 = F::from_f64c(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bias2 = F::from_f64c(1.0 - self.cfg.beta2.powi(self.t as i32));
        let lr = F::from_f64c(self.cfg.lr);
        let one = F::one();

        let mut idx = 0usize;
        let moments = &mut self.moments;
        net.visit_params_mut(&mut |p| {
            if idx == moments.len() {
                moments.push((
                    ArrayD::zeros(p.data.raw_dim()),
                    ArrayD::zeros(p.data.raw_dim()),
                ));
            }
            let (m, v) = &mut moments[idx];
            assert_eq!(
                m.shape(),
                p.data.shape(),
                "optimizer stepped against a different network"
            );
            ndarray::Zip::from(&mut p.data)
                .and(m)
                .and(v)
                .and(&p.grad)
                .for_each(|w, m, v, &g| {
                    *m = *m * b1 + g * (one - b1);
                    *v = *v * b2 + g * g * (one - b2);
                    let mhat = *m / bias1;
                    let vhat = *v / bias2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
            idx += 1;
        });
    }

    /// Drops all moment estimates and the step counter (used after a
    /// surrogate reset, which replaces the network parameters wholesale).
    pub fn reset(&mut self) {
        self.t = 0;
        self.moments.clear();
    }
}
