//! Adam with bias correction, keyed by tensor name.

use std::collections::BTreeMap;

/// Adam hyperparameters. The learning rate is passed per step so the
/// schedule can change it between epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators per named tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Open a new optimization step; tensor updates that follow use the
    /// bias correction for this step count.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Update one named tensor within the current step. Every named
    /// tensor must keep its length across steps.
    pub fn update_tensor(
        &mut self,
        config: &AdamConfig,
        lr: f64,
        name: &str,
        param: &mut [f64],
        grad: &[f64],
    ) {
        assert!(self.t > 0, "update_tensor before begin_step");
        assert_eq!(
            param.len(),
            grad.len(),
            "parameter/gradient length mismatch for {name}"
        );
        let t = self.t as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; param.len()]);
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; param.len()]);
        assert_eq!(m.len(), param.len(), "stale moment buffer for {name}");
        for i in 0..param.len() {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            param[i] -= lr * mhat / (vhat.sqrt() + config.eps);
        }
    }

    /// Apply one whole update. `tensors` yields (name, parameter slice,
    /// gradient slice) triples.
    pub fn step<'a>(
        &mut self,
        config: &AdamConfig,
        lr: f64,
        tensors: impl Iterator<Item = (&'a str, &'a mut [f64], &'a [f64])>,
    ) {
        self.begin_step();
        for (name, param, grad) in tensors {
            self.update_tensor(config, lr, name, param, grad);
        }
    }
}
