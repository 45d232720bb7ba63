use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{shape_err, Gradients, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Bias-corrected Adam. Moment buffers are keyed by parameter name and
/// created (zeroed) on first use.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.first.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.second.get(name)
    }

    /// One update over `params`. Parameters without a gradient entry are
    /// left untouched (their moments do not decay).
    pub fn update<'a, S, I>(&mut self, params: I, grads: &Gradients) -> Result<()>
    where
        S: AsRef<str>,
        I: IntoIterator<Item = (S, &'a mut Tensor)>,
    {
        let params: Vec<(S, &mut Tensor)> = params.into_iter().collect();
        for (name, p) in &params {
            let name = name.as_ref();
            if let Some(g) = grads.get(name) {
                if g.shape() != p.shape() {
                    return Err(shape_err(
                        "adam_update",
                        format!("{name}: param {:?} grad {:?}", p.shape(), g.shape()),
                    ));
                }
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, p) in params {
            let name = name.as_ref();
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            if m.shape() != p.shape() {
                return Err(shape_err("adam_update", format!("{name}: state shape")));
            }
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn grads_for(name: &str, g: f64) -> Gradients {
        let mut graph = Graph::new();
        let p = graph.param(name, Tensor::scalar(0.0));
        let s = graph.scale(p, g);
        graph.evaluate(&[]).unwrap();
        graph.backward(s, &Tensor::scalar(1.0), &[]).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = Tensor::scalar(0.0);
        adam.update([("p", &mut p)], &grads_for("p", 1.0)).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expected = -0.001 * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((p.data()[0] + 0.001).abs() < 1e-6);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = Tensor::scalar(0.75);
        adam.update([("p", &mut p)], &grads_for("p", 0.0)).unwrap();
        assert_eq!(p.data()[0], 0.75);
    }

    #[test]
    fn deterministic_and_lr_zero_is_identity() {
        let run = |lr: f64| {
            let mut adam = Adam::new(AdamConfig::with_lr(lr));
            let mut p = Tensor::scalar(1.25);
            for _ in 0..3 {
                adam.update([("p", &mut p)], &grads_for("p", 0.3)).unwrap();
            }
            p
        };
        assert_eq!(run(0.01), run(0.01));
        assert_eq!(run(0.0).data()[0].to_bits(), 1.25f64.to_bits());
    }

    #[test]
    fn shape_mismatch() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = Tensor::zeros(&[2]);
        assert!(adam.update([("p", &mut p)], &grads_for("p", 1.0)).is_err());
        assert_eq!(adam.step_count(), 0);
    }
}
