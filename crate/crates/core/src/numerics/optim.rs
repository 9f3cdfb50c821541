use std::collections::BTreeMap;

use super::params::{ParamId, ParamStore};
use super::tape::Gradients;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2: `weight_decay * theta` is added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Adam with bias correction. Each parameter keeps its own step counter,
/// so a parameter that receives no gradient in a step is left alone.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: BTreeMap<ParamId, Moments>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn param_step(&self, id: ParamId) -> u64 {
        self.state.get(&id).map_or(0, |s| s.step)
    }

    /// Applies one update for every parameter present in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let list = grads.params();
        // validate everything first so a bad gradient leaves params untouched
        for (id, g) in &list {
            if g.shape() != store.get(*id).shape() {
                return Err(Error::Shape {
                    op: "adam",
                    left: store.get(*id).shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(store.name(*id).to_string()));
            }
        }
        for (id, g) in list {
            self.update(store, id, g.data());
        }
        self.steps += 1;
        Ok(())
    }

    fn update(&mut self, store: &mut ParamStore, id: ParamId, grad: &[f64]) {
        let c = self.config;
        let st = self.state.entry(id).or_insert_with(|| Moments {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
            step: 0,
        });
        st.step += 1;
        let bc1 = 1.0 - c.beta1.powi(st.step as i32);
        let bc2 = 1.0 - c.beta2.powi(st.step as i32);
        let theta = store.data_mut(id);
        for i in 0..grad.len() {
            let g = grad[i] + c.weight_decay * theta[i];
            st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g;
            st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = st.m[i] / bc1;
            let v_hat = st.v[i] / bc2;
            theta[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }

    /// Bias-corrected first moment of a parameter (for inspection).
    pub fn first_moment_hat(&self, id: ParamId) -> Option<Vec<f64>> {
        let st = self.state.get(&id)?;
        let bc1 = 1.0 - self.config.beta1.powi(st.step as i32);
        Some(st.m.iter().map(|m| m / bc1).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};

    fn grads_for(store: &ParamStore, id: ParamId, coef: f64) -> Gradients {
        // loss = coef * sum(theta)  =>  grad = coef everywhere
        let tape = Tape::new();
        let p = tape.param(store, id);
        let s = tape.sum(p);
        let l = tape.scale(s, coef);
        tape.backward(l).unwrap()
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row_vector(vec![0.3, -1.2]));
        let before = store.get(id).clone();
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        {
            let g = grads_for(&store, id, 0.0);
            adam.step(&mut store, &g)
        }
        .unwrap();
        assert_eq!(store.get(id), &before);
    }

    #[test]
    fn first_step_moment_equals_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row_vector(vec![0.5]));
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        {
            let g = grads_for(&store, id, 2.5);
            adam.step(&mut store, &g)
        }
        .unwrap();
        let m = adam.first_moment_hat(id).unwrap();
        assert!((m[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn scalar_step_matches_closed_form() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row_vector(vec![1.0]));
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        {
            let g = grads_for(&store, id, 1.0);
            adam.step(&mut store, &g)
        }
        .unwrap();
        // m = 0.1, v = 0.001; m_hat = 1, v_hat = 1; delta = lr / (1 + eps)
        let expected = 1.0 - 0.001 / (1.0 + 1e-8);
        assert!((store.get(id).data()[0] - expected).abs() < 1e-15);

        // second step with g = 1 again: m_hat = 1, v_hat = 1
        {
            let g = grads_for(&store, id, 1.0);
            adam.step(&mut store, &g)
        }
        .unwrap();
        let m: f64 = 0.9 * 0.1 + 0.1;
        let v: f64 = 0.999 * 0.001 + 0.001;
        let d = 0.001 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64 * 0.999)).sqrt() + 1e-8);
        assert!((store.get(id).data()[0] - (expected - d)).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_folds_into_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row_vector(vec![2.0]));
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 0.5,
            ..Default::default()
        });
        {
            let g = grads_for(&store, id, 0.0);
            adam.step(&mut store, &g)
        }
        .unwrap();
        let m = adam.first_moment_hat(id).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = ParamStore::new();
        let id = store.add("decoder.w_o", Tensor::row_vector(vec![1.0]));
        let before = store.get(id).clone();
        let mut adam = Adam::new(AdamConfig::default());
        let err = {
            let g = grads_for(&store, id, f64::NAN);
            adam.step(&mut store, &g)
        }
        .unwrap_err();
        assert!(err.to_string().contains("decoder.w_o"));
        assert_eq!(store.get(id), &before);
    }
}
