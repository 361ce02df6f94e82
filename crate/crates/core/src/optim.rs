//! Adam with bias correction. Moment state is keyed by parameter identity,
//! so it survives the per-batch graph rebuild.

use crate::error::TensorError;
use crate::graph::{Graph, ParamId};
use crate::layers::{Module, Slot};
use crate::tensor::{lit, Scalar};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-5,
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
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TensorError::Config(format!("lr {} must be finite and >= 0", self.lr)));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(TensorError::Config(format!(
                "betas ({}, {}) must lie in [0, 1)",
                self.beta1, self.beta2
            )));
        }
        if self.eps <= 0.0 || self.eps.is_nan() {
            return Err(TensorError::Config(format!("eps {} must be positive", self.eps)));
        }
        Ok(())
    }
}

struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    t: u64,
    state: HashMap<ParamId, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self, TensorError> {
        config.validate()?;
        Ok(Adam {
            config,
            t: 0,
            state: HashMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update from the gradients accumulated in `g` (after its
    /// backward pass). Parameters absent from the graph keep their state and
    /// values untouched.
    pub fn step(&mut self, model: &mut dyn Module<T>, g: &Graph<T>) -> Result<(), TensorError> {
        self.t += 1;
        let c = self.config;
        let lr = lit::<T>(c.lr);
        let b1 = lit::<T>(c.beta1);
        let b2 = lit::<T>(c.beta2);
        let eps = lit::<T>(c.eps);
        let corr1 = lit::<T>(1.0 - c.beta1.powi(self.t as i32));
        let corr2 = lit::<T>(1.0 - c.beta2.powi(self.t as i32));
        let mut failure: Option<TensorError> = None;
        model.for_each(&mut |name, slot| {
            if failure.is_some() {
                return;
            }
            let Slot::Trainable(p) = slot else { return };
            let Some(grad) = g.param_grad(p) else { return };
            let n = p.value.numel();
            let st = self.state.entry(p.id()).or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            if st.m.len() != n {
                failure = Some(TensorError::State(format!(
                    "optimizer state for '{name}' has {} entries, parameter has {n}",
                    st.m.len()
                )));
                return;
            }
            let gd = grad.data();
            let pd = p.value.data_mut();
            for i in 0..n {
                let gi = gd[i];
                st.m[i] = b1 * st.m[i] + (T::one() - b1) * gi;
                st.v[i] = b2 * st.v[i] + (T::one() - b2) * gi * gi;
                let m_hat = st.m[i] / corr1;
                let v_hat = st.v[i] / corr2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}
