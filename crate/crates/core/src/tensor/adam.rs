use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{lit, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step_count: u64,
    first_moment: BTreeMap<String, Tensor<T>>,
    second_moment: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn moments(&self, path: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        Some((self.first_moment.get(path)?, self.second_moment.get(path)?))
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.first_moment.keys()
    }

    pub(crate) fn set_moments(&mut self, path: String, m: Tensor<T>, v: Tensor<T>) {
        self.first_moment.insert(path.clone(), m);
        self.second_moment.insert(path, v);
    }
}

/// One bias-corrected ADAM update of every parameter named in `grads`.
///
/// All gradients are checked before anything is written, so a non-finite
/// gradient leaves both the parameters and the state untouched.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
) -> Result<()> {
    for (path, g) in grads {
        let p = params.get(path)?;
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!("`{path}`: parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            });
        }
        if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                path: path.clone(),
                index,
            });
        }
    }
    state.step_count += 1;
    let cfg = state.config;
    let t = state.step_count as i32;
    let (b1, b2): (T, T) = (lit(cfg.beta1), lit(cfg.beta2));
    let bc1: T = lit(1.0 - cfg.beta1.powi(t));
    let bc2: T = lit(1.0 - cfg.beta2.powi(t));
    let (lr, eps): (T, T) = (lit(cfg.lr), lit(cfg.epsilon));
    for (path, g) in grads {
        let m = state
            .first_moment
            .entry(path.clone())
            .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let v = state
            .second_moment
            .entry(path.clone())
            .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let p = params.get_mut(path).expect("checked above");
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
