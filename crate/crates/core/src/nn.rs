//! Parameter initialization and the layer blocks shared by the networks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{ConvGeom, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    Instance,
    Batch,
    None,
}

/// Draws initial values in f64 so that 32- and 64-bit models built from the
/// same seed agree up to rounding.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn normal<T: Real>(&mut self, shape: &[usize], mean: f64, std: f64) -> Tensor<T> {
        let d = Normal::new(mean, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| d.sample(self.rng)).collect();
        Tensor::from_f64(shape.to_vec(), &data).expect("consistent shape")
    }

    pub fn uniform<T: Real>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Tensor::from_f64(shape.to_vec(), &data).expect("consistent shape")
    }

    /// Layers that feed a normalization get no bias: the norm's mean
    /// subtraction would cancel it.
    pub fn conv<T: Real>(&mut self, store: &mut ParamStore<T>, path: &str, out: usize, inp: usize, k: usize, bias: bool) {
        store.insert(format!("{path}/weight"), self.normal(&[out, inp, k, k], 0.0, 0.02));
        if bias {
            store.insert(format!("{path}/bias"), Tensor::zeros(vec![out]));
        }
    }

    /// Transposed convolution weights are laid out `[in, out, k, k]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose<T: Real>(
        &mut self,
        store: &mut ParamStore<T>,
        path: &str,
        inp: usize,
        out: usize,
        k: usize,
        bias: bool,
    ) {
        store.insert(format!("{path}/weight"), self.normal(&[inp, out, k, k], 0.0, 0.02));
        if bias {
            store.insert(format!("{path}/bias"), Tensor::zeros(vec![out]));
        }
    }

    pub fn linear<T: Real>(&mut self, store: &mut ParamStore<T>, path: &str, out: usize, inp: usize, bias: bool) {
        let bound = 1.0 / (inp as f64).sqrt();
        store.insert(format!("{path}/weight"), self.uniform(&[out, inp], bound));
        if bias {
            store.insert(format!("{path}/bias"), self.uniform(&[out], bound));
        }
    }

    pub fn batch_norm<T: Real>(&mut self, store: &mut ParamStore<T>, path: &str, channels: usize) {
        store.insert(format!("{path}/gamma"), self.normal(&[channels], 1.0, 0.02));
        store.insert(format!("{path}/beta"), Tensor::zeros(vec![channels]));
        store.insert_buffer(format!("{path}/running_mean"), Tensor::zeros(vec![channels]));
        store.insert_buffer(format!("{path}/running_var"), Tensor::full(vec![channels], T::one()));
    }
}

fn bias<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, path: &str) -> Result<Option<Var>> {
    let p = format!("{path}/bias");
    if store.contains(&p) {
        Ok(Some(tape.param(store, &p)?))
    } else {
        Ok(None)
    }
}

pub fn conv<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, path: &str, x: Var, geom: ConvGeom) -> Result<Var> {
    let w = tape.param(store, &format!("{path}/weight"))?;
    let b = bias(tape, store, path)?;
    tape.conv2d(x, w, b, geom)
}

pub fn conv_transpose<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    path: &str,
    x: Var,
    geom: ConvGeom,
) -> Result<Var> {
    let w = tape.param(store, &format!("{path}/weight"))?;
    let b = bias(tape, store, path)?;
    tape.conv_transpose2d(x, w, b, geom)
}

pub fn linear<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, path: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{path}/weight"))?;
    let b = bias(tape, store, path)?;
    tape.linear(x, w, b)
}

pub fn batch_norm<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, path: &str, x: Var, train: bool) -> Result<Var> {
    let g = tape.param(store, &format!("{path}/gamma"))?;
    let b = tape.param(store, &format!("{path}/beta"))?;
    tape.batch_norm(x, g, b, store, path, train)
}

pub fn norm<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    kind: Norm,
    path: &str,
    x: Var,
    train: bool,
) -> Result<Var> {
    match kind {
        Norm::Instance => tape.instance_norm(x),
        Norm::Batch => batch_norm(tape, store, path, x, train),
        Norm::None => Ok(x),
    }
}

pub fn init_norm<T: Real>(init: &mut Init, store: &mut ParamStore<T>, kind: Norm, path: &str, channels: usize) {
    if kind == Norm::Batch {
        init.batch_norm(store, path, channels);
    }
}
