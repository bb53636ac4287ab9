//! PatchGAN discriminator: five 4x4 convolutions scoring overlapping patches.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::nn::{self, Init, Norm};
use crate::tensor::{ConvGeom, ParamStore, Real, Tape, Var};

pub const PREFIX: &str = "discriminator";
pub const LAYERS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub channels: [usize; LAYERS],
    pub strides: [usize; LAYERS],
    /// Normalization of layers 2 to 4; the first and last layers have none.
    pub norm: Norm,
    pub image_channels: usize,
    /// Also see the composed conditions, concatenated along channels.
    pub conditional: bool,
    pub condition_channels: usize,
}

impl DiscriminatorConfig {
    pub fn paper() -> Self {
        Self {
            channels: [64, 128, 256, 512, 1],
            strides: [2, 2, 2, 1, 1],
            norm: Norm::Instance,
            image_channels: 3,
            conditional: false,
            condition_channels: 3,
        }
    }

    pub fn toy() -> Self {
        Self {
            channels: [16, 32, 64, 128, 1],
            ..Self::paper()
        }
    }

    pub fn in_channels(&self) -> usize {
        self.image_channels + if self.conditional { self.condition_channels } else { 0 }
    }

    /// Side of the score map for a square input of side `size`.
    pub fn output_size(&self, size: usize) -> usize {
        self.strides.iter().fold(size, |s, &st| (s + 2 - 4) / st + 1)
    }

    /// Side of the input window seen by one output cell.
    pub fn receptive_field(&self) -> usize {
        self.strides.iter().rev().fold(1, |r, &st| (r - 1) * st + 4)
    }

    fn layer_norm(&self, i: usize) -> Norm {
        if i == 0 || i == LAYERS - 1 {
            Norm::None
        } else {
            self.norm
        }
    }
}

pub fn init_discriminator<T: Real>(cfg: &DiscriminatorConfig, rng: &mut ChaCha8Rng) -> ParamStore<T> {
    let mut store = ParamStore::new();
    let mut init = Init { rng };
    let mut prev = cfg.in_channels();
    for (i, &c) in cfg.channels.iter().enumerate() {
        init.conv(&mut store, &format!("{PREFIX}/conv{i}"), c, prev, 4, cfg.layer_norm(i) == Norm::None);
        nn::init_norm(&mut init, &mut store, cfg.layer_norm(i), &format!("{PREFIX}/conv{i}/norm"), c);
        prev = c;
    }
    store
}

/// Pre-sigmoid patch logits `[B, 1, n, n]`. `condition` is required exactly
/// when the discriminator is conditional and ignored otherwise.
pub fn discriminator_logits<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &DiscriminatorConfig,
    image: Var,
    condition: Option<Var>,
    train: bool,
) -> Result<Var> {
    let s = tape.shape(image);
    if s.len() != 4 || s[1] != cfg.image_channels {
        return shape_err("discriminator", format!("expects [B, {}, H, W], got {s:?}", cfg.image_channels));
    }
    if tape.value(image).data().iter().any(|v| v.abs() > T::one()) {
        return param_err("image", "discriminator input must lie in [-1, 1]");
    }
    let mut x = image;
    if cfg.conditional {
        let Some(c) = condition else {
            return param_err("condition", "a conditional discriminator needs the composed conditions");
        };
        x = tape.concat(&[x, c], 1)?;
    }
    for i in 0..LAYERS {
        let path = format!("{PREFIX}/conv{i}");
        x = nn::conv(tape, store, &path, x, ConvGeom::new(cfg.strides[i], 1))?;
        if i < LAYERS - 1 {
            x = nn::norm(tape, store, cfg.layer_norm(i), &format!("{path}/norm"), x, train)?;
            x = tape.leaky_relu(x, 0.2)?;
        }
    }
    Ok(x)
}

/// Patch scores in `(0, 1)`.
pub fn discriminator_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &DiscriminatorConfig,
    image: Var,
    condition: Option<Var>,
    train: bool,
) -> Result<Var> {
    let logits = discriminator_logits(tape, store, cfg, image, condition, train)?;
    tape.sigmoid(logits)
}
