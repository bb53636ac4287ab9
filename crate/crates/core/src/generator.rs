//! UNet generator over the composed projection/background image, fused at the
//! 1x1 bottleneck with the point-set feature.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::nn::{self, Init, Norm};
use crate::pointnet::{self, init_pointnet, pointnet_forward, PointNetConfig};
use crate::tensor::{ConvGeom, ParamStore, Real, Tape, Var};

pub const PREFIX: &str = "generator";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    UnetOnly,
    PointnetOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::UnetOnly, Variant::PointnetOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::UnetOnly => "unet_only",
            Variant::PointnetOnly => "pointnet_only",
        }
    }

    pub fn uses_points(self) -> bool {
        self != Variant::UnetOnly
    }

    pub fn uses_image(self) -> bool {
        self != Variant::PointnetOnly
    }
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "unet_only" => Ok(Variant::UnetOnly),
            "pointnet_only" => Ok(Variant::PointnetOnly),
            _ => param_err("variant", format!("expected full, unet_only or pointnet_only, got `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub variant: Variant,
    pub image_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Output channels of each encoder level, outermost first. Each level
    /// halves the resolution, so `image_size == 2^levels`.
    pub encoder_channels: Vec<usize>,
    pub norm: Norm,
    /// Number of decoder levels, innermost first, followed by dropout.
    pub dropout_levels: usize,
    pub dropout_p: f64,
    /// Keep dropout on outside training: it is the generator's only noise source.
    pub dropout_at_inference: bool,
    pub pointnet: PointNetConfig,
}

impl GeneratorConfig {
    pub fn paper() -> Self {
        Self {
            variant: Variant::Full,
            image_size: 256,
            in_channels: 3,
            out_channels: 3,
            encoder_channels: vec![64, 128, 256, 512, 512, 512, 512, 512],
            norm: Norm::Instance,
            dropout_levels: 3,
            dropout_p: 0.5,
            dropout_at_inference: true,
            pointnet: PointNetConfig::default(),
        }
    }

    pub fn toy() -> Self {
        Self {
            image_size: 64,
            encoder_channels: vec![16, 32, 64, 128, 128, 128],
            pointnet: PointNetConfig::toy(),
            ..Self::paper()
        }
    }

    pub fn levels(&self) -> usize {
        self.encoder_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels();
        if l < 2 || self.image_size != 1 << l {
            return param_err(
                "encoder_channels",
                format!("{l} levels cannot reduce {} pixels to 1x1", self.image_size),
            );
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return param_err("dropout_p", "must lie in [0, 1)");
        }
        if self.dropout_levels > l {
            return param_err("dropout_levels", format!("at most {l}"));
        }
        Ok(())
    }

    fn skips(&self) -> bool {
        self.variant != Variant::PointnetOnly
    }

    /// Input channels of decoder level `j`.
    fn decoder_in(&self, j: usize) -> usize {
        let c = &self.encoder_channels;
        if j == self.levels() - 1 || !self.skips() {
            c[j]
        } else {
            2 * c[j]
        }
    }

    fn decoder_out(&self, j: usize) -> usize {
        if j == 0 {
            self.out_channels
        } else {
            self.encoder_channels[j - 1]
        }
    }
}

const DOWN: ConvGeom = ConvGeom { stride: 2, pad: 1 };
const POINTWISE: ConvGeom = ConvGeom { stride: 1, pad: 0 };

pub fn init_generator<T: Real>(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let levels = cfg.levels();
    if cfg.variant.uses_points() {
        store.extend(init_pointnet(&cfg.pointnet, rng));
    }
    let mut init = Init { rng };
    let c = &cfg.encoder_channels;
    let bottleneck = c[levels - 1];
    if cfg.variant.uses_image() {
        let mut prev = cfg.in_channels;
        for (i, &ci) in c.iter().enumerate() {
            let normed = i > 0 && i < levels - 1 && cfg.norm != Norm::None;
            init.conv(&mut store, &format!("{PREFIX}/enc{i}"), ci, prev, 4, !normed);
            if i > 0 && i < levels - 1 {
                nn::init_norm(&mut init, &mut store, cfg.norm, &format!("{PREFIX}/enc{i}/norm"), ci);
            }
            prev = ci;
        }
    }
    match cfg.variant {
        Variant::Full => init.conv(&mut store, &format!("{PREFIX}/fuse"), bottleneck, bottleneck + cfg.pointnet.feature_dim, 1, true),
        Variant::PointnetOnly => init.conv(&mut store, &format!("{PREFIX}/from_feature"), bottleneck, cfg.pointnet.feature_dim, 1, true),
        Variant::UnetOnly => {}
    }
    for j in (0..levels).rev() {
        let path = format!("{PREFIX}/dec{j}");
        let normed = j > 0 && cfg.norm != Norm::None;
        init.conv_transpose(&mut store, &path, cfg.decoder_in(j), cfg.decoder_out(j), 4, !normed);
        if j > 0 {
            nn::init_norm(&mut init, &mut store, cfg.norm, &format!("{path}/norm"), cfg.decoder_out(j));
        }
    }
    Ok(store)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GeneratorInputs {
    /// Composed conditions `[B, in_channels, S, S]` in `[-1, 1]`.
    pub image: Option<Var>,
    /// Point sets `[B, N, 3]`.
    pub points: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub train: bool,
    /// Replace the skip tensor of this encoder level with zeros.
    pub ablate_skip: Option<usize>,
}

/// Fake images `[B, out_channels, S, S]` in `[-1, 1]`. Inputs the variant
/// does not consume are ignored.
pub fn generator_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &GeneratorConfig,
    inputs: GeneratorInputs,
    opts: ForwardOptions,
) -> Result<Var> {
    let levels = cfg.levels();
    let dropout = opts.train || cfg.dropout_at_inference;
    let feature = if cfg.variant.uses_points() {
        let Some(points) = inputs.points else {
            return param_err("points", format!("the {} variant needs the point condition", cfg.variant.name()));
        };
        let f = pointnet_forward(tape, store, &cfg.pointnet, points, opts.train)?;
        let b = tape.shape(f)[0];
        Some(tape.reshape(f, &[b, cfg.pointnet.feature_dim, 1, 1])?)
    } else {
        None
    };

    let mut skips = Vec::with_capacity(levels);
    let mut h = match (cfg.variant, feature) {
        (Variant::PointnetOnly, Some(f)) => nn::conv(tape, store, &format!("{PREFIX}/from_feature"), f, POINTWISE)?,
        _ => {
            let Some(image) = inputs.image else {
                return param_err("image", format!("the {} variant needs the image condition", cfg.variant.name()));
            };
            let s = tape.shape(image);
            if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.image_size || s[3] != cfg.image_size {
                return shape_err(
                    "generator",
                    format!("expects [B, {}, {size}, {size}], got {s:?}", cfg.in_channels, size = cfg.image_size),
                );
            }
            let mut x = image;
            for i in 0..levels {
                if i > 0 {
                    x = tape.leaky_relu(x, 0.2)?;
                }
                x = nn::conv(tape, store, &format!("{PREFIX}/enc{i}"), x, DOWN)?;
                if i > 0 && i < levels - 1 {
                    x = nn::norm(tape, store, cfg.norm, &format!("{PREFIX}/enc{i}/norm"), x, opts.train)?;
                }
                skips.push(x);
            }
            match feature {
                Some(f) => {
                    let cat = tape.concat(&[x, f], 1)?;
                    nn::conv(tape, store, &format!("{PREFIX}/fuse"), cat, POINTWISE)?
                }
                None => x,
            }
        }
    };

    for j in (0..levels).rev() {
        let path = format!("{PREFIX}/dec{j}");
        if j < levels - 1 && cfg.skips() {
            let mut skip = skips[j];
            if opts.ablate_skip == Some(j) {
                skip = tape.scale(skip, 0.0)?;
            }
            h = tape.concat(&[h, skip], 1)?;
        }
        h = tape.relu(h)?;
        h = nn::conv_transpose(tape, store, &path, h, DOWN)?;
        if j == 0 {
            h = tape.tanh(h)?;
        } else {
            h = nn::norm(tape, store, cfg.norm, &format!("{path}/norm"), h, opts.train)?;
            if levels - 1 - j < cfg.dropout_levels && dropout {
                h = tape.dropout(h, cfg.dropout_p)?;
            }
        }
    }
    Ok(h)
}

/// Parameter prefixes present for a variant.
pub fn param_groups(variant: Variant) -> Vec<&'static str> {
    match variant {
        Variant::UnetOnly => vec![PREFIX],
        _ => vec![PREFIX, pointnet::PREFIX],
    }
}
