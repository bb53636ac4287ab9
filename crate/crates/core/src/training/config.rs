use serde::{Deserialize, Serialize};

use crate::dataio::ComposeMode;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{param_err, Result};
use crate::generator::GeneratorConfig;
use crate::geometry::ProjectionMode;
use crate::tensor::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "paper_256")]
    Paper256,
    #[serde(rename = "toy_64")]
    Toy64,
}

impl std::str::FromStr for Preset {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_256" => Ok(Preset::Paper256),
            "toy_64" => Ok(Preset::Toy64),
            _ => param_err("preset", format!("expected paper_256 or toy_64, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialLoss {
    /// `-log D(G(c))` for the generator.
    #[default]
    NonSaturating,
    /// `log(1 - D(G(c)))`, minimized by the generator.
    Minimax,
}

/// How samples become network inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub num_points: usize,
    pub d_max: f64,
    pub projection: ProjectionMode,
    pub border_width: usize,
    pub compose: ComposeMode,
    pub patch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: Preset,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda_l1: f64,
    pub adam: AdamConfig,
    #[serde(default)]
    pub adversarial: AdversarialLoss,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub data: DataConfig,
    /// Stop after this many steps in total, even mid-epoch.
    #[serde(default)]
    pub max_steps: Option<u64>,
    /// Extra checkpoints every this many steps; 0 keeps only the per-epoch one.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Write fake images for the first `dump_count` samples every this many epochs; 0 disables.
    #[serde(default)]
    pub dump_every_epochs: usize,
    #[serde(default = "default_dump_count")]
    pub dump_count: usize,
}

fn default_dump_count() -> usize {
    4
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let (generator, discriminator, patch_size, border_width) = match preset {
            Preset::Paper256 => (GeneratorConfig::paper(), DiscriminatorConfig::paper(), 256, 15),
            Preset::Toy64 => (GeneratorConfig::toy(), DiscriminatorConfig::toy(), 64, 8),
        };
        Self {
            preset,
            epochs: 100,
            batch_size: 1,
            seed: 0,
            lambda_l1: 100.0,
            adam: AdamConfig::default(),
            adversarial: AdversarialLoss::NonSaturating,
            generator,
            discriminator,
            data: DataConfig {
                num_points: 1024,
                d_max: 60.0,
                projection: ProjectionMode::Rgb,
                border_width,
                compose: ComposeMode::Overlay,
                patch_size,
            },
            max_steps: None,
            checkpoint_every: 0,
            dump_every_epochs: 0,
            dump_count: default_dump_count(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return param_err("epochs", "must be at least 1");
        }
        if self.batch_size < 1 {
            return param_err("batch_size", "must be at least 1");
        }
        if !(self.lambda_l1 >= 0.0) {
            return param_err("lambda_l1", "must be non-negative");
        }
        if !(self.adam.lr > 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return param_err("adam", "lr must be positive and betas in [0, 1)");
        }
        self.generator.validate()?;
        let d = &self.data;
        if d.patch_size != self.generator.image_size {
            return param_err(
                "patch_size",
                format!("{} differs from the generator input size {}", d.patch_size, self.generator.image_size),
            );
        }
        if d.num_points != self.generator.pointnet.num_points {
            return param_err("num_points", "differs from the point branch input size");
        }
        if 2 * d.border_width >= d.patch_size {
            return param_err("border_width", "leaves no interior");
        }
        if !(d.d_max > 0.0) {
            return param_err("d_max", "must be positive");
        }
        let cin = d.compose.channels(d.projection);
        if self.generator.in_channels != cin {
            return param_err(
                "in_channels",
                format!("generator expects {} channels, the composition yields {cin}", self.generator.in_channels),
            );
        }
        if self.discriminator.conditional && self.discriminator.condition_channels != cin {
            return param_err("condition_channels", format!("must equal the composed input's {cin} channels"));
        }
        if self.discriminator.image_channels != self.generator.out_channels {
            return param_err("image_channels", "discriminator and generator disagree on image channels");
        }
        Ok(())
    }

    /// Adjust channel counts after changing the projection or composition mode.
    pub fn sync_channels(&mut self) {
        let cin = self.data.compose.channels(self.data.projection);
        self.generator.in_channels = cin;
        self.discriminator.condition_channels = cin;
        self.data.num_points = self.generator.pointnet.num_points;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_serialize() {
        for p in [Preset::Paper256, Preset::Toy64] {
            let cfg = TrainConfig::preset(p);
            cfg.validate().unwrap();
            let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
        let paper = TrainConfig::preset(Preset::Paper256);
        assert_eq!(paper.adam.lr, 0.0002);
        assert_eq!(paper.adam.beta1, 0.5);
        assert_eq!(paper.lambda_l1, 100.0);
        assert_eq!(paper.data.border_width, 15);
        assert_eq!(paper.data.d_max, 60.0);
        let mut bad = TrainConfig::preset(Preset::Toy64);
        bad.epochs = 0;
        assert!(bad.validate().is_err());
        let mut bad = TrainConfig::preset(Preset::Toy64);
        bad.lambda_l1 = -1.0;
        assert!(bad.validate().is_err());
        let mut six = TrainConfig::preset(Preset::Toy64);
        six.data.compose = ComposeMode::Concat;
        assert!(six.validate().is_err());
        six.sync_channels();
        six.validate().unwrap();
        assert_eq!(six.generator.in_channels, 6);
    }
}
