//! Training configuration from presets, the sample cache, a config file and flags.
//!
//! Layers are applied in that order and later layers win. Each value set by
//! more than one non-preset layer with different contents is recorded as an
//! override so the manifest shows exactly which setting took effect.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use points2pix::generator::Variant;
use points2pix::training::{Preset, TrainConfig};
use serde_json::Value;

use crate::exit::invalid;

#[derive(Args, Clone, Debug, Default)]
pub struct TrainFlags {
    /// JSON file with any subset of the training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// paper_256 or toy_64 [default: paper_256]
    #[arg(long)]
    pub preset: Option<Preset>,
    /// full, unet_only or pointnet_only
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda_l1: Option<f64>,
    /// Stop after this many steps in total.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Extra checkpoint every N steps.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Dump fakes of the first samples every N epochs.
    #[arg(long)]
    pub dump_every_epochs: Option<usize>,
}

/// Data parameters fixed when the cache was built.
#[derive(Clone, Debug, Default)]
pub struct CacheLayer {
    pub patch_size: Option<usize>,
    pub d_max: Option<f64>,
    pub border_width: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: TrainConfig,
    pub overrides: Vec<String>,
}

struct Builder {
    tree: Value,
    origin: BTreeMap<String, (&'static str, Value)>,
    overrides: Vec<String>,
}

impl Builder {
    fn set(&mut self, pointer: &str, value: Value, layer: &'static str) -> Result<()> {
        let Some(slot) = self.tree.pointer_mut(pointer) else {
            return Err(invalid(format!("unknown configuration key `{pointer}`")));
        };
        if slot.is_object() {
            return Err(invalid(format!("`{pointer}` is a section, not a value")));
        }
        if let Some((prev_layer, prev)) = self.origin.get(pointer) {
            if *prev != value {
                self.overrides
                    .push(format!("{pointer}: {layer} value {value} overrides {prev_layer} value {prev}"));
            }
        }
        *slot = value.clone();
        self.origin.insert(pointer.to_string(), (layer, value));
        Ok(())
    }

    fn set_from_file(&mut self, prefix: &str, v: &Value) -> Result<()> {
        match v {
            Value::Object(m) => {
                for (k, v) in m {
                    self.set_from_file(&format!("{prefix}/{k}"), v)?;
                }
                Ok(())
            }
            _ => self.set(prefix, v.clone(), "config file"),
        }
    }
}

fn read_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: Value =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: invalid JSON: {e}", path.display())))?;
    if !v.is_object() {
        return Err(invalid(format!("{}: expected a JSON object", path.display())));
    }
    Ok(v)
}

pub fn resolve(flags: &TrainFlags, cache: &CacheLayer) -> Result<Resolved> {
    let file = flags.config.as_deref().map(read_file).transpose()?;
    let file_preset = match file.as_ref().and_then(|f| f.get("preset")) {
        Some(v) => Some(
            serde_json::from_value::<Preset>(v.clone())
                .map_err(|e| invalid(format!("config file preset: {e}")))?,
        ),
        None => None,
    };
    let preset = flags.preset.or(file_preset).unwrap_or(Preset::Paper256);
    let mut b = Builder {
        tree: serde_json::to_value(TrainConfig::preset(preset))?,
        origin: BTreeMap::new(),
        overrides: Vec::new(),
    };
    if let (Some(f), Some(fp)) = (flags.preset, file_preset) {
        if f != fp {
            b.overrides.push(format!("/preset: flag value {f:?} overrides config file value {fp:?}"));
        }
    }

    let cache_values = [
        ("/data/patch_size", cache.patch_size.map(Value::from)),
        ("/data/d_max", cache.d_max.map(Value::from)),
        ("/data/border_width", cache.border_width.map(Value::from)),
    ];
    for (p, v) in cache_values {
        if let Some(v) = v {
            b.set(p, v, "sample cache")?;
        }
    }
    if let Some(mut f) = file {
        f.as_object_mut().expect("object").remove("preset");
        b.set_from_file("", &f)?;
    }
    let flag_values = [
        ("/generator/variant", flags.variant.map(|v| Value::from(v.name()))),
        ("/epochs", flags.epochs.map(Value::from)),
        ("/batch_size", flags.batch_size.map(Value::from)),
        ("/seed", flags.seed.map(Value::from)),
        ("/lambda_l1", flags.lambda_l1.map(Value::from)),
        ("/max_steps", flags.max_steps.map(Value::from)),
        ("/checkpoint_every", flags.checkpoint_every.map(Value::from)),
        ("/dump_every_epochs", flags.dump_every_epochs.map(Value::from)),
    ];
    for (p, v) in flag_values {
        if let Some(v) = v {
            b.set(p, v, "flag")?;
        }
    }

    let mut config: TrainConfig =
        serde_json::from_value(b.tree).map_err(|e| invalid(format!("configuration: {e}")))?;
    config.sync_channels();
    config.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(Resolved {
        config,
        overrides: b.overrides,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(dir: &Path, json: &str) -> PathBuf {
        let p = dir.join("cfg.json");
        std::fs::write(&p, json).unwrap();
        p
    }

    #[test]
    fn flags_beat_file_beats_preset_and_overrides_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let flags = TrainFlags {
            config: Some(file(dir.path(), r#"{"preset": "toy_64", "epochs": 5, "seed": 3}"#)),
            epochs: Some(2),
            ..Default::default()
        };
        let r = resolve(&flags, &CacheLayer::default()).unwrap();
        assert_eq!(r.config.preset, Preset::Toy64);
        assert_eq!((r.config.epochs, r.config.seed), (2, 3));
        assert_eq!(r.overrides.len(), 1);
        assert!(r.overrides[0].starts_with("/epochs: flag value 2 overrides config file value 5"));
    }

    #[test]
    fn unknown_keys_and_invalid_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad = TrainFlags {
            config: Some(file(dir.path(), r#"{"epoch": 5}"#)),
            ..Default::default()
        };
        assert!(resolve(&bad, &CacheLayer::default()).unwrap_err().to_string().contains("/epoch"));
        let zero = TrainFlags {
            preset: Some(Preset::Toy64),
            epochs: Some(0),
            ..Default::default()
        };
        assert!(resolve(&zero, &CacheLayer::default()).is_err());
    }

    #[test]
    fn cache_patch_size_must_match_the_preset() {
        let flags = TrainFlags {
            preset: Some(Preset::Toy64),
            ..Default::default()
        };
        let cache = CacheLayer {
            patch_size: Some(256),
            ..Default::default()
        };
        assert!(resolve(&flags, &cache).is_err());
        let ok = CacheLayer {
            patch_size: Some(64),
            d_max: Some(30.0),
            border_width: Some(6),
        };
        let r = resolve(&flags, &ok).unwrap();
        assert_eq!((r.config.data.d_max, r.config.data.border_width), (30.0, 6));
    }
}
