//! `synth` and `preprocess`.

use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Args;
use points2pix::dataio::{
    crop_object_sample, make_synthetic_scene, random_scene_spec, split_dataset, CacheIndex, CropConfig, Frame,
    KittiDir, RandomSceneConfig, SampleCache,
};
use serde::{Deserialize, Serialize};

use crate::config::CacheLayer;
use crate::exit::{invalid, Partial};
use crate::manifest::{RunManifest, RunStatus};

pub const SUMMARY_FILE: &str = "preprocess.json";

pub fn synth(out: &Path, scenes: usize, seed: u64, width: usize, height: usize) -> Result<()> {
    if scenes == 0 {
        return Err(invalid("--scenes must be at least 1"));
    }
    let cfg = RandomSceneConfig {
        width,
        height,
        ..RandomSceneConfig::default()
    };
    let kd = KittiDir::new(out);
    for k in 0..scenes {
        let s = seed.wrapping_add(k as u64);
        let scene = make_synthetic_scene(s, &random_scene_spec(s, &cfg)?)?;
        kd.write_frame(&Frame {
            id: format!("{k:06}"),
            image: scene.image,
            labels: scene.labels,
            cloud: scene.cloud,
            calib: scene.calib,
        })?;
    }
    let config = serde_json::json!({ "scenes": scenes, "width": width, "height": height });
    let mut m = RunManifest::new("synth", config, Some(seed));
    m.outputs = vec![out.to_path_buf()];
    m.finish(out)?;
    println!("wrote {scenes} scenes to {}", out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Object classes to keep; repeat for several. Empty keeps every class.
    #[arg(long = "class")]
    pub classes: Vec<String>,
    #[arg(long, default_value_t = 700)]
    pub min_points: usize,
    /// Depth normalization used when building c2, recorded for training.
    #[arg(long, default_value_t = 60.0)]
    pub dmax: f64,
    /// Width of the c3 background frame, recorded for training.
    #[arg(long, default_value_t = 15)]
    pub border: usize,
    /// Fraction of samples in the training split.
    #[arg(long, default_value_t = 0.9)]
    pub split: f64,
    #[arg(long, default_value_t = 256)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub near: f64,
    #[arg(long, default_value_t = 80.0)]
    pub far: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreprocessParams {
    pub classes: Vec<String>,
    pub min_points: usize,
    pub patch_size: usize,
    pub d_max: f64,
    pub border_width: usize,
    pub split: f64,
    pub seed: u64,
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PreprocessCounts {
    pub frames: usize,
    pub frames_failed: usize,
    pub samples: usize,
    pub train: usize,
    pub eval: usize,
    pub skipped_class: usize,
    pub skipped_occluded: usize,
    pub skipped_outside: usize,
    pub skipped_few_points: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub params: PreprocessParams,
    pub counts: PreprocessCounts,
    /// One entry per frame that could not be read.
    pub errors: Vec<String>,
}

/// Data parameters recorded by `preprocess`, if the cache has a summary.
pub fn cache_layer(cache_dir: &Path) -> Result<CacheLayer> {
    let p = cache_dir.join(SUMMARY_FILE);
    if !p.is_file() {
        return Ok(CacheLayer::default());
    }
    let s: PreprocessSummary = serde_json::from_slice(&std::fs::read(&p)?)
        .map_err(|e| invalid(format!("{}: {e}", p.display())))?;
    Ok(CacheLayer {
        patch_size: Some(s.params.patch_size),
        d_max: Some(s.params.d_max),
        border_width: Some(s.params.border_width),
    })
}

pub fn preprocess(a: &PreprocessArgs) -> Result<()> {
    if !(a.dmax > 0.0) {
        return Err(invalid(format!("--dmax must be positive, got {}", a.dmax)));
    }
    if 2 * a.border >= a.patch_size {
        return Err(invalid(format!("--border {} leaves no interior in a {} px patch", a.border, a.patch_size)));
    }
    if !(a.split > 0.0 && a.split < 1.0) {
        return Err(invalid(format!("--split must lie in (0, 1), got {}", a.split)));
    }
    let kd = KittiDir::new(&a.dataset_dir);
    let ids = kd.frame_ids()?;
    let crop = CropConfig {
        classes: a.classes.clone(),
        min_points: a.min_points,
        patch_size: a.patch_size,
        ..CropConfig::default()
    };
    let cache = SampleCache::new(&a.out_dir);
    let mut counts = PreprocessCounts {
        frames: ids.len(),
        ..Default::default()
    };
    let mut errors = Vec::new();
    let mut sample_ids = Vec::new();
    for id in &ids {
        let frame = match kd.load_frame(id) {
            Ok(f) => f,
            Err(e) => {
                let files: Vec<String> = kd.frame_files(id).iter().map(|p| p.display().to_string()).collect();
                errors.push(format!("frame {id} ({}): {e}", files.join(", ")));
                counts.frames_failed += 1;
                continue;
            }
        };
        let cam = frame.calib.camera(frame.image.width(), frame.image.height(), a.near, a.far)?;
        let got = crop_object_sample(id, &frame.image, &frame.labels, &frame.cloud, &cam, &crop)?;
        counts.skipped_class += got.skipped_class;
        counts.skipped_occluded += got.skipped_occluded;
        counts.skipped_outside += got.skipped_outside;
        counts.skipped_few_points += got.skipped_few_points;
        for s in &got.samples {
            cache.write_sample(s)?;
            sample_ids.push(s.id.clone());
        }
    }
    counts.samples = sample_ids.len();
    let (mut train, mut eval) = if sample_ids.len() >= 2 {
        split_dataset(&sample_ids, a.split, a.seed)?
    } else {
        (sample_ids.clone(), Vec::new())
    };
    train.sort();
    eval.sort();
    counts.train = train.len();
    counts.eval = eval.len();

    let params = PreprocessParams {
        classes: a.classes.clone(),
        min_points: a.min_points,
        patch_size: a.patch_size,
        d_max: a.dmax,
        border_width: a.border,
        split: a.split,
        seed: a.seed,
        near: a.near,
        far: a.far,
    };
    let summary = PreprocessSummary {
        params: params.clone(),
        counts: counts.clone(),
        errors: errors.clone(),
    };
    for e in &errors {
        eprintln!("malformed: {e}");
    }
    println!("{}", serde_json::to_string_pretty(&summary.counts)?);
    if sample_ids.is_empty() {
        return Err(anyhow::anyhow!(
            "no samples produced from {} frame(s) ({} unreadable, {} objects below --min-points {})",
            counts.frames,
            counts.frames_failed,
            counts.skipped_few_points,
            a.min_points
        ));
    }
    cache.write_index(&CacheIndex {
        samples: sample_ids,
        train,
        eval,
    })?;
    std::fs::write(a.out_dir.join(SUMMARY_FILE), serde_json::to_vec_pretty(&summary)?)?;

    let mut m = RunManifest::new("preprocess", serde_json::to_value(&params)?, Some(a.seed));
    m.inputs = vec![a.dataset_dir.clone()];
    m.outputs = vec![a.out_dir.clone()];
    if !errors.is_empty() {
        m.status = RunStatus::Partial;
        let path = m.finish(&a.out_dir)?;
        return Err(Partial {
            reason: format!("{} of {} frame(s) could not be read", errors.len(), counts.frames),
            files: vec![a.out_dir.join("index.json"), path],
        }
        .into());
    }
    m.finish(&a.out_dir)?;
    Ok(())
}
