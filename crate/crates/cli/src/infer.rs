//! `generate` and `rotate`.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use points2pix::dataio::{extract_background_patch, BackgroundPatch, CacheIndex, ObjectSample, SampleCache};
use points2pix::geometry::Axis;
use points2pix::seed::{SeedStreams, SAMPLING};
use points2pix::tensor::Checkpoint;
use points2pix::training::{
    condition_triple, generate_background_variations, generate_from_conditions, inference_seed, rotated_conditions,
    rotation_demo, TrainState,
};
use rand::seq::SliceRandom;

use crate::exit::invalid;
use crate::manifest::RunManifest;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Split {
    Train,
    Eval,
    All,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Sample ids, comma separated. Overrides --split.
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<String>,
    #[arg(long, value_enum, default_value = "eval")]
    pub split: Split,
    /// Fakes per sample with backgrounds borrowed from other cached samples;
    /// 0 uses each sample's own background.
    #[arg(long, default_value_t = 0)]
    pub backgrounds: usize,
    /// Seed for dropout and background choice [default: the checkpoint's seed].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Rotate the cloud behind c2 about this camera axis before generating.
    #[arg(long, requires = "rotate_degrees")]
    pub rotate_axis: Option<Axis>,
    #[arg(long, requires = "rotate_axis")]
    pub rotate_degrees: Option<f64>,
}

fn load_state(checkpoint: &Path) -> Result<TrainState<f32>> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    Ok(TrainState::from_checkpoint(&ck)?)
}

fn select_ids(index: &CacheIndex, ids: &[String], split: Split) -> Result<Vec<String>> {
    if ids.is_empty() {
        return Ok(match split {
            Split::Train => index.train.clone(),
            Split::Eval => index.eval.clone(),
            Split::All => index.samples.clone(),
        });
    }
    let unknown: Vec<&String> = ids.iter().filter(|i| !index.samples.contains(i)).collect();
    if !unknown.is_empty() {
        return Err(invalid(format!("ids not in the cache: {unknown:?}")));
    }
    Ok(ids.to_vec())
}

/// `k` backgrounds from every cached sample except `id`, drawn without
/// replacement by a stream keyed on the sample id.
fn pick_backgrounds(
    pool: &[(String, BackgroundPatch)],
    id: &str,
    k: usize,
    streams: &SeedStreams,
) -> Result<Vec<BackgroundPatch>> {
    let mut candidates: Vec<&BackgroundPatch> = pool.iter().filter(|(p, _)| p != id).map(|(_, b)| b).collect();
    if candidates.len() < k {
        return Err(invalid(format!(
            "background pool for {id} has {} patch(es), fewer than --backgrounds {k}",
            candidates.len()
        )));
    }
    let mut rng = streams.rng(SAMPLING, streams.seed_for_key(SAMPLING, &format!("backgrounds/{id}")));
    candidates.shuffle(&mut rng);
    Ok(candidates.into_iter().take(k).cloned().collect())
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let state = load_state(&a.checkpoint)?;
    let data = state.config.data.clone();
    let cache = SampleCache::new(&a.cache);
    let index = cache.read_index()?;
    let ids = select_ids(&index, &a.ids, a.split)?;
    if ids.is_empty() {
        return Err(invalid("no samples selected"));
    }
    let streams = SeedStreams::new(a.seed.unwrap_or(state.config.seed));
    let pool: Vec<(String, BackgroundPatch)> = if a.backgrounds > 0 {
        let mut pool = Vec::with_capacity(index.samples.len());
        for id in &index.samples {
            let s = cache.read_sample(id)?;
            pool.push((id.clone(), extract_background_patch(&s.image_patch, data.border_width)?));
        }
        if pool.len().saturating_sub(1) < a.backgrounds {
            return Err(invalid(format!(
                "background pool has {} patch(es) per sample, fewer than --backgrounds {}",
                pool.len().saturating_sub(1),
                a.backgrounds
            )));
        }
        pool
    } else {
        Vec::new()
    };
    std::fs::create_dir_all(&a.out)?;
    let rotation = a.rotate_axis.zip(a.rotate_degrees);
    let mut written = 0;
    for id in &ids {
        let sample: ObjectSample = cache.read_sample(id)?;
        let mut base = condition_triple(&sample, &data, state.streams())?;
        if let Some((axis, deg)) = rotation {
            base = rotated_conditions(&base, &sample, &data, axis, deg)?;
        }
        let seed = inference_seed(&streams, id);
        if a.backgrounds == 0 {
            generate_from_conditions(&state, &sample, &base, seed)?.save_png(&a.out.join(format!("{id}.png")))?;
            written += 1;
        } else {
            let bgs = pick_backgrounds(&pool, id, a.backgrounds, &streams)?;
            for (name, img) in generate_background_variations(&state, &sample, &base, &bgs, seed)? {
                img.save_png(&a.out.join(name))?;
                written += 1;
            }
        }
    }
    let config = serde_json::json!({
        "variant": state.config.generator.variant,
        "ids": ids,
        "backgrounds": a.backgrounds,
        "rotate_axis": a.rotate_axis,
        "rotate_degrees": a.rotate_degrees,
    });
    let mut m = RunManifest::new("generate", config, Some(streams.master()));
    m.inputs = vec![a.checkpoint.clone(), a.cache.clone()];
    m.outputs = vec![a.out.clone()];
    m.finish(&a.out)?;
    println!("wrote {written} image(s) to {}", a.out.display());
    Ok(())
}

pub fn rotate(checkpoint: &Path, cache_dir: &Path, id: &str, axis: Axis, degrees: f64, out: &Path) -> Result<()> {
    let state = load_state(checkpoint)?;
    let cache = SampleCache::new(cache_dir);
    let sample = cache.read_sample(id).with_context(|| format!("reading sample {id}"))?;
    let r = rotation_demo(&state, &sample, axis, degrees)?;
    std::fs::create_dir_all(out)?;
    r.original.save_png(&out.join("original.png"))?;
    r.rotated.save_png(&out.join("rotated.png"))?;
    r.projection_original.save_png(&out.join("projection_original.png"))?;
    r.projection_rotated.save_png(&out.join("projection_rotated.png"))?;
    let summary = serde_json::to_string_pretty(&r.summary)?;
    std::fs::write(out.join("summary.json"), &summary)?;
    println!("{summary}");
    let config = serde_json::json!({ "id": id, "axis": axis, "degrees": degrees });
    let mut m = RunManifest::new("rotate", config, Some(state.config.seed));
    m.inputs = vec![checkpoint.to_path_buf(), cache_dir.to_path_buf()];
    m.outputs = vec![out.to_path_buf()];
    m.finish(out)?;
    Ok(())
}
