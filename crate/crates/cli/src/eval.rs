//! `detect` and `evaluate`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use points2pix::dataio::read_split_list;
use points2pix::metrics::{
    blob_detector, build_report, diversity_table, id_stem, read_detections, write_detections, BlobDetectorConfig,
};
use points2pix::raster::Image;

use crate::exit::invalid;
use crate::manifest::RunManifest;

pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const REPORT_FILE: &str = "report.json";

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    v.retain(|p| p.extension().is_some_and(|x| x == "png"));
    v.sort();
    Ok(v)
}

pub fn detect(images: &Path, out: &Path) -> Result<()> {
    let cfg = BlobDetectorConfig::default();
    let files = png_files(images)?;
    if files.is_empty() {
        return Err(invalid(format!("no PNG images in {}", images.display())));
    }
    let mut records = Vec::new();
    for f in &files {
        let img = Image::load_png(f)?;
        let name = f.file_name().expect("file").to_string_lossy();
        records.extend(blob_detector(&img, &name, &cfg));
    }
    std::fs::create_dir_all(out)?;
    let path = out.join(DETECTIONS_FILE);
    let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
    write_detections(&mut w, &records)?;
    drop(w);
    let mut m = RunManifest::new("detect", serde_json::to_value(&cfg)?, None);
    m.inputs = vec![images.to_path_buf()];
    m.outputs = vec![path];
    m.finish(out)?;
    println!("{} detection(s) in {} image(s)", records.len(), files.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Detector output on the real images (JSON lines).
    #[arg(long)]
    pub real: PathBuf,
    /// Detector output on the fakes, one fake per real image id.
    #[arg(long)]
    pub fake: PathBuf,
    #[arg(long = "class", default_value = "Car")]
    pub class: String,
    #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.5, 0.7])]
    pub thresholds: Vec<f64>,
    /// Image ids to score, one per line; defaults to the ids of the real file.
    #[arg(long)]
    pub ids: Option<PathBuf>,
    /// Boxes are clamped to this square patch size.
    #[arg(long, default_value_t = 256.0)]
    pub patch_size: f64,
    /// Detections on background variations `<id>_bg<k>.png`, for the diversity table.
    #[arg(long, requires = "backgrounds")]
    pub diversity: Option<PathBuf>,
    #[arg(long)]
    pub backgrounds: Option<usize>,
    /// Directory of the variation images; variations absent from it are reported missing.
    #[arg(long, requires = "diversity")]
    pub variation_images: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    if a.thresholds.is_empty() {
        return Err(invalid("at least one threshold is required"));
    }
    let real = read_detections(&a.real, a.patch_size).with_context(|| format!("reading {}", a.real.display()))?;
    let fake = read_detections(&a.fake, a.patch_size).with_context(|| format!("reading {}", a.fake.display()))?;
    let ids = a.ids.as_deref().map(read_split_list).transpose()?;
    let mut report = build_report(&real, &fake, &a.class, &a.thresholds, ids.as_deref())?;
    let mut inputs = vec![a.real.clone(), a.fake.clone()];
    inputs.extend(a.ids.clone());
    if let (Some(path), Some(k)) = (&a.diversity, a.backgrounds) {
        let bg = read_detections(path, a.patch_size).with_context(|| format!("reading {}", path.display()))?;
        let present: Option<BTreeSet<String>> = match &a.variation_images {
            Some(dir) => Some(
                png_files(dir)?
                    .iter()
                    .map(|p| id_stem(&p.to_string_lossy()).to_string())
                    .collect(),
            ),
            None => None,
        };
        let real_scope: Vec<_> = match &ids {
            Some(ids) => {
                let keep: BTreeSet<&str> = ids.iter().map(|i| id_stem(i)).collect();
                real.iter().filter(|r| keep.contains(id_stem(&r.image_id))).cloned().collect()
            }
            None => real.clone(),
        };
        report.diversity = diversity_table(&real_scope, &bg, &a.class, &a.thresholds, k, present.as_ref())?;
        inputs.push(path.clone());
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if !report.unmatched_fake_ids.is_empty() {
        eprintln!("excluded fake ids: {}", report.unmatched_fake_ids.join(", "));
    }
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join(REPORT_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
    println!("threshold  S_c     mean IoU");
    for row in &report.rows {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!("{:<9}  {:<6}  {}", row.threshold, f(row.classification.score), f(row.inception.mean_iou));
    }
    let config = serde_json::json!({
        "class": a.class,
        "thresholds": a.thresholds,
        "patch_size": a.patch_size,
        "backgrounds": a.backgrounds,
    });
    let mut m = RunManifest::new("evaluate", config, None);
    m.inputs = inputs;
    m.outputs = vec![path];
    m.finish(&a.out)?;
    Ok(())
}
