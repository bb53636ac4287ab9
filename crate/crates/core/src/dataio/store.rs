//! On-disk layouts: KITTI-style frame directories, the sample cache and split lists.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kitti::{
    read_kitti_calib, read_kitti_labels, read_velodyne_bin, write_kitti_labels, write_velodyne_bin, KittiCalib,
    KittiLabel,
};
use super::sample::ObjectSample;
use crate::error::{param_err, Error, Result};
use crate::geometry::{CameraModel, Point3, PointCloud};
use crate::raster::Image;

/// One frame of a KITTI object-benchmark style directory.
#[derive(Clone, Debug)]
pub struct Frame {
    pub id: String,
    pub image: Image,
    pub labels: Vec<KittiLabel>,
    pub cloud: PointCloud,
    pub calib: KittiCalib,
}

/// `image_2/`, `velodyne/`, `calib/` and `label_2/` under a common root.
#[derive(Clone, Debug)]
pub struct KittiDir {
    root: PathBuf,
}

impl KittiDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, sub: &str, id: &str, ext: &str) -> PathBuf {
        self.root.join(sub).join(format!("{id}.{ext}"))
    }

    /// Frame ids, sorted, taken from `image_2/*.png`.
    pub fn frame_ids(&self) -> Result<Vec<String>> {
        let dir = self.root.join("image_2");
        if !dir.is_dir() {
            return param_err("dataset_dir", format!("{} has no image_2 directory", self.root.display()));
        }
        let mut ids = Vec::new();
        for e in std::fs::read_dir(&dir)? {
            let p = e?.path();
            if p.extension().is_some_and(|x| x == "png") {
                if let Some(stem) = p.file_stem() {
                    ids.push(stem.to_string_lossy().into_owned());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn load_frame(&self, id: &str) -> Result<Frame> {
        Ok(Frame {
            id: id.into(),
            image: Image::load_png(&self.path("image_2", id, "png"))?,
            labels: read_kitti_labels(&self.path("label_2", id, "txt"))?,
            cloud: read_velodyne_bin(&self.path("velodyne", id, "bin"))?,
            calib: read_kitti_calib(&self.path("calib", id, "txt"))?,
        })
    }

    pub fn write_frame(&self, frame: &Frame) -> Result<()> {
        for sub in ["image_2", "label_2", "velodyne", "calib"] {
            std::fs::create_dir_all(self.root.join(sub))?;
        }
        frame.image.save_png(&self.path("image_2", &frame.id, "png"))?;
        write_kitti_labels(&self.path("label_2", &frame.id, "txt"), &frame.labels)?;
        write_velodyne_bin(&self.path("velodyne", &frame.id, "bin"), &frame.cloud)?;
        std::fs::write(self.path("calib", &frame.id, "txt"), frame.calib.to_text())?;
        Ok(())
    }

    /// Every file of a frame, for content hashing.
    pub fn frame_files(&self, id: &str) -> Vec<PathBuf> {
        vec![
            self.path("image_2", id, "png"),
            self.path("label_2", id, "txt"),
            self.path("velodyne", id, "bin"),
            self.path("calib", id, "txt"),
        ]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SampleMeta {
    id: String,
    object_class: String,
    cam: CameraModel,
    window: (usize, usize),
    patch_size: usize,
    origin: Point3,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CacheIndex {
    pub samples: Vec<String>,
    pub train: Vec<String>,
    pub eval: Vec<String>,
}

/// Directory of `<id>.png` patches, `<id>.bin` object clouds and `<id>.json`
/// metadata under `samples/`, plus `index.json` and the split lists.
#[derive(Clone, Debug)]
pub struct SampleCache {
    root: PathBuf,
}

impl SampleCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn sample_path(&self, id: &str, ext: &str) -> PathBuf {
        self.root.join("samples").join(format!("{id}.{ext}"))
    }

    pub fn write_sample(&self, s: &ObjectSample) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(self.root.join("samples"))?;
        let meta = SampleMeta {
            id: s.id.clone(),
            object_class: s.object_class.clone(),
            cam: s.cam.clone(),
            window: s.window,
            patch_size: s.patch_size(),
            origin: s.origin,
        };
        let paths = vec![self.sample_path(&s.id, "png"), self.sample_path(&s.id, "bin"), self.sample_path(&s.id, "json")];
        s.image_patch.save_png(&paths[0])?;
        write_velodyne_bin(&paths[1], &s.cloud)?;
        std::fs::write(&paths[2], serde_json::to_vec_pretty(&meta)?)?;
        Ok(paths)
    }

    pub fn read_sample(&self, id: &str) -> Result<ObjectSample> {
        let meta: SampleMeta = serde_json::from_slice(&std::fs::read(self.sample_path(id, "json"))?)?;
        let image_patch = Image::load_png(&self.sample_path(id, "png"))?;
        if image_patch.width() != meta.patch_size || image_patch.height() != meta.patch_size {
            return Err(Error::Invalid(format!("{id}: patch is not {0}x{0}", meta.patch_size)));
        }
        Ok(ObjectSample {
            id: meta.id,
            object_class: meta.object_class,
            image_patch,
            cloud: read_velodyne_bin(&self.sample_path(id, "bin"))?,
            cam: meta.cam,
            window: meta.window,
            origin: meta.origin,
        })
    }

    pub fn write_index(&self, index: &CacheIndex) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(&self.root)?;
        let paths = vec![self.root.join("index.json"), self.root.join("train.txt"), self.root.join("eval.txt")];
        std::fs::write(&paths[0], serde_json::to_vec_pretty(index)?)?;
        write_split_list(&paths[1], &index.train)?;
        write_split_list(&paths[2], &index.eval)?;
        Ok(paths)
    }

    pub fn read_index(&self) -> Result<CacheIndex> {
        let p = self.root.join("index.json");
        if !p.is_file() {
            return param_err("cache_dir", format!("{} has no index.json", self.root.display()));
        }
        Ok(serde_json::from_slice(&std::fs::read(p)?)?)
    }

    pub fn read_split(&self, ids: &[String]) -> Result<Vec<ObjectSample>> {
        ids.iter().map(|id| self.read_sample(id)).collect()
    }
}

/// Shuffle with `seed`, then put `floor(n * ratio)` items in the first part.
pub fn split_dataset<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return param_err("ratio", format!("must lie in (0, 1), got {ratio}"));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (items.len() as f64 * ratio).floor() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

/// One id per line; blank lines and `#` comments ignored.
pub fn read_split_list(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

pub fn write_split_list(path: &Path, ids: &[String]) -> Result<()> {
    let mut s = ids.join("\n");
    if !s.is_empty() {
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}
