//! Object-centric samples and the three generator conditions.

use serde::{Deserialize, Serialize};

use super::kitti::KittiLabel;
use crate::error::{param_err, Result};
use crate::geometry::{
    encode_projection_image, project_points, sample_points, CameraModel, Point3, PointCloud, ProjectionImage,
    ProjectionMode,
};
use crate::raster::Image;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CropConfig {
    /// Classes to keep; empty keeps every class.
    pub classes: Vec<String>,
    pub min_points: usize,
    pub patch_size: usize,
    /// Objects with a KITTI occlusion level at or above this are skipped.
    pub max_occlusion: i32,
    /// Objects truncated by more than this fraction are skipped.
    pub max_truncation: f64,
    /// Relative dilation of the labeled box when cutting the object cloud.
    pub box_margin: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            classes: vec![],
            min_points: 700,
            patch_size: 256,
            max_occlusion: 2,
            max_truncation: 0.3,
            box_margin: 0.1,
        }
    }
}

/// A labeled object cut out of a scene: the ground-truth patch, the object's
/// points (sensor frame) and the full-image camera.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSample {
    pub id: String,
    pub object_class: String,
    pub image_patch: Image,
    pub cloud: PointCloud,
    pub cam: CameraModel,
    /// Top-left corner of the patch in the full image.
    pub window: (usize, usize),
    /// Box center in the sensor frame.
    pub origin: Point3,
}

impl ObjectSample {
    pub fn patch_size(&self) -> usize {
        self.image_patch.width()
    }

    /// Projection of the object cloud through the full-image camera, cut to the patch window.
    pub fn projection(&self, d_max: f64, mode: ProjectionMode) -> Result<ProjectionImage> {
        self.projection_of(&self.cloud, d_max, mode)
    }

    pub fn projection_of(&self, cloud: &PointCloud, d_max: f64, mode: ProjectionMode) -> Result<ProjectionImage> {
        let full = encode_projection_image(cloud, &self.cam, d_max, mode)?;
        full.crop(self.window.0, self.window.1, self.patch_size())
    }

    /// `n` points drawn with `seed`, translated so the object origin sits at zero.
    pub fn point_condition(&self, n: usize, seed: u64) -> Result<PointCloud> {
        let s = sample_points(&self.cloud, n, seed)?;
        let o = self.origin;
        let pts = s.points().iter().map(|p| [p[0] - o[0], p[1] - o[1], p[2] - o[2]]).collect();
        PointCloud::new(pts, s.intensity().map(|v| v.to_vec()))
    }
}

#[derive(Clone, Debug, Default)]
pub struct CropOutcome {
    pub samples: Vec<ObjectSample>,
    pub skipped_class: usize,
    pub skipped_occluded: usize,
    pub skipped_outside: usize,
    pub skipped_few_points: usize,
}

/// One sample per usable labeled object. The patch is centered on the pixel
/// of the projected box center and shifted inward at image edges.
pub fn crop_object_sample(
    id: &str,
    image: &Image,
    labels: &[KittiLabel],
    cloud: &PointCloud,
    cam: &CameraModel,
    cfg: &CropConfig,
) -> Result<CropOutcome> {
    let size = cfg.patch_size;
    if image.width() < size || image.height() < size {
        return param_err(
            "patch_size",
            format!("{size} exceeds image {}x{}", image.width(), image.height()),
        );
    }
    if (image.width(), image.height()) != (cam.width, cam.height) {
        return param_err("cam", "raster size differs from the image");
    }
    let to_sensor = cam.extrinsic.inverse_rigid();
    let cam_points: Vec<Point3> = cloud.points().iter().map(|p| cam.extrinsic.apply(p)).collect();
    let mut out = CropOutcome::default();
    for (k, label) in labels.iter().enumerate() {
        if !cfg.classes.is_empty() && !cfg.classes.iter().any(|c| c == &label.class) {
            out.skipped_class += 1;
            continue;
        }
        if label.occluded >= cfg.max_occlusion || label.truncated > cfg.max_truncation {
            out.skipped_occluded += 1;
            continue;
        }
        let origin = to_sensor.apply(&label.center_camera());
        let center = PointCloud::from_points(vec![origin])?;
        let Some(px) = project_points(&center, cam)?.first().copied() else {
            out.skipped_outside += 1;
            continue;
        };
        let keep: Vec<usize> = (0..cloud.len())
            .filter(|&i| label.contains_camera_point(&cam_points[i], cfg.box_margin))
            .collect();
        if keep.len() < cfg.min_points {
            out.skipped_few_points += 1;
            continue;
        }
        let x0 = px.x.saturating_sub(size / 2).min(image.width() - size);
        let y0 = px.y.saturating_sub(size / 2).min(image.height() - size);
        out.samples.push(ObjectSample {
            id: format!("{id}_{k:02}"),
            object_class: label.class.clone(),
            image_patch: image.crop(x0, y0, size, size)?,
            cloud: cloud.select(&keep),
            cam: cam.clone(),
            window: (x0, y0),
            origin,
        });
    }
    Ok(out)
}

/// Condition c3: the outer frame of a patch, interior zeroed.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundPatch {
    pub pixels: Image,
    pub border_width: usize,
}

impl BackgroundPatch {
    pub fn in_border(&self, y: usize, x: usize) -> bool {
        let (h, w, b) = (self.pixels.height(), self.pixels.width(), self.border_width);
        y < b || x < b || y >= h - b || x >= w - b
    }

    /// Per-pixel mask, row-major, true on the kept frame.
    pub fn mask(&self) -> Vec<bool> {
        let (h, w) = (self.pixels.height(), self.pixels.width());
        (0..h * w).map(|i| self.in_border(i / w, i % w)).collect()
    }
}

pub fn extract_background_patch(patch: &Image, border_width: usize) -> Result<BackgroundPatch> {
    let size = patch.width().min(patch.height());
    if 2 * border_width >= size {
        return param_err("border_width", format!("2 x {border_width} must be below the patch size {size}"));
    }
    let mut out = BackgroundPatch {
        pixels: patch.clone(),
        border_width,
    };
    for c in 0..patch.channels() {
        for y in border_width..patch.height() - border_width {
            for x in border_width..patch.width() - border_width {
                out.pixels.set(c, y, x, 0.0);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ComposeMode {
    /// Background frame with the projection drawn over it.
    #[default]
    Overlay,
    /// Projection channels followed by the background channels.
    Concat,
}

impl ComposeMode {
    pub fn channels(self, projection: ProjectionMode) -> usize {
        match self {
            ComposeMode::Overlay => 3,
            ComposeMode::Concat => projection.channels() + 3,
        }
    }
}

/// Generator image input from c2 and c3. In overlay mode a one-channel
/// projection is replicated across the three color channels.
pub fn compose_generator_input(c2: &ProjectionImage, c3: &BackgroundPatch, mode: ComposeMode) -> Result<Image> {
    let (p, b) = (&c2.image, &c3.pixels);
    if (p.height(), p.width()) != (b.height(), b.width()) || b.channels() != 3 {
        return param_err(
            "conditions",
            format!(
                "projection {}x{} and background {}x{}x{} must share a raster, background RGB",
                p.height(),
                p.width(),
                b.channels(),
                b.height(),
                b.width()
            ),
        );
    }
    match mode {
        ComposeMode::Overlay => {
            let mut out = b.clone();
            for y in 0..p.height() {
                for x in 0..p.width() {
                    if p.is_set(y, x) {
                        for c in 0..3 {
                            out.set(c, y, x, p.get(c.min(p.channels() - 1), y, x));
                        }
                    }
                }
            }
            Ok(out)
        }
        ComposeMode::Concat => {
            let mut data = p.data().to_vec();
            data.extend_from_slice(b.data());
            Image::from_data(p.channels() + 3, p.height(), p.width(), data)
        }
    }
}

/// The three generator conditions for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionTriple {
    pub c1: PointCloud,
    pub c2: ProjectionImage,
    pub c3: BackgroundPatch,
}

impl ConditionTriple {
    pub fn new(c1: PointCloud, c2: ProjectionImage, c3: BackgroundPatch) -> Result<Self> {
        let (p, b) = (&c2.image, &c3.pixels);
        if (p.height(), p.width()) != (b.height(), b.width()) {
            return param_err("conditions", "c2 and c3 rasters differ");
        }
        if c1.is_empty() {
            return param_err("c1", "empty point condition");
        }
        Ok(Self { c1, c2, c3 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn border_15_zeroes_226_squared_pixels() {
        let ones = Image::filled(3, 256, 256, 1.0);
        let bg = extract_background_patch(&ones, 15).unwrap();
        let zero_px = (0..256 * 256).filter(|&i| !bg.pixels.is_set(i / 256, i % 256)).count();
        assert_eq!(zero_px, 51076);
        let sum: f64 = bg.pixels.data().iter().map(|&v| v as f64).sum();
        assert_eq!(sum, 3.0 * (256.0 * 256.0 - 226.0 * 226.0));
        let mask = bg.mask();
        assert_eq!(mask.iter().filter(|m| !**m).count(), 51076);
        assert!(extract_background_patch(&ones, 128).is_err());
        assert!(extract_background_patch(&ones, 127).is_ok());
    }

    fn c2_with(points: &[(usize, usize, [f32; 3])], size: usize) -> ProjectionImage {
        let mut image = Image::zeros(3, size, size);
        for &(x, y, v) in points {
            for c in 0..3 {
                image.set(c, y, x, v[c]);
            }
        }
        ProjectionImage {
            image,
            mode: ProjectionMode::Rgb,
            d_max: 60.0,
        }
    }

    #[test]
    fn composition_precedence() {
        let mut src = Image::zeros(3, 32, 32);
        for (i, v) in src.data_mut().iter_mut().enumerate() {
            *v = (i % 7) as f32 / 7.0 + 0.05;
        }
        let bg = extract_background_patch(&src, 4).unwrap();
        let empty = c2_with(&[], 32);
        assert_eq!(compose_generator_input(&empty, &bg, ComposeMode::Overlay).unwrap(), bg.pixels);

        let c2 = c2_with(&[(1, 1, [0.0, 0.4, 0.7]), (16, 16, [0.0, 0.2, 0.0])], 32);
        let zero_bg = extract_background_patch(&Image::zeros(3, 32, 32), 4).unwrap();
        assert_eq!(compose_generator_input(&c2, &zero_bg, ComposeMode::Overlay).unwrap(), c2.image);

        let out = compose_generator_input(&c2, &bg, ComposeMode::Overlay).unwrap();
        assert_eq!(out.pixel(1, 1), [0.0, 0.4, 0.7]);
        assert_eq!(out.pixel(2, 2), bg.pixels.pixel(2, 2));

        let cat = compose_generator_input(&c2, &bg, ComposeMode::Concat).unwrap();
        assert_eq!(cat.channels(), 6);
        assert_eq!(cat.get(4, 2, 2), bg.pixels.get(1, 2, 2));
    }
}
