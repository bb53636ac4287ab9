//! Point clouds, the pinhole camera with its perspective matrix, projection
//! image encoding, rotations and point sampling.
//!
//! Camera frame convention: right-handed, x right, y up, looking down `-z`.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::raster::Image;

pub type Point3 = [f64; 3];
pub type Mat4 = [[f64; 4]; 4];

/// Unordered point set with optional per-point reflectance in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point3>,
    intensity: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, intensity: Option<Vec<f64>>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return param_err("points", "all coordinates must be finite");
        }
        if let Some(i) = &intensity {
            if i.len() != points.len() {
                return param_err("intensity", format!("{} values for {} points", i.len(), points.len()));
            }
            if let Some(bad) = i.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return param_err("intensity", format!("value {bad} outside [0, 1]"));
            }
        }
        Ok(Self { points, intensity })
    }

    pub fn from_points(points: Vec<Point3>) -> Result<Self> {
        Self::new(points, None)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn intensity(&self) -> Option<&[f64]> {
        self.intensity.as_deref()
    }

    /// Keep the points at `indices`, in that order (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            intensity: self.intensity.as_ref().map(|v| indices.iter().map(|&i| v[i]).collect()),
        }
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.points.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    fn map_points(&self, f: impl Fn(&Point3) -> Point3) -> Self {
        Self {
            points: self.points.iter().map(f).collect(),
            intensity: self.intensity.clone(),
        }
    }
}

/// 4x4 homogeneous transform acting on column vectors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform(pub Mat4);

impl Default for Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Transform {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self(m)
    }

    pub fn translation(t: Point3) -> Self {
        let mut m = Self::identity();
        for k in 0..3 {
            m.0[k][3] = t[k];
        }
        m
    }

    pub fn rotation(axis: Axis, degrees: f64) -> Self {
        let r = rotation_matrix(axis, degrees);
        let mut m = Self::identity();
        for i in 0..3 {
            m.0[i][..3].copy_from_slice(&r[i]);
        }
        m
    }

    pub fn from_rotation_translation(r: [[f64; 3]; 3], t: Point3) -> Self {
        let mut m = Self::identity();
        for i in 0..3 {
            m.0[i][..3].copy_from_slice(&r[i]);
            m.0[i][3] = t[i];
        }
        m
    }

    pub fn rotation_block(&self) -> [[f64; 3]; 3] {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            r[i].copy_from_slice(&self.0[i][..3]);
        }
        r
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Transform) -> Transform {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..4).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        Transform(m)
    }

    /// Inverse of a rigid transform: `[R^T | -R^T t]`.
    pub fn inverse_rigid(&self) -> Transform {
        let r = self.rotation_block();
        let mut rt = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rt[i][j] = r[j][i];
            }
        }
        let t = [self.0[0][3], self.0[1][3], self.0[2][3]];
        let nt: Point3 = std::array::from_fn(|i| -(0..3).map(|k| rt[i][k] * t[k]).sum::<f64>());
        Transform::from_rotation_translation(rt, nt)
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        let m = &self.0;
        let h = [p[0], p[1], p[2], 1.0];
        let mut out = [0.0; 4];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..4).map(|k| m[i][k] * h[k]).sum();
        }
        if out[3] != 1.0 {
            [out[0] / out[3], out[1] / out[3], out[2] / out[3]]
        } else {
            [out[0], out[1], out[2]]
        }
    }

    /// Rotation block orthonormal within `tol`, determinant +1, bottom row `(0,0,0,1)`.
    pub fn is_rigid(&self, tol: f64) -> bool {
        let r = self.rotation_block();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > tol {
                    return false;
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        (det - 1.0).abs() <= tol && self.0[3] == [0.0, 0.0, 0.0, 1.0]
    }

    /// Nearest rigid transform (Gram-Schmidt on the rotation rows), for
    /// calibration matrices printed with limited precision.
    pub fn orthonormalized(&self) -> Transform {
        let r = self.rotation_block();
        let norm = |v: [f64; 3]| {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            v.map(|x| x / n)
        };
        let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let r0 = norm(r[0]);
        let r1 = norm(std::array::from_fn(|k| r[1][k] - dot(r[1], r0) * r0[k]));
        let r2 = [
            r0[1] * r1[2] - r0[2] * r1[1],
            r0[2] * r1[0] - r0[0] * r1[2],
            r0[0] * r1[1] - r0[1] * r1[0],
        ];
        Transform::from_rotation_translation([r0, r1, r2], [self.0[0][3], self.0[1][3], self.0[2][3]])
    }
}

/// Pinhole camera parameterized by horizontal field of view and clip planes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fov_deg: f64,
    pub near: f64,
    pub far: f64,
    /// Sensor frame to camera frame.
    pub extrinsic: Transform,
    pub width: usize,
    pub height: usize,
    /// Scale the vertical axis by `width / height` so that pixels stay square
    /// on a non-square raster. Off by default: the vertical scale reuses `s`.
    #[serde(default)]
    pub aspect_correct: bool,
}

impl CameraModel {
    pub fn new(fov_deg: f64, near: f64, far: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            fov_deg,
            near,
            far,
            extrinsic: Transform::identity(),
            width,
            height,
            aspect_correct: false,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn with_extrinsic(mut self, extrinsic: Transform) -> Result<Self> {
        self.extrinsic = extrinsic;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        validate_intrinsics(self.fov_deg, self.near, self.far)?;
        if self.width == 0 || self.height == 0 {
            return param_err("raster", "width and height must be positive");
        }
        if !self.extrinsic.is_rigid(1e-9) {
            return param_err("extrinsic", "rotation block must be orthonormal with determinant +1");
        }
        Ok(())
    }

    pub fn projection_matrix(&self) -> Mat4 {
        make_projection_matrix(self.fov_deg, self.near, self.far).expect("validated camera")
    }

    /// Vertical scale relative to the horizontal one.
    fn y_scale(&self) -> f64 {
        if self.aspect_correct {
            self.width as f64 / self.height as f64
        } else {
            1.0
        }
    }

    /// Ray direction (camera frame, unnormalized) through the pixel position
    /// `(u, v)` given in continuous pixel coordinates.
    pub fn ray_direction(&self, u: f64, v: f64) -> Point3 {
        let s = 1.0 / (self.fov_deg.to_radians() / 2.0).tan();
        let ndc_x = 2.0 * u / self.width as f64 - 1.0;
        let ndc_y = 1.0 - 2.0 * v / self.height as f64;
        [ndc_x / s, ndc_y / (s * self.y_scale()), -1.0]
    }

    /// Continuous pixel position of a camera-frame point, if in front of the camera.
    pub fn pixel_of_camera_point(&self, p: &Point3) -> Option<(f64, f64)> {
        if p[2] >= 0.0 {
            return None;
        }
        let s = 1.0 / (self.fov_deg.to_radians() / 2.0).tan();
        let ndc_x = s * p[0] / -p[2];
        let ndc_y = s * self.y_scale() * p[1] / -p[2];
        Some((
            (ndc_x + 1.0) / 2.0 * self.width as f64,
            (1.0 - ndc_y) / 2.0 * self.height as f64,
        ))
    }
}

fn validate_intrinsics(fov_deg: f64, near: f64, far: f64) -> Result<()> {
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return param_err("fov_deg", format!("must lie in (0, 180), got {fov_deg}"));
    }
    if !(near > 0.0) {
        return param_err("near_clip", format!("must be positive, got {near}"));
    }
    if !(far > near) {
        return param_err("far_clip", format!("must exceed near clip {near}, got {far}"));
    }
    Ok(())
}

/// Perspective matrix, entries laid out as rows of the printed matrix:
///
/// ```text
/// s 0 0                 0
/// 0 s 0                 0
/// 0 0 -f/(f-n)         -1
/// 0 0 -f*n/(f-n)        0
/// ```
///
/// with `s = 1 / tan(fov/2)`. In this layout the matrix multiplies homogeneous
/// row vectors from the right (`[x y z 1] * P`), which yields `w = -z`.
pub fn make_projection_matrix(fov_deg: f64, near: f64, far: f64) -> Result<Mat4> {
    validate_intrinsics(fov_deg, near, far)?;
    let s = 1.0 / (fov_deg / 2.0 * std::f64::consts::PI / 180.0).tan();
    let depth = far - near;
    Ok([
        [s, 0.0, 0.0, 0.0],
        [0.0, s, 0.0, 0.0],
        [0.0, 0.0, -far / depth, -1.0],
        [0.0, 0.0, -far * near / depth, 0.0],
    ])
}

pub fn transform_points(cloud: &PointCloud, t: &Transform) -> Result<PointCloud> {
    if !t.is_rigid(1e-9) {
        return param_err("transform", "must be rigid");
    }
    Ok(cloud.map_points(|p| t.apply(p)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedPoint {
    pub x: usize,
    pub y: usize,
    /// Distance from the camera origin to the point in the camera frame.
    pub radial_depth: f64,
    pub intensity: Option<f64>,
    /// Index into the source cloud.
    pub index: usize,
}

/// Project every point through `extrinsic` and the perspective matrix, cull
/// against the clip planes and the raster, and map NDC to pixel indices with
/// `floor((ndc + 1) / 2 * size)` (y pointing down).
pub fn project_points(cloud: &PointCloud, cam: &CameraModel) -> Result<Vec<ProjectedPoint>> {
    if cloud.is_empty() {
        return param_err("cloud", "cannot project an empty cloud");
    }
    cam.validate()?;
    let p = cam.projection_matrix();
    let (w, h) = (cam.width as f64, cam.height as f64);
    let ys = cam.y_scale();
    let mut out = Vec::with_capacity(cloud.len());
    for (index, pt) in cloud.points().iter().enumerate() {
        let c = cam.extrinsic.apply(pt);
        let row = [c[0], c[1], c[2], 1.0];
        let clip: [f64; 4] = std::array::from_fn(|j| (0..4).map(|i| row[i] * p[i][j]).sum());
        if clip[3] <= 0.0 {
            continue;
        }
        let ndc_z = clip[2] / clip[3];
        if !(0.0..=1.0).contains(&ndc_z) {
            continue;
        }
        let ndc_x = clip[0] / clip[3];
        let ndc_y = clip[1] / clip[3] * ys;
        let px = ((ndc_x + 1.0) / 2.0 * w).floor();
        let py = ((1.0 - ndc_y) / 2.0 * h).floor();
        if px < 0.0 || py < 0.0 || px >= w || py >= h {
            continue;
        }
        out.push(ProjectedPoint {
            x: px as usize,
            y: py as usize,
            radial_depth: (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt(),
            intensity: cloud.intensity().map(|i| i[index]),
            index,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// Red unused, green normalized radial depth, blue reflectance.
    #[default]
    Rgb,
    /// One channel holding the normalized radial depth.
    DepthOnly,
}

impl ProjectionMode {
    pub fn channels(self) -> usize {
        match self {
            ProjectionMode::Rgb => 3,
            ProjectionMode::DepthOnly => 1,
        }
    }
}

/// Depth/intensity encoding of a projected cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionImage {
    pub image: Image,
    pub mode: ProjectionMode,
    pub d_max: f64,
}

impl ProjectionImage {
    pub fn depth_channel(&self) -> usize {
        match self.mode {
            ProjectionMode::Rgb => 1,
            ProjectionMode::DepthOnly => 0,
        }
    }

    /// Pixels hit by at least one point.
    pub fn occupied(&self) -> Vec<(usize, usize)> {
        let img = &self.image;
        let mut out = Vec::new();
        for y in 0..img.height() {
            for x in 0..img.width() {
                if img.is_set(y, x) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    pub fn crop(&self, x0: usize, y0: usize, size: usize) -> Result<Self> {
        Ok(Self {
            image: self.image.crop(x0, y0, size, size)?,
            mode: self.mode,
            d_max: self.d_max,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.image.save_png(path)
    }

    /// Raw little-endian f32 values in HWC order plus a JSON sidecar at
    /// `path.json` describing shape, mode and `d_max`.
    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let img = &self.image;
        let mut bytes = Vec::with_capacity(img.data().len() * 4);
        for y in 0..img.height() {
            for x in 0..img.width() {
                for c in 0..img.channels() {
                    bytes.extend_from_slice(&img.get(c, y, x).to_le_bytes());
                }
            }
        }
        std::fs::write(path, bytes)?;
        let sidecar = RawSidecar {
            shape: [img.height(), img.width(), img.channels()],
            layout: "hwc".into(),
            dtype: "f32".into(),
            mode: self.mode,
            d_max: self.d_max,
        };
        std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load_raw(path: &Path) -> Result<Self> {
        let sidecar: RawSidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
        let bytes = std::fs::read(path)?;
        let [h, w, c] = sidecar.shape;
        if bytes.len() != h * w * c * 4 {
            return Err(Error::Parse {
                source_name: path.display().to_string(),
                offset: bytes.len(),
                reason: format!("expected {} bytes for shape {:?}", h * w * c * 4, sidecar.shape),
            });
        }
        let mut img = Image::zeros(c, h, w);
        for (i, chunk) in bytes.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            img.set(i % c, i / (c * w), (i / c) % w, v);
        }
        Ok(Self {
            image: img,
            mode: sidecar.mode,
            d_max: sidecar.d_max,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct RawSidecar {
    shape: [usize; 3],
    layout: String,
    dtype: String,
    mode: ProjectionMode,
    d_max: f64,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Rasterize a cloud into a projection image. Colliding points keep the
/// nearest one; points farther than `d_max` are dropped.
pub fn encode_projection_image(
    cloud: &PointCloud,
    cam: &CameraModel,
    d_max: f64,
    mode: ProjectionMode,
) -> Result<ProjectionImage> {
    if !(d_max > 0.0) {
        return param_err("d_max", format!("must be positive, got {d_max}"));
    }
    let mut image = Image::zeros(mode.channels(), cam.height, cam.width);
    if cloud.is_empty() {
        return Ok(ProjectionImage { image, mode, d_max });
    }
    if mode == ProjectionMode::Rgb && cloud.intensity().is_none() {
        log::warn!("rgb projection requested for a cloud without intensities; blue channel stays 0");
    }
    let mut zbuf = vec![f64::INFINITY; cam.width * cam.height];
    let depth_c = match mode {
        ProjectionMode::Rgb => 1,
        ProjectionMode::DepthOnly => 0,
    };
    for p in project_points(cloud, cam)? {
        if p.radial_depth > d_max {
            continue;
        }
        let slot = p.y * cam.width + p.x;
        if p.radial_depth >= zbuf[slot] {
            continue;
        }
        zbuf[slot] = p.radial_depth;
        image.set(depth_c, p.y, p.x, (p.radial_depth / d_max).clamp(0.0, 1.0) as f32);
        if mode == ProjectionMode::Rgb {
            image.set(2, p.y, p.x, p.intensity.unwrap_or(0.0) as f32);
        }
    }
    Ok(ProjectionImage { image, mode, d_max })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            _ => param_err("axis", format!("expected x, y or z, got `{s}`")),
        }
    }
}

/// Right-handed rotation matrix about a coordinate axis.
pub fn rotation_matrix(axis: Axis, degrees: f64) -> [[f64; 3]; 3] {
    let (s, c) = degrees.to_radians().sin_cos();
    match axis {
        Axis::X => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        Axis::Y => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        Axis::Z => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
    }
}

/// Rotate about the named axis through the origin of the cloud's frame.
pub fn rotate_points(cloud: &PointCloud, axis: Axis, degrees: f64) -> PointCloud {
    rotate_points_about(cloud, axis, degrees, [0.0; 3])
}

/// Rotate about the named axis through `center`.
pub fn rotate_points_about(cloud: &PointCloud, axis: Axis, degrees: f64, center: Point3) -> PointCloud {
    let r = rotation_matrix(axis, degrees);
    cloud.map_points(|p| {
        let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
        std::array::from_fn(|i| center[i] + r[i][0] * d[0] + r[i][1] * d[1] + r[i][2] * d[2])
    })
}

/// Draw exactly `n` points: a uniform subset without replacement when the
/// cloud is large enough, otherwise every point plus uniform draws with
/// replacement.
pub fn sample_points(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if cloud.is_empty() {
        return param_err("cloud", "cannot sample from an empty cloud");
    }
    if n == 0 {
        return param_err("n", "must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = cloud.len();
    let indices: Vec<usize> = if len >= n {
        sample(&mut rng, len, n).into_vec()
    } else {
        (0..len).chain((len..n).map(|_| rng.random_range(0..len))).collect()
    };
    Ok(cloud.select(&indices))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(w: usize, h: usize) -> CameraModel {
        CameraModel::new(90.0, 1.0, 61.0, w, h).unwrap()
    }

    #[test]
    fn projection_matrix_closed_forms() {
        let p = make_projection_matrix(90.0, 1.0, 61.0).unwrap();
        assert!((p[0][0] - 1.0).abs() < 1e-15);
        assert_eq!(p[2][2], -61.0 / 60.0);
        assert_eq!(p[2][3], -1.0);
        assert_eq!(p[3][2], -61.0 / 60.0);
        let p = make_projection_matrix(60.0, 1.0, 61.0).unwrap();
        assert!((p[0][0] - 3f64.sqrt()).abs() < 1e-12);
        assert!((p[1][1] - 1.732_050_8).abs() < 1e-7);
    }

    #[test]
    fn invalid_intrinsics_name_the_field() {
        let e = make_projection_matrix(180.0, 1.0, 2.0).unwrap_err();
        assert!(e.to_string().contains("fov_deg"));
        let e = make_projection_matrix(60.0, 2.0, 1.0).unwrap_err();
        assert!(e.to_string().contains("far_clip"));
        let e = make_projection_matrix(60.0, 0.0, 1.0).unwrap_err();
        assert!(e.to_string().contains("near_clip"));
    }

    #[test]
    fn optical_axis_point_lands_on_center_pixel() {
        let c = cam(256, 256);
        let pc = PointCloud::from_points(vec![[0.0, 0.0, -10.0], [0.0, 0.0, -0.5]]).unwrap();
        let p = project_points(&pc, &c).unwrap();
        assert_eq!(p.len(), 1, "near-clipped point must be dropped");
        assert_eq!((p[0].x, p[0].y), (128, 128));
        assert_eq!(p[0].radial_depth, 10.0);
    }

    #[test]
    fn encoding_boundaries() {
        let c = cam(32, 32);
        let at_dmax = PointCloud::new(vec![[0.0, 0.0, -60.0]], Some(vec![0.25])).unwrap();
        let img = encode_projection_image(&at_dmax, &c, 60.0, ProjectionMode::Rgb).unwrap();
        assert_eq!(img.image.get(1, 16, 16), 1.0);
        assert_eq!(img.image.get(2, 16, 16), 0.25);
        assert_eq!(img.image.get(0, 16, 16), 0.0);
        assert_eq!(img.occupied(), vec![(16, 16)]);

        let beyond = PointCloud::from_points(vec![[0.0, 0.0, -60.5]]).unwrap();
        let img = encode_projection_image(&beyond, &c, 60.0, ProjectionMode::Rgb).unwrap();
        assert!(img.image.data().iter().all(|&v| v == 0.0));

        let collide = PointCloud::from_points(vec![[0.0, 0.0, -20.0], [0.0, 0.0, -10.0]]).unwrap();
        let img = encode_projection_image(&collide, &c, 60.0, ProjectionMode::DepthOnly).unwrap();
        assert_eq!(img.image.channels(), 1);
        assert_eq!(img.image.get(0, 16, 16), (10.0f64 / 60.0) as f32);

        let empty = PointCloud::default();
        let img = encode_projection_image(&empty, &c, 60.0, ProjectionMode::Rgb).unwrap();
        assert!(img.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rotation_closed_forms() {
        let pc = PointCloud::from_points(vec![[1.0, 2.0, 3.0]]).unwrap();
        let r = rotate_points(&pc, Axis::X, 180.0);
        let p = r.points()[0];
        assert!((p[0] - 1.0).abs() < 1e-12 && (p[1] + 2.0).abs() < 1e-12 && (p[2] + 3.0).abs() < 1e-12);
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let back = rotate_points(&pc, axis, 360.0);
            for k in 0..3 {
                assert!((back.points()[0][k] - pc.points()[0][k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rotation_about_y_matches_matrix_oracle() {
        // oracle: R_y(t) e_x = (cos t, 0, -sin t)
        let pc = PointCloud::from_points(vec![[1.0, 0.0, 0.0]]).unwrap();
        let p = rotate_points(&pc, Axis::Y, 20.0).points()[0];
        assert!((p[0] - 0.939_692_620_785_908_4).abs() < 1e-12);
        assert!(p[1].abs() < 1e-15);
        assert!((p[2] + 0.342_020_143_325_668_7).abs() < 1e-12);
    }

    #[test]
    fn sampling_edge_cases() {
        let one = PointCloud::new(vec![[1.0, 2.0, 3.0]], Some(vec![0.5])).unwrap();
        let s = sample_points(&one, 1024, 9).unwrap();
        assert_eq!(s.len(), 1024);
        assert!(s.points().iter().all(|p| *p == [1.0, 2.0, 3.0]));
        assert!(sample_points(&PointCloud::default(), 1024, 0).is_err());

        let pts: Vec<Point3> = (0..1024).map(|i| [i as f64, 0.0, 0.0]).collect();
        let full = PointCloud::from_points(pts).unwrap();
        let s = sample_points(&full, 1024, 3).unwrap();
        let mut xs: Vec<usize> = s.points().iter().map(|p| p[0] as usize).collect();
        xs.sort_unstable();
        assert_eq!(xs, (0..1024).collect::<Vec<_>>());
        assert_eq!(sample_points(&full, 100, 3).unwrap(), sample_points(&full, 100, 3).unwrap());
    }

    #[test]
    fn rejects_bad_clouds_and_cameras() {
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]], None).is_err());
        assert!(PointCloud::new(vec![[0.0; 3]], Some(vec![1.5])).is_err());
        assert!(PointCloud::new(vec![[0.0; 3]], Some(vec![])).is_err());
        let mut skew = Transform::identity();
        skew.0[0][1] = 0.1;
        assert!(cam(8, 8).with_extrinsic(skew).is_err());
    }

    #[test]
    fn raw_export_round_trip() {
        let c = cam(8, 6);
        let pc = PointCloud::new(vec![[0.5, 0.2, -3.0], [-1.0, 0.1, -4.0]], Some(vec![0.3, 0.9])).unwrap();
        let img = encode_projection_image(&pc, &c, 60.0, ProjectionMode::Rgb).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c2.raw");
        img.save_raw(&p).unwrap();
        assert_eq!(ProjectionImage::load_raw(&p).unwrap(), img);
    }
}
