//! Seeded synthetic scenes of flat-shaded cuboids and spheres, written in the
//! KITTI object layout so they flow through the same ingestion path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kitti::{KittiCalib, KittiLabel};
use super::sample::{crop_object_sample, CropConfig, ObjectSample};
use crate::error::{param_err, Result};
use crate::geometry::{CameraModel, Point3, PointCloud, Transform};
use crate::raster::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    /// Extent along the object's x (length), y (height) and z (width).
    Cuboid { size: [f64; 3] },
    Sphere { radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: String,
    pub shape: Shape,
    /// Center in the camera frame.
    pub position: Point3,
    /// Rotation about the camera's vertical axis.
    #[serde(default)]
    pub yaw_deg: f64,
    pub albedo: [f64; 3],
    #[serde(default = "default_reflectance")]
    pub reflectance: f64,
}

fn default_reflectance() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub base: [f64; 3],
    /// Amplitude of the smooth seeded texture.
    pub texture: f64,
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        Self {
            base: [0.22, 0.22, 0.24],
            texture: 0.08,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pub near: f64,
    pub far: f64,
    #[serde(default)]
    pub background: BackgroundSpec,
    #[serde(default = "default_rays")]
    pub lidar_rays_per_object: usize,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
}

fn default_rays() -> usize {
    3000
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 96,
            fov_deg: 60.0,
            near: 0.5,
            far: 80.0,
            background: BackgroundSpec::default(),
            lidar_rays_per_object: default_rays(),
            objects: vec![],
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub image: Image,
    pub labels: Vec<KittiLabel>,
    /// Sensor frame, coordinates rounded to f32 like a velodyne file.
    pub cloud: PointCloud,
    pub cam: CameraModel,
    pub calib: KittiCalib,
}

/// Velodyne-style sensor axes (x forward, y left, z up) mounted slightly
/// behind and above the camera.
fn synthetic_calib(spec: &SceneSpec) -> KittiCalib {
    let fx = spec.width as f64 / 2.0 / (spec.fov_deg.to_radians() / 2.0).tan();
    let (cx, cy) = (spec.width as f64 / 2.0, spec.height as f64 / 2.0);
    let axes = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];
    KittiCalib {
        p2: [[fx, 0.0, cx, 0.0], [0.0, fx, cy, 0.0], [0.0, 0.0, 1.0, 0.0]],
        r0_rect: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        tr_velo_to_cam: Transform::from_rotation_translation(axes, [0.0, -0.08, -0.27]),
    }
}

#[derive(Clone, Copy)]
struct Hit {
    t: f64,
    normal: Point3,
}

fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl ObjectSpec {
    fn rotation(&self) -> [[f64; 3]; 3] {
        crate::geometry::rotation_matrix(crate::geometry::Axis::Y, self.yaw_deg)
    }

    fn half_extent(&self) -> Point3 {
        match self.shape {
            Shape::Cuboid { size } => size.map(|v| v / 2.0),
            Shape::Sphere { radius } => [radius; 3],
        }
    }

    /// The eight corners of the (bounding) box in the camera frame.
    pub fn corners(&self) -> Vec<Point3> {
        let r = self.rotation();
        let e = self.half_extent();
        let mut out = Vec::with_capacity(8);
        for i in 0..8 {
            let l = [
                if i & 1 == 0 { -e[0] } else { e[0] },
                if i & 2 == 0 { -e[1] } else { e[1] },
                if i & 4 == 0 { -e[2] } else { e[2] },
            ];
            out.push(std::array::from_fn(|k| self.position[k] + dot(r[k], l)));
        }
        out
    }

    /// First intersection of the ray `t * dir` from the camera origin.
    fn intersect(&self, dir: Point3) -> Option<Hit> {
        let c = self.position;
        match self.shape {
            Shape::Sphere { radius } => {
                let a = dot(dir, dir);
                let b = -2.0 * dot(dir, c);
                let cc = dot(c, c) - radius * radius;
                let disc = b * b - 4.0 * a * cc;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / (2.0 * a);
                if t <= 0.0 {
                    return None;
                }
                let p = dir.map(|d| d * t);
                Some(Hit {
                    t,
                    normal: std::array::from_fn(|k| (p[k] - c[k]) / radius),
                })
            }
            Shape::Cuboid { .. } => {
                let r = self.rotation();
                // ray in the object frame: R^T (o - c), R^T d
                let rt = |v: Point3| -> Point3 { std::array::from_fn(|k| r[0][k] * v[0] + r[1][k] * v[1] + r[2][k] * v[2]) };
                let o = rt(c.map(|v| -v));
                let d = rt(dir);
                let e = self.half_extent();
                let (mut t0, mut t1, mut axis, mut sign) = (f64::NEG_INFINITY, f64::INFINITY, 0, 1.0);
                for k in 0..3 {
                    if d[k].abs() < 1e-15 {
                        if o[k].abs() > e[k] {
                            return None;
                        }
                        continue;
                    }
                    let (mut a, mut b) = ((-e[k] - o[k]) / d[k], (e[k] - o[k]) / d[k]);
                    let mut s = -1.0;
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                        s = 1.0;
                    }
                    if a > t0 {
                        t0 = a;
                        axis = k;
                        sign = s;
                    }
                    t1 = t1.min(b);
                }
                if t0 > t1 || t0 <= 0.0 {
                    return None;
                }
                let mut n_local = [0.0; 3];
                n_local[axis] = sign;
                Some(Hit {
                    t: t0,
                    normal: std::array::from_fn(|k| dot(r[k], n_local)),
                })
            }
        }
    }

    fn label(&self, bbox: [f64; 4], truncated: f64, occluded: i32) -> KittiLabel {
        let e = self.half_extent();
        let (l, h, w) = (2.0 * e[0], 2.0 * e[1], 2.0 * e[2]);
        let p = self.position;
        let location = [p[0], -p[1] + h / 2.0, -p[2]];
        let ry = -self.yaw_deg.to_radians();
        KittiLabel {
            class: self.class.clone(),
            truncated,
            occluded,
            alpha: ry - location[0].atan2(location[2]),
            bbox,
            dimensions: [h, w, l],
            location,
            rotation_y: ry,
            score: None,
        }
    }
}

struct Texture {
    waves: Vec<(f64, f64, f64, [f64; 3])>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..5)
            .map(|_| {
                let f = rng.random_range(0.02..0.15);
                let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let tint = std::array::from_fn(|_| rng.random_range(0.6..1.0));
                (f * theta.cos(), f * theta.sin(), phase, tint)
            })
            .collect();
        Self { waves }
    }

    fn at(&self, base: [f64; 3], amp: f64, x: f64, y: f64) -> [f64; 3] {
        let mut v = base;
        let norm = amp / self.waves.len() as f64;
        for (fx, fy, ph, tint) in &self.waves {
            let s = (fx * x + fy * y + ph).sin();
            for k in 0..3 {
                v[k] += norm * s * tint[k];
            }
        }
        v.map(|c| c.clamp(0.0, 1.0))
    }
}

const LIGHT: Point3 = [0.36, 0.64, 0.68];

/// Render a scene: ray-cast pixel centers, flat shading, seeded texture behind
/// the objects, lidar-style points on visible object surfaces, exact labels.
pub fn make_synthetic_scene(seed: u64, spec: &SceneSpec) -> Result<SyntheticScene> {
    if spec.lidar_rays_per_object == 0 && !spec.objects.is_empty() {
        return param_err("lidar_rays_per_object", "must be positive");
    }
    for o in &spec.objects {
        let bad = match o.shape {
            Shape::Cuboid { size } => size.iter().any(|v| !(*v > 0.0)),
            Shape::Sphere { radius } => !(radius > 0.0),
        };
        if bad || o.albedo.iter().any(|v| !(0.0..=1.0).contains(v)) || !(0.0..=1.0).contains(&o.reflectance) {
            return param_err("objects", format!("invalid object `{}`", o.class));
        }
    }
    let calib = synthetic_calib(spec);
    let cam = calib.camera(spec.width, spec.height, spec.near, spec.far)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texture = Texture::new(&mut rng);

    let nearest = |dir: Point3| -> Option<(usize, Hit)> {
        spec.objects
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.intersect(dir).map(|h| (i, h)))
            .min_by(|a, b| a.1.t.total_cmp(&b.1.t))
    };
    let light_n = {
        let n = dot(LIGHT, LIGHT).sqrt();
        LIGHT.map(|v| v / n)
    };

    let (w, h) = (spec.width, spec.height);
    let mut image = Image::zeros(3, h, w);
    let mut alone = vec![0usize; spec.objects.len()];
    let mut shown = vec![0usize; spec.objects.len()];
    for y in 0..h {
        for x in 0..w {
            let dir = cam.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
            for (i, o) in spec.objects.iter().enumerate() {
                if o.intersect(dir).is_some() {
                    alone[i] += 1;
                }
            }
            let color = match nearest(dir) {
                Some((i, hit)) => {
                    shown[i] += 1;
                    let shade = 0.35 + 0.65 * dot(hit.normal, light_n).max(0.0);
                    spec.objects[i].albedo.map(|a| (a * shade).clamp(0.0, 1.0))
                }
                None => texture.at(spec.background.base, spec.background.texture, x as f64, y as f64),
            };
            for c in 0..3 {
                image.set(c, y, x, color[c] as f32);
            }
        }
    }

    let to_sensor = cam.extrinsic.inverse_rigid();
    let mut points = Vec::new();
    let mut intensity = Vec::new();
    let mut labels = Vec::new();
    for (i, o) in spec.objects.iter().enumerate() {
        let px: Vec<Option<(f64, f64)>> = o.corners().iter().map(|c| cam.pixel_of_camera_point(c)).collect();
        let (bbox, truncated) = if px.iter().any(|p| p.is_none()) {
            ([0.0, 0.0, w as f64, h as f64], 1.0)
        } else {
            let us = px.iter().map(|p| p.unwrap().0);
            let vs = px.iter().map(|p| p.unwrap().1);
            let raw = [
                us.clone().fold(f64::INFINITY, f64::min),
                vs.clone().fold(f64::INFINITY, f64::min),
                us.fold(f64::NEG_INFINITY, f64::max),
                vs.fold(f64::NEG_INFINITY, f64::max),
            ];
            let clip = [raw[0].max(0.0), raw[1].max(0.0), raw[2].min(w as f64), raw[3].min(h as f64)];
            let area = |b: [f64; 4]| (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
            (clip, 1.0 - area(clip) / area(raw).max(1e-12))
        };
        let hidden = if alone[i] == 0 { 1.0 } else { 1.0 - shown[i] as f64 / alone[i] as f64 };
        let occluded = if hidden < 0.15 { 0 } else if hidden < 0.5 { 1 } else { 2 };
        labels.push(o.label(bbox, truncated, occluded));

        if bbox[2] <= bbox[0] || bbox[3] <= bbox[1] {
            continue;
        }
        for _ in 0..spec.lidar_rays_per_object {
            let u = rng.random_range(bbox[0]..bbox[2]);
            let v = rng.random_range(bbox[1]..bbox[3]);
            let noise: f64 = rng.random_range(-0.05..0.05);
            let dir = cam.ray_direction(u, v);
            if let Some((j, hit)) = nearest(dir) {
                if j != i || hit.t * dot(dir, dir).sqrt() > spec.far {
                    continue;
                }
                let p = to_sensor.apply(&dir.map(|d| d * hit.t));
                points.push(p.map(|c| c as f32 as f64));
                intensity.push(((o.reflectance + noise).clamp(0.0, 1.0)) as f32 as f64);
            }
        }
    }
    Ok(SyntheticScene {
        image,
        labels,
        cloud: PointCloud::new(points, Some(intensity))?,
        cam,
        calib,
    })
}

/// Look of one object class in randomly drawn scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    pub class: String,
    pub albedo: [f64; 3],
    pub shape: Shape,
    /// Uniform size jitter, as a fraction.
    #[serde(default)]
    pub size_jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomSceneConfig {
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pub distance: (f64, f64),
    /// Maximum offset of the object center from the optical axis, in pixels.
    pub center_jitter_px: f64,
    pub classes: Vec<ClassStyle>,
    pub lidar_rays_per_object: usize,
}

impl Default for RandomSceneConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 96,
            fov_deg: 60.0,
            distance: (8.0, 11.0),
            center_jitter_px: 6.0,
            classes: default_class_styles(),
            lidar_rays_per_object: 3000,
        }
    }
}

pub fn default_class_styles() -> Vec<ClassStyle> {
    vec![
        ClassStyle {
            class: "Car".into(),
            albedo: [0.85, 0.12, 0.1],
            shape: Shape::Cuboid { size: [3.0, 1.6, 1.8] },
            size_jitter: 0.1,
        },
        ClassStyle {
            class: "Pedestrian".into(),
            albedo: [0.15, 0.8, 0.2],
            shape: Shape::Cuboid { size: [0.8, 2.6, 0.8] },
            size_jitter: 0.1,
        },
        ClassStyle {
            class: "Ball".into(),
            albedo: [0.15, 0.3, 0.9],
            shape: Shape::Sphere { radius: 1.2 },
            size_jitter: 0.1,
        },
    ]
}

/// A one-object scene with class, pose, size and background drawn from `seed`.
pub fn random_scene_spec(seed: u64, cfg: &RandomSceneConfig) -> Result<SceneSpec> {
    if cfg.classes.is_empty() {
        return param_err("classes", "at least one class style is required");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let style = &cfg.classes[rng.random_range(0..cfg.classes.len())];
    let d = rng.random_range(cfg.distance.0..=cfg.distance.1);
    let fx = cfg.width as f64 / 2.0 / (cfg.fov_deg.to_radians() / 2.0).tan();
    let jx = rng.random_range(-1.0..=1.0) * cfg.center_jitter_px / fx * d;
    let jy = rng.random_range(-1.0..=1.0) * cfg.center_jitter_px / fx * d;
    let k = 1.0 + rng.random_range(-1.0..=1.0) * style.size_jitter;
    let shape = match style.shape {
        Shape::Cuboid { size } => Shape::Cuboid { size: size.map(|v| v * k) },
        Shape::Sphere { radius } => Shape::Sphere { radius: radius * k },
    };
    let gray = rng.random_range(0.12..0.3);
    Ok(SceneSpec {
        width: cfg.width,
        height: cfg.height,
        fov_deg: cfg.fov_deg,
        near: 0.5,
        far: 80.0,
        background: BackgroundSpec {
            base: [gray, gray * rng.random_range(0.9..1.1), gray * rng.random_range(0.9..1.1)],
            texture: rng.random_range(0.04..0.12),
        },
        lidar_rays_per_object: cfg.lidar_rays_per_object,
        objects: vec![ObjectSpec {
            class: style.class.clone(),
            shape,
            position: [jx, jy, -d],
            yaw_deg: rng.random_range(-50.0..50.0),
            albedo: style.albedo,
            reflectance: rng.random_range(0.3..0.9),
        }],
    })
}

/// `n` object samples, one per random scene, scene `k` drawn with seed
/// `seed + k`. Scenes whose object fails the crop filters are passed over.
pub fn synthetic_samples(seed: u64, n: usize, scenes: &RandomSceneConfig, crop: &CropConfig) -> Result<Vec<ObjectSample>> {
    let mut out = Vec::with_capacity(n);
    let attempts = 20 * n.max(1) as u64;
    for k in 0..attempts {
        if out.len() == n {
            break;
        }
        let s = seed.wrapping_add(k);
        let scene = make_synthetic_scene(s, &random_scene_spec(s, scenes)?)?;
        let id = format!("synth{s:06}");
        let got = crop_object_sample(&id, &scene.image, &scene.labels, &scene.cloud, &scene.cam, crop)?;
        out.extend(got.samples.into_iter().take(n - out.len()));
    }
    if out.len() < n {
        return param_err("n", format!("only {} of {n} scenes passed the crop filters", out.len()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn red_cube(position: Point3) -> SceneSpec {
        SceneSpec {
            objects: vec![ObjectSpec {
                class: "Car".into(),
                shape: Shape::Cuboid { size: [2.0, 2.0, 2.0] },
                position,
                yaw_deg: 25.0,
                albedo: [0.9, 0.1, 0.1],
                reflectance: 0.6,
            }],
            ..SceneSpec::default()
        }
    }

    #[test]
    fn empty_spec_renders_background_only() {
        let s = make_synthetic_scene(3, &SceneSpec::default()).unwrap();
        assert!(s.labels.is_empty());
        assert!(s.cloud.is_empty());
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = red_cube([0.3, -0.2, -9.0]);
        let a = make_synthetic_scene(5, &spec).unwrap();
        let b = make_synthetic_scene(5, &spec).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.cloud, b.cloud);
        assert_eq!(a.labels, b.labels);
        assert_ne!(make_synthetic_scene(6, &spec).unwrap().cloud, a.cloud);
    }

    #[test]
    fn cube_pixels_and_points_lie_in_its_box() {
        let spec = red_cube([0.0, 0.0, -9.0]);
        let s = make_synthetic_scene(1, &spec).unwrap();
        let l = &s.labels[0];
        assert_eq!(l.occluded, 0);
        assert_eq!(l.truncated, 0.0);
        assert!(s.cloud.len() > 1500);
        for p in s.cloud.points() {
            assert!(l.contains_camera_point(&s.cam.extrinsic.apply(p), 1e-3));
        }
        let mut red = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..s.image.height() {
            for x in 0..s.image.width() {
                let [r, g, _] = s.image.pixel(y, x);
                if r > 2.0 * g + 0.1 {
                    red = (red.0.min(x), red.1.min(y), red.2.max(x), red.3.max(y));
                }
            }
        }
        assert!(l.bbox[0] <= red.0 as f64 + 1.0 && l.bbox[2] >= red.2 as f64);
        assert!(l.bbox[1] <= red.1 as f64 + 1.0 && l.bbox[3] >= red.3 as f64);
    }

    #[test]
    fn spheres_and_occlusion_levels() {
        let mut spec = red_cube([0.0, 0.0, -12.0]);
        spec.objects.push(ObjectSpec {
            class: "Ball".into(),
            shape: Shape::Sphere { radius: 1.5 },
            position: [0.0, 0.0, -6.0],
            yaw_deg: 0.0,
            albedo: [0.1, 0.2, 0.9],
            reflectance: 0.4,
        });
        let s = make_synthetic_scene(2, &spec).unwrap();
        assert_eq!(s.labels[0].occluded, 2);
        assert_eq!(s.labels[1].occluded, 0);
        let c = s.image.pixel(48, 64);
        assert!(c[2] > c[0] && c[2] > c[1]);
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = random_scene_spec(4, &RandomSceneConfig::default()).unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        let back: SceneSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        let minimal: SceneSpec =
            serde_json::from_str(r#"{"width":32,"height":32,"fov_deg":60,"near":0.5,"far":50}"#).unwrap();
        assert!(minimal.objects.is_empty());
    }
}
