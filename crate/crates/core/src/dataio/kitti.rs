//! KITTI object-benchmark formats: velodyne scans, calibration and labels.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Point3, PointCloud, Transform};

/// Flip between the KITTI camera frame (y down, z forward) and ours (y up, looking down `-z`).
pub const KITTI_TO_CAMERA: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];

pub fn read_velodyne_bin(path: &Path) -> Result<PointCloud> {
    parse_velodyne(&std::fs::read(path)?, &path.display().to_string())
}

/// Decode `x y z reflectance` records of little-endian f32.
pub fn parse_velodyne(bytes: &[u8], source_name: &str) -> Result<PointCloud> {
    if bytes.len() % 16 != 0 {
        return Err(Error::Parse {
            source_name: source_name.into(),
            offset: bytes.len() - bytes.len() % 16,
            reason: format!("truncated record: {} trailing bytes", bytes.len() % 16),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut intensity = Vec::with_capacity(bytes.len() / 16);
    let mut clamped = 0usize;
    for (i, rec) in bytes.chunks_exact(16).enumerate() {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64;
        let p = [f(0), f(1), f(2)];
        let r = f(3);
        if p.iter().chain([&r]).any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                source_name: source_name.into(),
                offset: i * 16,
                reason: "non-finite value".into(),
            });
        }
        if !(0.0..=1.0).contains(&r) {
            clamped += 1;
        }
        points.push(p);
        intensity.push(r.clamp(0.0, 1.0));
    }
    if clamped > 0 {
        log::warn!("{source_name}: clamped {clamped} reflectance values into [0, 1]");
    }
    PointCloud::new(points, Some(intensity))
}

pub fn encode_velodyne(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (i, p) in cloud.points().iter().enumerate() {
        let r = cloud.intensity().map_or(0.0, |v| v[i]);
        for v in [p[0], p[1], p[2], r] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_velodyne_bin(path: &Path, cloud: &PointCloud) -> Result<()> {
    std::fs::write(path, encode_velodyne(cloud))?;
    Ok(())
}

/// The calibration entries needed to place the velodyne cloud in camera 2.
#[derive(Clone, Debug, PartialEq)]
pub struct KittiCalib {
    /// 3x4 projection of the left color camera, row-major.
    pub p2: [[f64; 4]; 3],
    pub r0_rect: [[f64; 3]; 3],
    /// Velodyne to (unrectified) camera, extended with `(0, 0, 0, 1)`.
    pub tr_velo_to_cam: Transform,
}

pub fn read_kitti_calib(path: &Path) -> Result<KittiCalib> {
    parse_kitti_calib(&std::fs::read_to_string(path)?, &path.display().to_string())
}

pub fn parse_kitti_calib(text: &str, source_name: &str) -> Result<KittiCalib> {
    let mut p2 = None;
    let mut r0 = None;
    let mut tr = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        let key = key.trim();
        let expected = match key {
            "P0" | "P1" | "P2" | "P3" | "Tr_velo_to_cam" | "Tr_imu_to_velo" => 12,
            "R0_rect" => 9,
            _ => continue,
        };
        let parse_err = |reason: String| Error::Parse {
            source_name: source_name.into(),
            offset: start,
            reason,
        };
        let vals = rest
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|e| parse_err(format!("{key}: `{s}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != expected {
            return Err(parse_err(format!("{key}: expected {expected} values, got {}", vals.len())));
        }
        match key {
            "P2" => p2 = Some(std::array::from_fn(|r| std::array::from_fn(|c| vals[4 * r + c]))),
            "R0_rect" => r0 = Some(std::array::from_fn(|r| std::array::from_fn(|c| vals[3 * r + c]))),
            "Tr_velo_to_cam" => {
                let mut m = Transform::identity();
                for r in 0..3 {
                    m.0[r].copy_from_slice(&vals[4 * r..4 * r + 4]);
                }
                tr = Some(m);
            }
            _ => {}
        }
    }
    let missing = |key: &str| Error::MissingKey {
        key: key.into(),
        source_name: source_name.into(),
    };
    Ok(KittiCalib {
        p2: p2.ok_or_else(|| missing("P2"))?,
        r0_rect: r0.unwrap_or([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
        tr_velo_to_cam: tr.ok_or_else(|| missing("Tr_velo_to_cam"))?,
    })
}

impl KittiCalib {
    /// Velodyne to our camera frame: flip after rectification, re-orthonormalized
    /// because the published matrices carry only a few significant digits.
    pub fn extrinsic(&self) -> Transform {
        let flip = Transform::from_rotation_translation(KITTI_TO_CAMERA, [0.0; 3]);
        let rect = Transform::from_rotation_translation(self.r0_rect, [0.0; 3]);
        flip.compose(&rect).compose(&self.tr_velo_to_cam).orthonormalized()
    }

    /// Horizontal field of view implied by the focal length of P2. The
    /// principal point offset is not modeled.
    pub fn fov_deg(&self, width: usize) -> f64 {
        2.0 * (width as f64 / (2.0 * self.p2[0][0])).atan().to_degrees()
    }

    pub fn camera(&self, width: usize, height: usize, near: f64, far: f64) -> Result<CameraModel> {
        let mut cam = CameraModel::new(self.fov_deg(width), near, far, width, height)?.with_extrinsic(self.extrinsic())?;
        cam.aspect_correct = true;
        Ok(cam)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let row = |s: &mut String, key: &str, vals: &[f64]| {
            let _ = write!(s, "{key}:");
            for v in vals {
                let _ = write!(s, " {v:e}");
            }
            s.push('\n');
        };
        let p2: Vec<f64> = self.p2.iter().flatten().copied().collect();
        for key in ["P0", "P1", "P2", "P3"] {
            row(&mut s, key, &p2);
        }
        row(&mut s, "R0_rect", &self.r0_rect.iter().flatten().copied().collect::<Vec<_>>());
        let tr: Vec<f64> = self.tr_velo_to_cam.0[..3].iter().flatten().copied().collect();
        row(&mut s, "Tr_velo_to_cam", &tr);
        row(&mut s, "Tr_imu_to_velo", &tr);
        s
    }
}

/// One line of a KITTI `label_2` file. Geometry is in the rectified KITTI
/// camera frame: `location` is the bottom center of the box, `dimensions` are
/// height, width, length.
#[derive(Clone, Debug, PartialEq)]
pub struct KittiLabel {
    pub class: String,
    pub truncated: f64,
    pub occluded: i32,
    pub alpha: f64,
    pub bbox: [f64; 4],
    pub dimensions: [f64; 3],
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl KittiLabel {
    /// Box center in our camera frame.
    pub fn center_camera(&self) -> Point3 {
        let h = self.dimensions[0];
        let c = [self.location[0], self.location[1] - h / 2.0, self.location[2]];
        [c[0], -c[1], -c[2]]
    }

    /// True if the camera-frame point lies in the box scaled by `1 + margin` per axis.
    pub fn contains_camera_point(&self, p: &Point3, margin: f64) -> bool {
        let c = self.center_camera();
        // back to the KITTI frame, relative to the center
        let d = [p[0] - c[0], -(p[1] - c[1]), -(p[2] - c[2])];
        let (s, co) = self.rotation_y.sin_cos();
        // R_y(ry)^T d
        let local = [co * d[0] - s * d[2], d[1], s * d[0] + co * d[2]];
        let [h, w, l] = self.dimensions;
        let k = (1.0 + margin) / 2.0;
        local[0].abs() <= l * k && local[1].abs() <= h * k && local[2].abs() <= w * k
    }

    pub fn to_line(&self) -> String {
        let mut s = format!(
            "{} {:.2} {} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2}",
            self.class,
            self.truncated,
            self.occluded,
            self.alpha,
            self.bbox[0],
            self.bbox[1],
            self.bbox[2],
            self.bbox[3],
            self.dimensions[0],
            self.dimensions[1],
            self.dimensions[2],
            self.location[0],
            self.location[1],
            self.location[2],
            self.rotation_y
        );
        if let Some(score) = self.score {
            let _ = write!(s, " {score:.2}");
        }
        s
    }
}

pub fn read_kitti_labels(path: &Path) -> Result<Vec<KittiLabel>> {
    parse_kitti_labels(&std::fs::read_to_string(path)?, &path.display().to_string())
}

pub fn parse_kitti_labels(text: &str, source_name: &str) -> Result<Vec<KittiLabel>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            source_name: source_name.into(),
            offset: start,
            reason,
        };
        if fields.len() != 15 && fields.len() != 16 {
            return Err(err(format!("expected 15 or 16 fields, got {}", fields.len())));
        }
        let num = |i: usize| fields[i].parse::<f64>().map_err(|e| err(format!("field {i} `{}`: {e}", fields[i])));
        let occluded = fields[2]
            .parse::<i32>()
            .or_else(|_| fields[2].parse::<f64>().map(|v| v as i32))
            .map_err(|e| err(format!("occlusion `{}`: {e}", fields[2])))?;
        out.push(KittiLabel {
            class: fields[0].to_string(),
            truncated: num(1)?,
            occluded,
            alpha: num(3)?,
            bbox: [num(4)?, num(5)?, num(6)?, num(7)?],
            dimensions: [num(8)?, num(9)?, num(10)?],
            location: [num(11)?, num(12)?, num(13)?],
            rotation_y: num(14)?,
            score: if fields.len() == 16 { Some(num(15)?) } else { None },
        });
    }
    Ok(out)
}

pub fn write_kitti_labels(path: &Path, labels: &[KittiLabel]) -> Result<()> {
    let mut s = String::new();
    for l in labels {
        s.push_str(&l.to_line());
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}
