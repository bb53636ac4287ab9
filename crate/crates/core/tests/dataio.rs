use points2pix::dataio::{
    crop_object_sample, make_synthetic_scene, parse_velodyne, random_scene_spec, read_velodyne_bin,
    write_velodyne_bin, CropConfig, Frame, KittiDir, KittiLabel, ObjectSpec, RandomSceneConfig, SampleCache,
    SceneSpec, Shape,
};
use points2pix::geometry::{CameraModel, PointCloud};
use points2pix::raster::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cube_spec(position: [f64; 3]) -> SceneSpec {
    SceneSpec {
        objects: vec![ObjectSpec {
            class: "Car".into(),
            shape: Shape::Cuboid { size: [2.4, 2.0, 2.2] },
            position,
            yaw_deg: 30.0,
            albedo: [0.9, 0.1, 0.1],
            reflectance: 0.7,
        }],
        ..SceneSpec::default()
    }
}

/// Textbook pinhole with intrinsics K = [[f,0,w/2],[0,f,h/2],[0,0,1]] in the
/// KITTI camera frame (y down, z forward).
fn kitti_pixel(p_cam_ours: [f64; 3], fov: f64, w: f64, h: f64) -> (f64, f64) {
    let f = w / 2.0 / (fov.to_radians() / 2.0).tan();
    let (x, y, z) = (p_cam_ours[0], -p_cam_ours[1], -p_cam_ours[2]);
    (f * x / z + w / 2.0, f * y / z + h / 2.0)
}

#[test]
fn velodyne_round_trip_10k_points_is_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pts: Vec<[f64; 3]> = (0..10_000)
        .map(|_| std::array::from_fn(|_| rng.random_range(-80.0f32..80.0) as f64))
        .collect();
    let inten: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0f32..=1.0) as f64).collect();
    let cloud = PointCloud::new(pts, Some(inten)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("000000.bin");
    write_velodyne_bin(&p, &cloud).unwrap();
    assert_eq!(std::fs::metadata(&p).unwrap().len(), 160_000);
    let back = read_velodyne_bin(&p).unwrap();
    assert_eq!(back, cloud);
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(points2pix::dataio::encode_velodyne(&back), bytes);
    assert!(parse_velodyne(&bytes[..bytes.len() - 3], "x").is_err());
}

#[test]
fn cube_box_matches_corner_projection_oracle() {
    let spec = cube_spec([0.4, -0.3, -9.0]);
    let s = make_synthetic_scene(7, &spec).unwrap();
    let o = &spec.objects[0];
    let (sn, c) = o.yaw_deg.to_radians().sin_cos();
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for i in 0..8 {
        let l = [
            if i & 1 == 0 { -1.2 } else { 1.2 },
            if i & 2 == 0 { -1.0 } else { 1.0 },
            if i & 4 == 0 { -1.1 } else { 1.1 },
        ];
        // yaw about the vertical axis
        let p = [
            o.position[0] + c * l[0] + sn * l[2],
            o.position[1] + l[1],
            o.position[2] - sn * l[0] + c * l[2],
        ];
        let (u, v) = kitti_pixel(p, spec.fov_deg, spec.width as f64, spec.height as f64);
        lo = (lo.0.min(u), lo.1.min(v));
        hi = (hi.0.max(u), hi.1.max(v));
    }
    let b = s.labels[0].bbox;
    for (got, want) in b.iter().zip([lo.0, lo.1, hi.0, hi.1]) {
        assert!((got - want).abs() < 1e-9, "{b:?} vs {lo:?} {hi:?}");
    }
}

#[test]
fn centered_cube_yields_one_sample_centered_on_its_origin() {
    let spec = cube_spec([0.0, 0.0, -9.0]);
    let s = make_synthetic_scene(3, &spec).unwrap();
    let cfg = CropConfig {
        patch_size: 64,
        ..CropConfig::default()
    };
    let out = crop_object_sample("000000", &s.image, &s.labels, &s.cloud, &s.cam, &cfg).unwrap();
    assert_eq!(out.samples.len(), 1);
    let smp = &out.samples[0];
    let (u, v) = kitti_pixel([0.0, 0.0, -9.0], spec.fov_deg, 128.0, 96.0);
    assert_eq!(smp.window.0 + 32, u.floor() as usize);
    assert_eq!(smp.window.1 + 32, v.floor() as usize);
    assert_eq!(smp.image_patch.width(), 64);
    assert_eq!(smp.image_patch.height(), 64);
    for k in 0..3 {
        let o = s.cam.extrinsic.apply(&smp.origin)[k];
        assert!((o - [0.0, 0.0, -9.0][k]).abs() < 1e-9);
    }
    assert_eq!(smp.cloud.len(), s.cloud.len());
}

fn label_at(center_cam: [f64; 3], size: f64, occluded: i32, truncated: f64) -> KittiLabel {
    KittiLabel {
        class: "Car".into(),
        truncated,
        occluded,
        alpha: 0.0,
        bbox: [0.0, 0.0, 10.0, 10.0],
        dimensions: [size, size, size],
        location: [center_cam[0], -center_cam[1] + size / 2.0, -center_cam[2]],
        rotation_y: 0.0,
        score: None,
    }
}

#[test]
fn point_count_and_visibility_filters() {
    let cam = CameraModel::new(60.0, 0.5, 80.0, 128, 96).unwrap();
    let image = Image::filled(3, 96, 128, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut box_points = |n: usize| -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), -10.0 + rng.random_range(-0.9..0.9)])
            .collect()
    };
    let mut pts = box_points(699);
    pts.extend([[30.0, 0.0, -50.0], [0.0, 5.0, -10.0]]);
    let cloud = PointCloud::from_points(pts.clone()).unwrap();
    let cfg = CropConfig {
        patch_size: 64,
        ..CropConfig::default()
    };
    let labels = vec![label_at([0.0, 0.0, -10.0], 2.0, 0, 0.0)];
    let out = crop_object_sample("a", &image, &labels, &cloud, &cam, &cfg).unwrap();
    assert_eq!((out.samples.len(), out.skipped_few_points), (0, 1));

    pts.extend(box_points(1));
    let cloud = PointCloud::from_points(pts).unwrap();
    let out = crop_object_sample("a", &image, &labels, &cloud, &cam, &cfg).unwrap();
    assert_eq!(out.samples.len(), 1);
    assert_eq!(out.samples[0].cloud.len(), 700);

    let hidden = vec![
        label_at([0.0, 0.0, -10.0], 2.0, 2, 0.0),
        label_at([0.0, 0.0, -10.0], 2.0, 0, 0.5),
        label_at([0.0, 0.0, 10.0], 2.0, 0, 0.0),
    ];
    let out = crop_object_sample("a", &image, &hidden, &cloud, &cam, &cfg).unwrap();
    assert_eq!(out.samples.len(), 0);
    assert_eq!(out.skipped_occluded, 2);
    assert_eq!(out.skipped_outside, 1);

    let only_peds = CropConfig {
        classes: vec!["Pedestrian".into()],
        ..cfg
    };
    let out = crop_object_sample("a", &image, &labels, &cloud, &cam, &only_peds).unwrap();
    assert_eq!(out.skipped_class, 1);
}

#[test]
fn projected_centers_fall_inside_their_boxes() {
    let cfg = RandomSceneConfig::default();
    for seed in 0..40 {
        let spec = random_scene_spec(seed, &cfg).unwrap();
        let s = make_synthetic_scene(seed, &spec).unwrap();
        for l in &s.labels {
            let (u, v) = s.cam.pixel_of_camera_point(&l.center_camera()).unwrap();
            assert!(l.bbox[0] <= u && u <= l.bbox[2] && l.bbox[1] <= v && v <= l.bbox[3], "seed {seed}");
        }
    }
}

#[test]
fn disk_layouts_round_trip() {
    let spec = cube_spec([0.0, 0.2, -10.0]);
    let s = make_synthetic_scene(9, &spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let kd = KittiDir::new(dir.path().join("kitti"));
    kd.write_frame(&Frame {
        id: "000004".into(),
        image: s.image.clone(),
        labels: s.labels.clone(),
        cloud: s.cloud.clone(),
        calib: s.calib.clone(),
    })
    .unwrap();
    assert_eq!(kd.frame_ids().unwrap(), vec!["000004".to_string()]);
    let f = kd.load_frame("000004").unwrap();
    assert_eq!(f.cloud, s.cloud);
    let cam = f.calib.camera(f.image.width(), f.image.height(), 0.5, 80.0).unwrap();
    assert_eq!(cam, s.cam);
    assert!(f.image.mean_abs_diff(&s.image) < 1.0 / 255.0);

    let cfg = CropConfig {
        patch_size: 64,
        ..CropConfig::default()
    };
    let smp = crop_object_sample("000004", &f.image, &f.labels, &f.cloud, &cam, &cfg).unwrap().samples.remove(0);
    let cache = SampleCache::new(dir.path().join("cache"));
    cache.write_sample(&smp).unwrap();
    assert_eq!(cache.read_sample(&smp.id).unwrap(), smp);
}
