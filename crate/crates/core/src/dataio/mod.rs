//! Dataset ingestion, object-centric samples and synthetic scenes.

mod kitti;
mod sample;
mod store;
mod synth;

pub use kitti::{
    encode_velodyne, parse_kitti_calib, parse_kitti_labels, parse_velodyne, read_kitti_calib, read_kitti_labels,
    read_velodyne_bin, write_kitti_labels, write_velodyne_bin, KittiCalib, KittiLabel, KITTI_TO_CAMERA,
};
pub use sample::{
    compose_generator_input, crop_object_sample, extract_background_patch, BackgroundPatch, ComposeMode,
    ConditionTriple, CropConfig, CropOutcome, ObjectSample,
};
pub use store::{read_split_list, split_dataset, write_split_list, CacheIndex, Frame, KittiDir, SampleCache};
pub use synth::{
    default_class_styles, make_synthetic_scene, random_scene_spec, BackgroundSpec, ClassStyle, ObjectSpec,
    synthetic_samples, RandomSceneConfig, SceneSpec, Shape, SyntheticScene,
};
