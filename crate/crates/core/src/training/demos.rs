use serde::Serialize;

use super::{condition_triple, inference_seed, prepare_from_conditions, Batch, DataConfig, TrainState};
use crate::dataio::{BackgroundPatch, ConditionTriple, ObjectSample};
use crate::error::{param_err, Result};
use crate::geometry::{rotate_points_about, transform_points, Axis, PointCloud, ProjectionImage};
use crate::raster::Image;
use crate::tensor::Real;

/// Rotate a sensor-frame cloud about `center` (sensor frame) around an axis
/// of the camera frame given by `extrinsic`.
pub fn rotate_in_camera_frame(
    cloud: &PointCloud,
    sample: &ObjectSample,
    axis: Axis,
    degrees: f64,
) -> Result<PointCloud> {
    let ext = &sample.cam.extrinsic;
    let cam = transform_points(cloud, ext)?;
    let center = ext.apply(&sample.origin);
    let rotated = rotate_points_about(&cam, axis, degrees, center);
    transform_points(&rotated, &ext.inverse_rigid())
}

#[derive(Clone, Debug)]
pub struct RotationOutput {
    pub original: Image,
    pub rotated: Image,
    pub projection_original: ProjectionImage,
    pub projection_rotated: ProjectionImage,
    pub summary: RotationSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RotationSummary {
    pub axis: String,
    pub degrees: f64,
    /// Pixels whose c2 value differs between the two projections.
    pub changed_projection_pixels: usize,
    /// Pixels whose generated color differs.
    pub changed_output_pixels: usize,
    pub output_mean_abs_diff: f64,
    /// Largest difference between the two c1 feature vectors; `None` for
    /// variants without a point branch.
    pub feature_max_abs_diff: Option<f64>,
}

fn changed_pixels(a: &Image, b: &Image) -> usize {
    let mut n = 0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if (0..a.channels()).any(|c| a.get(c, y, x) != b.get(c, y, x)) {
                n += 1;
            }
        }
    }
    n
}

/// Replace c2 of `base` with the projection of the sample cloud rotated in
/// the camera frame; c1 and c3 are kept.
pub fn rotated_conditions(
    base: &ConditionTriple,
    sample: &ObjectSample,
    data: &DataConfig,
    axis: Axis,
    degrees: f64,
) -> Result<ConditionTriple> {
    let rotated_cloud = rotate_in_camera_frame(&sample.cloud, sample, axis, degrees)?;
    let c2 = sample.projection_of(&rotated_cloud, data.d_max, data.projection)?;
    ConditionTriple::new(base.c1.clone(), c2, base.c3.clone())
}

/// One fake from explicit conditions.
pub fn generate_from_conditions<T: Real>(
    state: &TrainState<T>,
    sample: &ObjectSample,
    conditions: &ConditionTriple,
    dropout_seed: u64,
) -> Result<Image> {
    let data = &state.config.data;
    let prepared = prepare_from_conditions::<T>(&sample.id, &sample.object_class, conditions, &sample.image_patch, data)?;
    let batch = Batch::collate(&[&prepared])?;
    Image::from_signed_tensor(&state.generate(&batch.condition, &batch.points, dropout_seed)?)
}

/// Generate once from the sample's own conditions and once with c2 recomputed
/// from the rotated cloud. c1 and c3 are shared by both runs, and both use the
/// same dropout seed.
pub fn rotation_demo<T: Real>(state: &TrainState<T>, sample: &ObjectSample, axis: Axis, degrees: f64) -> Result<RotationOutput> {
    let data = &state.config.data;
    let base = condition_triple(sample, data, state.streams())?;
    let turned = rotated_conditions(&base, sample, data, axis, degrees)?;

    let seed = inference_seed(state.streams(), &sample.id);
    let mut images = Vec::with_capacity(2);
    let mut features = Vec::with_capacity(2);
    for triple in [&base, &turned] {
        let prepared = prepare_from_conditions::<T>(&sample.id, &sample.object_class, triple, &sample.image_patch, data)?;
        let batch = Batch::collate(&[&prepared])?;
        images.push(Image::from_signed_tensor(&state.generate(&batch.condition, &batch.points, seed)?)?);
        features.push(state.point_feature(&batch.points)?);
    }
    let feature_max_abs_diff = match (&features[0], &features[1]) {
        (Some(a), Some(b)) => Some(a.max_abs_diff(b)),
        _ => None,
    };
    let rotated = images.pop().expect("two images");
    let original = images.pop().expect("two images");
    let summary = RotationSummary {
        axis: format!("{axis:?}").to_lowercase(),
        degrees,
        changed_projection_pixels: changed_pixels(&base.c2.image, &turned.c2.image),
        changed_output_pixels: changed_pixels(&original, &rotated),
        output_mean_abs_diff: original.mean_abs_diff(&rotated),
        feature_max_abs_diff,
    };
    Ok(RotationOutput {
        original,
        rotated,
        projection_original: base.c2,
        projection_rotated: turned.c2,
        summary,
    })
}

/// Output file name of the `k`-th background variation of a sample.
pub fn background_file_name(id: &str, k: usize) -> String {
    format!("{id}_bg{k}.png")
}

/// One fake per background, holding c1 and c2 fixed and reusing a single
/// dropout seed, so that only c3 differs between the outputs.
pub fn generate_with_backgrounds<T: Real>(
    state: &TrainState<T>,
    sample: &ObjectSample,
    backgrounds: &[BackgroundPatch],
    dropout_seed: u64,
) -> Result<Vec<(String, Image)>> {
    if backgrounds.is_empty() {
        return param_err("backgrounds", "no background patches given");
    }
    let base = condition_triple(sample, &state.config.data, state.streams())?;
    generate_background_variations(state, sample, &base, backgrounds, dropout_seed)
}

/// [`generate_with_backgrounds`] starting from explicit c1 and c2.
pub fn generate_background_variations<T: Real>(
    state: &TrainState<T>,
    sample: &ObjectSample,
    base: &ConditionTriple,
    backgrounds: &[BackgroundPatch],
    dropout_seed: u64,
) -> Result<Vec<(String, Image)>> {
    if backgrounds.is_empty() {
        return param_err("backgrounds", "no background patches given");
    }
    let mut out = Vec::with_capacity(backgrounds.len());
    for (k, bg) in backgrounds.iter().enumerate() {
        let triple = ConditionTriple::new(base.c1.clone(), base.c2.clone(), bg.clone())?;
        out.push((background_file_name(&sample.id, k), generate_from_conditions(state, sample, &triple, dropout_seed)?));
    }
    Ok(out)
}
