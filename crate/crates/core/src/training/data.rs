use rayon::prelude::*;

use super::DataConfig;
use crate::dataio::{compose_generator_input, extract_background_patch, BackgroundPatch, ConditionTriple, ObjectSample};
use crate::error::{param_err, Result};
use crate::geometry::PointCloud;
use crate::raster::Image;
use crate::seed::{SeedStreams, SAMPLING};
use crate::tensor::{Real, Tensor};

/// One sample turned into network tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample<T> {
    pub id: String,
    pub object_class: String,
    /// Composed c2/c3 input `[C, S, S]` in `[-1, 1]`.
    pub condition: Tensor<T>,
    /// c1 as `[N, 3]`, centered on the object origin.
    pub points: Tensor<T>,
    /// Ground-truth patch `[3, S, S]` in `[-1, 1]`.
    pub target: Tensor<T>,
}

/// Seed used to draw the point condition of a sample.
pub fn point_seed(streams: &SeedStreams, id: &str) -> u64 {
    streams.seed_for_key(SAMPLING, id)
}

pub fn condition_triple(sample: &ObjectSample, data: &DataConfig, streams: &SeedStreams) -> Result<ConditionTriple> {
    if sample.patch_size() != data.patch_size {
        return param_err(
            "patch_size",
            format!("sample {} has a {} px patch, expected {}", sample.id, sample.patch_size(), data.patch_size),
        );
    }
    let c1 = sample.point_condition(data.num_points, point_seed(streams, &sample.id))?;
    let c2 = sample.projection(data.d_max, data.projection)?;
    let c3 = extract_background_patch(&sample.image_patch, data.border_width)?;
    ConditionTriple::new(c1, c2, c3)
}

pub fn points_to_tensor<T: Real>(cloud: &PointCloud) -> Tensor<T> {
    let data: Vec<T> = cloud.points().iter().flatten().map(|&v| T::from_f64_lossy(v)).collect();
    Tensor::new(vec![cloud.len(), 3], data).expect("3 coordinates per point")
}

pub fn prepare_from_conditions<T: Real>(
    id: &str,
    object_class: &str,
    conditions: &ConditionTriple,
    target: &Image,
    data: &DataConfig,
) -> Result<PreparedSample<T>> {
    let composed = compose_generator_input(&conditions.c2, &conditions.c3, data.compose)?;
    Ok(PreparedSample {
        id: id.to_string(),
        object_class: object_class.to_string(),
        condition: composed.to_signed_tensor(),
        points: points_to_tensor(&conditions.c1),
        target: target.to_signed_tensor(),
    })
}

pub fn prepare_sample<T: Real>(sample: &ObjectSample, data: &DataConfig, streams: &SeedStreams) -> Result<PreparedSample<T>> {
    let triple = condition_triple(sample, data, streams)?;
    prepare_from_conditions(&sample.id, &sample.object_class, &triple, &sample.image_patch, data)
}

/// Prepare samples in parallel; the output keeps the input order.
pub fn prepare_dataset<T: Real>(samples: &[ObjectSample], data: &DataConfig, streams: &SeedStreams) -> Result<Vec<PreparedSample<T>>> {
    samples.par_iter().map(|s| prepare_sample(s, data, streams)).collect()
}

/// Same sample with a different background frame.
pub fn with_background<T: Real>(
    sample: &ObjectSample,
    background: &BackgroundPatch,
    data: &DataConfig,
    streams: &SeedStreams,
) -> Result<PreparedSample<T>> {
    let mut triple = condition_triple(sample, data, streams)?;
    triple = ConditionTriple::new(triple.c1, triple.c2, background.clone())?;
    prepare_from_conditions(&sample.id, &sample.object_class, &triple, &sample.image_patch, data)
}

/// Stacked tensors for a minibatch.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub ids: Vec<String>,
    pub condition: Tensor<T>,
    pub points: Tensor<T>,
    pub target: Tensor<T>,
}

impl<T: Real> Batch<T> {
    pub fn collate(samples: &[&PreparedSample<T>]) -> Result<Self> {
        if samples.is_empty() {
            return param_err("batch", "empty batch");
        }
        let conds: Vec<&Tensor<T>> = samples.iter().map(|s| &s.condition).collect();
        let pts: Vec<&Tensor<T>> = samples.iter().map(|s| &s.points).collect();
        let tgts: Vec<&Tensor<T>> = samples.iter().map(|s| &s.target).collect();
        Ok(Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            condition: Tensor::stack(&conds)?,
            points: Tensor::stack(&pts)?,
            target: Tensor::stack(&tgts)?,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
