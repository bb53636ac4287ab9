//! Adversarial training of generator and discriminator, checkpoints, and
//! the ablation and rotation drivers.

mod config;
mod data;
mod demos;
mod experiment;
mod losses;
mod state;

pub use config::{AdversarialLoss, DataConfig, Preset, TrainConfig};
pub use data::{
    condition_triple, point_seed, points_to_tensor, prepare_dataset, prepare_from_conditions, prepare_sample,
    with_background, Batch, PreparedSample,
};
pub use demos::{
    background_file_name, generate_background_variations, generate_from_conditions, generate_with_backgrounds,
    rotate_in_camera_frame, rotated_conditions, rotation_demo, RotationOutput, RotationSummary,
};
pub use experiment::{
    epoch_order, inference_seed, mean_l1, read_log, run_ablation, run_experiment, AblationTable, ExperimentOptions,
    ExperimentResult, RunFailure, TrainMetrics, CHECKPOINT_FILE, LOG_FILE, METRICS_FILE,
};
pub use losses::{discriminator_loss, generator_loss, DiscriminatorLoss, GeneratorLoss, SCORE_CLAMP};
pub use state::{Progress, StepContext, TrainLogRecord, TrainState};
