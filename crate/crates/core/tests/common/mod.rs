#![allow(dead_code)]

use points2pix::dataio::{synthetic_samples, CropConfig, ObjectSample, RandomSceneConfig};
use points2pix::training::{Preset, TrainConfig};

pub fn toy_config() -> TrainConfig {
    TrainConfig::preset(Preset::Toy64)
}

pub fn toy_samples(seed: u64, n: usize) -> Vec<ObjectSample> {
    let crop = CropConfig {
        patch_size: 64,
        ..CropConfig::default()
    };
    synthetic_samples(seed, n, &RandomSceneConfig::default(), &crop).unwrap()
}

use points2pix::discriminator::discriminator_forward;
use points2pix::generator::{generator_forward, ForwardOptions, GeneratorInputs, Variant};
use points2pix::tensor::{finite_difference_check, FdConfig, FdReport, ParamStore, Tensor};
use points2pix::training::{discriminator_loss, generator_loss, prepare_sample, TrainState};

/// Finite-difference check, at 64-bit, of the summed generator and
/// discriminator losses of one toy training sample with respect to every
/// parameter block of both networks.
pub fn full_variant_fd(variant: Variant, probes_per_block: usize) -> FdReport {
    full_variant_fd_with(variant, FdConfig { probes_per_block, seed: 17, ..FdConfig::default() })
}

pub fn full_variant_fd_with(variant: Variant, fd: FdConfig) -> FdReport {
    full_variant_fd_lambda(variant, fd, toy_config().lambda_l1)
}

pub fn full_variant_fd_lambda(variant: Variant, fd: FdConfig, lambda_l1: f64) -> FdReport {
    let mut cfg = toy_config();
    cfg.lambda_l1 = lambda_l1;
    cfg.generator.variant = variant;
    let state = TrainState::<f64>::new(cfg.clone()).unwrap();
    let sample = &toy_samples(21, 1)[0];
    let p = prepare_sample::<f64>(sample, &cfg.data, state.streams()).unwrap();
    let cond = Tensor::stack(&[&p.condition]).unwrap();
    let pts = Tensor::stack(&[&p.points]).unwrap();
    let target = Tensor::stack(&[&p.target]).unwrap();
    let mut store: ParamStore<f64> = state.generator.clone();
    store.extend(state.discriminator.clone());
    let graph = |tape: &mut points2pix::tensor::Tape<f64>, store: &ParamStore<f64>| {
        let inputs = GeneratorInputs {
            image: variant.uses_image().then(|| tape.constant(cond.clone())),
            points: variant.uses_points().then(|| tape.constant(pts.clone())),
        };
        let opts = ForwardOptions { train: true, ablate_skip: None };
        let fake = generator_forward(tape, store, &cfg.generator, inputs, opts)?;
        let real = tape.constant(target.clone());
        let rs = discriminator_forward(tape, store, &cfg.discriminator, real, None, true)?;
        let fs = discriminator_forward(tape, store, &cfg.discriminator, fake, None, true)?;
        let d = discriminator_loss(tape, rs, fs)?;
        let g = generator_loss(tape, fs, fake, real, cfg.lambda_l1, false)?;
        tape.add(d.total, g.total)
    };
    finite_difference_check(graph, &store, fd).unwrap()
}
