mod common;

use std::fs;

use common::{toy_config, toy_samples};
use points2pix::dataio::ObjectSample;
use points2pix::generator::Variant;
use points2pix::geometry::{Axis, CameraModel, PointCloud};
use points2pix::raster::Image;
use points2pix::tensor::{Checkpoint, Tape, Tensor};
use points2pix::training::*;
use points2pix::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scores(tape: &mut Tape<f64>, shape: &[usize], v: &[f64]) -> points2pix::tensor::Var {
    tape.constant(Tensor::new(shape.to_vec(), v.to_vec()).unwrap())
}

#[test]
fn discriminator_loss_closed_forms_and_scalar_oracle() {
    let mut tape = Tape::<f64>::new(0);
    let half = scores(&mut tape, &[1, 1, 2, 2], &[0.5; 4]);
    let l = discriminator_loss(&mut tape, half, half).unwrap();
    assert!((tape.value(l.total).item() - 2.0 * 2f64.ln()).abs() < 1e-12);

    let one = scores(&mut tape, &[4], &[1.0 - 1e-12; 4]);
    let zero = scores(&mut tape, &[4], &[1e-12; 4]);
    let l = discriminator_loss(&mut tape, one, zero).unwrap();
    assert!(tape.value(l.total).item() < 1e-6);

    // Exact 0 and 1 are clamped rather than producing infinities.
    let before = tape.clamp_events();
    let r = scores(&mut tape, &[2], &[0.0, 1.0]);
    let f = scores(&mut tape, &[2], &[1.0, 0.0]);
    let l = discriminator_loss(&mut tape, r, f).unwrap();
    assert!(tape.value(l.total).item().is_finite());
    assert_eq!(tape.clamp_events() - before, 4);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 2 * 6 * 6;
    let rv: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
    let fv: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
    let r = scores(&mut tape, &[2, 1, 6, 6], &rv);
    let f = scores(&mut tape, &[2, 1, 6, 6], &fv);
    let l = discriminator_loss(&mut tape, r, f).unwrap();
    let mut real = 0.0;
    let mut fake = 0.0;
    for i in 0..n {
        real -= rv[i].ln();
        fake -= (1.0 - fv[i]).ln();
    }
    let oracle = real / n as f64 + fake / n as f64;
    assert!((tape.value(l.total).item() - oracle).abs() < 1e-6);
    assert!((tape.value(l.real).item() - real / n as f64).abs() < 1e-6);
}

#[test]
fn generator_loss_closed_forms_and_decomposition() {
    let mut tape = Tape::<f64>::new(0);
    let half = scores(&mut tape, &[1, 1, 3, 3], &[0.5; 9]);
    let img = scores(&mut tape, &[1, 3, 2, 2], &[0.25; 12]);
    let l = generator_loss(&mut tape, half, img, img, 100.0, false).unwrap();
    assert_eq!(tape.value(l.l1).item(), 0.0);
    assert!((tape.value(l.total).item() - 2f64.ln()).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sv: Vec<f64> = (0..9).map(|_| rng.random_range(0.05..0.95)).collect();
    let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s = scores(&mut tape, &[1, 1, 3, 3], &sv);
    let fa = scores(&mut tape, &[1, 3, 2, 2], &a);
    let rb = scores(&mut tape, &[1, 3, 2, 2], &b);
    let l0 = generator_loss(&mut tape, s, fa, rb, 0.0, false).unwrap();
    assert_eq!(tape.value(l0.total).item(), tape.value(l0.adversarial).item());

    let l = generator_loss(&mut tape, s, fa, rb, 100.0, false).unwrap();
    let (adv, l1) = (tape.value(l.adversarial).item(), tape.value(l.l1).item());
    assert_eq!(tape.value(l.total).item(), adv + 100.0 * l1);
    let adv_oracle = -sv.iter().map(|v| v.ln()).sum::<f64>() / 9.0;
    let l1_oracle = a.iter().zip(&b).map(|(x, y)| (y - x).abs()).sum::<f64>() / 12.0;
    assert!((adv - adv_oracle).abs() < 1e-12);
    assert!((l1 - l1_oracle).abs() < 1e-12);

    let mm = generator_loss(&mut tape, s, fa, rb, 0.0, true).unwrap();
    let mm_oracle = sv.iter().map(|v| (1.0 - v).ln()).sum::<f64>() / 9.0;
    assert!((tape.value(mm.total).item() - mm_oracle).abs() < 1e-12);
}

fn prepared(cfg: &TrainConfig, samples: &[ObjectSample]) -> Vec<PreparedSample<f32>> {
    let state = TrainState::<f32>::new(cfg.clone()).unwrap();
    prepare_dataset(samples, &cfg.data, state.streams()).unwrap()
}

#[test]
fn each_update_touches_only_its_own_network() {
    let cfg = toy_config();
    let data = prepared(&cfg, &toy_samples(1, 1));
    let mut state = TrainState::<f32>::new(cfg).unwrap();
    let batch = Batch::collate(&[&data[0]]).unwrap();
    let mut ctx = state.begin_step(&batch).unwrap();
    let (g0, d0) = (state.generator.clone(), state.discriminator.clone());
    state.update_discriminator(&mut ctx).unwrap();
    assert!(state.generator.bitwise_eq(&g0));
    assert!(!state.discriminator.bitwise_eq(&d0));
    let d1 = state.discriminator.clone();
    state.update_generator(&mut ctx).unwrap();
    assert!(state.discriminator.bitwise_eq(&d1));
    assert!(!state.generator.bitwise_eq(&g0));
    assert!(state.adam_d.paths().all(|p| p.starts_with("discriminator/")));
    assert!(state.adam_g.paths().all(|p| !p.starts_with("discriminator/")));
    assert!(state.adam_g.paths().any(|p| p.starts_with("pointnet/")));
    assert_eq!(state.adam_g.step_count, 1);
    assert_eq!(state.adam_d.step_count, 1);
}

#[test]
fn non_finite_parameters_abort_the_step() {
    let cfg = toy_config();
    let data = prepared(&cfg, &toy_samples(1, 1));
    let mut state = TrainState::<f32>::new(cfg).unwrap();
    state.generator.get_mut("generator/dec0/weight").unwrap().data_mut()[0] = f32::NAN;
    let batch = Batch::collate(&[&data[0]]).unwrap();
    match state.train_step(&batch) {
        Err(Error::NonFiniteLoss { step: 1, .. }) => {}
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn one_epoch_on_two_samples_runs_two_steps_and_writes_its_outputs() {
    let mut cfg = toy_config();
    cfg.epochs = 1;
    cfg.dump_every_epochs = 1;
    let data = prepared(&cfg, &toy_samples(2, 2));
    let dir = tempfile::tempdir().unwrap();
    let res = run_experiment(&cfg, &data, &data[..1], dir.path(), &ExperimentOptions::default()).unwrap();
    assert_eq!(res.records.len(), 2);
    assert_eq!(res.state.step, 2);
    assert_eq!(res.records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2]);
    assert_eq!(read_log(&dir.path().join(LOG_FILE)).unwrap(), res.records);
    assert!(res.metrics.eval_l1.is_some());
    let dumped = fs::read_dir(dir.path().join("fakes/epoch_0000")).unwrap().count();
    assert_eq!(dumped, 2);
    let ck = Checkpoint::load(&res.checkpoint).unwrap();
    let back = TrainState::<f32>::from_checkpoint(&ck).unwrap();
    assert_eq!(back.step, 2);
    assert_eq!(back.progress, Progress { epoch: 1, batch: 0 });

    let log = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert!(log.contains("\"loss_D_real\""));
    assert!(!log.contains("wallclock"));
}

#[test]
fn identical_seeds_give_identical_logs_and_different_seeds_do_not() {
    let mut cfg = toy_config();
    cfg.epochs = 2;
    let data = prepared(&cfg, &toy_samples(3, 2));
    let run = |cfg: &TrainConfig| {
        let dir = tempfile::tempdir().unwrap();
        run_experiment(cfg, &data, &[], dir.path(), &ExperimentOptions::default()).unwrap();
        fs::read(dir.path().join(LOG_FILE)).unwrap()
    };
    let a = run(&cfg);
    assert_eq!(a, run(&cfg));
    cfg.seed = 1;
    assert_ne!(a, run(&cfg));
}

#[test]
fn resumed_run_continues_the_uninterrupted_stream() {
    let mut cfg = toy_config();
    cfg.epochs = 2;
    let data = prepared(&cfg, &toy_samples(4, 4));
    let full_dir = tempfile::tempdir().unwrap();
    let full = run_experiment(&cfg, &data, &[], full_dir.path(), &ExperimentOptions::default()).unwrap();
    assert_eq!(full.records.len(), 8);

    let dir = tempfile::tempdir().unwrap();
    let mut short = cfg.clone();
    short.max_steps = Some(3);
    let part = run_experiment(&short, &data, &[], dir.path(), &ExperimentOptions::default()).unwrap();
    assert_eq!(part.state.progress, Progress { epoch: 0, batch: 3 });
    let resume = ExperimentOptions {
        resume: Some(dir.path().join(CHECKPOINT_FILE)),
        ..Default::default()
    };
    let rest = run_experiment(&cfg, &data, &[], dir.path(), &resume).unwrap();
    assert_eq!(rest.records.first().unwrap().step, 4);
    assert_eq!(rest.records, full.records[3..]);
    assert_eq!(
        fs::read(dir.path().join(LOG_FILE)).unwrap(),
        fs::read(full_dir.path().join(LOG_FILE)).unwrap()
    );
    assert!(rest.state.generator.bitwise_eq(&full.state.generator));

    let mut other = cfg.clone();
    other.seed = 9;
    assert!(run_experiment(&other, &data, &[], dir.path(), &resume).is_err());
}

#[test]
fn checkpoint_round_trip_reproduces_the_forward_pass() {
    let cfg = toy_config();
    let data = prepared(&cfg, &toy_samples(5, 1));
    let mut state = TrainState::<f32>::new(cfg).unwrap();
    let batch = Batch::collate(&[&data[0]]).unwrap();
    state.train_step(&batch).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.p2p");
    state.to_checkpoint().save(&p).unwrap();
    let back = TrainState::<f32>::from_checkpoint(&Checkpoint::load(&p).unwrap()).unwrap();
    let a = state.generate(&batch.condition, &batch.points, 7).unwrap();
    let b = back.generate(&batch.condition, &batch.points, 7).unwrap();
    assert!(a.bitwise_eq(&b));
    assert_eq!(back.adam_g, state.adam_g);
}

#[test]
fn unet_only_checkpoints_carry_no_point_branch() {
    let mut cfg = toy_config();
    cfg.generator.variant = Variant::UnetOnly;
    let state = TrainState::<f32>::new(cfg).unwrap();
    let ck = state.to_checkpoint();
    assert!(ck.paths().all(|p| !p.starts_with("pointnet/") && !p.contains("/pointnet/")));
    assert!(TrainState::<f32>::from_checkpoint(&ck).is_ok());
}

#[test]
fn ablation_trains_every_variant_and_tabulates_them() {
    let mut cfg = toy_config();
    cfg.epochs = 1;
    let data = prepared(&cfg, &toy_samples(6, 1));
    let dir = tempfile::tempdir().unwrap();
    let table = run_ablation(&cfg, &data, &data, dir.path()).unwrap();
    let names: Vec<&str> = table.rows.iter().map(|r| r.variant.name()).collect();
    assert_eq!(names, ["full", "unet_only", "pointnet_only"]);
    let md = table.to_markdown();
    assert_eq!(md.lines().count(), 5);
    assert!(dir.path().join("ablation.json").exists());
    for v in Variant::ALL {
        assert!(dir.path().join(v.name()).join(CHECKPOINT_FILE).exists());
    }
}

#[test]
fn rotation_by_zero_is_a_no_op_and_twenty_degrees_changes_only_c2() {
    let cfg = toy_config();
    let state = TrainState::<f32>::new(cfg).unwrap();
    let sample = &toy_samples(7, 1)[0];
    let zero = rotation_demo(&state, sample, Axis::Y, 0.0).unwrap();
    assert_eq!(zero.original, zero.rotated);
    assert_eq!(zero.summary.changed_projection_pixels, 0);
    assert_eq!(zero.summary.changed_output_pixels, 0);

    let turned = rotation_demo(&state, sample, Axis::Y, 20.0).unwrap();
    assert!(turned.summary.changed_projection_pixels > 0);
    assert_eq!(turned.summary.feature_max_abs_diff, Some(0.0));
    assert!(turned.summary.changed_output_pixels > 0);
}

/// A flat, asymmetric "L" of points facing the camera, centered on the optical axis.
fn planar_sample(patch: usize) -> ObjectSample {
    let cam = CameraModel::new(60.0, 0.5, 80.0, 128, 96).unwrap();
    let mut pts = Vec::new();
    for i in 0..60 {
        for j in 0..6 {
            let a = -1.5 + i as f64 * 0.05;
            let b = -1.5 + j as f64 * 0.05;
            pts.push([b, a, -10.0]);
            pts.push([a, b, -10.0]);
        }
    }
    let n = pts.len();
    ObjectSample {
        id: "plane".into(),
        object_class: "Car".into(),
        image_patch: Image::filled(3, patch, patch, 0.5),
        cloud: PointCloud::new(pts, Some(vec![0.7; n])).unwrap(),
        cam,
        window: ((128 - patch) / 2, (96 - patch) / 2),
        origin: [0.0, 0.0, -10.0],
    }
}

#[test]
fn half_turn_about_x_flips_the_projection_vertically() {
    let cfg = toy_config();
    let state = TrainState::<f32>::new(cfg).unwrap();
    let sample = planar_sample(64);
    let out = rotation_demo(&state, &sample, Axis::X, 180.0).unwrap();
    let before = out.projection_original.occupied();
    let after = out.projection_rotated.occupied();
    assert!(before.len() > 100);
    assert_ne!(before, after);
    let near = |set: &[(usize, usize)], x: usize, y: usize| {
        set.iter()
            .any(|&(a, b)| a.abs_diff(x) <= 1 && b.abs_diff(y) <= 1)
    };
    for &(x, y) in &after {
        assert!(near(&before, x, 63 - y), "({x}, {y}) has no mirrored partner");
    }
    for &(x, y) in &before {
        assert!(near(&after, x, 63 - y), "({x}, {y}) has no mirrored partner");
    }
}

#[test]
fn background_variations_share_c1_and_c2_and_are_reproducible() {
    let cfg = toy_config();
    let state = TrainState::<f32>::new(cfg.clone()).unwrap();
    let samples = toy_samples(8, 3);
    let bgs: Vec<_> = samples
        .iter()
        .map(|s| condition_triple(s, &cfg.data, state.streams()).unwrap().c3)
        .collect();
    let a = generate_with_backgrounds(&state, &samples[0], &bgs, 11).unwrap();
    let b = generate_with_backgrounds(&state, &samples[0], &bgs, 11).unwrap();
    assert_eq!(a.len(), 3);
    assert_eq!(a[1].0, format!("{}_bg1.png", samples[0].id));
    for ((na, ia), (nb, ib)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        assert_eq!(ia.to_png_bytes().unwrap(), ib.to_png_bytes().unwrap());
    }
    assert_ne!(a[0].1, a[1].1);
}
