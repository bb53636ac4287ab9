use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::losses::{discriminator_loss, generator_loss};
use super::{AdversarialLoss, Batch, TrainConfig};
use crate::discriminator::{self, discriminator_forward, init_discriminator};
use crate::error::{Error, Result};
use crate::generator::{self, generator_forward, init_generator, param_groups, ForwardOptions, GeneratorInputs};
use crate::pointnet;
use crate::seed::{SeedStreams, DROPOUT, INIT};
use crate::tensor::{adam_step, AdamState, Checkpoint, ParamStore, Real, Tape, Tensor, Var};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub epoch: usize,
    #[serde(rename = "loss_D_real")]
    pub loss_d_real: f64,
    #[serde(rename = "loss_D_fake")]
    pub loss_d_fake: f64,
    #[serde(rename = "loss_G_adv")]
    pub loss_g_adv: f64,
    #[serde(rename = "loss_G_l1")]
    pub loss_g_l1: f64,
    /// Seconds since the run started. Left out unless requested, since it
    /// would make otherwise identical logs differ.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wallclock: Option<f64>,
}

/// Where in the epoch loop a state sits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    /// Batches of `epoch` already consumed.
    pub batch: usize,
}

/// Networks, optimizer states and step counter.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub generator: ParamStore<T>,
    pub discriminator: ParamStore<T>,
    pub adam_g: AdamState<T>,
    pub adam_d: AdamState<T>,
    /// Completed steps.
    pub step: u64,
    pub progress: Progress,
    streams: SeedStreams,
}

/// Intermediate values of one step, between the generator forward pass and
/// the two updates.
pub struct StepContext<T: Real> {
    pub tape: Tape<T>,
    pub condition: Var,
    pub target: Var,
    pub fake: Var,
    generator_buffers: Vec<(String, Tensor<T>)>,
    d_losses: Option<(f64, f64)>,
}

fn non_finite_to_loss(step: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) | Error::NonFiniteGradient { .. } => Error::NonFiniteLoss {
            step,
            last_checkpoint: None,
        },
        e => e,
    }
}

fn finite_scalar<T: Real>(tape: &Tape<T>, v: Var, step: u64) -> Result<f64> {
    let x = tape.value(v).item().as_f64();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFiniteLoss {
            step,
            last_checkpoint: None,
        })
    }
}

impl<T: Real> TrainState<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let streams = SeedStreams::new(config.seed);
        let generator = init_generator(&config.generator, &mut streams.rng(INIT, 0))?;
        let discriminator = init_discriminator(&config.discriminator, &mut streams.rng(INIT, 1));
        Ok(Self {
            adam_g: AdamState::new(config.adam),
            adam_d: AdamState::new(config.adam),
            config,
            generator,
            discriminator,
            step: 0,
            progress: Progress::default(),
            streams,
        })
    }

    pub fn streams(&self) -> &SeedStreams {
        &self.streams
    }

    fn generator_inputs(&self, tape: &mut Tape<T>, condition: &Tensor<T>, points: &Tensor<T>) -> GeneratorInputs {
        let variant = self.config.generator.variant;
        GeneratorInputs {
            image: variant.uses_image().then(|| tape.constant(condition.clone())),
            points: variant.uses_points().then(|| tape.constant(points.clone())),
        }
    }

    /// Generator forward pass for the step after the current one.
    pub fn begin_step(&self, batch: &Batch<T>) -> Result<StepContext<T>> {
        let step = self.step + 1;
        let mut tape = Tape::new(self.streams.seed(DROPOUT, step));
        let inputs = self.generator_inputs(&mut tape, &batch.condition, &batch.points);
        let condition = tape.constant(batch.condition.clone());
        let target = tape.constant(batch.target.clone());
        let opts = ForwardOptions {
            train: true,
            ablate_skip: None,
        };
        let fake = generator_forward(&mut tape, &self.generator, &self.config.generator, inputs, opts)
            .map_err(non_finite_to_loss(step))?;
        let generator_buffers = tape.take_buffer_updates();
        Ok(StepContext {
            tape,
            condition,
            target,
            fake,
            generator_buffers,
            d_losses: None,
        })
    }

    fn d_condition(&self, ctx: &StepContext<T>) -> Option<Var> {
        self.config.discriminator.conditional.then_some(ctx.condition)
    }

    /// One discriminator update on the real batch and the detached fakes.
    /// Returns `(loss_D_real, loss_D_fake)`.
    pub fn update_discriminator(&mut self, ctx: &mut StepContext<T>) -> Result<(f64, f64)> {
        let step = self.step + 1;
        let map = non_finite_to_loss(step);
        let cfg = &self.config.discriminator;
        let cond = self.d_condition(ctx);
        let tape = &mut ctx.tape;
        let fake = tape.detach(ctx.fake);
        let real_scores = discriminator_forward(tape, &self.discriminator, cfg, ctx.target, cond, true).map_err(&map)?;
        self.discriminator.apply_buffer_updates(tape.take_buffer_updates());
        let fake_scores = discriminator_forward(tape, &self.discriminator, cfg, fake, cond, true).map_err(&map)?;
        self.discriminator.apply_buffer_updates(tape.take_buffer_updates());
        let loss = discriminator_loss(tape, real_scores, fake_scores).map_err(&map)?;
        let real = finite_scalar(tape, loss.real, step)?;
        let fake = finite_scalar(tape, loss.fake, step)?;
        let grads = tape.backward(loss.total).map_err(&map)?;
        let grads = grads.for_params(&self.discriminator, discriminator::PREFIX);
        adam_step(&mut self.discriminator, &grads, &mut self.adam_d).map_err(&map)?;
        ctx.d_losses = Some((real, fake));
        Ok((real, fake))
    }

    /// One generator update against the freshly updated discriminator.
    /// Returns `(loss_G_adv, loss_G_l1)`.
    pub fn update_generator(&mut self, ctx: &mut StepContext<T>) -> Result<(f64, f64)> {
        let step = self.step + 1;
        let map = non_finite_to_loss(step);
        let cond = self.d_condition(ctx);
        let tape = &mut ctx.tape;
        let scores = discriminator_forward(tape, &self.discriminator, &self.config.discriminator, ctx.fake, cond, true)
            .map_err(&map)?;
        self.discriminator.apply_buffer_updates(tape.take_buffer_updates());
        let minimax = self.config.adversarial == AdversarialLoss::Minimax;
        let loss = generator_loss(tape, scores, ctx.fake, ctx.target, self.config.lambda_l1, minimax).map_err(&map)?;
        let adv = finite_scalar(tape, loss.adversarial, step)?;
        let l1 = finite_scalar(tape, loss.l1, step)?;
        finite_scalar(tape, loss.total, step)?;
        let grads = tape.backward(loss.total).map_err(&map)?;
        let mut g = BTreeMap::new();
        for prefix in param_groups(self.config.generator.variant) {
            g.extend(grads.for_params(&self.generator, prefix));
        }
        adam_step(&mut self.generator, &g, &mut self.adam_g).map_err(&map)?;
        self.generator.apply_buffer_updates(std::mem::take(&mut ctx.generator_buffers));
        Ok((adv, l1))
    }

    /// One D update followed by one G update.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<TrainLogRecord> {
        let mut ctx = self.begin_step(batch)?;
        let (loss_d_real, loss_d_fake) = self.update_discriminator(&mut ctx)?;
        let (loss_g_adv, loss_g_l1) = self.update_generator(&mut ctx)?;
        self.step += 1;
        Ok(TrainLogRecord {
            step: self.step,
            epoch: self.progress.epoch,
            loss_d_real,
            loss_d_fake,
            loss_g_adv,
            loss_g_l1,
            wallclock: None,
        })
    }

    /// Fake images `[B, 3, S, S]` in eval mode; dropout masks come from `dropout_seed`.
    pub fn generate(&self, condition: &Tensor<T>, points: &Tensor<T>, dropout_seed: u64) -> Result<Tensor<T>> {
        self.generate_with(condition, points, dropout_seed, ForwardOptions::default())
    }

    pub fn generate_with(
        &self,
        condition: &Tensor<T>,
        points: &Tensor<T>,
        dropout_seed: u64,
        opts: ForwardOptions,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new(dropout_seed);
        let inputs = self.generator_inputs(&mut tape, condition, points);
        let fake = generator_forward(&mut tape, &self.generator, &self.config.generator, inputs, opts)?;
        Ok(tape.value(fake).clone())
    }

    /// Global point feature `[B, feature_dim]` of the generator's point branch,
    /// `None` for variants without one.
    pub fn point_feature(&self, points: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        if !self.config.generator.variant.uses_points() {
            return Ok(None);
        }
        let mut tape = Tape::new(0);
        let p = tape.constant(points.clone());
        let f = pointnet::pointnet_forward(&mut tape, &self.generator, &self.config.generator.pointnet, p, false)?;
        Ok(Some(tape.value(f).clone()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.put_store(&self.generator);
        ck.put_store(&self.discriminator);
        ck.put_adam(generator::PREFIX, &self.adam_g);
        ck.put_adam(discriminator::PREFIX, &self.adam_d);
        if let serde_json::Value::Object(map) = &mut ck.metadata {
            map.insert("config".into(), serde_json::to_value(&self.config).expect("config serializes"));
            map.insert("step".into(), self.step.into());
            map.insert("progress".into(), serde_json::to_value(self.progress).expect("progress serializes"));
            map.insert("seed".into(), self.config.seed.into());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.metadata;
        let field = |k: &str| {
            meta.get(k).cloned().ok_or_else(|| Error::MissingKey {
                key: k.to_string(),
                source_name: "checkpoint metadata".into(),
            })
        };
        let config: TrainConfig = serde_json::from_value(field("config")?)?;
        config.validate()?;
        let step = field("step")?
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("step must be an unsigned integer".into()))?;
        let progress: Progress = serde_json::from_value(field("progress")?)?;
        let mut generator = ParamStore::new();
        for prefix in param_groups(config.generator.variant) {
            generator.extend(ck.load_store(&format!("{prefix}/"))?);
        }
        let discriminator = ck.load_store(&format!("{}/", discriminator::PREFIX))?;
        let expected: ParamStore<T> = init_generator(&config.generator, &mut SeedStreams::new(0).rng(INIT, 0))?;
        for (path, v) in expected.params().chain(expected.buffers()) {
            let got = generator.get(path).or_else(|_| generator.buffer(path)).map_err(|_| Error::MissingKey {
                key: path.clone(),
                source_name: "checkpoint".into(),
            })?;
            if got.shape() != v.shape() {
                return Err(Error::Checkpoint(format!("`{path}` has shape {:?}, expected {:?}", got.shape(), v.shape())));
            }
        }
        Ok(Self {
            adam_g: ck.load_adam(generator::PREFIX)?,
            adam_d: ck.load_adam(discriminator::PREFIX)?,
            streams: SeedStreams::new(config.seed),
            config,
            generator,
            discriminator,
            step,
            progress,
        })
    }
}
