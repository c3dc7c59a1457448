//! Flow-matching training of the motion generator.

use rand::Rng;

use super::checkpoint::{config_hash, Checkpoint};
use super::config::TrainConfig;
use super::dataset::{SynthDataset, MOTION_PARAMS};
use crate::error::{Error, Result};
use crate::motion_generator::{
    fm_loss, fm_training_point, ConditionSet, Dropped, GeneratorConfig, MotionGenerator,
};
use crate::numerics::{streams, Adam, ParamStore, Real, RngState, Tape, Tensor, Var};
use crate::renderer::Renderer;

pub const KIND: &str = "generator";
const PREFIX: &str = "gen.";

/// Batched conditions `[B, L, dim]` and target motion `[B, L, d_z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenBatch<T: Real> {
    pub conditions: ConditionSet<T>,
    pub z1: Tensor<T>,
}

impl<T: Real> GenBatch<T> {
    pub fn new(conditions: ConditionSet<T>, z1: Tensor<T>) -> Result<Self> {
        let (b, l) = conditions.batch_len()?;
        if z1.rank() != 3 || z1.dims()[..2] != [b, l] {
            return Err(Error::shape(
                "generator batch",
                format!("z1 {:?} for {b} sequences of length {l}", z1.dims()),
            ));
        }
        Ok(Self { conditions, z1 })
    }
}

/// Batch of whole clips: `ids[b]` picks the conditions and the latent
/// sequence `latents[ids[b]]` (`latents: [clips, L, d_z]`).
pub fn clip_batch(
    conditions: &[ConditionSet<f32>],
    latents: &Tensor<f32>,
    ids: &[usize],
) -> Result<GenBatch<f32>> {
    let sets: Vec<_> = ids.iter().map(|&i| conditions[i].clone()).collect();
    let z1: Vec<_> = ids
        .iter()
        .map(|&i| latents.slice_first(i, 1))
        .collect::<Result<_>>()?;
    GenBatch::new(ConditionSet::stack(&sets)?, Tensor::stack_first(&z1)?)
}

/// Clips drawn uniformly with replacement for training step `step`.
pub fn sample_clip_batch(
    conditions: &[ConditionSet<f32>],
    latents: &Tensor<f32>,
    batch: usize,
    seed: u64,
    step: u64,
) -> Result<GenBatch<f32>> {
    let mut rng = RngState(seed).derive(step).stream(streams::DATA);
    let ids: Vec<usize> = (0..batch)
        .map(|_| rng.random_range(0..conditions.len()))
        .collect();
    clip_batch(conditions, latents, &ids)
}

/// FM objective for given noise, per-sample timesteps and drop patterns.
pub fn generator_loss<T: Real>(
    tape: &mut Tape<T>,
    generator: &MotionGenerator,
    ps: &ParamStore<T>,
    batch: &GenBatch<T>,
    z0: &Tensor<T>,
    t: &[f64],
    dropped: &[Dropped],
) -> Result<Var> {
    batch.z1.expect_same_dims(z0, "generator_loss")?;
    let b = batch.z1.dims()[0];
    if t.len() != b {
        return Err(Error::shape(
            "generator_loss",
            format!("{} timesteps for batch {b}", t.len()),
        ));
    }
    let mut zt = Vec::with_capacity(z0.len());
    let mut target = Vec::with_capacity(z0.len());
    for (i, &ti) in t.iter().enumerate() {
        let (a, b1) = (z0.slice_first(i, 1)?, batch.z1.slice_first(i, 1)?);
        let (x, v) = fm_training_point(&a, &b1, ti)?;
        zt.extend_from_slice(x.data());
        target.extend_from_slice(v.data());
    }
    let zt = tape.constant(Tensor::new(z0.dims(), zt)?);
    let target = tape.constant(Tensor::new(z0.dims(), target)?);
    let cond = generator.embed_conditions(tape, ps, &batch.conditions, t, dropped)?;
    let pred = generator.dit_forward(tape, ps, zt, cond)?;
    fm_loss(tape, pred, target)
}

#[derive(Debug, Clone)]
pub struct GeneratorTrainer {
    pub gen_config: GeneratorConfig,
    pub config: TrainConfig,
    pub generator: MotionGenerator,
    pub params: ParamStore<f32>,
    pub opt: Adam<f32>,
    pub step: u64,
}

impl GeneratorTrainer {
    pub fn new(gen_config: &GeneratorConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState(config.seed).stream(streams::INIT);
        let mut params = ParamStore::new();
        let generator = MotionGenerator::new(&mut params, gen_config, &mut rng)?;
        Ok(Self {
            gen_config: gen_config.clone(),
            config: config.clone(),
            opt: Adam::new(config.adam(), &params),
            generator,
            params,
            step: 0,
        })
    }

    /// Noise, timesteps and drop patterns for the next step.
    pub fn draw(&self, batch: &GenBatch<f32>) -> (Tensor<f32>, Vec<f64>, Vec<Dropped>) {
        let mut rng = RngState(self.config.seed)
            .derive(self.step)
            .stream(streams::TRAIN);
        let b = batch.z1.dims()[0];
        let z0 = Tensor::randn(batch.z1.dims(), 1.0, &mut rng);
        let t = (0..b).map(|_| rng.random::<f64>()).collect();
        let dropped = (0..b)
            .map(|_| Dropped::sample(self.config.drop_prob, &mut rng))
            .collect();
        (z0, t, dropped)
    }

    /// Loss for injected `(z0, t, dropped)`; no update.
    pub fn loss_with(
        &self,
        batch: &GenBatch<f32>,
        z0: &Tensor<f32>,
        t: &[f64],
        dropped: &[Dropped],
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let l = generator_loss(
            &mut tape,
            &self.generator,
            &self.params,
            batch,
            z0,
            t,
            dropped,
        )?;
        Ok(tape.value(l).item().f64())
    }

    /// One Adam step on the FM loss; returns the loss before the update.
    pub fn train_step(&mut self, batch: &GenBatch<f32>) -> Result<f64> {
        let (z0, t, dropped) = self.draw(batch);
        let mut tape = Tape::new();
        let l = generator_loss(
            &mut tape,
            &self.generator,
            &self.params,
            batch,
            &z0,
            &t,
            &dropped,
        )?;
        tape.backward(l)?.accumulate_into(&mut self.params);
        self.opt.step(&mut self.params);
        self.step += 1;
        Ok(tape.value(l).item().f64())
    }

    pub fn config_hash(&self) -> Result<String> {
        config_hash(&(&self.gen_config, &self.config.trajectory()))
    }

    pub fn to_checkpoint(&self, config_hash: String) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(KIND, self.step, config_hash);
        ck.push_params(PREFIX, &self.params)?;
        ck.push_adam(PREFIX, &self.opt, &self.params)?;
        Ok(ck)
    }

    pub fn from_checkpoint(
        gen_config: &GeneratorConfig,
        config: &TrainConfig,
        ck: &Checkpoint,
    ) -> Result<Self> {
        ck.expect_kind(KIND)?;
        let mut t = Self::new(gen_config, config)?;
        ck.load_params(PREFIX, &mut t.params)?;
        t.opt = ck.load_adam(PREFIX, config.adam(), &t.params)?;
        t.step = ck.meta.step;
        Ok(t)
    }
}

/// Loads only the generator weights of a generator checkpoint.
pub fn load_generator(
    gen_config: &GeneratorConfig,
    ck: &Checkpoint,
) -> Result<(MotionGenerator, ParamStore<f32>)> {
    ck.expect_kind(KIND)?;
    let mut rng = RngState(0).stream(streams::INIT);
    let mut ps = ParamStore::new();
    let generator = MotionGenerator::new(&mut ps, gen_config, &mut rng)?;
    ck.load_params(PREFIX, &mut ps)?;
    Ok((generator, ps))
}

/// Motion latents of every frame, `[identities, frames, d_z]`, from a frozen
/// motion encoder.
pub fn encode_clips(
    renderer: &Renderer,
    ps: &ParamStore<f32>,
    ds: &SynthDataset,
) -> Result<Tensor<f32>> {
    let (n, f) = (ds.n_identities(), ds.frames_per_identity());
    let mut out = Vec::with_capacity(n * f * renderer.scale.d_z);
    for id in 0..n {
        let picks: Vec<(usize, usize)> = (0..f).map(|k| (id, k)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(ds.batch(&picks, 2)?);
        let z = renderer.motion.forward(&mut tape, ps, x)?;
        out.extend_from_slice(tape.value(z).data());
    }
    Tensor::new(&[n, f, renderer.scale.d_z], out)
}

/// Ground-truth motion parameters tiled into `d_z` channels, for smoke
/// runs that skip the renderer stage.
pub fn params_as_latents(ds: &SynthDataset, d_z: usize) -> Tensor<f32> {
    let m = &ds.motion;
    let rows = m.len() / MOTION_PARAMS;
    let data = (0..rows * d_z)
        .map(|i| m.data()[(i / d_z) * MOTION_PARAMS + (i % d_z) % MOTION_PARAMS])
        .collect();
    Tensor::new(&[ds.n_identities(), ds.frames_per_identity(), d_z], data).expect("dims")
}

/// Per-frame conditions for one clip. Pose and gaze carry the true head
/// and eye motion; audio is a seeded random walk whose first channel is
/// the mouth openness.
pub fn clip_conditions(
    ds: &SynthDataset,
    identity: usize,
    cfg: &GeneratorConfig,
    seed: u64,
) -> ConditionSet<f32> {
    let f = ds.frames_per_identity();
    let mut rng = RngState(seed)
        .derive(identity as u64)
        .stream(streams::CONDITIONS);
    let mut c = ConditionSet::<f32>::synthetic(f, cfg, &mut rng);
    let motion =
        &ds.motion.data()[identity * f * MOTION_PARAMS..(identity + 1) * f * MOTION_PARAMS];
    for (k, m) in motion.chunks(MOTION_PARAMS).enumerate() {
        let pose = &mut c.pose.data_mut()[k * cfg.pose_dim..(k + 1) * cfg.pose_dim];
        pose.fill(0.0);
        for (dst, &src) in pose.iter_mut().zip(&m[..3]) {
            *dst = src;
        }
        let gaze = &mut c.gaze.data_mut()[k * cfg.gaze_dim..(k + 1) * cfg.gaze_dim];
        gaze.fill(0.0);
        gaze[0] = m[4];
        c.audio.data_mut()[k * cfg.audio_dim] = m[3];
    }
    c
}
