//! Alternating hinge-GAN training of the renderer on same-identity frame
//! pairs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{config_hash, Checkpoint};
use super::config::TrainConfig;
use super::dataset::SynthDataset;
use crate::encoders::ModelScale;
use crate::error::{Error, Result};
use crate::identity_adapt::dist_loss;
use crate::losses::{
    gan_d_loss, gan_g_loss, rec_loss, total_renderer_loss, Discriminator, LossWeights,
    PerceptualNet,
};
use crate::numerics::ops::select_leading;
use crate::numerics::{streams, Adam, ParamStore, Real, RngState, Tape, Tensor, Var};
use crate::renderer::Renderer;

pub const KIND: &str = "renderer";
const G_PREFIX: &str = "g.";
const D_PREFIX: &str = "d.";

/// Source and driving inputs at the model resolution, targets at twice
/// that, and the identity of each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderBatch<T: Real> {
    pub source: Tensor<T>,
    pub driving: Tensor<T>,
    pub target: Tensor<T>,
    pub identity: Vec<usize>,
}

impl RenderBatch<f32> {
    /// `picks[b] = (identity, source frame, driving frame)`.
    pub fn from_dataset(
        ds: &SynthDataset,
        picks: &[(usize, usize, usize)],
        scale: &ModelScale,
    ) -> Result<Self> {
        if ds.res() != scale.output_res() {
            return Err(Error::shape(
                "render batch",
                format!(
                    "dataset res {} but the model renders {}",
                    ds.res(),
                    scale.output_res()
                ),
            ));
        }
        let src: Vec<(usize, usize)> = picks.iter().map(|&(i, s, _)| (i, s)).collect();
        let drv: Vec<(usize, usize)> = picks.iter().map(|&(i, _, d)| (i, d)).collect();
        Ok(Self {
            source: ds.batch(&src, 2)?,
            driving: ds.batch(&drv, 2)?,
            target: ds.batch(&drv, 1)?,
            identity: picks.iter().map(|p| p.0).collect(),
        })
    }

    /// Training batch for `step`: two distinct identities alternate over
    /// the batch, each sample a uniform random frame pair of its clip.
    pub fn sample(
        ds: &SynthDataset,
        batch: usize,
        scale: &ModelScale,
        seed: u64,
        step: u64,
    ) -> Result<Self> {
        let n = ds.n_identities();
        if n < 2 || batch < 2 {
            return Err(Error::Config(format!(
                "renderer training needs two identities per batch (identities {n}, batch {batch})"
            )));
        }
        let mut rng = RngState(seed).derive(step).stream(streams::DATA);
        let a = rng.random_range(0..n);
        let b = (a + rng.random_range(1..n)) % n;
        let f = ds.frames_per_identity();
        let picks: Vec<_> = (0..batch)
            .map(|i| {
                let id = if i % 2 == 0 { a } else { b };
                (id, rng.random_range(0..f), rng.random_range(0..f))
            })
            .collect();
        Self::from_dataset(ds, &picks, scale)
    }

    pub fn cast<U: Real>(&self) -> RenderBatch<U> {
        RenderBatch {
            source: self.source.cast(),
            driving: self.driving.cast(),
            target: self.target.cast(),
            identity: self.identity.clone(),
        }
    }
}

impl<T: Real> RenderBatch<T> {
    /// For each sample, the index of a sample with another identity.
    pub fn partners(&self) -> Result<Vec<usize>> {
        let n = self.identity.len();
        (0..n)
            .map(|i| {
                (1..n)
                    .map(|o| (i + o) % n)
                    .find(|&j| self.identity[j] != self.identity[i])
                    .ok_or_else(|| {
                        Error::Config("batch lacks a second identity for the distance loss".into())
                    })
            })
            .collect()
    }
}

/// Loss components of one step. `total` is the weighted generator
/// objective, `disc` the discriminator hinge loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub rec: f64,
    pub lpips: f64,
    pub gan: f64,
    pub dist: f64,
    pub total: f64,
    pub disc: f64,
}

/// Generator-side graph nodes.
pub struct RendererLosses {
    pub image: Var,
    pub rec: Var,
    pub lpips: Var,
    pub gan: Var,
    pub dist: Var,
    pub total: Var,
}

/// Builds the composite renderer objective. The discriminator enters as
/// constants when `disc_ps.trainable` is false.
#[allow(clippy::too_many_arguments)]
pub fn renderer_losses<T: Real>(
    tape: &mut Tape<T>,
    renderer: &Renderer,
    ps: &ParamStore<T>,
    disc: &Discriminator,
    disc_ps: &ParamStore<T>,
    perceptual: &PerceptualNet<T>,
    batch: &RenderBatch<T>,
    weights: &LossWeights,
) -> Result<RendererLosses> {
    let partners = batch.partners()?;
    let source = tape.constant(batch.source.clone());
    let driving = tape.constant(batch.driving.clone());
    let target = tape.constant(batch.target.clone());
    let out = renderer.forward(tape, ps, source, driving)?;
    let rec = rec_loss(tape, target, out.image)?;
    let lpips = perceptual.loss(tape, out.image, target)?;
    let d_fake = disc.forward(tape, disc_ps, out.image)?;
    let gan = gan_g_loss(tape, d_fake)?;
    let f_other = select_leading(tape, out.identity.global, &partners)?;
    let z_other = renderer.adapt.forward(tape, ps, out.z_driving, f_other)?;
    let dist = dist_loss(tape, out.z_driving, out.z_driving_adapted, z_other)?;
    let total = total_renderer_loss(tape, rec, lpips, gan, dist, weights)?;
    Ok(RendererLosses {
        image: out.image,
        rec,
        lpips,
        gan,
        dist,
        total,
    })
}

fn breakdown(tape: &Tape<f32>, l: &RendererLosses, step: u64, disc: f64) -> LossBreakdown {
    let v = |x: Var| tape.value(x).item().f64();
    LossBreakdown {
        step,
        rec: v(l.rec),
        lpips: v(l.lpips),
        gan: v(l.gan),
        dist: v(l.dist),
        total: v(l.total),
        disc,
    }
}

#[derive(Debug, Clone)]
pub struct RendererTrainer {
    pub scale: ModelScale,
    pub config: TrainConfig,
    pub renderer: Renderer,
    pub params: ParamStore<f32>,
    pub disc: Discriminator,
    pub disc_params: ParamStore<f32>,
    pub perceptual: PerceptualNet<f32>,
    pub opt: Adam<f32>,
    pub disc_opt: Adam<f32>,
    /// Completed steps.
    pub step: u64,
}

impl RendererTrainer {
    pub fn new(scale: &ModelScale, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState(config.seed).stream(streams::INIT);
        let mut params = ParamStore::new();
        let renderer = Renderer::new(&mut params, scale, &mut rng)?;
        let mut disc_params = ParamStore::new();
        let disc = Discriminator::new(&mut disc_params, scale.disc_channels, &mut rng);
        let perceptual = PerceptualNet::new(scale.perceptual_channels, RngState(config.seed));
        Ok(Self {
            scale: scale.clone(),
            config: config.clone(),
            opt: Adam::new(config.adam(), &params),
            disc_opt: Adam::new(config.adam(), &disc_params),
            renderer,
            params,
            disc,
            disc_params,
            perceptual,
            step: 0,
        })
    }

    /// One discriminator hinge step on the current fakes, then one
    /// composite generator step.
    pub fn train_step(&mut self, batch: &RenderBatch<f32>) -> Result<LossBreakdown> {
        let w = self.config.weights;
        let mut tape = Tape::new();
        self.disc_params.trainable = false;
        let losses = renderer_losses(
            &mut tape,
            &self.renderer,
            &self.params,
            &self.disc,
            &self.disc_params,
            &self.perceptual,
            batch,
            &w,
        );
        self.disc_params.trainable = true;
        let losses = losses?;

        let mut dt = Tape::new();
        let real = dt.constant(batch.target.clone());
        let fake = dt.constant(tape.value(losses.image).clone());
        let d_real = self.disc.forward(&mut dt, &self.disc_params, real)?;
        let d_fake = self.disc.forward(&mut dt, &self.disc_params, fake)?;
        let d_loss = gan_d_loss(&mut dt, d_real, d_fake)?;
        dt.backward(d_loss)?.accumulate_into(&mut self.disc_params);
        self.disc_opt.step(&mut self.disc_params);

        tape.backward(losses.total)?
            .accumulate_into(&mut self.params);
        self.opt.step(&mut self.params);
        self.step += 1;
        Ok(breakdown(
            &tape,
            &losses,
            self.step,
            dt.value(d_loss).item().f64(),
        ))
    }

    /// Generator-side losses without updating anything.
    pub fn evaluate(&mut self, batch: &RenderBatch<f32>) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        self.disc_params.trainable = false;
        let losses = renderer_losses(
            &mut tape,
            &self.renderer,
            &self.params,
            &self.disc,
            &self.disc_params,
            &self.perceptual,
            batch,
            &self.config.weights,
        );
        self.disc_params.trainable = true;
        Ok(breakdown(&tape, &losses?, self.step, 0.0))
    }

    pub fn config_hash(&self) -> Result<String> {
        config_hash(&(&self.scale, &self.config.trajectory()))
    }

    pub fn to_checkpoint(&self, config_hash: String) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(KIND, self.step, config_hash);
        ck.push_params(G_PREFIX, &self.params)?;
        ck.push_params(D_PREFIX, &self.disc_params)?;
        ck.push_adam(G_PREFIX, &self.opt, &self.params)?;
        ck.push_adam(D_PREFIX, &self.disc_opt, &self.disc_params)?;
        Ok(ck)
    }

    /// Rebuilds the architecture from `scale` and `config`, then restores
    /// weights, optimizer state and the step counter.
    pub fn from_checkpoint(
        scale: &ModelScale,
        config: &TrainConfig,
        ck: &Checkpoint,
    ) -> Result<Self> {
        ck.expect_kind(KIND)?;
        let mut t = Self::new(scale, config)?;
        ck.load_params(G_PREFIX, &mut t.params)?;
        ck.load_params(D_PREFIX, &mut t.disc_params)?;
        t.opt = ck.load_adam(G_PREFIX, config.adam(), &t.params)?;
        t.disc_opt = ck.load_adam(D_PREFIX, config.adam(), &t.disc_params)?;
        t.step = ck.meta.step;
        Ok(t)
    }
}

/// Loads only the renderer weights of a renderer checkpoint.
pub fn load_renderer(scale: &ModelScale, ck: &Checkpoint) -> Result<(Renderer, ParamStore<f32>)> {
    ck.expect_kind(KIND)?;
    let mut rng = RngState(0).stream(streams::INIT);
    let mut ps = ParamStore::new();
    let renderer = Renderer::new(&mut ps, scale, &mut rng)?;
    ck.load_params(G_PREFIX, &mut ps)?;
    Ok((renderer, ps))
}
