//! Conditional flow-matching generator for motion-latent sequences.
//!
//! Audio, pose and gaze features are projected and summed with a timestep
//! embedding into a per-frame condition `C`. A transformer with adaptive
//! layer norm predicts the velocity of the straight path from noise to
//! motion; sampling integrates it with Euler steps under classifier-free
//! guidance.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numerics::ops::{permute, scaled_dot_attention, sinusoidal_embedding};
use crate::numerics::{streams, Init, ParamId, ParamStore, Real, RngState, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
const TIME_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub d_z: usize,
    pub audio_dim: usize,
    pub pose_dim: usize,
    pub gaze_dim: usize,
    /// Width of each modality's intermediate projection.
    pub cond_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub time_dim: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            d_z: 32,
            audio_dim: 768,
            pose_dim: 6,
            gaze_dim: 2,
            cond_dim: 32,
            hidden: 512,
            depth: 4,
            heads: 8,
            mlp_ratio: 4,
            time_dim: 256,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_z,
            self.audio_dim,
            self.pose_dim,
            self.gaze_dim,
            self.cond_dim,
            self.hidden,
            self.depth,
            self.heads,
            self.mlp_ratio,
            self.time_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("generator: all sizes must be >= 1".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "generator: hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config("generator: time_dim must be even".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Audio,
    Pose,
    Gaze,
}

pub const MODALITIES: [Modality; 3] = [Modality::Audio, Modality::Pose, Modality::Gaze];

/// Which modalities are replaced by their null embedding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Dropped {
    pub audio: bool,
    pub pose: bool,
    pub gaze: bool,
}

impl Dropped {
    pub const NONE: Dropped = Dropped {
        audio: false,
        pose: false,
        gaze: false,
    };
    pub const ALL: Dropped = Dropped {
        audio: true,
        pose: true,
        gaze: true,
    };
    /// The unconditional branch of guidance nulls audio only.
    pub const UNCOND: Dropped = Dropped {
        audio: true,
        pose: false,
        gaze: false,
    };

    pub fn get(&self, m: Modality) -> bool {
        match m {
            Modality::Audio => self.audio,
            Modality::Pose => self.pose,
            Modality::Gaze => self.gaze,
        }
    }

    /// Independent Bernoulli(`p`) drop per modality.
    pub fn sample(p: f64, rng: &mut impl Rng) -> Self {
        Self {
            audio: rng.random::<f64>() < p,
            pose: rng.random::<f64>() < p,
            gaze: rng.random::<f64>() < p,
        }
    }
}

/// Per-frame conditioning features, `[L, dim]` or batched `[B, L, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet<T: Real> {
    pub audio: Tensor<T>,
    pub pose: Tensor<T>,
    pub gaze: Tensor<T>,
}

impl<T: Real> ConditionSet<T> {
    pub fn get(&self, m: Modality) -> &Tensor<T> {
        match m {
            Modality::Audio => &self.audio,
            Modality::Pose => &self.pose,
            Modality::Gaze => &self.gaze,
        }
    }

    /// `(batch, length)`, checking that all modalities agree.
    pub fn batch_len(&self) -> Result<(usize, usize)> {
        let lead = |t: &Tensor<T>| -> Result<(usize, usize)> {
            match t.dims() {
                &[l, _] => Ok((1, l)),
                &[b, l, _] => Ok((b, l)),
                d => Err(Error::shape(
                    "conditions",
                    format!("expected [L,D] or [B,L,D], got {d:?}"),
                )),
            }
        };
        let a = lead(&self.audio)?;
        if lead(&self.pose)? != a || lead(&self.gaze)? != a {
            return Err(Error::shape(
                "conditions",
                format!(
                    "length mismatch: audio {:?}, pose {:?}, gaze {:?}",
                    self.audio.dims(),
                    self.pose.dims(),
                    self.gaze.dims()
                ),
            ));
        }
        if a.1 == 0 {
            return Err(Error::shape("conditions", "empty sequence"));
        }
        Ok(a)
    }

    /// Stacks unbatched sets into one batch.
    pub fn stack(sets: &[ConditionSet<T>]) -> Result<Self> {
        let cat = |f: fn(&ConditionSet<T>) -> &Tensor<T>| -> Result<Tensor<T>> {
            let parts: Vec<Tensor<T>> = sets.iter().map(|s| f(s).clone()).collect();
            Tensor::stack(&parts)
        };
        Ok(Self {
            audio: cat(|s| &s.audio)?,
            pose: cat(|s| &s.pose)?,
            gaze: cat(|s| &s.gaze)?,
        })
    }

    /// Seeded synthetic features: smooth random walks per channel.
    pub fn synthetic(len: usize, cfg: &GeneratorConfig, rng: &mut impl Rng) -> Self {
        let mut walk = |dim: usize, std: f64| {
            let steps: Tensor<T> = Tensor::randn(&[len, dim], std, rng);
            let mut data = steps.into_data();
            for i in 1..len {
                for j in 0..dim {
                    let prev = data[(i - 1) * dim + j];
                    data[i * dim + j] = prev * T::of(0.8) + data[i * dim + j];
                }
            }
            Tensor::new(&[len, dim], data).expect("dims match")
        };
        Self {
            audio: walk(cfg.audio_dim, 0.5),
            pose: walk(cfg.pose_dim, 0.1),
            gaze: walk(cfg.gaze_dim, 0.1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConditionProjection {
    pub null: ParamId,
    pub proj: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct AdaLn {
    pub gamma: Linear,
    pub beta: Linear,
}

impl AdaLn {
    fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            gamma: Linear::zeros(ps, &format!("{name}.gamma"), hidden, hidden, rng),
            beta: Linear::zeros(ps, &format!("{name}.beta"), hidden, hidden, rng),
        }
    }

    /// `(1 + γ̂(c)) · LN(h) + β(c)` where `c_act = SiLU(C)`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        h: Var,
        c_act: Var,
    ) -> Result<Var> {
        let n = tape.layer_norm(h, LN_EPS)?;
        let g = self.gamma.forward(tape, ps, c_act)?;
        let b = self.beta.forward(tape, ps, c_act)?;
        let ng = tape.mul(n, g)?;
        let out = tape.add(n, ng)?;
        tape.add(out, b)
    }
}

#[derive(Debug, Clone)]
pub struct DitBlock {
    pub norm1: AdaLn,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub norm2: AdaLn,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct MotionGenerator {
    pub config: GeneratorConfig,
    pub conditions: Vec<ConditionProjection>,
    pub time1: Linear,
    pub time2: Linear,
    pub embed: Linear,
    pub blocks: Vec<DitBlock>,
    pub final_norm: AdaLn,
    pub head: Linear,
}

/// Broadcasts `[B, H]` to `[B, L, H]`.
fn broadcast_frames<T: Real>(tape: &mut Tape<T>, x: Var, len: usize) -> Result<Var> {
    let (b, h) = (tape.dims(x)[0], tape.dims(x)[1]);
    let idx: Vec<usize> = (0..b)
        .flat_map(|bi| (0..len).flat_map(move |_| bi * h..(bi + 1) * h))
        .collect();
    tape.gather(x, idx.into(), &[b, len, h])
}

fn as_batched<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    match t.dims() {
        &[l, d] => t.reshape(&[1, l, d]),
        _ => Ok(t.clone()),
    }
}

impl MotionGenerator {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        config: &GeneratorConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let conditions = [
            ("audio", config.audio_dim),
            ("pose", config.pose_dim),
            ("gaze", config.gaze_dim),
        ]
        .into_iter()
        .map(|(name, dim)| ConditionProjection {
            null: ps.add(
                &format!("gen.{name}.null"),
                &[dim],
                Init::Normal { std: 0.02 },
                rng,
            ),
            proj: Linear::new(ps, &format!("gen.{name}.proj"), dim, config.cond_dim, rng),
            out: Linear::new(ps, &format!("gen.{name}.out"), config.cond_dim, h, rng),
        })
        .collect();
        let time1 = Linear::new(ps, "gen.time1", config.time_dim, h, rng);
        let time2 = Linear::new(ps, "gen.time2", h, h, rng);
        let embed = Linear::new(ps, "gen.embed", config.d_z, h, rng);
        let blocks = (0..config.depth)
            .map(|i| {
                let n = format!("gen.block{i}");
                let hid = h * config.mlp_ratio;
                DitBlock {
                    norm1: AdaLn::new(ps, &format!("{n}.norm1"), h, rng),
                    q: Linear::new(ps, &format!("{n}.q"), h, h, rng),
                    k: Linear::new(ps, &format!("{n}.k"), h, h, rng),
                    v: Linear::new(ps, &format!("{n}.v"), h, h, rng),
                    proj: Linear::new(ps, &format!("{n}.proj"), h, h, rng),
                    norm2: AdaLn::new(ps, &format!("{n}.norm2"), h, rng),
                    fc1: Linear::new(ps, &format!("{n}.fc1"), h, hid, rng),
                    fc2: Linear::new(ps, &format!("{n}.fc2"), hid, h, rng),
                }
            })
            .collect();
        let final_norm = AdaLn::new(ps, "gen.final_norm", h, rng);
        let head = Linear::new(ps, "gen.head", h, config.d_z, rng);
        Ok(Self {
            config: config.clone(),
            conditions,
            time1,
            time2,
            embed,
            blocks,
            final_norm,
            head,
        })
    }

    /// Fused per-frame condition `[B, L, hidden]` for timesteps `t[b]`.
    /// `dropped[b]` selects which modalities of sample `b` are nulled.
    pub fn embed_conditions<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        c: &ConditionSet<T>,
        t: &[f64],
        dropped: &[Dropped],
    ) -> Result<Var> {
        let (b, len) = c.batch_len()?;
        if t.len() != b || dropped.len() != b {
            return Err(Error::shape(
                "embed_conditions",
                format!(
                    "batch {b} with {} timesteps and {} drop masks",
                    t.len(),
                    dropped.len()
                ),
            ));
        }
        let mut fused: Option<Var> = None;
        for (m, proj) in MODALITIES.iter().zip(&self.conditions) {
            let feat = as_batched(c.get(*m))?;
            let dim = feat.dims()[2];
            let expected = ps.get(proj.null).value.len();
            if dim != expected {
                return Err(Error::shape(
                    "embed_conditions",
                    format!("{m:?} features have {dim} channels, expected {expected}"),
                ));
            }
            let per = len * dim;
            let mut kept = feat.clone();
            let mut drop_mask = Tensor::zeros(feat.dims());
            for (bi, d) in dropped.iter().enumerate() {
                if d.get(*m) {
                    kept.data_mut()[bi * per..(bi + 1) * per].fill(T::zero());
                    drop_mask.data_mut()[bi * per..(bi + 1) * per].fill(T::one());
                }
            }
            let x = if dropped.iter().any(|d| d.get(*m)) {
                let null = tape.param(ps, proj.null);
                let idx: Rc<[usize]> = (0..b * per).map(|i| i % dim).collect();
                let nb = tape.gather(null, idx, feat.dims())?;
                let dm = tape.constant(drop_mask);
                let nm = tape.mul(nb, dm)?;
                let kv = tape.constant(kept);
                tape.add(kv, nm)?
            } else {
                tape.constant(kept)
            };
            let h = proj.proj.forward(tape, ps, x)?;
            let h = tape.layer_norm(h, LN_EPS)?;
            let h = tape.silu(h)?;
            let h = proj.out.forward(tape, ps, h)?;
            fused = Some(match fused {
                Some(f) => tape.add(f, h)?,
                None => h,
            });
        }
        let temb: Vec<T> = t
            .iter()
            .flat_map(|&ti| sinusoidal_embedding(ti * TIME_SCALE, self.config.time_dim, MAX_PERIOD))
            .map(T::of)
            .collect();
        let temb = tape.constant(Tensor::new(&[b, self.config.time_dim], temb)?);
        let te = self.time1.forward(tape, ps, temb)?;
        let te = tape.silu(te)?;
        let te = self.time2.forward(tape, ps, te)?;
        let te = broadcast_frames(tape, te, len)?;
        tape.add(fused.expect("three modalities"), te)
    }

    fn attention<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        blk: &DitBlock,
        x: Var,
    ) -> Result<Var> {
        let d = tape.dims(x).to_vec();
        let (b, l, h) = (d[0], d[1], d[2]);
        let nh = self.config.heads;
        let split = |tape: &mut Tape<T>, lin: &Linear| -> Result<Var> {
            let y = lin.forward(tape, ps, x)?;
            let y = tape.reshape(y, &[b, l, nh, h / nh])?;
            permute(tape, y, &[0, 2, 1, 3])
        };
        let q = split(tape, &blk.q)?;
        let k = split(tape, &blk.k)?;
        let v = split(tape, &blk.v)?;
        let att = scaled_dot_attention(tape, q, k, v, None)?;
        let o = permute(tape, att.out, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[b, l, h])?;
        blk.proj.forward(tape, ps, o)
    }

    /// Velocity prediction: `z_t: [B, L, d_z]` (or `[L, d_z]`), `cond:
    /// [B, L, hidden]`. The timestep enters through `cond`.
    pub fn dit_forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        z_t: Var,
        cond: Var,
    ) -> Result<Var> {
        let zd = tape.dims(z_t).to_vec();
        let z_t = if zd.len() == 2 {
            tape.reshape(z_t, &[1, zd[0], zd[1]])?
        } else {
            z_t
        };
        let zd = tape.dims(z_t).to_vec();
        let cd = tape.dims(cond).to_vec();
        if zd.len() != 3 || zd[2] != self.config.d_z || cd != [zd[0], zd[1], self.config.hidden] {
            return Err(Error::shape(
                "dit_forward",
                format!("z_t {zd:?} with condition {cd:?}"),
            ));
        }
        let (len, h) = (zd[1], self.config.hidden);
        let mut pos = Vec::with_capacity(len * h);
        for i in 0..len {
            pos.extend(
                sinusoidal_embedding(i as f64, h, MAX_PERIOD)
                    .into_iter()
                    .map(T::of),
            );
        }
        let pos = tape.constant(Tensor::new(&[len, h], pos)?);
        let x = self.embed.forward(tape, ps, z_t)?;
        let x_flat = tape.reshape(x, &[zd[0], len * h])?;
        let pos_flat = tape.reshape(pos, &[len * h])?;
        let x = tape.add_row(x_flat, pos_flat)?;
        let mut x = tape.reshape(x, &[zd[0], len, h])?;
        let c_act = tape.silu(cond)?;
        for blk in &self.blocks {
            let n = blk.norm1.forward(tape, ps, x, c_act)?;
            let a = self.attention(tape, ps, blk, n)?;
            x = tape.add(x, a)?;
            let n = blk.norm2.forward(tape, ps, x, c_act)?;
            let m = blk.fc1.forward(tape, ps, n)?;
            let m = tape.silu(m)?;
            let m = blk.fc2.forward(tape, ps, m)?;
            x = tape.add(x, m)?;
        }
        let n = self.final_norm.forward(tape, ps, x, c_act)?;
        self.head.forward(tape, ps, n)
    }

    /// Plain-tensor velocity for one batch, with the given drop pattern.
    pub fn velocity<T: Real>(
        &self,
        ps: &ParamStore<T>,
        z: &Tensor<T>,
        c: &ConditionSet<T>,
        t: f64,
        dropped: Dropped,
    ) -> Result<Tensor<T>> {
        let (b, _) = c.batch_len()?;
        let mut tape = Tape::new();
        let cond = self.embed_conditions(&mut tape, ps, c, &vec![t; b], &vec![dropped; b])?;
        let zv = tape.constant(as_batched(z)?);
        let v = self.dit_forward(&mut tape, ps, zv, cond)?;
        tape.value(v).reshape(z.dims())
    }
}

/// `z_t = (1 − t) z0 + t z1`, target velocity `z1 − z0`.
pub fn fm_training_point<T: Real>(
    z0: &Tensor<T>,
    z1: &Tensor<T>,
    t: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let tt = T::of(t);
    let zt = z0.zip_map(z1, |a, b| (T::one() - tt) * a + tt * b)?;
    let target = z1.zip_map(z0, |b, a| b - a)?;
    Ok((zt, target))
}

/// Mean squared error.
pub fn fm_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let d = tape.square(d)?;
    tape.mean(d)
}

/// `v_uncond + w (v_cond − v_uncond)`, exact at `w = 0` and `w = 1`.
pub fn cfg_field<T: Real>(v_cond: &Tensor<T>, v_uncond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    v_cond.expect_same_dims(v_uncond, "cfg_field")?;
    if w == 1.0 {
        return Ok(v_cond.clone());
    }
    if w == 0.0 {
        return Ok(v_uncond.clone());
    }
    let w = T::of(w);
    v_cond.zip_map(v_uncond, |c, u| u + w * (c - u))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            guidance: 2.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler: steps must be >= 1".into()));
        }
        if !self.guidance.is_finite() {
            return Err(Error::Config("sampler: guidance must be finite".into()));
        }
        Ok(())
    }
}

/// A time-dependent velocity field `v(z, t)`.
pub trait VectorField<T: Real> {
    fn velocity(&mut self, z: &Tensor<T>, t: f64) -> Result<Tensor<T>>;
}

impl<T: Real, F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>> VectorField<T> for F {
    fn velocity(&mut self, z: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        self(z, t)
    }
}

/// Forward Euler on the left-endpoint grid `t_i = i / steps`.
pub fn euler_integrate<T: Real>(
    field: &mut impl VectorField<T>,
    z0: &Tensor<T>,
    steps: usize,
) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(Error::invalid("euler_sample", "steps must be >= 1"));
    }
    let dt = T::of(1.0 / steps as f64);
    let mut z = z0.clone();
    for i in 0..steps {
        let v = field.velocity(&z, i as f64 / steps as f64)?;
        z = z.zip_map(&v, |a, b| a + b * dt)?;
        if !z.all_finite() {
            return Err(Error::NonFinite("euler_sample".into()));
        }
    }
    Ok(z)
}

/// The generator under classifier-free guidance as a vector field.
pub struct GuidedField<'a, T: Real> {
    pub generator: &'a MotionGenerator,
    pub params: &'a ParamStore<T>,
    pub conditions: &'a ConditionSet<T>,
    pub guidance: f64,
}

impl<T: Real> VectorField<T> for GuidedField<'_, T> {
    fn velocity(&mut self, z: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        let w = self.guidance;
        let cond = |d| {
            self.generator
                .velocity(self.params, z, self.conditions, t, d)
        };
        if w == 1.0 {
            return cond(Dropped::NONE);
        }
        if w == 0.0 {
            return cond(Dropped::UNCOND);
        }
        cfg_field(&cond(Dropped::NONE)?, &cond(Dropped::UNCOND)?, w)
    }
}

/// Initial noise for a sequence of `len` frames.
pub fn initial_noise<T: Real>(seed: u64, len: usize, d_z: usize) -> Tensor<T> {
    let mut rng = RngState(seed).stream(streams::SAMPLER);
    Tensor::randn(&[len, d_z], 1.0, &mut rng)
}

/// Samples a motion sequence `[L, d_z]` for unbatched conditions.
pub fn euler_sample<T: Real>(
    generator: &MotionGenerator,
    params: &ParamStore<T>,
    conditions: &ConditionSet<T>,
    cfg: &SamplerConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (b, len) = conditions.batch_len()?;
    if b != 1 || conditions.audio.rank() != 2 {
        return Err(Error::shape(
            "euler_sample",
            "expects unbatched [L, D] conditions",
        ));
    }
    let z0 = initial_noise(cfg.seed, len, generator.config.d_z);
    let mut field = GuidedField {
        generator,
        params,
        conditions,
        guidance: cfg.guidance,
    };
    euler_integrate(&mut field, &z0, cfg.steps)
}
