//! Renderer and discriminator objectives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::LEAKY_SLOPE;
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::numerics::{streams, ParamStore, Real, RngState, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_lpips: f64,
    pub lambda_gan: f64,
    pub lambda_dist: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_lpips: 10.0,
            lambda_gan: 0.2,
            lambda_dist: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_rec,
            self.lambda_lpips,
            self.lambda_gan,
            self.lambda_dist,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0: {all:?}"
            )));
        }
        Ok(())
    }
}

/// Values of the individual generator-side terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub rec: f64,
    pub lpips: f64,
    pub gan: f64,
    pub dist: f64,
}

impl LossParts {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.lambda_rec * self.rec
            + w.lambda_lpips * self.lpips
            + w.lambda_gan * self.gan
            + w.lambda_dist * self.dist
    }
}

/// Mean absolute difference.
pub fn rec_loss<T: Real>(tape: &mut Tape<T>, target: Var, pred: Var) -> Result<Var> {
    let d = tape.sub(target, pred)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// `−mean(D(fake))`.
pub fn gan_g_loss<T: Real>(tape: &mut Tape<T>, d_fake: Var) -> Result<Var> {
    let m = tape.mean(d_fake)?;
    tape.mul_scalar(m, T::of(-1.0))
}

/// `mean(relu(1 − D(real))) + mean(relu(1 + D(fake)))`.
pub fn gan_d_loss<T: Real>(tape: &mut Tape<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    let r = tape.mul_scalar(d_real, T::of(-1.0))?;
    let r = tape.add_scalar(r, T::one())?;
    let r = tape.relu(r)?;
    let r = tape.mean(r)?;
    let f = tape.add_scalar(d_fake, T::one())?;
    let f = tape.relu(f)?;
    let f = tape.mean(f)?;
    tape.add(r, f)
}

/// Weighted sum of the generator-side terms on the tape.
pub fn total_renderer_loss<T: Real>(
    tape: &mut Tape<T>,
    rec: Var,
    lpips: Var,
    gan: Var,
    dist: Var,
    w: &LossWeights,
) -> Result<Var> {
    let mut total = tape.mul_scalar(rec, T::of(w.lambda_rec))?;
    for (part, lambda) in [
        (lpips, w.lambda_lpips),
        (gan, w.lambda_gan),
        (dist, w.lambda_dist),
    ] {
        let p = tape.mul_scalar(part, T::of(lambda))?;
        total = tape.add(total, p)?;
    }
    Ok(total)
}

fn conv_stack<T: Real>(
    ps: &mut ParamStore<T>,
    name: &str,
    base: usize,
    rng: &mut impl Rng,
) -> Vec<Conv2d> {
    let mut cin = 3;
    (0..4)
        .map(|i| {
            let cout = base << i;
            let c = Conv2d::new(ps, &format!("{name}.level{i}"), cin, cout, 3, 2, rng);
            cin = cout;
            c
        })
        .collect()
}

/// Frozen random conv features standing in for a pretrained perceptual
/// network. Holds its own non-trainable parameter store.
#[derive(Debug, Clone)]
pub struct PerceptualNet<T: Real> {
    pub convs: Vec<Conv2d>,
    pub params: ParamStore<T>,
}

impl<T: Real> PerceptualNet<T> {
    pub fn new(width: usize, seed: RngState) -> Self {
        let mut rng = seed.stream(streams::PERCEPTUAL);
        let mut params = ParamStore::new();
        let convs = conv_stack(&mut params, "perceptual", width, &mut rng);
        params.trainable = false;
        Self { convs, params }
    }

    pub fn features(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            h = c.forward(tape, &self.params, h)?;
            h = tape.leaky_relu(h, T::of(LEAKY_SLOPE))?;
            out.push(h);
        }
        Ok(out)
    }

    /// `mean_l mean_b ‖φ_l(a) − φ_l(b)‖₂ / √n_l`, with `n_l` the per-sample
    /// feature count of level `l`. Averaging over levels keeps the value of
    /// an image against a blank frame near 0.5.
    pub fn loss(&self, tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
        let fa = self.features(tape, a)?;
        let fb = self.features(tape, b)?;
        let mut total: Option<Var> = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let d = tape.sub(x, y)?;
            let dims = tape.dims(d).to_vec();
            let n: usize = dims[1..].iter().product();
            let d = tape.reshape(d, &[dims[0], n])?;
            let norms = tape.norm_rows(d)?;
            let m = tape.mean(norms)?;
            let m = tape.mul_scalar(m, T::of(1.0 / (n as f64).sqrt()))?;
            total = Some(match total {
                Some(t) => tape.add(t, m)?,
                None => m,
            });
        }
        let levels = self.convs.len() as f64;
        tape.mul_scalar(total.expect("four levels"), T::of(1.0 / levels))
    }
}

/// Patch discriminator: four stride-2 3×3 convs with leaky ReLU and a
/// final 3×3 conv to one channel.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub convs: Vec<Conv2d>,
    pub head: Conv2d,
}

impl Discriminator {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, width: usize, rng: &mut impl Rng) -> Self {
        let convs = conv_stack(ps, "disc", width, rng);
        let head = Conv2d::new(ps, "disc.head", width << 3, 1, 3, 1, rng);
        Self { convs, head }
    }

    /// `[B, 3, H, W] -> [B, 1, H/16, W/16]` patch scores.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(tape, ps, h)?;
            h = tape.leaky_relu(h, T::of(LEAKY_SLOPE))?;
        }
        self.head.forward(tape, ps, h)
    }
}
