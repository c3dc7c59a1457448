//! Identity and motion encoders.
//!
//! Both are stacks of downsampling residual conv blocks. The identity
//! encoder keeps the output of every level as a dense feature pyramid and
//! pools the bottleneck into a global identity vector; the motion encoder
//! pools its bottleneck and projects it to a `d_z` latent.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear};
use crate::numerics::{ParamStore, Real, Tape, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Architecture sizes for the renderer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelScale {
    /// Side of the (square) model input.
    pub input_res: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    /// Number of downsampling encoder levels.
    pub levels: usize,
    pub d_z: usize,
    /// How many of the highest-resolution levels use sparse resampling
    /// and windowed attention instead of full attention.
    pub fine_levels: usize,
    pub top_k: usize,
    pub window_size: usize,
    pub shift: usize,
    pub adapt_hidden: Vec<usize>,
    /// Renormalize the kept attention weights after top-k masking.
    pub renormalize: bool,
    pub disc_channels: usize,
    pub perceptual_channels: usize,
}

impl Default for ModelScale {
    fn default() -> Self {
        Self {
            input_res: 64,
            base_channels: 64,
            max_channels: 512,
            levels: 4,
            d_z: 32,
            fine_levels: 1,
            top_k: 16,
            window_size: 8,
            shift: 4,
            adapt_hidden: vec![128, 128],
            renormalize: true,
            disc_channels: 32,
            perceptual_channels: 16,
        }
    }
}

impl ModelScale {
    /// Small configuration used by the toy training runs.
    pub fn toy() -> Self {
        Self {
            input_res: 32,
            base_channels: 16,
            max_channels: 64,
            levels: 3,
            d_z: 32,
            fine_levels: 1,
            top_k: 16,
            window_size: 8,
            shift: 4,
            adapt_hidden: vec![64, 64],
            renormalize: true,
            disc_channels: 16,
            perceptual_channels: 8,
        }
    }

    /// Smallest useful configuration, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            input_res: 16,
            base_channels: 2,
            max_channels: 4,
            levels: 2,
            d_z: 3,
            fine_levels: 1,
            top_k: 4,
            window_size: 4,
            shift: 2,
            adapt_hidden: vec![4],
            renormalize: true,
            disc_channels: 2,
            perceptual_channels: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("scale: {msg}")));
        if self.levels == 0 || self.levels > 16 {
            return bad(format!("levels = {} must be in 1..=16", self.levels));
        }
        if !self.input_res.is_multiple_of(1 << self.levels) || self.bottleneck_res() < 4 {
            return bad(format!(
                "input_res {} must equal 2^levels x bottleneck with bottleneck >= 4",
                self.input_res
            ));
        }
        if self.d_z == 0 || self.base_channels == 0 || self.max_channels == 0 {
            return bad("d_z and channel counts must be >= 1".into());
        }
        if self.fine_levels >= self.levels {
            return bad("at least one coarse level is required".into());
        }
        if self.disc_channels == 0 || self.perceptual_channels == 0 {
            return bad("discriminator and perceptual widths must be >= 1".into());
        }
        for l in 1..=self.fine_levels {
            let r = self.res(l);
            if self.window_size == 0 || !r.is_multiple_of(self.window_size) {
                return bad(format!(
                    "window_size {} does not divide {r}",
                    self.window_size
                ));
            }
            if self.top_k == 0 || self.top_k > r * r {
                return bad(format!("top_k {} outside 1..={}", self.top_k, r * r));
            }
        }
        if self.shift >= self.window_size.max(1) {
            return bad(format!("shift {} must be < window_size", self.shift));
        }
        if self.adapt_hidden.contains(&0) {
            return bad("adapt_hidden entries must be >= 1".into());
        }
        Ok(())
    }

    /// Spatial side at encoder level `l` (1-based).
    pub fn res(&self, l: usize) -> usize {
        self.input_res >> l
    }

    pub fn bottleneck_res(&self) -> usize {
        self.res(self.levels)
    }

    /// Channel count at level `l` (1-based): doubling from the base, capped.
    pub fn channels(&self, l: usize) -> usize {
        (self.base_channels << (l - 1).min(30)).min(self.max_channels)
    }

    pub fn global_dim(&self) -> usize {
        self.channels(self.levels)
    }

    pub fn is_fine(&self, l: usize) -> bool {
        l <= self.fine_levels
    }

    /// The highest-resolution level that uses full attention.
    pub fn finest_coarse(&self) -> usize {
        self.fine_levels + 1
    }

    /// Output image side.
    pub fn output_res(&self) -> usize {
        2 * self.input_res
    }
}

/// Two 3×3 convs with leaky ReLU on a residual path, plus a skip that is
/// a 1×1 conv whenever channels or resolution change.
#[derive(Debug, Clone)]
pub struct ResConvBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResConvBlock {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        downsample: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let stride = if downsample { 2 } else { 1 };
        let conv1 = Conv2d::new(ps, &format!("{name}.conv1"), cin, cout, 3, stride, rng);
        let conv2 = Conv2d::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1, rng);
        let skip = (downsample || cin != cout)
            .then(|| Conv2d::new(ps, &format!("{name}.skip"), cin, cout, 1, stride, rng));
        Self { conv1, conv2, skip }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let slope = T::of(LEAKY_SLOPE);
        let h = self.conv1.forward(tape, ps, x)?;
        let h = tape.leaky_relu(h, slope)?;
        let h = self.conv2.forward(tape, ps, h)?;
        let h = tape.leaky_relu(h, slope)?;
        let s = match &self.skip {
            Some(c) => c.forward(tape, ps, x)?,
            None => x,
        };
        tape.add(h, s)
    }
}

fn check_image<T: Real>(tape: &Tape<T>, x: Var, res: usize, op: &'static str) -> Result<()> {
    match tape.dims(x) {
        &[_, 3, h, w] if h == res && w == res => Ok(()),
        d => Err(Error::shape(
            op,
            format!("expected [B,3,{res},{res}], got {d:?}"),
        )),
    }
}

fn level_stack<T: Real>(
    ps: &mut ParamStore<T>,
    name: &str,
    scale: &ModelScale,
    rng: &mut impl Rng,
) -> Vec<ResConvBlock> {
    let mut cin = 3;
    (1..=scale.levels)
        .map(|l| {
            let cout = scale.channels(l);
            let b = ResConvBlock::new(ps, &format!("{name}.level{l}"), cin, cout, true, rng);
            cin = cout;
            b
        })
        .collect()
}

/// Output of the identity encoder.
#[derive(Debug, Clone)]
pub struct IdentityFeatures {
    /// `[B, C_max]`.
    pub global: Var,
    /// One map per level, highest resolution first.
    pub dense: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct IdentityEncoder {
    pub blocks: Vec<ResConvBlock>,
    pub input_res: usize,
}

impl IdentityEncoder {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, scale: &ModelScale, rng: &mut impl Rng) -> Self {
        Self {
            blocks: level_stack(ps, "id_enc", scale, rng),
            input_res: scale.input_res,
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        image: Var,
    ) -> Result<IdentityFeatures> {
        check_image(tape, image, self.input_res, "encode_identity")?;
        let mut x = image;
        let mut dense = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            x = b.forward(tape, ps, x)?;
            dense.push(x);
        }
        let global = tape.mean_spatial(x)?;
        Ok(IdentityFeatures { global, dense })
    }
}

#[derive(Debug, Clone)]
pub struct MotionEncoder {
    pub blocks: Vec<ResConvBlock>,
    pub head: Linear,
    pub input_res: usize,
}

impl MotionEncoder {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, scale: &ModelScale, rng: &mut impl Rng) -> Self {
        let blocks = level_stack(ps, "motion_enc", scale, rng);
        let head = Linear::new(ps, "motion_enc.head", scale.global_dim(), scale.d_z, rng);
        Self {
            blocks,
            head,
            input_res: scale.input_res,
        }
    }

    /// `[B, 3, R, R] -> [B, d_z]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        image: Var,
    ) -> Result<Var> {
        check_image(tape, image, self.input_res, "encode_motion")?;
        let mut x = image;
        for b in &self.blocks {
            x = b.forward(tape, ps, x)?;
        }
        let pooled = tape.mean_spatial(x)?;
        self.head.forward(tape, ps, pooled)
    }
}
