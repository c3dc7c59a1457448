//! Synthesis network: fuses the aligned feature pyramid into an image.
//!
//! Processing starts at the bottleneck. Every level injects its aligned
//! features through a 1×1 projection, runs a residual conv block and an
//! attention block (full attention at coarse levels, shifted windows at
//! fine levels), then upsamples. A 3×3 conv to 12 channels followed by a
//! ×2 pixel shuffle and tanh produces the output at twice the input size.

use rand::Rng;

use crate::encoders::{ModelScale, ResConvBlock};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear};
use crate::numerics::ops::{
    from_tokens, pixel_shuffle, scaled_dot_attention, to_tokens, upsample_nearest_2d,
    window_attention_qkv,
};
use crate::numerics::{Init, ParamStore, Real, Tape, Var};

pub const LN_EPS: f64 = 1e-5;

/// Pre-norm self-attention with a zero-initialized output projection, so
/// the block is the identity at init.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    /// `(window, shift)` for windowed attention, `None` for full attention.
    pub window: Option<(usize, usize)>,
}

impl AttentionBlock {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        c: usize,
        window: Option<(usize, usize)>,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            q: Linear::new(ps, &format!("{name}.q"), c, c, rng),
            k: Linear::new(ps, &format!("{name}.k"), c, c, rng),
            v: Linear::new(ps, &format!("{name}.v"), c, c, rng),
            out: Linear::zeros(ps, &format!("{name}.out"), c, c, rng),
            window,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let (h, w) = (tape.dims(x)[2], tape.dims(x)[3]);
        let t = to_tokens(tape, x)?;
        let n = tape.layer_norm(t, LN_EPS)?;
        let q = self.q.forward(tape, ps, n)?;
        let k = self.k.forward(tape, ps, n)?;
        let v = self.v.forward(tape, ps, n)?;
        let att = match self.window {
            None => scaled_dot_attention(tape, q, k, v, None)?.out,
            Some((win, shift)) => {
                let qm = from_tokens(tape, q, h, w)?;
                let km = from_tokens(tape, k, h, w)?;
                let vm = from_tokens(tape, v, h, w)?;
                let o = window_attention_qkv(tape, qm, km, vm, win, shift)?;
                to_tokens(tape, o)?
            }
        };
        let o = self.out.forward(tape, ps, att)?;
        let t = tape.add(t, o)?;
        from_tokens(tape, t, h, w)
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisStage {
    pub inject: Conv2d,
    pub res: ResConvBlock,
    pub attn: AttentionBlock,
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    /// From the bottleneck upward; `stages[i]` handles level `levels - i`.
    pub stages: Vec<SynthesisStage>,
    pub head: Conv2d,
    pub scale: ModelScale,
}

impl Synthesis {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, scale: &ModelScale, rng: &mut impl Rng) -> Self {
        let mut cur = scale.channels(scale.levels);
        let stages = (1..=scale.levels)
            .rev()
            .map(|l| {
                let c = scale.channels(l);
                let name = format!("synth.level{l}");
                let inject = Conv2d::new(ps, &format!("{name}.inject"), c, cur, 1, 1, rng);
                let res = ResConvBlock::new(ps, &format!("{name}.res"), cur, c, false, rng);
                let window = scale.is_fine(l).then_some((scale.window_size, scale.shift));
                let attn = AttentionBlock::new(ps, &format!("{name}.attn"), c, window, rng);
                cur = c;
                SynthesisStage { inject, res, attn }
            })
            .collect();
        // Zero head: the untrained renderer outputs flat gray instead of a
        // saturated tanh.
        let head = Conv2d::with_init(
            ps,
            "synth.head",
            (scale.channels(1), 12, 3, 1),
            Init::Zeros,
            true,
            rng,
        );
        Self {
            stages,
            head,
            scale: scale.clone(),
        }
    }

    /// `aligned[l - 1]` is the aligned map of level `l`. Returns
    /// `[B, 3, 2R, 2R]` in `[-1, 1]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        aligned: &[Var],
    ) -> Result<Var> {
        let levels = self.scale.levels;
        if aligned.len() != levels {
            return Err(Error::shape(
                "synthesize",
                format!("{} aligned levels, expected {levels}", aligned.len()),
            ));
        }
        for (i, &a) in aligned.iter().enumerate() {
            let l = i + 1;
            let (r, c) = (self.scale.res(l), self.scale.channels(l));
            match tape.dims(a) {
                &[_, ac, h, w] if ac == c && h == r && w == r => {}
                d => {
                    return Err(Error::shape(
                        "synthesize",
                        format!("level {l}: expected [B,{c},{r},{r}], got {d:?}"),
                    ))
                }
            }
        }
        let mut x: Option<Var> = None;
        for (i, stage) in self.stages.iter().enumerate() {
            let l = levels - i;
            let inj = stage.inject.forward(tape, ps, aligned[l - 1])?;
            let h = match x {
                Some(prev) => tape.add(prev, inj)?,
                None => inj,
            };
            let h = stage.res.forward(tape, ps, h)?;
            let h = stage.attn.forward(tape, ps, h)?;
            x = Some(upsample_nearest_2d(tape, h, 2)?);
        }
        let h = self
            .head
            .forward(tape, ps, x.expect("at least one level"))?;
        let img = pixel_shuffle(tape, h, 2)?;
        tape.tanh(img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{streams, RngState, Tensor};

    #[test]
    fn attention_block_is_identity_at_init() {
        let mut rng = RngState(21).stream(streams::INIT);
        let mut ps = ParamStore::<f64>::new();
        for window in [None, Some((2, 1))] {
            let b = AttentionBlock::new(
                &mut ps,
                &format!("a{}", window.is_some()),
                3,
                window,
                &mut rng,
            );
            let x0 = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
            let mut tape = Tape::new();
            let x = tape.constant(x0.clone());
            let y = b.forward(&mut tape, &ps, x).unwrap();
            assert!(tape.value(y).max_abs_diff(&x0) < 1e-15);
        }
    }

    #[test]
    fn output_shape_range_and_zero_init() {
        let scale = ModelScale::tiny();
        let mut rng = RngState(22).stream(streams::INIT);
        let mut ps = ParamStore::<f32>::new();
        let s = Synthesis::new(&mut ps, &scale, &mut rng);
        let mut tape = Tape::new();
        let aligned: Vec<Var> = (1..=scale.levels)
            .map(|l| {
                let r = scale.res(l);
                tape.constant(Tensor::randn(&[1, scale.channels(l), r, r], 3.0, &mut rng))
            })
            .collect();
        let y = s.forward(&mut tape, &ps, &aligned).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        ps.perturb(0.05, &mut rng);
        let mut tape2 = Tape::new();
        let aligned: Vec<Var> = aligned
            .iter()
            .map(|&a| tape2.constant(tape.value(a).clone()))
            .collect();
        let y = s.forward(&mut tape2, &ps, &aligned).unwrap();
        let out = tape2.value(y);
        assert_eq!(out.dims(), &[1, 3, 32, 32]);
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let mean = out.mean();
        let var = out
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f32>()
            / out.len() as f32;
        assert!(var > 0.0);
    }
}
