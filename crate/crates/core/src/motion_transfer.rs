//! Implicit motion transfer.
//!
//! Personalized latents are decoded into multi-scale motion maps by a
//! style-modulated decoder shared between source and driving latents. At
//! coarse scales the driving maps attend to the source maps and gather
//! source identity features; at fine scales the finest coarse attention map
//! is upsampled, top-k masked and reused, so no query/key products are
//! computed at high resolution.

use rand::Rng;

use crate::encoders::{ModelScale, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numerics::ops::{
    from_tokens, repeat_leading, scaled_dot_attention, to_tokens, upsample_nearest_2d,
};
use crate::numerics::{Init, ParamId, ParamStore, Real, Tape, Tensor, UpGrid, Var};

pub const DEMOD_EPS: f64 = 1e-8;

/// Convolution whose weights are scaled per sample and input channel by
/// `style: [B, Cin]`, optionally demodulated so each output filter has unit
/// norm. Computed as `conv(x · s) · d` which equals convolving with the
/// per-sample weights `w[o,i] · s[b,i] · d[b,o]`.
pub fn modulated_conv<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    style: Var,
    demodulate: bool,
) -> Result<Var> {
    let wd = tape.dims(w).to_vec();
    let xd = tape.dims(x).to_vec();
    if wd.len() != 4 || xd.len() != 4 || tape.dims(style) != [xd[0], wd[1]] {
        return Err(Error::shape(
            "modulated_conv",
            format!("x {xd:?}, w {wd:?}, style {:?}", tape.dims(style)),
        ));
    }
    let xs = tape.scale_channels(x, style)?;
    let y = tape.conv2d(xs, w, None, 1, (wd[2] - 1) / 2)?;
    if !demodulate {
        return Ok(y);
    }
    let (cout, cin, kk) = (wd[0], wd[1], wd[2] * wd[3]);
    let wr = tape.reshape(w, &[cout, cin, kk])?;
    let w2 = tape.square(wr)?;
    let w2 = tape.sum_last(w2)?;
    let s2 = tape.square(style)?;
    let energy = tape.matmul(s2, w2, true)?;
    let energy = tape.add_scalar(energy, T::of(DEMOD_EPS))?;
    let d = tape.powf(energy, T::of(-0.5))?;
    tape.scale_channels(y, d)
}

/// Modulated 3×3 conv layer with its style affine and output bias.
#[derive(Debug, Clone)]
pub struct ModulatedConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub affine: Linear,
    pub demodulate: bool,
}

impl ModulatedConv {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        d_z: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = ps.add(
            &format!("{name}.weight"),
            &[cout, cin, 3, 3],
            Init::HeNormal { fan_in: cin * 9 },
            rng,
        );
        let bias = ps.add(&format!("{name}.bias"), &[cout], Init::Zeros, rng);
        // Styles start near 1 so the layer begins close to a plain conv.
        let affine = Linear::with_init(
            ps,
            &format!("{name}.affine"),
            d_z,
            cin,
            Init::HeNormal { fan_in: d_z },
            Init::Ones,
            rng,
        );
        Self {
            weight,
            bias,
            affine,
            demodulate: true,
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        x: Var,
        z: Var,
    ) -> Result<Var> {
        let style = self.affine.forward(tape, ps, z)?;
        let w = tape.param(ps, self.weight);
        let y = modulated_conv(tape, x, w, style, self.demodulate)?;
        let b = tape.param(ps, self.bias);
        let y = tape.add_channel_bias(y, b)?;
        tape.leaky_relu(y, T::of(LEAKY_SLOPE))
    }
}

/// Decodes a latent into motion maps at every coarse level, starting from
/// a learned constant at the bottleneck.
#[derive(Debug, Clone)]
pub struct MotionDecoder {
    pub constant: ParamId,
    /// Stages from the bottleneck upward; `stages[i]` produces level
    /// `levels - i`.
    pub stages: Vec<ModulatedConv>,
    pub levels: usize,
    pub finest_coarse: usize,
}

impl MotionDecoder {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, scale: &ModelScale, rng: &mut impl Rng) -> Self {
        let top = scale.levels;
        let b = scale.bottleneck_res();
        let constant = ps.add(
            "motion_dec.const",
            &[scale.channels(top), b, b],
            Init::Normal { std: 1.0 },
            rng,
        );
        let mut cin = scale.channels(top);
        let stages = (scale.finest_coarse()..=top)
            .rev()
            .map(|l| {
                let cout = scale.channels(l);
                let m = ModulatedConv::new(
                    ps,
                    &format!("motion_dec.level{l}"),
                    cin,
                    cout,
                    scale.d_z,
                    rng,
                );
                cin = cout;
                m
            })
            .collect();
        Self {
            constant,
            stages,
            levels: top,
            finest_coarse: scale.finest_coarse(),
        }
    }

    /// `z: [B, d_z]`. Returns one map per level (index `l - 1`), `None` for
    /// fine levels.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        z: Var,
    ) -> Result<Vec<Option<Var>>> {
        let batch = tape.dims(z)[0];
        let c = tape.param(ps, self.constant);
        let mut x = repeat_leading(tape, c, batch)?;
        let mut maps = vec![None; self.levels];
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                x = upsample_nearest_2d(tape, x, 2)?;
            }
            x = stage.forward(tape, ps, x, z)?;
            maps[self.levels - i - 1] = Some(x);
        }
        debug_assert!(maps[self.finest_coarse - 1].is_some());
        Ok(maps)
    }
}

/// Query, key and value projections for one coarse level.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl CrossAttention {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        motion_ch: usize,
        feat_ch: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            q: Linear::new(ps, &format!("{name}.q"), motion_ch, motion_ch, rng),
            k: Linear::new(ps, &format!("{name}.k"), motion_ch, motion_ch, rng),
            v: Linear::new(ps, &format!("{name}.v"), feat_ch, feat_ch, rng),
        }
    }
}

/// Driving motion queries source motion keys and gathers source features.
/// Returns the aligned map `[B, C, H, W]` and the attention `[B, HW, HW]`.
pub fn coarse_cross_attention<T: Real>(
    tape: &mut Tape<T>,
    ps: &ParamStore<T>,
    proj: &CrossAttention,
    m_d: Var,
    m_s: Var,
    f_dense: Var,
) -> Result<(Var, Var)> {
    let (dd, sd, fd) = (
        tape.dims(m_d).to_vec(),
        tape.dims(m_s).to_vec(),
        tape.dims(f_dense).to_vec(),
    );
    if dd.len() != 4 || dd != sd || fd.len() != 4 || fd[0] != dd[0] || fd[2..] != dd[2..] {
        return Err(Error::shape(
            "coarse_cross_attention",
            format!("M_D {dd:?}, M_S {sd:?}, f_dense {fd:?}"),
        ));
    }
    let q = to_tokens(tape, m_d)?;
    let q = proj.q.forward(tape, ps, q)?;
    let k = to_tokens(tape, m_s)?;
    let k = proj.k.forward(tape, ps, k)?;
    let v = to_tokens(tape, f_dense)?;
    let v = proj.v.forward(tape, ps, v)?;
    let att = scaled_dot_attention(tape, q, k, v, None)?;
    let out = from_tokens(tape, att.out, fd[2], fd[3])?;
    Ok((out, att.weights))
}

/// Aggregates a fine feature map `[B, C, Hf, Wf]` with a coarse attention
/// map `[B, Nc, Nc]` upsampled by an integer factor on both axes, keeping
/// the top `k` weights of each fine row.
pub fn guided_sparse_resample<T: Real>(
    tape: &mut Tape<T>,
    a_coarse: Var,
    v_high: Var,
    k: usize,
    renormalize: bool,
) -> Result<Var> {
    let ad = tape.dims(a_coarse).to_vec();
    let vd = tape.dims(v_high).to_vec();
    if ad.len() != 3 || vd.len() != 4 || vd[2] != vd[3] {
        return Err(Error::shape(
            "guided_sparse_resample",
            format!("A {ad:?}, V {vd:?}"),
        ));
    }
    let coarse_w = (ad[1] as f64).sqrt().round() as usize;
    if coarse_w * coarse_w != ad[1] || coarse_w == 0 || !vd[2].is_multiple_of(coarse_w) {
        return Err(Error::invalid(
            "guided_sparse_resample",
            format!(
                "{}x{} fine grid is not an integer upsampling of {} cells",
                vd[2], vd[3], ad[1]
            ),
        ));
    }
    let grid = UpGrid {
        coarse_w,
        fine_w: vd[2],
        s: vd[2] / coarse_w,
    };
    let tokens = to_tokens(tape, v_high)?;
    let out = tape.guided_resample(a_coarse, tokens, grid, k, renormalize)?;
    from_tokens(tape, out, vd[2], vd[3])
}

/// Features aligned to the driving motion, one map per level (index
/// `l - 1`), plus the coarse attention maps.
#[derive(Debug, Clone)]
pub struct AlignedFeatures {
    pub levels: Vec<Var>,
    pub attention: Vec<Option<Var>>,
}

#[derive(Debug, Clone)]
pub struct MotionTransfer {
    pub decoder: MotionDecoder,
    /// Indexed by `l - 1`; `None` at fine levels.
    pub attention: Vec<Option<CrossAttention>>,
    pub scale: ModelScale,
}

impl MotionTransfer {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, scale: &ModelScale, rng: &mut impl Rng) -> Self {
        let decoder = MotionDecoder::new(ps, scale, rng);
        let attention = (1..=scale.levels)
            .map(|l| {
                (!scale.is_fine(l)).then(|| {
                    let c = scale.channels(l);
                    CrossAttention::new(ps, &format!("imt.level{l}"), c, c, rng)
                })
            })
            .collect();
        Self {
            decoder,
            attention,
            scale: scale.clone(),
        }
    }

    /// `z_s`, `z_d`: personalized latents `[B, d_z]`; `f_dense`: identity
    /// pyramid from the encoder.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        z_s: Var,
        z_d: Var,
        f_dense: &[Var],
    ) -> Result<AlignedFeatures> {
        let levels = self.scale.levels;
        if f_dense.len() != levels {
            return Err(Error::shape(
                "motion_transfer",
                format!("{} feature levels, expected {levels}", f_dense.len()),
            ));
        }
        let m_s = self.decoder.forward(tape, ps, z_s)?;
        let m_d = self.decoder.forward(tape, ps, z_d)?;
        let mut out = vec![None; levels];
        let mut attention = vec![None; levels];
        for l in (self.scale.finest_coarse()..=levels).rev() {
            let i = l - 1;
            let proj = self.attention[i]
                .as_ref()
                .expect("coarse level has projections");
            let (ms, md) = (m_s[i].expect("coarse map"), m_d[i].expect("coarse map"));
            let (aligned, a) = coarse_cross_attention(tape, ps, proj, md, ms, f_dense[i])?;
            out[i] = Some(aligned);
            attention[i] = Some(a);
        }
        let guide = attention[self.scale.finest_coarse() - 1].expect("finest coarse attention");
        for l in 1..=self.scale.fine_levels {
            let v = guided_sparse_resample(
                tape,
                guide,
                f_dense[l - 1],
                self.scale.top_k,
                self.scale.renormalize,
            )?;
            out[l - 1] = Some(v);
        }
        Ok(AlignedFeatures {
            levels: out
                .into_iter()
                .map(|v| v.expect("every level filled"))
                .collect(),
            attention,
        })
    }
}

/// Plain-tensor form of the resampler on a single `[Nc, Nc]` map and
/// `[Nf, C]` values, used by the bench harness.
pub fn sparse_resample_tokens<T: Real>(
    a: &Tensor<T>,
    v: &Tensor<T>,
    k: usize,
    renormalize: bool,
) -> Result<Tensor<T>> {
    let (nc, nf) = (a.dims()[0], v.dims()[0]);
    let coarse_w = (nc as f64).sqrt().round() as usize;
    let fine_w = (nf as f64).sqrt().round() as usize;
    if coarse_w * coarse_w != nc || fine_w * fine_w != nf || !fine_w.is_multiple_of(coarse_w) {
        return Err(Error::invalid(
            "sparse_resample",
            format!("{nf} fine cells over {nc} coarse"),
        ));
    }
    let grid = UpGrid {
        coarse_w,
        fine_w,
        s: fine_w / coarse_w,
    };
    let mut tape = Tape::new();
    let av = tape.constant(a.reshape(&[1, nc, nc])?);
    let vv = tape.constant(v.reshape(&[1, nf, v.dims()[1]])?);
    let out = tape.guided_resample(av, vv, grid, k, renormalize)?;
    tape.value(out).reshape(&[nf, v.dims()[1]])
}
