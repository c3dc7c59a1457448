//! Finite-difference verification of every tape op and of the composed
//! renderer and generator objectives.
//!
//! Each case maps a list of f64 input tensors to a scalar (non-scalar op
//! outputs are contracted with a fixed random probe). Analytic gradients
//! from one backward pass are compared with central differences on a
//! seeded subset of coordinates, using the norm-wise relative error.
//!
//! Coordinates whose ±ε probes change a non-smooth decision (the sign
//! pattern of an `abs`/leaky ReLU input, or a top-k selection) are skipped,
//! since finite differences across a kink do not estimate the derivative.
//! A case fails if more than `max_skip_frac` of its coordinates are skipped.

use std::fmt;
use std::rc::Rc;

use rand::seq::index::sample;
use serde::Serialize;

use super::generator::generator_loss;
use super::renderer::{renderer_losses, RenderBatch};
use super::GenBatch;
use crate::encoders::ModelScale;
use crate::error::{Error, Result};
use crate::identity_adapt::{dist_loss, AdaptConfig, IdentityAdapt};
use crate::losses::{gan_d_loss, rec_loss, Discriminator, LossWeights, PerceptualNet};
use crate::motion_generator::{ConditionSet, Dropped, GeneratorConfig, MotionGenerator};
use crate::motion_transfer::{guided_sparse_resample, modulated_conv};
use crate::numerics::ops::{
    permute, pixel_shuffle, roll2d, scaled_dot_attention, upsample_nearest_2d, window_attention,
};
use crate::numerics::{
    finite_diff_partial, relative_error, streams, CustomOp, ParamId, ParamStore, RngState, Tape,
    Tensor, UpGrid, Var,
};
use crate::renderer::Renderer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub eps: f64,
    pub tol: f64,
    /// Coordinates checked per op case (all when the inputs are smaller).
    pub op_coords: usize,
    /// Coordinates checked per model case.
    pub model_coords: usize,
    pub max_skip_frac: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            eps: 1e-5,
            tol: 1e-4,
            op_coords: 96,
            model_coords: 400,
            max_skip_frac: 0.1,
        }
    }
}

type Eval = Box<dyn Fn(&[Tensor<f64>]) -> Result<(Tape<f64>, Var, Vec<Var>)>>;

/// A scalar function of some input tensors, with the tape vars standing
/// for those inputs.
pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub model: bool,
    eval: Eval,
}

fn probe_sum(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return tape.sum(out);
    }
    let mut rng = RngState(0x5eed).stream(streams::GRADCHECK);
    let probe = Tensor::uniform(tape.dims(out), -1.0, 1.0, &mut rng);
    let p = tape.constant(probe);
    let m = tape.mul(out, p)?;
    tape.sum(m)
}

impl GradCase {
    /// Inputs enter as tape inputs; non-scalar outputs are probed.
    pub fn op(
        name: &str,
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            inputs,
            model: false,
            eval: Box::new(move |xs| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
                let out = build(&mut tape, &vars)?;
                let loss = probe_sum(&mut tape, out)?;
                Ok((tape, loss, vars))
            }),
        }
    }

    /// Checks every parameter of `ps` through the scalar `build`.
    pub fn params(
        name: &str,
        ps: ParamStore<f64>,
        build: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var> + 'static,
    ) -> Self {
        let ids: Vec<ParamId> = ps.ids().collect();
        let inputs = ps.iter().map(|p| p.value.clone()).collect();
        Self {
            name: name.into(),
            inputs,
            model: true,
            eval: Box::new(move |xs| {
                let mut local = ps.clone();
                for (&id, x) in ids.iter().zip(xs) {
                    local.get_mut(id).value = x.clone();
                }
                let mut tape = Tape::new();
                let vars: Vec<Var> = ids.iter().map(|&id| tape.param(&local, id)).collect();
                let loss = build(&mut tape, &local)?;
                Ok((tape, loss, vars))
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tol: f64,
    pub cases: Vec<CaseResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.cases
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().fold(0.0, |m, c| m.max(c.max_rel_err))
    }

    /// `Err(GradCheck)` naming every failing case.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::GradCheck(self.failures().join(", ")))
        }
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.cases {
            writeln!(
                f,
                "{} {:<28} max_rel_err={:.3e} checked={} skipped={}",
                if c.passed { "ok  " } else { "FAIL" },
                c.name,
                c.max_rel_err,
                c.checked,
                c.skipped
            )?;
        }
        Ok(())
    }
}

pub fn run_case(case: &GradCase, cfg: &GradCheckConfig, rng_state: RngState) -> Result<CaseResult> {
    let (tape, loss, vars) = (case.eval)(&case.inputs)?;
    let grads = tape.backward(loss)?;
    let base = tape.kink_signature();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(&v, x)| grads.wrt(v, x))
        .collect();
    drop(tape);

    let sizes: Vec<usize> = case.inputs.iter().map(|x| x.len()).collect();
    let total: usize = sizes.iter().sum();
    let budget = if case.model {
        cfg.model_coords
    } else {
        cfg.op_coords
    };
    let mut flat: Vec<usize> = if total <= budget {
        (0..total).collect()
    } else {
        let mut rng = rng_state.stream(streams::GRADCHECK);
        sample(&mut rng, total, budget).into_vec()
    };
    flat.sort_unstable();

    let (mut a, mut n, mut skipped) = (Vec::new(), Vec::new(), 0);
    let mut offset = 0;
    for (i, &len) in sizes.iter().enumerate() {
        let coords: Vec<usize> = flat
            .iter()
            .filter(|&&c| c >= offset && c < offset + len)
            .map(|&c| c - offset)
            .collect();
        offset += len;
        for c in coords {
            let mut smooth = true;
            let num = finite_diff_partial(
                |x| {
                    let mut xs = case.inputs.clone();
                    xs[i] = x.clone();
                    let (t, l, _) = (case.eval)(&xs)?;
                    smooth &= t.kink_signature() == base;
                    Ok(t.value(l).item())
                },
                &case.inputs[i],
                cfg.eps,
                &[c],
            )?;
            if smooth {
                a.push(analytic[i].data()[c]);
                n.push(num[0]);
            } else {
                skipped += 1;
            }
        }
    }
    let checked = a.len();
    let err = relative_error(&a, &n);
    let too_many_skipped = skipped as f64 > cfg.max_skip_frac * (checked + skipped) as f64;
    Ok(CaseResult {
        name: case.name.clone(),
        max_rel_err: err,
        checked,
        skipped,
        passed: err < cfg.tol && checked > 0 && !too_many_skipped,
    })
}

pub fn run_cases(cases: &[GradCase], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let cases = cases
        .iter()
        .enumerate()
        .map(|(i, c)| run_case(c, cfg, RngState(cfg.seed).derive(i as u64)))
        .collect::<Result<_>>()?;
    Ok(GradCheckReport {
        tol: cfg.tol,
        cases,
    })
}

/// `x³` with an explicit backward, standing in for user-registered ops.
struct Cube;

impl CustomOp<f64> for Cube {
    fn name(&self) -> &str {
        "cube"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<f64>],
        _out: &Tensor<f64>,
        g: &Tensor<f64>,
    ) -> Vec<Option<Tensor<f64>>> {
        vec![inputs[0].zip_map(g, |x, g| 3.0 * x * x * g).ok()]
    }
}

pub fn custom_case(name: &str, op: Rc<dyn CustomOp<f64>>, x: Tensor<f64>) -> GradCase {
    GradCase::op(name, vec![x], move |t, v| {
        let value = t.value(v[0]).map(|x| x * x * x);
        t.custom(&[v[0]], value, op.clone())
    })
}

/// Every registered op plus the composed objectives.
pub fn standard_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = RngState(seed).stream(streams::GRADCHECK);
    let mut r = |dims: &[usize]| Tensor::<f64>::randn(dims, 1.0, &mut rng);
    let mut cases = Vec::new();
    macro_rules! op {
        ($name:expr, [$($x:expr),*], |$t:ident, $v:ident| $body:expr) => {
            cases.push(GradCase::op($name, vec![$($x),*], move |$t: &mut Tape<f64>, $v: &[Var]| $body));
        };
    }
    op!("add", [r(&[3, 4]), r(&[3, 4])], |t, v| t.add(v[0], v[1]));
    op!("sub", [r(&[3, 4]), r(&[3, 4])], |t, v| t.sub(v[0], v[1]));
    op!("mul", [r(&[3, 4]), r(&[3, 4])], |t, v| t.mul(v[0], v[1]));
    op!("add_row", [r(&[3, 4]), r(&[4])], |t, v| t
        .add_row(v[0], v[1]));
    op!("add_channel_bias", [r(&[2, 3, 2, 2]), r(&[3])], |t, v| t
        .add_channel_bias(v[0], v[1]));
    op!("scale_channels", [r(&[2, 3, 2, 2]), r(&[2, 3])], |t, v| t
        .scale_channels(v[0], v[1]));
    op!("add_scalar", [r(&[5])], |t, v| t.add_scalar(v[0], 0.7));
    op!("mul_scalar", [r(&[5])], |t, v| t.mul_scalar(v[0], -1.3));
    op!("powf", [r(&[6]).map(|x| x.abs() + 0.5)], |t, v| t
        .powf(v[0], -0.5));
    op!("square", [r(&[6])], |t, v| t.square(v[0]));
    op!("abs", [r(&[6])], |t, v| t.abs(v[0]));
    op!("tanh", [r(&[6])], |t, v| t.tanh(v[0]));
    op!("silu", [r(&[6])], |t, v| t.silu(v[0]));
    op!("leaky_relu", [r(&[8])], |t, v| t.leaky_relu(v[0], 0.2));
    op!("relu", [r(&[8])], |t, v| t.relu(v[0]));
    op!("sum", [r(&[2, 3])], |t, v| t.sum(v[0]));
    op!("mean", [r(&[2, 3])], |t, v| t.mean(v[0]));
    op!("sum_last", [r(&[2, 3, 4])], |t, v| t.sum_last(v[0]));
    op!("mean_spatial", [r(&[2, 3, 2, 3])], |t, v| t
        .mean_spatial(v[0]));
    op!("norm_rows", [r(&[3, 5])], |t, v| t.norm_rows(v[0]));
    op!("linear", [r(&[2, 3, 4]), r(&[5, 4]), r(&[5])], |t, v| t
        .linear(v[0], v[1], Some(v[2])));
    op!("linear_nobias", [r(&[3, 4]), r(&[2, 4])], |t, v| t
        .linear(v[0], v[1], None));
    op!("matmul", [r(&[3, 4]), r(&[4, 2])], |t, v| t
        .matmul(v[0], v[1], false));
    op!(
        "matmul_batched_trans",
        [r(&[2, 3, 4]), r(&[2, 5, 4])],
        |t, v| t.matmul(v[0], v[1], true)
    );
    op!("matmul_shared_rhs", [r(&[2, 3, 4]), r(&[4, 2])], |t, v| t
        .matmul(v[0], v[1], false));
    op!(
        "conv2d",
        [r(&[2, 2, 5, 5]), r(&[3, 2, 3, 3]), r(&[3])],
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1)
    );
    op!(
        "conv2d_stride2",
        [r(&[1, 2, 6, 6]), r(&[2, 2, 3, 3])],
        |t, v| t.conv2d(v[0], v[1], None, 2, 1)
    );
    op!(
        "conv2d_1x1",
        [r(&[2, 3, 3, 3]), r(&[2, 3, 1, 1])],
        |t, v| t.conv2d(v[0], v[1], None, 1, 0)
    );
    op!("layer_norm", [r(&[3, 5])], |t, v| t.layer_norm(v[0], 1e-5));
    op!("softmax_rows", [r(&[3, 4])], |t, v| t.softmax_rows(v[0]));
    let mask: Rc<[bool]> = [false, true, false, false, false, false, true, false].into();
    op!("softmax_rows_masked", [r(&[2, 2, 4])], |t, v| t
        .softmax_rows_masked(v[0], Some(mask.clone())));
    op!("gather", [r(&[2, 3])], |t, v| t.gather(
        v[0],
        [5, 0, 0, 3, 2].into(),
        &[5]
    ));
    op!("concat_last", [r(&[2, 3]), r(&[2, 2])], |t, v| t
        .concat_last(v[0], v[1]));
    op!("reshape", [r(&[2, 6])], |t, v| t.reshape(v[0], &[3, 4]));
    op!("permute", [r(&[2, 3, 4])], |t, v| permute(
        t,
        v[0],
        &[2, 0, 1]
    ));
    op!("upsample_nearest", [r(&[1, 2, 2, 3])], |t, v| {
        upsample_nearest_2d(t, v[0], 2)
    });
    op!("pixel_shuffle", [r(&[1, 8, 2, 2])], |t, v| pixel_shuffle(
        t, v[0], 2
    ));
    op!("roll2d", [r(&[1, 2, 3, 4])], |t, v| roll2d(t, v[0], 1, -2));
    op!(
        "attention",
        [r(&[2, 4, 3]), r(&[2, 5, 3]), r(&[2, 5, 2])],
        |t, v| { Ok(scaled_dot_attention(t, v[0], v[1], v[2], None)?.out) }
    );
    op!("window_attention", [r(&[1, 2, 4, 4])], |t, v| {
        window_attention(t, v[0], 2, 0)
    });
    op!("shifted_window_attention", [r(&[1, 2, 4, 4])], |t, v| {
        window_attention(t, v[0], 2, 1)
    });
    op!(
        "modulated_conv",
        [r(&[2, 3, 4, 4]), r(&[2, 3, 3, 3]), r(&[2, 3])],
        |t, v| { modulated_conv(t, v[0], v[1], v[2], true) }
    );
    for (k, renorm) in [(2, true), (3, false), (16, true)] {
        let logits = r(&[1, 4, 4]);
        op!(
            &format!("guided_resample_k{k}_{renorm}"),
            [logits, r(&[1, 2, 4, 4])],
            |t, v| {
                let a = t.softmax_rows(v[0])?;
                guided_sparse_resample(t, a, v[1], k, renorm)
            }
        );
    }
    let grid = UpGrid {
        coarse_w: 2,
        fine_w: 2,
        s: 1,
    };
    op!(
        "resample_raw",
        [r(&[1, 4, 4]).map(f64::abs), r(&[1, 4, 3])],
        |t, v| { t.guided_resample(v[0], v[1], grid, 2, true) }
    );
    cases.push(custom_case("custom_op", Rc::new(Cube), r(&[5])));
    op!("rec_loss", [r(&[2, 3]), r(&[2, 3])], |t, v| rec_loss(
        t, v[0], v[1]
    ));
    op!(
        "gan_d_loss",
        [r(&[2, 4]).map(|x| 2.0 * x), r(&[2, 4]).map(|x| 2.0 * x)],
        |t, v| { gan_d_loss(t, v[0], v[1]) }
    );
    op!("dist_loss", [r(&[3, 4]), r(&[3, 4]), r(&[3, 4])], |t, v| {
        dist_loss(t, v[0], v[1], v[2])
    });
    let perceptual = PerceptualNet::<f64>::new(2, RngState(seed));
    op!(
        "perceptual_loss",
        [r(&[1, 3, 16, 16]), r(&[1, 3, 16, 16])],
        |t, v| { perceptual.loss(t, v[0], v[1]) }
    );

    let mut init = RngState(seed).stream(streams::INIT);
    let mut ps = ParamStore::<f64>::new();
    let adapt = IdentityAdapt::new(
        &mut ps,
        AdaptConfig {
            hidden_dims: vec![5],
            d_z: 3,
            d_f: 4,
        },
        &mut init,
    );
    ps.perturb(0.1, &mut init);
    let (z, f) = (r(&[2, 3]), r(&[2, 4]));
    cases.push(GradCase::params("identity_adapt", ps, move |t, ps| {
        let (z, f) = (t.constant(z.clone()), t.constant(f.clone()));
        let y = adapt.forward(t, ps, z, f)?;
        probe_sum(t, y)
    }));

    cases.push(renderer_case(seed, &mut r)?);
    cases.push(generator_case(seed, &mut r)?);
    Ok(cases)
}

fn renderer_case(seed: u64, r: &mut impl FnMut(&[usize]) -> Tensor<f64>) -> Result<GradCase> {
    let scale = ModelScale::tiny();
    let mut init = RngState(seed).derive(1).stream(streams::INIT);
    let mut ps = ParamStore::<f64>::new();
    let renderer = Renderer::new(&mut ps, &scale, &mut init)?;
    ps.perturb(0.05, &mut init);
    let mut disc_ps = ParamStore::<f64>::new();
    let disc = Discriminator::new(&mut disc_ps, scale.disc_channels, &mut init);
    disc_ps.trainable = false;
    let perceptual = PerceptualNet::new(scale.perceptual_channels, RngState(seed));
    let (res, out) = (scale.input_res, scale.output_res());
    let batch = RenderBatch {
        source: r(&[2, 3, res, res]),
        driving: r(&[2, 3, res, res]),
        target: r(&[2, 3, out, out]).map(f64::tanh),
        identity: vec![0, 1],
    };
    let weights = LossWeights::default();
    Ok(GradCase::params("renderer_total_loss", ps, move |t, ps| {
        Ok(renderer_losses(
            t,
            &renderer,
            ps,
            &disc,
            &disc_ps,
            &perceptual,
            &batch,
            &weights,
        )?
        .total)
    }))
}

fn generator_case(seed: u64, r: &mut impl FnMut(&[usize]) -> Tensor<f64>) -> Result<GradCase> {
    let cfg = GeneratorConfig {
        d_z: 3,
        audio_dim: 5,
        pose_dim: 3,
        gaze_dim: 2,
        cond_dim: 4,
        hidden: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        time_dim: 8,
    };
    let mut init = RngState(seed).derive(2).stream(streams::INIT);
    let mut ps = ParamStore::<f64>::new();
    let generator = MotionGenerator::new(&mut ps, &cfg, &mut init)?;
    ps.perturb(0.05, &mut init);
    let sets: Vec<_> = (0..2)
        .map(|_| ConditionSet::synthetic(4, &cfg, &mut init))
        .collect();
    let batch = GenBatch::new(ConditionSet::stack(&sets)?, r(&[2, 4, 3]))?;
    let z0 = r(&[2, 4, 3]);
    let dropped = [
        Dropped::NONE,
        Dropped {
            audio: true,
            pose: false,
            gaze: true,
        },
    ];
    Ok(GradCase::params("generator_fm_loss", ps, move |t, ps| {
        generator_loss(t, &generator, ps, &batch, &z0, &[0.25, 0.8], &dropped)
    }))
}

/// Runs every standard case.
pub fn grad_check_all(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    run_cases(&standard_cases(cfg.seed)?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct WrongCube;

    impl CustomOp<f64> for WrongCube {
        fn name(&self) -> &str {
            "wrong_cube"
        }

        fn backward(
            &self,
            inputs: &[&Tensor<f64>],
            _out: &Tensor<f64>,
            g: &Tensor<f64>,
        ) -> Vec<Option<Tensor<f64>>> {
            vec![inputs[0].zip_map(g, |x, g| 2.0 * x * x * g).ok()]
        }
    }

    #[test]
    fn corrupted_backward_is_reported() {
        let mut rng = RngState(1).stream(streams::GRADCHECK);
        let cases = vec![
            custom_case("good", Rc::new(Cube), Tensor::randn(&[4], 1.0, &mut rng)),
            custom_case(
                "bad",
                Rc::new(WrongCube),
                Tensor::randn(&[4], 1.0, &mut rng),
            ),
        ];
        let report = run_cases(&cases, &GradCheckConfig::default()).unwrap();
        assert_eq!(report.failures(), vec!["bad"]);
        match report.into_result() {
            Err(Error::GradCheck(m)) => assert!(m.contains("bad")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn kink_crossings_are_skipped() {
        let x = Tensor::new(&[3], vec![1e-6, -0.5, 0.7]).unwrap();
        let cases = vec![GradCase::op("abs_near_zero", vec![x], |t, v| t.abs(v[0]))];
        let cfg = GradCheckConfig {
            max_skip_frac: 0.5,
            ..GradCheckConfig::default()
        };
        let c = &run_cases(&cases, &cfg).unwrap().cases[0];
        assert_eq!((c.checked, c.skipped), (2, 1));
        assert!(c.passed);
    }
}

#[cfg(test)]
mod full {
    use super::*;

    #[test]
    fn standard_suite_passes() {
        let report = grad_check_all(&GradCheckConfig::default()).unwrap();
        println!("{report}");
        assert!(report.passed(), "{:?}", report.failures());
    }
}
