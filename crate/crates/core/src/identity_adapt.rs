//! Identity-adaptive projection of motion latents.
//!
//! `Φ(z, f) = z + MLP([z, f])` personalizes a generic motion latent with an
//! identity vector. The last MLP layer starts at zero so `Φ` is exactly the
//! identity before training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numerics::{ParamStore, Real, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub hidden_dims: Vec<usize>,
    pub d_z: usize,
    pub d_f: usize,
}

#[derive(Debug, Clone)]
pub struct IdentityAdapt {
    pub hidden: Vec<Linear>,
    pub out: Linear,
    pub config: AdaptConfig,
}

impl IdentityAdapt {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, config: AdaptConfig, rng: &mut impl Rng) -> Self {
        let mut din = config.d_z + config.d_f;
        let hidden = config
            .hidden_dims
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let l = Linear::new(ps, &format!("adapt.hidden{i}"), din, h, rng);
                din = h;
                l
            })
            .collect();
        let out = Linear::zeros(ps, "adapt.out", din, config.d_z, rng);
        Self {
            hidden,
            out,
            config,
        }
    }

    /// `z: [B, d_z]`, `f: [B, d_f]` -> `[B, d_z]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        z: Var,
        f: Var,
    ) -> Result<Var> {
        let (zd, fd) = (tape.dims(z).to_vec(), tape.dims(f).to_vec());
        if zd.len() != 2
            || fd.len() != 2
            || zd[0] != fd[0]
            || zd[1] != self.config.d_z
            || fd[1] != self.config.d_f
        {
            return Err(Error::shape(
                "adapt",
                format!(
                    "z {zd:?}, f {fd:?} for d_z={} d_f={}",
                    self.config.d_z, self.config.d_f
                ),
            ));
        }
        let mut h = tape.concat_last(z, f)?;
        for l in &self.hidden {
            h = l.forward(tape, ps, h)?;
            h = tape.silu(h)?;
        }
        let delta = self.out.forward(tape, ps, h)?;
        tape.add(z, delta)
    }
}

/// `mean_b | ‖z − z_a‖₁ − ‖z − z_b‖₁ |` over rows of `[B, d]` latents.
pub fn dist_loss<T: Real>(tape: &mut Tape<T>, z: Var, z_a: Var, z_b: Var) -> Result<Var> {
    let da = tape.sub(z, z_a)?;
    let da = tape.abs(da)?;
    let da = tape.sum_last(da)?;
    let db = tape.sub(z, z_b)?;
    let db = tape.abs(db)?;
    let db = tape.sum_last(db)?;
    let gap = tape.sub(da, db)?;
    let gap = tape.abs(gap)?;
    tape.mean(gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, streams, RngState, Tensor};

    fn dist(z: &[f64], a: &[f64], b: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let d = [1, z.len()];
        let z = tape.constant(Tensor::new(&d, z.to_vec()).unwrap());
        let a = tape.constant(Tensor::new(&d, a.to_vec()).unwrap());
        let b = tape.constant(Tensor::new(&d, b.to_vec()).unwrap());
        let l = dist_loss(&mut tape, z, a, b).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn dist_loss_examples() {
        assert_eq!(dist(&[0.0, 0.0], &[1.0, 0.0], &[0.0, -2.0]), 1.0);
        assert_eq!(dist(&[0.3, 0.1], &[1.0, 0.5], &[1.0, 0.5]), 0.0);
        let (z, a, b) = ([0.1, -0.4, 2.0], [1.0, 0.2, 0.0], [-0.5, 0.7, 3.0]);
        assert_eq!(dist(&z, &a, &b), dist(&z, &b, &a));
    }

    #[test]
    fn identity_at_init_and_gradients() {
        let mut rng = RngState(5).stream(streams::INIT);
        let mut ps = ParamStore::<f64>::new();
        let cfg = AdaptConfig {
            hidden_dims: vec![6, 5],
            d_z: 4,
            d_f: 3,
        };
        let phi = IdentityAdapt::new(&mut ps, cfg, &mut rng);
        let z0 = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let f0 = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (z, f) = (tape.constant(z0.clone()), tape.constant(f0.clone()));
        let out = phi.forward(&mut tape, &ps, z, f).unwrap();
        assert_eq!(tape.value(out), &z0);

        // Away from init the residual branch must carry gradient too.
        ps.perturb(0.3, &mut rng);
        let run = |z: &Tensor<f64>, f: &Tensor<f64>, grad: bool| {
            let mut tape = Tape::new();
            let (zv, fv) = if grad {
                (tape.input(z.clone()), tape.input(f.clone()))
            } else {
                (tape.constant(z.clone()), tape.constant(f.clone()))
            };
            let out = phi.forward(&mut tape, &ps, zv, fv).unwrap();
            let sq = tape.square(out).unwrap();
            let l = tape.sum(sq).unwrap();
            let v = tape.value(l).item();
            let g = grad.then(|| {
                let g = tape.backward(l).unwrap();
                (g.wrt(zv, z), g.wrt(fv, f))
            });
            (v, g)
        };
        let (_, g) = run(&z0, &f0, true);
        let (gz, gf) = g.unwrap();
        let nz = finite_diff_grad(|z| Ok(run(z, &f0, false).0), &z0, 1e-5).unwrap();
        let nf = finite_diff_grad(|f| Ok(run(&z0, f, false).0), &f0, 1e-5).unwrap();
        assert!(relative_error(gz.data(), nz.data()) < 1e-4);
        assert!(relative_error(gf.data(), nf.data()) < 1e-4);
    }
}
