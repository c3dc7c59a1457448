//! The full renderer: encoders, identity adaptation, motion transfer and
//! synthesis wired together.

use rand::Rng;

use crate::encoders::{IdentityEncoder, IdentityFeatures, ModelScale, MotionEncoder};
use crate::error::{Error, Result};
use crate::identity_adapt::{AdaptConfig, IdentityAdapt};
use crate::motion_transfer::{AlignedFeatures, MotionTransfer};
use crate::numerics::{ParamStore, Real, Tape, Tensor, Var};
use crate::synthesis::Synthesis;

#[derive(Debug, Clone)]
pub struct Renderer {
    pub scale: ModelScale,
    pub identity: IdentityEncoder,
    pub motion: MotionEncoder,
    pub adapt: IdentityAdapt,
    pub transfer: MotionTransfer,
    pub synthesis: Synthesis,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: Var,
    pub identity: IdentityFeatures,
    pub z_source: Var,
    pub z_driving: Var,
    pub z_source_adapted: Var,
    pub z_driving_adapted: Var,
    pub aligned: AlignedFeatures,
}

impl Renderer {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        scale: &ModelScale,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        scale.validate()?;
        let identity = IdentityEncoder::new(ps, scale, rng);
        let motion = MotionEncoder::new(ps, scale, rng);
        let adapt = IdentityAdapt::new(
            ps,
            AdaptConfig {
                hidden_dims: scale.adapt_hidden.clone(),
                d_z: scale.d_z,
                d_f: scale.global_dim(),
            },
            rng,
        );
        let transfer = MotionTransfer::new(ps, scale, rng);
        let synthesis = Synthesis::new(ps, scale, rng);
        Ok(Self {
            scale: scale.clone(),
            identity,
            motion,
            adapt,
            transfer,
            synthesis,
        })
    }

    /// Renders the source identity with the driving frame's motion.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        source: Var,
        driving: Var,
    ) -> Result<RenderOutput> {
        let z_driving = self.motion.forward(tape, ps, driving)?;
        self.forward_with_latent(tape, ps, source, z_driving)
    }

    /// Like [`Renderer::forward`] with the driving motion given as a latent
    /// (`[B, d_z]`), as produced by the motion generator.
    pub fn forward_with_latent<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        source: Var,
        z_driving: Var,
    ) -> Result<RenderOutput> {
        let identity = self.identity.forward(tape, ps, source)?;
        let z_source = self.motion.forward(tape, ps, source)?;
        let z_source_adapted = self.adapt.forward(tape, ps, z_source, identity.global)?;
        let z_driving_adapted = self.adapt.forward(tape, ps, z_driving, identity.global)?;
        let aligned = self.transfer.forward(
            tape,
            ps,
            z_source_adapted,
            z_driving_adapted,
            &identity.dense,
        )?;
        let image = self.synthesis.forward(tape, ps, &aligned.levels)?;
        Ok(RenderOutput {
            image,
            identity,
            z_source,
            z_driving,
            z_source_adapted,
            z_driving_adapted,
            aligned,
        })
    }

    fn check_frame<T: Real>(&self, what: &str, img: &Tensor<T>) -> Result<()> {
        let r = self.scale.input_res;
        if img.dims() != [3, r, r] {
            return Err(Error::shape(
                "render",
                format!(
                    "{what} is {:?}, the model expects [3, {r}, {r}]",
                    img.dims()
                ),
            ));
        }
        Ok(())
    }

    /// Renders one `[3, R, R]` source with the motion of one driving frame.
    pub fn render_frame<T: Real>(
        &self,
        ps: &ParamStore<T>,
        source: &Tensor<T>,
        driving: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.check_frame("source", source)?;
        self.check_frame("driving frame", driving)?;
        let mut tape = Tape::new();
        let s = tape.constant(source.unsqueeze0());
        let d = tape.constant(driving.unsqueeze0());
        let out = self.forward(&mut tape, ps, s, d)?;
        tape.value(out.image).squeeze0()
    }

    /// Renders one `[3, R, R]` source with a `[d_z]` motion latent.
    pub fn render_latent<T: Real>(
        &self,
        ps: &ParamStore<T>,
        source: &Tensor<T>,
        z: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.check_frame("source", source)?;
        if z.dims() != [self.scale.d_z] {
            return Err(Error::shape(
                "render",
                format!(
                    "latent is {:?}, the model expects [{}]",
                    z.dims(),
                    self.scale.d_z
                ),
            ));
        }
        let mut tape = Tape::new();
        let s = tape.constant(source.unsqueeze0());
        let z = tape.constant(z.unsqueeze0());
        let out = self.forward_with_latent(&mut tape, ps, s, z)?;
        tape.value(out.image).squeeze0()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{streams, RngState, Tensor};

    #[test]
    fn output_is_twice_input_resolution() {
        let scale = ModelScale::tiny();
        let mut rng = RngState(31).stream(streams::INIT);
        let mut ps = ParamStore::<f32>::new();
        let r = Renderer::new(&mut ps, &scale, &mut rng).unwrap();
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::uniform(&[2, 3, 16, 16], -1.0, 1.0, &mut rng));
        let d = tape.constant(Tensor::uniform(&[2, 3, 16, 16], -1.0, 1.0, &mut rng));
        let out = r.forward(&mut tape, &ps, s, d).unwrap();
        assert_eq!(tape.dims(out.image), &[2, 3, 32, 32]);
        assert_eq!(tape.dims(out.z_driving), &[2, scale.d_z]);
        assert_eq!(tape.value(out.z_source), tape.value(out.z_source_adapted));
    }
}
