//! Parameterized layers shared by the renderer and the generator.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Init, ParamId, ParamStore, Real, Tape, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::with_init(
            ps,
            name,
            din,
            dout,
            Init::HeNormal { fan_in: din },
            Init::Zeros,
            rng,
        )
    }

    /// Weights and bias both start at zero.
    pub fn zeros<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::with_init(ps, name, din, dout, Init::Zeros, Init::Zeros, rng)
    }

    pub fn with_init<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        weight: Init,
        bias: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = ps.add(&format!("{name}.weight"), &[dout, din], weight, rng);
        let b = ps.add(&format!("{name}.bias"), &[dout], bias, rng);
        Self {
            weight: w,
            bias: Some(b),
            din,
            dout,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(ps, self.weight);
        let b = self.bias.map(|b| tape.param(ps, b));
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::with_init(
            ps,
            name,
            (cin, cout, kernel, stride),
            Init::HeNormal {
                fan_in: cin * kernel * kernel,
            },
            true,
            rng,
        )
    }

    /// `shape` is `(cin, cout, kernel, stride)`.
    pub fn with_init<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        shape: (usize, usize, usize, usize),
        init: Init,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let (cin, cout, kernel, stride) = shape;
        let weight = ps.add(
            &format!("{name}.weight"),
            &[cout, cin, kernel, kernel],
            init,
            rng,
        );
        let bias = bias.then(|| ps.add(&format!("{name}.bias"), &[cout], Init::Zeros, rng));
        Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(ps, self.weight);
        let b = self.bias.map(|b| tape.param(ps, b));
        tape.conv2d(x, w, b, self.stride, (self.kernel - 1) / 2)
    }
}
