//! Reverse-mode differentiation over a linear tape.
//!
//! Every op evaluates eagerly and appends a node holding its output and the
//! data its backward rule needs. The graphs built here are static, so the
//! tape is just the forward evaluation order and `backward` walks it in
//! reverse.

use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeom, UpGrid};
use super::param::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A user-supplied op with an explicit backward rule.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &str;

    /// Gradients for each input given the upstream gradient of the output.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

/// Top-k selections of a guided sparse resample, kept for the backward pass.
#[derive(Debug)]
pub struct ResamplePlan {
    pub(crate) grid: UpGrid,
    pub(crate) n_coarse: usize,
    pub(crate) n_fine: usize,
    pub(crate) renormalize: bool,
    /// `[batch][coarse row]` -> kept fine key indices.
    pub(crate) kept: Vec<Vec<Vec<usize>>>,
}

enum Op<T: Real> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddChannelBias(Var, Var),
    ScaleChannels(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Powf(Var, T),
    Abs(Var),
    Tanh(Var),
    Silu(Var),
    LeakyRelu(Var, T),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    MeanSpatial(Var),
    NormRows(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        b_shared: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    LayerNorm {
        x: Var,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    Gather {
        x: Var,
        idx: Rc<[usize]>,
    },
    Concat(Var, Var),
    Reshape(Var),
    Resample {
        a: Var,
        v: Var,
        plan: Rc<ResamplePlan>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Rc<dyn CustomOp<T>>,
    },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::ScaleChannels(..) => "scale_channels",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Powf(..) => "powf",
            Op::Abs(..) => "abs",
            Op::Tanh(..) => "tanh",
            Op::Silu(..) => "silu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumLast(..) => "sum_last",
            Op::MeanSpatial(..) => "mean_spatial",
            Op::NormRows(..) => "norm_rows",
            Op::Linear { .. } => "linear",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax_rows",
            Op::Gather { .. } => "gather",
            Op::Concat(..) => "concat",
            Op::Reshape(..) => "reshape",
            Op::Resample { .. } => "guided_sparse_resample",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded forward computation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zeros when it did not influence the output.
    pub fn wrt(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.dims()))
    }

    /// Adds parameter gradients into the `grad` fields of `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, var) in &self.params {
            if !store.owns(id) {
                continue;
            }
            if let Some(g) = &self.grads[var.0] {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    /// Hash of every non-smooth decision taken in the forward pass: the
    /// sign of each `abs`/`leaky_relu` input and each top-k set. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{DefaultHasher, Hash, Hasher};
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Abs(x) | Op::LeakyRelu(x, _) => {
                    i.hash(&mut h);
                    for &v in self.value(*x).data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::Resample { plan, .. } => {
                    i.hash(&mut h);
                    plan.kept.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input (no gradient tracked).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is wanted.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; repeated calls reuse one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = store.get(id).value.clone();
        self.nodes.push(Node {
            value,
            op: Op::Param,
            requires_grad: store.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn same_dims(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.value(a).expect_same_dims(self.value(b), op)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "add")?;
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "sub")?;
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "mul")?;
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x[..., d] + v[d]` broadcast over leading dims.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(v).len() != d {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", self.dims(x), self.dims(v)),
            ));
        }
        let vv = self.value(v).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(d) {
            for (a, &b) in row.iter_mut().zip(&vv) {
                *a += b;
            }
        }
        let rg = self.rg(x) || self.rg(v);
        self.push(value, Op::AddRow(x, v), rg)
    }

    /// `x[b, c, ...] + bias[c]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if dims.len() < 2 || self.value(bias).len() != dims[1] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("{:?} + {:?}", dims, self.dims(bias)),
            ));
        }
        let inner: usize = dims[2..].iter().product();
        let bv = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, chunk) in value.data_mut().chunks_mut(inner).enumerate() {
            let b = bv[i % dims[1]];
            for v in chunk {
                *v += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(value, Op::AddChannelBias(x, bias), rg)
    }

    /// `x[b, c, ...] * s[b, c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if dims.len() < 2 || self.dims(s) != &dims[..2] {
            return Err(Error::shape(
                "scale_channels",
                format!("{:?} * {:?}", dims, self.dims(s)),
            ));
        }
        let inner: usize = dims[2..].iter().product();
        let sv = self.value(s).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, chunk) in value.data_mut().chunks_mut(inner).enumerate() {
            for v in chunk {
                *v *= sv[i];
            }
        }
        let rg = self.rg(x) || self.rg(s);
        self.push(value, Op::ScaleChannels(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, Op::MulScalar(x, c), |v| v * c)
    }

    pub fn powf(&mut self, x: Var, p: T) -> Result<Var> {
        self.unary(x, Op::Powf(x, p), |v| v.powf(p))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.powf(x, T::of(2.0))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Silu(x), |v| v / (T::one() + (-v).exp()))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        self.unary(x, Op::LeakyRelu(x, slope), |v| {
            if v > T::zero() {
                v
            } else {
                v * slope
            }
        })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.leaky_relu(x, T::zero())
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).mean();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Sums the last axis: `[..., d] -> [...]` (rank-1 input gives `[1]`).
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let data: Vec<T> = xv
            .data()
            .chunks(d)
            .map(|r| r.iter().copied().sum())
            .collect();
        let mut dims = xv.dims()[..xv.rank() - 1].to_vec();
        if dims.is_empty() {
            dims.push(1);
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(dims, data), Op::SumLast(x), rg)
    }

    /// Spatial average `[b, c, h, w] -> [b, c]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_rank(4, "mean_spatial")?;
        let (b, c) = (xv.dims()[0], xv.dims()[1]);
        let hw = xv.dims()[2] * xv.dims()[3];
        let n = T::of(hw as f64);
        let data: Vec<T> = xv
            .data()
            .chunks(hw)
            .map(|r| r.iter().copied().sum::<T>() / n)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![b, c], data), Op::MeanSpatial(x), rg)
    }

    /// Euclidean norm of each row of the last axis: `[..., d] -> [...]`.
    pub fn norm_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let data: Vec<T> = xv
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let mut dims = xv.dims()[..xv.rank() - 1].to_vec();
        if dims.is_empty() {
            dims.push(1);
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(dims, data), Op::NormRows(x), rg)
    }

    /// Affine map along the last axis: `x[..., din] · wᵀ + b`, `w: [dout, din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        wv.expect_rank(2, "linear")?;
        let (dout, din) = (wv.dims()[0], wv.dims()[1]);
        if xv.last_dim() != din {
            return Err(Error::shape(
                "linear",
                format!("input {:?} vs weight {:?}", xv.dims(), wv.dims()),
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != dout {
                return Err(Error::shape("linear", format!("bias {:?}", self.dims(b))));
            }
        }
        let rows = xv.rows();
        let mut out = vec![T::zero(); rows * dout];
        T::gemm(
            rows,
            din,
            dout,
            xv.data(),
            false,
            wv.data(),
            true,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut dims = xv.dims().to_vec();
        *dims.last_mut().expect("rank >= 1") = dout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::from_parts(dims, out), Op::Linear { x, w, b }, rg)
    }

    /// Batched product over the last two axes: `a[..., m, k] · b[..., k, n]`
    /// (or `b[..., n, k]ᵀ` when `trans_b`). A rank-2 `b` is shared across
    /// the batch.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() < 2 || bv.rank() < 2 {
            return Err(Error::shape("matmul", "operands need rank >= 2"));
        }
        let ad = av.dims();
        let bd = bv.dims();
        let (m, k) = (ad[ad.len() - 2], ad[ad.len() - 1]);
        let (bk, n) = if trans_b {
            (bd[bd.len() - 1], bd[bd.len() - 2])
        } else {
            (bd[bd.len() - 2], bd[bd.len() - 1])
        };
        let batch = av.len() / (m * k);
        let b_shared = bv.rank() == 2 && av.rank() > 2;
        let b_batch = bv.len() / (bk * n);
        if bk != k || (!b_shared && (b_batch != batch || ad[..ad.len() - 2] != bd[..bd.len() - 2]))
        {
            return Err(Error::shape(
                "matmul",
                format!("{ad:?} x {bd:?} (trans_b={trans_b})"),
            ));
        }
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let bs = if b_shared { 0 } else { i * k * n };
            T::gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[bs..bs + k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut dims = ad[..ad.len() - 1].to_vec();
        dims.push(n);
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::from_parts(dims, out),
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                b_shared,
                m,
                k,
                n,
            },
            rg,
        )
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        xv.expect_rank(4, "conv2d")?;
        wv.expect_rank(4, "conv2d")?;
        let [bsz, cin, h, wd] = [xv.dims()[0], xv.dims()[1], xv.dims()[2], xv.dims()[3]];
        let [cout, wcin, k, k2] = [wv.dims()[0], wv.dims()[1], wv.dims()[2], wv.dims()[3]];
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {cin} vs weight {:?}", wv.dims()),
            ));
        }
        if k != k2 || k % 2 == 0 || !(1..=2).contains(&stride) {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {k}x{k2}, stride {stride}"),
            ));
        }
        let geom = ConvGeom::new(cin, h, wd, k, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", "kernel larger than padded input"))?;
        let bias = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.len() != cout {
                    return Err(Error::shape("conv2d", format!("bias {:?}", bv.dims())));
                }
                Some(bv.data())
            }
            None => None,
        };
        let out = kernels::conv2d_forward(xv.data(), bsz, wv.data(), cout, bias, &geom);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::from_parts(vec![bsz, cout, geom.ho, geom.wo], out),
            Op::Conv2d { x, w, b, geom },
            rg,
        )
    }

    /// Normalizes the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let eps = T::of(eps);
        let nd = T::of(d as f64);
        let mut out = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(xv.rows());
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / nd;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nd;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            out.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let dims = xv.dims().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(dims, out), Op::LayerNorm { x, rstd }, rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_rows_masked(x, None)
    }

    /// Softmax over the last axis; `mask[i]` true removes entry `i` (the
    /// mask repeats over the flattened tensor with period `mask.len()`).
    pub fn softmax_rows_masked(&mut self, x: Var, mask: Option<Rc<[bool]>>) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if let Some(m) = &mask {
            if m.is_empty() || m.len() % n != 0 || !xv.len().is_multiple_of(m.len()) {
                return Err(Error::shape("softmax_rows", "mask period incompatible"));
            }
        }
        let out = kernels::softmax_rows(xv.data(), n, mask.as_deref());
        let dims = xv.dims().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(dims, out), Op::Softmax { x }, rg)
    }

    /// `out[i] = x[idx[i]]` (flat indices), shaped `dims`.
    pub fn gather(&mut self, x: Var, idx: Rc<[usize]>, dims: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if dims.iter().product::<usize>() != idx.len() {
            return Err(Error::shape(
                "gather",
                "index count differs from output dims",
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} >= {}", xv.len()),
            ));
        }
        let data: Vec<T> = idx.iter().map(|&i| xv.data()[i]).collect();
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(dims.to_vec(), data),
            Op::Gather { x, idx },
            rg,
        )
    }

    /// Concatenates along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != bv.rank() || av.rows() != bv.rows() {
            return Err(Error::shape(
                "concat",
                format!("{:?} ++ {:?}", av.dims(), bv.dims()),
            ));
        }
        let (da, db) = (av.last_dim(), bv.last_dim());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data().chunks(da).zip(bv.data().chunks(db)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut dims = av.dims().to_vec();
        *dims.last_mut().expect("rank >= 1") = da + db;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(dims, data), Op::Concat(a, b), rg)
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(dims)?;
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg)
    }

    /// Sparse aggregation of fine-grid values guided by a coarse attention
    /// map: `a: [b, nc, nc]` row-stochastic, `v: [b, nf, c]` tokens.
    pub fn guided_resample(
        &mut self,
        a: Var,
        v: Var,
        grid: UpGrid,
        k: usize,
        renormalize: bool,
    ) -> Result<Var> {
        let (av, vv) = (self.value(a), self.value(v));
        av.expect_rank(3, "guided_resample")?;
        vv.expect_rank(3, "guided_resample")?;
        let (bsz, nc) = (av.dims()[0], av.dims()[1]);
        let (nf, c) = (vv.dims()[1], vv.dims()[2]);
        if av.dims()[2] != nc || vv.dims()[0] != bsz {
            return Err(Error::shape(
                "guided_resample",
                format!("{:?} with {:?}", av.dims(), vv.dims()),
            ));
        }
        if nc != grid.coarse_w * grid.coarse_w
            || nf != grid.fine_w * grid.fine_w
            || grid.fine_w != grid.coarse_w * grid.s
        {
            return Err(Error::invalid(
                "guided_resample",
                format!("fine grid {nf} is not an integer square upsampling of {nc}"),
            ));
        }
        if k == 0 || k > nf {
            return Err(Error::invalid(
                "guided_resample",
                format!("k={k} outside 1..={nf}"),
            ));
        }
        let s2 = T::of((grid.s * grid.s) as f64);
        let mut out = vec![T::zero(); bsz * nf * c];
        let mut kept_all = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let amat = &av.data()[b * nc * nc..(b + 1) * nc * nc];
            let vals = &vv.data()[b * nf * c..(b + 1) * nf * c];
            let mut kept_b = Vec::with_capacity(nc);
            let mut row_out = vec![T::zero(); c];
            for cq in 0..nc {
                let arow = &amat[cq * nc..(cq + 1) * nc];
                let kept = kernels::topk_upsampled(arow, &grid, k);
                let weights: Vec<T> = kept.iter().map(|&j| arow[grid.coarse_of(j)] / s2).collect();
                let denom = if renormalize {
                    weights.iter().copied().sum::<T>()
                } else {
                    T::one()
                };
                row_out.fill(T::zero());
                for (&j, &wj) in kept.iter().zip(&weights) {
                    let wn = wj / denom;
                    for (o, &vj) in row_out.iter_mut().zip(&vals[j * c..(j + 1) * c]) {
                        *o += wn * vj;
                    }
                }
                for q in grid.fine_cells(cq) {
                    let dst = b * nf * c + q * c;
                    out[dst..dst + c].copy_from_slice(&row_out);
                }
                kept_b.push(kept);
            }
            kept_all.push(kept_b);
        }
        let plan = Rc::new(ResamplePlan {
            grid,
            n_coarse: nc,
            n_fine: nf,
            renormalize,
            kept: kept_all,
        });
        let rg = self.rg(a) || self.rg(v);
        self.push(
            Tensor::from_parts(vec![bsz, nf, c], out),
            Op::Resample { a, v, plan },
            rg,
        )
    }

    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        op: Rc<dyn CustomOp<T>>,
    ) -> Result<Var> {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.dims(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.dims(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        debug_assert_eq!(g.dims(), self.dims(v), "gradient dims for {:?}", v);
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.acc(grads, *a, zip(g, bv, |gi, bi| gi * bi));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, zip(g, av, |gi, ai| gi * ai));
                }
            }
            Op::AddRow(x, v) => {
                self.acc(grads, *x, g.clone());
                if self.rg(*v) {
                    let d = g.last_dim();
                    let mut dv = vec![T::zero(); d];
                    for row in g.data().chunks(d) {
                        for (a, &b) in dv.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    let dims = self.dims(*v).to_vec();
                    self.acc(grads, *v, Tensor::from_parts(dims, dv));
                }
            }
            Op::AddChannelBias(x, bias) => {
                self.acc(grads, *x, g.clone());
                if self.rg(*bias) {
                    let c = g.dims()[1];
                    let inner: usize = g.dims()[2..].iter().product();
                    let mut db = vec![T::zero(); c];
                    for (i, chunk) in g.data().chunks(inner).enumerate() {
                        db[i % c] += chunk.iter().copied().sum::<T>();
                    }
                    let dims = self.dims(*bias).to_vec();
                    self.acc(grads, *bias, Tensor::from_parts(dims, db));
                }
            }
            Op::ScaleChannels(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let inner: usize = xv.dims()[2..].iter().product();
                if self.rg(*x) {
                    let mut dx = g.clone();
                    for (i, chunk) in dx.data_mut().chunks_mut(inner).enumerate() {
                        let si = sv.data()[i];
                        for v in chunk {
                            *v *= si;
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                if self.rg(*s) {
                    let ds: Vec<T> = g
                        .data()
                        .chunks(inner)
                        .zip(xv.data().chunks(inner))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.acc(grads, *s, Tensor::from_parts(sv.dims().to_vec(), ds));
                }
            }
            Op::AddScalar(x) => self.acc(grads, *x, g.clone()),
            Op::MulScalar(x, c) => {
                let c = *c;
                self.acc(grads, *x, g.map(|v| v * c));
            }
            Op::Powf(x, p) => {
                let p = *p;
                let d = zip(g, self.value(*x), |gi, xi| gi * p * xi.powf(p - T::one()));
                self.acc(grads, *x, d);
            }
            Op::Abs(x) => {
                let d = zip(g, self.value(*x), |gi, xi| {
                    if xi > T::zero() {
                        gi
                    } else if xi < T::zero() {
                        -gi
                    } else {
                        T::zero()
                    }
                });
                self.acc(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = zip(g, y, |gi, yi| gi * (T::one() - yi * yi));
                self.acc(grads, *x, d);
            }
            Op::Silu(x) => {
                let d = zip(g, self.value(*x), |gi, xi| {
                    let s = T::one() / (T::one() + (-xi).exp());
                    gi * s * (T::one() + xi * (T::one() - s))
                });
                self.acc(grads, *x, d);
            }
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                let d = zip(g, self.value(*x), |gi, xi| {
                    if xi > T::zero() {
                        gi
                    } else {
                        gi * slope
                    }
                });
                self.acc(grads, *x, d);
            }
            Op::SumAll(x) => {
                let gi = g.item();
                self.acc(grads, *x, Tensor::full(self.dims(*x), gi));
            }
            Op::MeanAll(x) => {
                let n = T::of(self.value(*x).len() as f64);
                let gi = g.item() / n;
                self.acc(grads, *x, Tensor::full(self.dims(*x), gi));
            }
            Op::SumLast(x) => {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gi| std::iter::repeat_n(gi, d))
                    .collect();
                self.acc(grads, *x, Tensor::from_parts(xv.dims().to_vec(), data));
            }
            Op::MeanSpatial(x) => {
                let xv = self.value(*x);
                let hw = xv.dims()[2] * xv.dims()[3];
                let n = T::of(hw as f64);
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gi| std::iter::repeat_n(gi / n, hw))
                    .collect();
                self.acc(grads, *x, Tensor::from_parts(xv.dims().to_vec(), data));
            }
            Op::NormRows(x) => {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let mut dx = Vec::with_capacity(xv.len());
                for ((row, &nrm), &gi) in xv.data().chunks(d).zip(y.data()).zip(g.data()) {
                    if nrm > T::zero() {
                        dx.extend(row.iter().map(|&v| gi * v / nrm));
                    } else {
                        dx.extend(std::iter::repeat_n(T::zero(), d));
                    }
                }
                self.acc(grads, *x, Tensor::from_parts(xv.dims().to_vec(), dx));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (dout, din) = (wv.dims()[0], wv.dims()[1]);
                let rows = xv.rows();
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); rows * din];
                    T::gemm(
                        rows,
                        dout,
                        din,
                        g.data(),
                        false,
                        wv.data(),
                        false,
                        &mut dx,
                        false,
                    );
                    self.acc(grads, *x, Tensor::from_parts(xv.dims().to_vec(), dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    T::gemm(
                        dout,
                        rows,
                        din,
                        g.data(),
                        true,
                        xv.data(),
                        false,
                        &mut dw,
                        false,
                    );
                    self.acc(grads, *w, Tensor::from_parts(wv.dims().to_vec(), dw));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); dout];
                        for row in g.data().chunks(dout) {
                            for (a, &v) in db.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        let dims = self.dims(*b).to_vec();
                        self.acc(grads, *b, Tensor::from_parts(dims, db));
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                b_shared,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let mut da = vec![T::zero(); av.len()];
                    for i in 0..*batch {
                        let bs = if *b_shared { 0 } else { i * k * n };
                        // dA = dC · Bᵀ where B is the logical k×n operand.
                        T::gemm(
                            m,
                            n,
                            k,
                            &g.data()[i * m * n..(i + 1) * m * n],
                            false,
                            &bv.data()[bs..bs + k * n],
                            !*trans_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    self.acc(grads, *a, Tensor::from_parts(av.dims().to_vec(), da));
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); bv.len()];
                    for i in 0..*batch {
                        let bs = if *b_shared { 0 } else { i * k * n };
                        let ai = &av.data()[i * m * k..(i + 1) * m * k];
                        let gi = &g.data()[i * m * n..(i + 1) * m * n];
                        let dst = &mut db[bs..bs + k * n];
                        if *trans_b {
                            // B stored n×k: dB = dCᵀ · A.
                            T::gemm(n, m, k, gi, true, ai, false, dst, true);
                        } else {
                            T::gemm(k, m, n, ai, true, gi, false, dst, true);
                        }
                    }
                    self.acc(grads, *b, Tensor::from_parts(bv.dims().to_vec(), db));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let cg = kernels::conv2d_backward(
                    xv.data(),
                    xv.dims()[0],
                    wv.data(),
                    wv.dims()[0],
                    g.data(),
                    geom,
                    need,
                );
                if let Some(dx) = cg.dx {
                    self.acc(grads, *x, Tensor::from_parts(xv.dims().to_vec(), dx));
                }
                if let Some(dw) = cg.dw {
                    self.acc(grads, *w, Tensor::from_parts(wv.dims().to_vec(), dw));
                }
                if let (Some(db), Some(b)) = (cg.db, b) {
                    let dims = self.dims(*b).to_vec();
                    self.acc(grads, *b, Tensor::from_parts(dims, db));
                }
            }
            Op::LayerNorm { x, rstd } => {
                let d = y.last_dim();
                let nd = T::of(d as f64);
                let mut dx = Vec::with_capacity(y.len());
                for ((yr, gr), &r) in y.data().chunks(d).zip(g.data().chunks(d)).zip(rstd) {
                    let mg = gr.iter().copied().sum::<T>() / nd;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nd;
                    dx.extend(gr.iter().zip(yr).map(|(&gi, &yi)| r * (gi - mg - yi * mgy)));
                }
                self.acc(grads, *x, Tensor::from_parts(y.dims().to_vec(), dx));
            }
            Op::Softmax { x, .. } => {
                let n = y.last_dim();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    dx.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
                }
                self.acc(grads, *x, Tensor::from_parts(y.dims().to_vec(), dx));
            }
            Op::Gather { x, idx } => {
                let mut dx = Tensor::zeros(self.dims(*x));
                let dd = dx.data_mut();
                for (&i, &gi) in idx.iter().zip(g.data()) {
                    dd[i] += gi;
                }
                self.acc(grads, *x, dx);
            }
            Op::Concat(a, b) => {
                let (da, db) = (self.value(*a).last_dim(), self.value(*b).last_dim());
                let mut ga = Vec::with_capacity(self.value(*a).len());
                let mut gb = Vec::with_capacity(self.value(*b).len());
                for row in g.data().chunks(da + db) {
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                let (adims, bdims) = (self.dims(*a).to_vec(), self.dims(*b).to_vec());
                self.acc(grads, *a, Tensor::from_parts(adims, ga));
                self.acc(grads, *b, Tensor::from_parts(bdims, gb));
            }
            Op::Reshape(x) => {
                let dims = self.dims(*x).to_vec();
                self.acc(grads, *x, Tensor::from_parts(dims, g.data().to_vec()));
            }
            Op::Resample { a, v, plan } => self.backprop_resample(*a, *v, plan, y, g, grads),
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&ins, y, g);
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        self.acc(grads, v, gi);
                    }
                }
            }
        }
    }

    fn backprop_resample(
        &self,
        a: Var,
        v: Var,
        plan: &ResamplePlan,
        y: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (av, vv) = (self.value(a), self.value(v));
        let (nc, nf) = (plan.n_coarse, plan.n_fine);
        let c = vv.dims()[2];
        let grid = plan.grid;
        let s2 = T::of((grid.s * grid.s) as f64);
        let mut da = vec![T::zero(); av.len()];
        let mut dv = vec![T::zero(); vv.len()];
        let mut gsum = vec![T::zero(); c];
        for (b, kept_b) in plan.kept.iter().enumerate() {
            let amat = &av.data()[b * nc * nc..(b + 1) * nc * nc];
            let vals = &vv.data()[b * nf * c..(b + 1) * nf * c];
            let gb = &g.data()[b * nf * c..(b + 1) * nf * c];
            // Every fine query in a coarse cell shares the row weights and the
            // output, so the upstream gradient can be summed per cell first.
            for (cq, kept) in kept_b.iter().enumerate() {
                let arow = &amat[cq * nc..(cq + 1) * nc];
                gsum.fill(T::zero());
                for q in grid.fine_cells(cq) {
                    for (s, &gv) in gsum.iter_mut().zip(&gb[q * c..(q + 1) * c]) {
                        *s += gv;
                    }
                }
                let q0 = grid.fine_cells(cq).next().expect("s >= 1");
                let out_q = &y.data()[b * nf * c + q0 * c..][..c];
                let denom = if plan.renormalize {
                    kept.iter()
                        .map(|&j| arow[grid.coarse_of(j)] / s2)
                        .sum::<T>()
                } else {
                    T::one()
                };
                for &j in kept {
                    let ck = grid.coarse_of(j);
                    let wj = arow[ck] / s2 / denom;
                    let vj = &vals[j * c..(j + 1) * c];
                    for (d, &gs) in dv[b * nf * c + j * c..][..c].iter_mut().zip(&gsum) {
                        *d += wj * gs;
                    }
                    // d out / d (upsampled weight a_j)
                    let dot: T = if plan.renormalize {
                        gsum.iter()
                            .zip(vj.iter().zip(out_q))
                            .map(|(&gs, (&vjv, &o))| gs * (vjv - o))
                            .sum::<T>()
                            / denom
                    } else {
                        gsum.iter().zip(vj).map(|(&gs, &vjv)| gs * vjv).sum()
                    };
                    da[b * nc * nc + cq * nc + ck] += dot / s2;
                }
            }
        }
        self.acc(grads, a, Tensor::from_parts(av.dims().to_vec(), da));
        self.acc(grads, v, Tensor::from_parts(vv.dims().to_vec(), dv));
    }
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_parts(
        a.dims().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}
