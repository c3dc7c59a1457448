//! Composite and layout ops built from the tape primitives.

use std::rc::Rc;

use super::autodiff::{Tape, Var};
use super::kernels;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

fn dims4(dims: &[usize], op: &'static str) -> Result<[usize; 4]> {
    match dims {
        &[b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::shape(
            op,
            format!("expected [B,C,H,W], got {dims:?}"),
        )),
    }
}

/// Flat gather indices for permuting axes of a row-major tensor.
pub fn permute_index(dims: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let rank = dims.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let n: usize = dims.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    for _ in 0..n {
        idx.push(
            counter
                .iter()
                .zip(perm)
                .map(|(&c, &p)| c * strides[p])
                .sum(),
        );
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            if counter[ax] < out_dims[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    (idx, out_dims)
}

pub fn permute<T: Real>(tape: &mut Tape<T>, x: Var, perm: &[usize]) -> Result<Var> {
    let dims = tape.dims(x).to_vec();
    if perm.len() != dims.len() {
        return Err(Error::shape("permute", format!("{perm:?} for {dims:?}")));
    }
    let (idx, out_dims) = permute_index(&dims, perm);
    tape.gather(x, idx.into(), &out_dims)
}

fn upsample_index(dims: [usize; 4], f: usize) -> Vec<usize> {
    let [b, c, h, w] = dims;
    let (fh, fw) = (h * f, w * f);
    let mut idx = Vec::with_capacity(b * c * fh * fw);
    for plane in 0..b * c {
        for y in 0..fh {
            for x in 0..fw {
                idx.push((plane * h + y / f) * w + x / f);
            }
        }
    }
    idx
}

/// Nearest-neighbour upsampling: each pixel becomes an `f×f` block.
pub fn upsample_nearest_2d<T: Real>(tape: &mut Tape<T>, x: Var, factor: usize) -> Result<Var> {
    let d = dims4(tape.dims(x), "upsample_nearest_2d")?;
    if factor == 0 {
        return Err(Error::invalid("upsample_nearest_2d", "factor must be >= 1"));
    }
    let idx = upsample_index(d, factor);
    tape.gather(x, idx.into(), &[d[0], d[1], d[2] * factor, d[3] * factor])
}

fn pixel_shuffle_index(dims: [usize; 4], r: usize) -> Vec<usize> {
    let [b, crr, h, w] = dims;
    let c = crr / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut idx = Vec::with_capacity(b * crr * h * w);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let src_c = ci * r * r + (y % r) * r + x % r;
                    idx.push(((bi * crr + src_c) * h + y / r) * w + x / r);
                }
            }
        }
    }
    idx
}

/// Depth-to-space: `[B, C·r², H, W] -> [B, C, rH, rW]`.
pub fn pixel_shuffle<T: Real>(tape: &mut Tape<T>, x: Var, r: usize) -> Result<Var> {
    let d = dims4(tape.dims(x), "pixel_shuffle")?;
    if r == 0 || d[1] % (r * r) != 0 {
        return Err(Error::invalid(
            "pixel_shuffle",
            format!("{} channels not divisible by r²={}", d[1], r * r),
        ));
    }
    let idx = pixel_shuffle_index(d, r);
    tape.gather(x, idx.into(), &[d[0], d[1] / (r * r), d[2] * r, d[3] * r])
}

/// Space-to-depth, the inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Real>(tape: &mut Tape<T>, x: Var, r: usize) -> Result<Var> {
    let [b, c, h, w] = dims4(tape.dims(x), "pixel_unshuffle")?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::invalid("pixel_unshuffle", format!("{h}x{w} by {r}")));
    }
    let shuffled = pixel_shuffle_index([b, c * r * r, h / r, w / r], r);
    let mut idx = vec![0; shuffled.len()];
    for (dst, &src) in shuffled.iter().enumerate() {
        idx[src] = dst;
    }
    tape.gather(x, idx.into(), &[b, c * r * r, h / r, w / r])
}

/// `[B, C, H, W] -> [B, H·W, C]`.
pub fn to_tokens<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let [b, c, h, w] = dims4(tape.dims(x), "to_tokens")?;
    let r = tape.reshape(x, &[b, c, h * w])?;
    permute(tape, r, &[0, 2, 1])
}

/// `[B, H·W, C] -> [B, C, H, W]`.
pub fn from_tokens<T: Real>(tape: &mut Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let d = tape.dims(x).to_vec();
    if d.len() != 3 || d[1] != h * w {
        return Err(Error::shape("from_tokens", format!("{d:?} into {h}x{w}")));
    }
    let p = permute(tape, x, &[0, 2, 1])?;
    tape.reshape(p, &[d[0], d[2], h, w])
}

/// Repeats a tensor `n` times along a new leading axis.
pub fn repeat_leading<T: Real>(tape: &mut Tape<T>, x: Var, n: usize) -> Result<Var> {
    let dims = tape.dims(x).to_vec();
    let len: usize = dims.iter().product();
    let idx: Vec<usize> = (0..n).flat_map(|_| 0..len).collect();
    let mut out = vec![n];
    out.extend_from_slice(&dims);
    tape.gather(x, idx.into(), &out)
}

/// Selects entries of the leading axis.
pub fn select_leading<T: Real>(tape: &mut Tape<T>, x: Var, rows: &[usize]) -> Result<Var> {
    let dims = tape.dims(x).to_vec();
    let inner: usize = dims[1..].iter().product();
    if let Some(&r) = rows.iter().find(|&&r| r >= dims[0]) {
        return Err(Error::shape(
            "select_leading",
            format!("row {r} of {}", dims[0]),
        ));
    }
    let idx: Vec<usize> = rows
        .iter()
        .flat_map(|&r| r * inner..(r + 1) * inner)
        .collect();
    let mut out = dims.clone();
    out[0] = rows.len();
    tape.gather(x, idx.into(), &out)
}

/// Result of [`scaled_dot_attention`].
pub struct Attention {
    pub out: Var,
    pub weights: Var,
}

/// `A = softmax(Q Kᵀ / √d)`, `out = A V` over the last two axes, with any
/// leading axes treated as a batch.
pub fn scaled_dot_attention<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Rc<[bool]>>,
) -> Result<Attention> {
    let d = tape.value(q).last_dim();
    if tape.value(k).last_dim() != d {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("Q {:?} vs K {:?}", tape.dims(q), tape.dims(k)),
        ));
    }
    let scores = tape.matmul(q, k, true)?;
    let scores = tape.mul_scalar(scores, T::of(1.0 / (d as f64).sqrt()))?;
    let weights = tape.softmax_rows_masked(scores, mask)?;
    let out = tape.matmul(weights, v, false)?;
    Ok(Attention { out, weights })
}

/// Keeps the `k` largest entries of each row (ties to the lowest column)
/// and zeroes the rest.
pub fn topk_row_mask<T: Real>(a: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let m = a.last_dim();
    if k == 0 || k > m {
        return Err(Error::invalid(
            "topk_row_mask",
            format!("k={k} outside 1..={m}"),
        ));
    }
    let mut out = Tensor::zeros(a.dims());
    for (src, dst) in a.data().chunks(m).zip(out.data_mut().chunks_mut(m)) {
        for j in kernels::topk_indices(src, k) {
            dst[j] = src[j];
        }
    }
    Ok(out)
}

/// Plain row softmax (no tape).
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_parts(
        x.dims().to_vec(),
        kernels::softmax_rows(x.data(), x.last_dim(), None),
    )
}

/// Token gather map for shifted-window partitioning.
///
/// Returns indices mapping `[B, C, H, W]` onto `[B·nW, win², C]`, where the
/// map is first cyclically shifted by `-shift` along both spatial axes.
pub fn window_partition_index(dims: [usize; 4], win: usize, shift: usize) -> Vec<usize> {
    let [b, c, h, w] = dims;
    let (nwy, nwx) = (h / win, w / win);
    let mut idx = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for wy in 0..nwy {
            for wx in 0..nwx {
                for py in 0..win {
                    for px in 0..win {
                        let y = (wy * win + py + shift) % h;
                        let x = (wx * win + px + shift) % w;
                        for ci in 0..c {
                            idx.push(((bi * c + ci) * h + y) * w + x);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Attention mask for shifted windows: `true` where a query/key pair comes
/// from different regions of the rolled map. Shape `[nW, win², win²]`.
pub fn shifted_window_mask(h: usize, w: usize, win: usize, shift: usize) -> Vec<bool> {
    let region = |pos: usize, len: usize| -> usize {
        if pos < len - win {
            0
        } else if pos < len - shift {
            1
        } else {
            2
        }
    };
    let (nwy, nwx) = (h / win, w / win);
    let n = win * win;
    let mut mask = Vec::with_capacity(nwy * nwx * n * n);
    for wy in 0..nwy {
        for wx in 0..nwx {
            let labels: Vec<usize> = (0..n)
                .map(|p| {
                    let (y, x) = (wy * win + p / win, wx * win + p % win);
                    region(y, h) * 3 + region(x, w)
                })
                .collect();
            for &lq in &labels {
                for &lk in &labels {
                    mask.push(lq != lk);
                }
            }
        }
    }
    mask
}

/// Self-attention inside non-overlapping windows, optionally on a
/// cyclically shifted grid. Inputs are maps `[B, C, H, W]` (query, key and
/// value may differ in content but share shape); the result is a map of the
/// same shape.
pub fn window_attention_qkv<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    win: usize,
    shift: usize,
) -> Result<Var> {
    let d = dims4(tape.dims(q), "window_attention")?;
    if tape.dims(k) != d || tape.dims(v) != d {
        return Err(Error::shape(
            "window_attention",
            "q, k, v maps must share shape",
        ));
    }
    let [b, c, h, w] = d;
    if win == 0 || h % win != 0 || w % win != 0 {
        return Err(Error::invalid(
            "window_attention",
            format!("window {win} does not divide {h}x{w}"),
        ));
    }
    if shift >= win {
        return Err(Error::invalid(
            "window_attention",
            format!("shift {shift} >= window {win}"),
        ));
    }
    let nw = (h / win) * (w / win);
    let idx: Rc<[usize]> = window_partition_index(d, win, shift).into();
    let tok_dims = [b * nw, win * win, c];
    let qt = tape.gather(q, idx.clone(), &tok_dims)?;
    let kt = tape.gather(k, idx.clone(), &tok_dims)?;
    let vt = tape.gather(v, idx.clone(), &tok_dims)?;
    let mask = (shift > 0).then(|| Rc::from(shifted_window_mask(h, w, win, shift)));
    let att = scaled_dot_attention(tape, qt, kt, vt, mask)?;
    let mut inverse = vec![0; idx.len()];
    for (dst, &src) in idx.iter().enumerate() {
        inverse[src] = dst;
    }
    tape.gather(att.out, inverse.into(), &d)
}

/// Projection-free windowed self-attention (`Q = K = V = x`).
pub fn window_attention<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    win: usize,
    shift: usize,
) -> Result<Var> {
    window_attention_qkv(tape, x, x, x, win, shift)
}

/// Cyclic roll of the spatial axes by `(dy, dx)` (positive moves content
/// toward larger indices).
pub fn roll2d<T: Real>(tape: &mut Tape<T>, x: Var, dy: isize, dx: isize) -> Result<Var> {
    let [b, c, h, w] = dims4(tape.dims(x), "roll2d")?;
    let mut idx = Vec::with_capacity(b * c * h * w);
    for plane in 0..b * c {
        for y in 0..h {
            let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
            for xx in 0..w {
                let sx = (xx as isize - dx).rem_euclid(w as isize) as usize;
                idx.push((plane * h + sy) * w + sx);
            }
        }
    }
    tape.gather(x, idx.into(), &[b, c, h, w])
}

/// 2×2 (or `f×f`) box average, used to derive model inputs from
/// higher-resolution frames. Not differentiable.
pub fn box_downsample<T: Real>(x: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = dims4(x.dims(), "box_downsample")?;
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::invalid("box_downsample", format!("{h}x{w} by {f}")));
    }
    let (oh, ow) = (h / f, w / f);
    let norm = T::of((f * f) as f64);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = T::zero();
                for dy in 0..f {
                    for dx in 0..f {
                        s += plane[(y * f + dy) * w + xx * f + dx];
                    }
                }
                out.push(s / norm);
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, oh, ow], out))
}

/// Sinusoidal embedding of a scalar (`[dim]`, half sin, half cos).
pub fn sinusoidal_embedding(value: f64, dim: usize, max_period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        out[i] = (value * freq).sin();
        out[half + i] = (value * freq).cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape_with(dims: &[usize], data: Vec<f64>) -> (Tape<f64>, Var) {
        let mut t = Tape::new();
        let v = t.input(Tensor::new(dims, data).unwrap());
        (t, v)
    }

    #[test]
    fn pixel_shuffle_definition() {
        let (mut t, x) = tape_with(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let y = pixel_shuffle(&mut t, x, 2).unwrap();
        assert_eq!(t.dims(y), &[1, 1, 2, 2]);
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pixel_shuffle_identity_and_divisibility() {
        let (mut t, x) = tape_with(&[1, 3, 2, 2], (0..12).map(f64::from).collect());
        let y = pixel_shuffle(&mut t, x, 1).unwrap();
        assert_eq!(t.value(y), t.value(x));
        assert!(pixel_shuffle(&mut t, x, 2).is_err());
    }

    #[test]
    fn upsample_replicates() {
        let (mut t, x) = tape_with(&[1, 1, 1, 1], vec![7.0]);
        let y = upsample_nearest_2d(&mut t, x, 2).unwrap();
        assert_eq!(t.value(y).data(), &[7.0; 4]);
        let id = upsample_nearest_2d(&mut t, x, 1).unwrap();
        assert_eq!(t.value(id), t.value(x));
    }

    #[test]
    fn topk_examples() {
        let a = Tensor::new(&[1, 3], vec![0.1, 0.5, 0.4]).unwrap();
        assert_eq!(topk_row_mask(&a, 2).unwrap().data(), &[0.0, 0.5, 0.4]);
        assert_eq!(topk_row_mask(&a, 3).unwrap(), a);
        let tie = Tensor::new(&[1, 3], vec![0.3, 0.3, 0.3]).unwrap();
        assert_eq!(topk_row_mask(&tie, 1).unwrap().data(), &[0.3, 0.0, 0.0]);
        assert!(topk_row_mask(&a, 0).is_err());
        assert!(topk_row_mask(&a, 4).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::new(&[1, 2], vec![0.0f64, 0.0]).unwrap());
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::new(&[1, 2], vec![1000.0f32, 0.0]).unwrap());
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-6 && s.data()[1] < 1e-6);
    }

    #[test]
    fn roll_round_trip() {
        let (mut t, x) = tape_with(&[1, 2, 4, 4], (0..32).map(f64::from).collect());
        let r = roll2d(&mut t, x, -2, -2).unwrap();
        let back = roll2d(&mut t, r, 2, 2).unwrap();
        assert_eq!(t.value(back), t.value(x));
        assert_ne!(t.value(r), t.value(x));
    }

    #[test]
    fn window_partition_is_a_permutation() {
        let idx = window_partition_index([2, 3, 8, 8], 4, 2);
        let mut seen = idx.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..2 * 3 * 64).collect::<Vec<_>>());
    }

    #[test]
    fn sinusoid_halves() {
        let e = sinusoidal_embedding(0.0, 8, 10_000.0);
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
    }
}
