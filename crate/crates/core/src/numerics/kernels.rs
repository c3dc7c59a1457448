//! Raw loops shared by the differentiable ops and by the plain-tensor API.

use std::cmp::Ordering;

use super::tensor::Real;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        cin: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(Self {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one image `[cin, h, w]` into `[cin·k·k, ho·wo]` columns.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    if g.is_pointwise() {
        cols.copy_from_slice(x);
        return;
    }
    let np = g.out_pixels();
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into `dx` (accumulating).
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    if g.is_pointwise() {
        for (d, &c) in dx.iter_mut().zip(cols) {
            *d += c;
        }
        return;
    }
    let np = g.out_pixels();
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * np..(row + 1) * np];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch. `x: [b, cin, h, w]`, `w: [cout, cin, k, k]`.
pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    batch: usize,
    w: &[T],
    cout: usize,
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let np = g.out_pixels();
    let in_sz = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); batch * cout * np];
    let mut cols = vec![T::zero(); g.patch() * np];
    for b in 0..batch {
        im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols);
        let y = &mut out[b * cout * np..(b + 1) * cout * np];
        T::gemm(cout, g.patch(), np, w, false, &cols, false, y, false);
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                for v in &mut y[o * np..(o + 1) * np] {
                    *v += bv;
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    batch: usize,
    w: &[T],
    cout: usize,
    dy: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_dx, need_dw, need_db) = need;
    let np = g.out_pixels();
    let in_sz = g.cin * g.h * g.w;
    let patch = g.patch();
    let mut dx = need_dx.then(|| vec![T::zero(); batch * in_sz]);
    let mut dw = need_dw.then(|| vec![T::zero(); cout * patch]);
    let mut db = need_db.then(|| vec![T::zero(); cout]);
    let mut cols = vec![T::zero(); patch * np];
    for b in 0..batch {
        let dyb = &dy[b * cout * np..(b + 1) * cout * np];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols);
            T::gemm(cout, np, patch, dyb, false, &cols, true, dw, true);
        }
        if let Some(db) = db.as_mut() {
            for (o, d) in db.iter_mut().enumerate() {
                *d += dyb[o * np..(o + 1) * np].iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(patch, cout, np, w, true, dyb, false, &mut cols, false);
            col2im(&cols, g, &mut dx[b * in_sz..(b + 1) * in_sz]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Row softmax with max subtraction. Entries whose mask bit is set get
/// probability zero; the mask repeats with period `mask.len()`.
pub(crate) fn softmax_rows<T: Real>(x: &[T], n: usize, mask: Option<&[bool]>) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (r, (row, dst)) in x.chunks(n).zip(out.chunks_mut(n)).enumerate() {
        let masked = |j: usize| mask.is_some_and(|m| m[(r * n + j) % m.len()]);
        let mut mx = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if !masked(j) && v > mx {
                mx = v;
            }
        }
        if mx == T::neg_infinity() {
            continue;
        }
        let mut sum = T::zero();
        for (j, (&v, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
            if !masked(j) {
                *d = (v - mx).exp();
                sum += *d;
            }
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

/// Descending by value, ascending by index on ties.
pub(crate) fn rank_order<T: Real>(a: (usize, T), b: (usize, T)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// Indices of the `k` largest entries of `row`, ties to the lowest index,
/// returned in ascending index order.
pub(crate) fn topk_indices<T: Real>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<(usize, T)> = row.iter().copied().enumerate().collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(a, b));
        idx.truncate(k);
    }
    let mut keep: Vec<usize> = idx.into_iter().map(|(i, _)| i).collect();
    keep.sort_unstable();
    keep
}

/// Grid geometry for mapping a coarse attention row onto a fine grid that is
/// `s` times larger along each axis.
#[derive(Debug, Clone, Copy)]
pub struct UpGrid {
    pub coarse_w: usize,
    pub fine_w: usize,
    pub s: usize,
}

impl UpGrid {
    pub fn coarse_of(&self, fine: usize) -> usize {
        let (fy, fx) = (fine / self.fine_w, fine % self.fine_w);
        (fy / self.s) * self.coarse_w + fx / self.s
    }

    pub fn fine_cells(&self, coarse: usize) -> impl Iterator<Item = usize> + '_ {
        let (cy, cx) = (coarse / self.coarse_w, coarse % self.coarse_w);
        (0..self.s).flat_map(move |dy| {
            (0..self.s).map(move |dx| (cy * self.s + dy) * self.fine_w + cx * self.s + dx)
        })
    }
}

/// Top-`k` fine key indices of a nearest-upsampled coarse attention row,
/// without materializing the upsampled row. Identical to ranking the
/// upsampled row by value (descending) then fine index (ascending).
pub(crate) fn topk_upsampled<T: Real>(coarse_row: &[T], grid: &UpGrid, k: usize) -> Vec<usize> {
    let group = grid.s * grid.s;
    if grid.s == 1 {
        return topk_indices(coarse_row, k);
    }
    let need = k.div_ceil(group);
    let mut order: Vec<(usize, T)> = coarse_row.iter().copied().enumerate().collect();
    order.select_nth_unstable_by(need - 1, |&a, &b| {
        b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal)
    });
    let tau = order[need - 1].1;
    let mut kept = Vec::with_capacity(k);
    let mut boundary = Vec::new();
    for (c, &v) in coarse_row.iter().enumerate() {
        if v > tau {
            kept.extend(grid.fine_cells(c));
        } else if v == tau {
            boundary.extend(grid.fine_cells(c));
        }
    }
    boundary.sort_unstable();
    let rest = k - kept.len();
    kept.extend_from_slice(&boundary[..rest]);
    kept.sort_unstable();
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_upsampled_matches_materialized_ranking() {
        let coarse = [0.2f64, 0.5, 0.5, 0.1, 0.3, 0.5, 0.0, 0.4, 0.2];
        let grid = UpGrid {
            coarse_w: 3,
            fine_w: 6,
            s: 2,
        };
        let fine: Vec<f64> = (0..36).map(|j| coarse[grid.coarse_of(j)] / 4.0).collect();
        for k in 1..=36 {
            assert_eq!(
                topk_upsampled(&coarse, &grid, k),
                topk_indices(&fine, k),
                "k={k}"
            );
        }
    }

    #[test]
    fn conv_backward_of_identity_pointwise() {
        let g = ConvGeom::new(2, 2, 2, 1, 1, 0).unwrap();
        let x = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let w = vec![1.0, 0.0, 0.0, 1.0];
        let y = conv2d_forward(&x, 1, &w, 2, None, &g);
        assert_eq!(y, x);
        let grads = conv2d_backward(&x, 1, &w, 2, &y, &g, (true, false, false));
        assert_eq!(grads.dx.unwrap(), x);
    }
}
