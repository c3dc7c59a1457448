//! Kernel timing harness.
//!
//! Every kernel is timed on seeded random inputs (median and 90th
//! percentile over `reps` runs after `warmup` runs). `max_abs_diff` compares
//! the kernel once against a plain-loop reference evaluation; the
//! full-frame renderer has no reference and reports 0.

use std::path::Path;
use std::time::Instant;

use clap::ValueEnum;
use serde::Serialize;

use crate::encoders::ModelScale;
use crate::error::{Error, Result};
use crate::motion_transfer::sparse_resample_tokens;
use crate::numerics::ops::{scaled_dot_attention, softmax_rows, topk_row_mask, window_attention};
use crate::numerics::{streams, ParamStore, RngState, Tape, Tensor, UpGrid};
use crate::renderer::Renderer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Kernel {
    DenseAttn,
    SparseResample,
    WindowAttn,
    FullFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub kernel: Kernel,
    #[serde(rename = "N")]
    pub n: usize,
    pub k: usize,
    pub median_ms: f64,
    pub p90_ms: f64,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BenchConfig {
    pub k: usize,
    pub channels: usize,
    pub window: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            k: 8,
            channels: 32,
            window: 8,
            reps: 20,
            warmup: 3,
            seed: 0,
        }
    }
}

/// Largest `N` for which the quadratic-memory references are evaluated.
const REFERENCE_LIMIT: usize = 4096;

fn naive_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
    let (n, m, d, c) = (q.dims()[0], k.dims()[0], q.dims()[1], v.dims()[1]);
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let s: Vec<f64> = (0..m)
            .map(|j| {
                (0..d)
                    .map(|t| q.data()[i * d + t] * k.data()[j * d + t])
                    .sum::<f64>()
                    * scale
            })
            .collect();
        let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..m {
            for t in 0..c {
                out[i * c + t] += e[j] / z * v.data()[j * c + t];
            }
        }
    }
    Tensor::new(&[n, c], out).expect("dims")
}

/// Upsample the coarse map, keep the top `k` per row, renormalize, then
/// aggregate.
fn naive_sparse(a: &Tensor<f64>, v: &Tensor<f64>, k: usize) -> Tensor<f64> {
    let (nc, nf, c) = (a.dims()[0], v.dims()[0], v.dims()[1]);
    let cw = (nc as f64).sqrt().round() as usize;
    let fw = (nf as f64).sqrt().round() as usize;
    let grid = UpGrid {
        coarse_w: cw,
        fine_w: fw,
        s: fw / cw,
    };
    let s2 = (grid.s * grid.s) as f64;
    let up = Tensor::from_fn(&[nf, nf], |i| {
        a.data()[grid.coarse_of(i / nf) * nc + grid.coarse_of(i % nf)] / s2
    });
    let masked = topk_row_mask(&up, k).expect("k within row");
    let mut out = vec![0.0; nf * c];
    for i in 0..nf {
        let row = &masked.data()[i * nf..(i + 1) * nf];
        let z: f64 = row.iter().sum();
        for (j, &w) in row.iter().enumerate().filter(|(_, w)| **w != 0.0) {
            for t in 0..c {
                out[i * c + t] += w / z * v.data()[j * c + t];
            }
        }
    }
    Tensor::new(&[nf, c], out).expect("dims")
}

fn time(cfg: &BenchConfig, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    for _ in 0..cfg.warmup {
        f()?;
    }
    let mut ms = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps {
        let t0 = Instant::now();
        f()?;
        ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    ms.sort_by(f64::total_cmp);
    let q = |p: f64| ms[((ms.len() - 1) as f64 * p).round() as usize];
    Ok((q(0.5), q(0.9)))
}

fn side(n: usize, what: &str) -> Result<usize> {
    let s = (n as f64).sqrt().round() as usize;
    if s * s != n {
        return Err(Error::Config(format!(
            "bench: {what} needs square N, got {n}"
        )));
    }
    Ok(s)
}

pub fn bench_kernel(kernel: Kernel, n: usize, cfg: &BenchConfig) -> Result<BenchRow> {
    if cfg.reps < 1 {
        return Err(Error::Config("bench: reps must be >= 1".into()));
    }
    let mut rng = RngState(cfg.seed).derive(n as u64).stream(streams::BENCH);
    let c = cfg.channels;
    let (k, (median_ms, p90_ms), diff) = match kernel {
        Kernel::DenseAttn => {
            let q = Tensor::<f64>::randn(&[n, c], 1.0, &mut rng);
            let kk = Tensor::<f64>::randn(&[n, c], 1.0, &mut rng);
            let v = Tensor::<f64>::randn(&[n, c], 1.0, &mut rng);
            let run = || -> Result<Tensor<f64>> {
                let mut tape = Tape::new();
                let (qv, kv, vv) = (
                    tape.constant(q.clone()),
                    tape.constant(kk.clone()),
                    tape.constant(v.clone()),
                );
                let out = scaled_dot_attention(&mut tape, qv, kv, vv, None)?.out;
                Ok(tape.value(out).clone())
            };
            let diff = if n <= REFERENCE_LIMIT {
                run()?.max_abs_diff(&naive_attention(&q, &kk, &v))
            } else {
                f64::NAN
            };
            (n, time(cfg, || run().map(drop))?, diff)
        }
        Kernel::SparseResample => {
            let fw = side(n, "sparse_resample")?;
            if fw % 2 != 0 {
                return Err(Error::Config(format!(
                    "bench: sparse_resample needs an even grid side, got {fw}"
                )));
            }
            let nc = n / 4;
            let a = softmax_rows(&Tensor::<f64>::randn(&[nc, nc], 2.0, &mut rng));
            let v = Tensor::<f64>::randn(&[n, c], 1.0, &mut rng);
            let k = cfg.k.min(n);
            let diff = if n <= REFERENCE_LIMIT {
                sparse_resample_tokens(&a, &v, k, true)?.max_abs_diff(&naive_sparse(&a, &v, k))
            } else {
                f64::NAN
            };
            (
                k,
                time(cfg, || sparse_resample_tokens(&a, &v, k, true).map(drop))?,
                diff,
            )
        }
        Kernel::WindowAttn => {
            let s = side(n, "window_attn")?;
            let win = cfg.window.min(s);
            if s % win != 0 {
                return Err(Error::Config(format!(
                    "bench: window {win} does not divide side {s}"
                )));
            }
            let x = Tensor::<f64>::randn(&[1, c, s, s], 1.0, &mut rng);
            let run = || -> Result<Tensor<f64>> {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let out = window_attention(&mut tape, xv, win, 0)?;
                Ok(tape.value(out).clone())
            };
            let got = run()?;
            let mut diff = 0.0f64;
            for wy in 0..s / win {
                for wx in 0..s / win {
                    let cells: Vec<usize> = (0..win * win)
                        .map(|p| (wy * win + p / win) * s + wx * win + p % win)
                        .collect();
                    let toks =
                        Tensor::from_fn(&[win * win, c], |i| x.data()[(i % c) * n + cells[i / c]]);
                    let r = naive_attention(&toks, &toks, &toks);
                    for (p, &cell) in cells.iter().enumerate() {
                        for ch in 0..c {
                            diff =
                                diff.max((r.data()[p * c + ch] - got.data()[ch * n + cell]).abs());
                        }
                    }
                }
            }
            (win * win, time(cfg, || run().map(drop))?, diff)
        }
        Kernel::FullFrame => {
            let scale = ModelScale {
                input_res: n,
                ..ModelScale::toy()
            };
            let mut ps = ParamStore::<f32>::new();
            let renderer = Renderer::new(&mut ps, &scale, &mut rng)?;
            let src = Tensor::<f32>::uniform(&[1, 3, n, n], -1.0, 1.0, &mut rng);
            let drv = Tensor::<f32>::uniform(&[1, 3, n, n], -1.0, 1.0, &mut rng);
            let run = || -> Result<()> {
                let mut tape = Tape::new();
                let (s, d) = (tape.constant(src.clone()), tape.constant(drv.clone()));
                renderer.forward(&mut tape, &ps, s, d).map(drop)
            };
            (scale.top_k, time(cfg, run)?, 0.0)
        }
    };
    Ok(BenchRow {
        kernel,
        n,
        k,
        median_ms,
        p90_ms,
        max_abs_diff: diff,
    })
}

pub fn run_bench(kernel: Kernel, sizes: &[usize], cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    sizes
        .iter()
        .map(|&n| bench_kernel(kernel, n, cfg))
        .collect()
}

pub fn write_csv(path: impl AsRef<Path>, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(std::io::Error::from)?;
    for r in rows {
        w.serialize(r).map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_match_references() {
        let cfg = BenchConfig {
            reps: 1,
            warmup: 0,
            channels: 4,
            window: 4,
            ..BenchConfig::default()
        };
        for kernel in [
            Kernel::DenseAttn,
            Kernel::SparseResample,
            Kernel::WindowAttn,
        ] {
            let row = bench_kernel(kernel, 64, &cfg).unwrap();
            assert!(row.max_abs_diff < 1e-9, "{row:?}");
        }
    }
}
