//! Procedural talking-head clips.
//!
//! Each identity has a palette of five colors and a face geometry; each
//! frame moves the head (offset and rotation), opens the mouth and shifts
//! the eyes. Shapes have hard edges, so every pixel takes one of the
//! identity's palette colors exactly.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image_io::{read_image, write_image};
use crate::numerics::ops::box_downsample;
use crate::numerics::{streams, RngState, Tensor, TensorFile};

/// Per-frame motion parameters: head offset x, head offset y, rotation
/// (radians), mouth openness in `[0, 1]`, horizontal eye offset in `[-1, 1]`.
pub const MOTION_PARAMS: usize = 5;
pub const PALETTE: usize = 5;
pub const FRAMES_DIR: &str = "frames";
pub const MOTION_FILE: &str = "motion.imtk";

pub fn frame_name(identity: usize, frame: usize) -> String {
    format!("id{identity:03}_f{frame:04}.imtk")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    /// `[identities, frames, 3, res, res]`, values in `[-1, 1]`.
    pub frames: Tensor<f32>,
    /// `[identities, frames, 5]`.
    pub motion: Tensor<f32>,
    /// `[identities, 5, 3]`: background, hair, skin, eyes, mouth.
    pub palettes: Tensor<f32>,
}

struct Geometry {
    face_rx: f64,
    face_ry: f64,
    eye_y: f64,
    eye_sep: f64,
    eye_r: f64,
    mouth_y: f64,
    mouth_w: f64,
}

impl Geometry {
    fn sample(rng: &mut impl Rng) -> Self {
        Self {
            face_rx: rng.random_range(0.42..0.55),
            face_ry: rng.random_range(0.55..0.68),
            eye_y: rng.random_range(-0.2..-0.1),
            eye_sep: rng.random_range(0.18..0.26),
            eye_r: rng.random_range(0.07..0.1),
            mouth_y: rng.random_range(0.25..0.35),
            mouth_w: rng.random_range(0.14..0.22),
        }
    }

    /// Palette slot of the point `(x, y)` in head coordinates.
    fn classify(&self, x: f64, y: f64, mouth: f64, eye: f64) -> usize {
        let ell = |rx: f64, ry: f64, x: f64, y: f64| (x / rx).powi(2) + (y / ry).powi(2) <= 1.0;
        let eye_dx = eye * 0.5 * self.eye_r;
        for side in [-1.0, 1.0] {
            let (ex, ey) = (x - side * self.eye_sep - eye_dx, y - self.eye_y);
            if ex * ex + ey * ey <= self.eye_r * self.eye_r {
                return 3;
            }
        }
        let mouth_h = 0.02 + 0.1 * mouth;
        if ell(self.mouth_w, mouth_h, x, y - self.mouth_y) {
            return 4;
        }
        if ell(self.face_rx, self.face_ry, x, y) {
            return 2;
        }
        if y < -0.1 && ell(self.face_rx + 0.1, self.face_ry + 0.1, x, y) {
            return 1;
        }
        0
    }
}

fn render(geom: &Geometry, palette: &[f32], motion: &[f64], res: usize, out: &mut [f32]) {
    let (dx, dy, angle, mouth, eye) = (motion[0], motion[1], motion[2], motion[3], motion[4]);
    let (s, c) = angle.sin_cos();
    let plane = res * res;
    for py in 0..res {
        for px in 0..res {
            let u = (px as f64 + 0.5) / res as f64 * 2.0 - 1.0 - dx;
            let v = (py as f64 + 0.5) / res as f64 * 2.0 - 1.0 - dy;
            let (x, y) = (c * u + s * v, -s * u + c * v);
            let slot = geom.classify(x, y, mouth, eye);
            for ch in 0..3 {
                out[ch * plane + py * res + px] = palette[slot * 3 + ch];
            }
        }
    }
}

impl SynthDataset {
    /// Frames are rendered at `res`; all motion is zero in frame 0.
    pub fn generate(
        seed: u64,
        n_identities: usize,
        frames_per_identity: usize,
        res: usize,
    ) -> Result<Self> {
        if n_identities == 0 || frames_per_identity == 0 || res < 4 {
            return Err(Error::Config(format!(
                "dataset: need identities >= 1, frames >= 1, res >= 4 (got {n_identities}, {frames_per_identity}, {res})"
            )));
        }
        let mut rng = RngState(seed).stream(streams::DATA);
        let frame_len = 3 * res * res;
        let mut frames = vec![0.0f32; n_identities * frames_per_identity * frame_len];
        let mut motion = vec![0.0f32; n_identities * frames_per_identity * MOTION_PARAMS];
        let mut palettes = vec![0.0f32; n_identities * PALETTE * 3];
        for id in 0..n_identities {
            let geom = Geometry::sample(&mut rng);
            let pal = &mut palettes[id * PALETTE * 3..(id + 1) * PALETTE * 3];
            for v in pal.iter_mut() {
                *v = rng.random_range(-0.9f32..0.9);
            }
            let pal = pal.to_vec();
            for f in 0..frames_per_identity {
                let m = if f == 0 {
                    [0.0; MOTION_PARAMS]
                } else {
                    [
                        rng.random_range(-0.15..0.15),
                        rng.random_range(-0.15..0.15),
                        rng.random_range(-0.35..0.35),
                        rng.random_range(0.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ]
                };
                let k = id * frames_per_identity + f;
                for (dst, &src) in motion[k * MOTION_PARAMS..(k + 1) * MOTION_PARAMS]
                    .iter_mut()
                    .zip(&m)
                {
                    *dst = src as f32;
                }
                render(
                    &geom,
                    &pal,
                    &m,
                    res,
                    &mut frames[k * frame_len..(k + 1) * frame_len],
                );
            }
        }
        Ok(Self {
            frames: Tensor::new(&[n_identities, frames_per_identity, 3, res, res], frames)?,
            motion: Tensor::new(&[n_identities, frames_per_identity, MOTION_PARAMS], motion)?,
            palettes: Tensor::new(&[n_identities, PALETTE, 3], palettes)?,
        })
    }

    pub fn n_identities(&self) -> usize {
        self.frames.dims()[0]
    }

    pub fn frames_per_identity(&self) -> usize {
        self.frames.dims()[1]
    }

    pub fn res(&self) -> usize {
        self.frames.dims()[3]
    }

    /// Full-resolution frame `[3, res, res]`.
    pub fn frame(&self, identity: usize, frame: usize) -> Tensor<f32> {
        let len = 3 * self.res() * self.res();
        let k = identity * self.frames_per_identity() + frame;
        Tensor::new(
            &[3, self.res(), self.res()],
            self.frames.data()[k * len..(k + 1) * len].to_vec(),
        )
        .expect("frame dims")
    }

    /// Stacks frames `(identity, frame)` into `[B, 3, res/f, res/f]`,
    /// box-downsampled by `f`.
    pub fn batch(&self, picks: &[(usize, usize)], f: usize) -> Result<Tensor<f32>> {
        let frames: Vec<Tensor<f32>> = picks.iter().map(|&(i, k)| self.frame(i, k)).collect();
        let stacked = Tensor::stack(&frames)?;
        if f == 1 {
            Ok(stacked)
        } else {
            box_downsample(&stacked, f)
        }
    }

    pub fn to_file(&self) -> Result<TensorFile> {
        let mut file = TensorFile::new();
        file.push("frames", self.frames.clone())?;
        file.push("motion", self.motion.clone())?;
        file.push("palettes", self.palettes.clone())?;
        Ok(file)
    }

    pub fn from_file(file: &TensorFile) -> Result<Self> {
        let ds = Self {
            frames: file.require("frames")?.to(),
            motion: file.require("motion")?.to(),
            palettes: file.require("palettes")?.to(),
        };
        let (f, m) = (ds.frames.dims(), ds.motion.dims());
        if f.len() != 5 || f[2] != 3 || f[3] != f[4] || m != [f[0], f[1], MOTION_PARAMS] {
            return Err(Error::shape(
                "dataset",
                format!("frames {f:?}, motion {m:?}"),
            ));
        }
        Ok(ds)
    }

    /// Writes `frames/id{i}_f{k}.imtk` per frame and `motion.imtk`
    /// (motion parameters and palettes).
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let frames = dir.join(FRAMES_DIR);
        std::fs::create_dir_all(&frames)?;
        for i in 0..self.n_identities() {
            for k in 0..self.frames_per_identity() {
                write_image(frames.join(frame_name(i, k)), &self.frame(i, k))?;
            }
        }
        let mut meta = TensorFile::new();
        meta.push("motion", self.motion.clone())?;
        meta.push("palettes", self.palettes.clone())?;
        meta.write(dir.join(MOTION_FILE))
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta = TensorFile::read(dir.join(MOTION_FILE))?;
        let motion: Tensor<f32> = meta.require("motion")?.to();
        let palettes: Tensor<f32> = meta.require("palettes")?.to();
        let (n, f) = match motion.dims() {
            &[n, f, MOTION_PARAMS] => (n, f),
            d => return Err(Error::shape("dataset", format!("motion {d:?}"))),
        };
        let mut frames = Vec::with_capacity(n * f);
        for i in 0..n {
            for k in 0..f {
                frames.push(read_image(dir.join(FRAMES_DIR).join(frame_name(i, k)))?);
            }
        }
        let frames = Tensor::stack(&frames)?;
        let d = frames.dims().to_vec();
        let ds = Self {
            frames: frames.reshape(&[n, f, d[1], d[2], d[3]])?,
            motion,
            palettes,
        };
        Self::from_file(&ds.to_file()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_palette_and_canonical_pose() {
        let a = SynthDataset::generate(7, 3, 4, 32).unwrap();
        let b = SynthDataset::generate(7, 3, 4, 32).unwrap();
        assert_eq!(
            a.to_file().unwrap().to_bytes(),
            b.to_file().unwrap().to_bytes()
        );
        for id in 0..3 {
            let pal = &a.palettes.data()[id * 15..(id + 1) * 15];
            for f in 0..4 {
                let fr = a.frame(id, f);
                for p in 0..32 * 32 {
                    let px = [fr.data()[p], fr.data()[1024 + p], fr.data()[2048 + p]];
                    assert!(
                        pal.chunks(3).any(|c| c == px),
                        "id {id} frame {f} pixel {p}"
                    );
                }
            }
            let m0 = &a.motion.data()[id * 4 * 5..id * 4 * 5 + 5];
            assert!(m0.iter().all(|&v| v == 0.0));
        }
        assert_ne!(a.frame(0, 0), a.frame(0, 1));
        let dir = tempfile::tempdir().unwrap();
        a.write_dir(dir.path()).unwrap();
        assert_eq!(SynthDataset::read_dir(dir.path()).unwrap(), a);
    }
}
