//! Image files: single-tensor containers for exchange and binary PPM (P6)
//! for viewing. Images are `[3, H, W]` with values in `[-1, 1]`.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::io::write_tensor;
use crate::numerics::{Tensor, TensorFile};

pub const IMAGE_EXT: &str = "imtk";

pub fn write_image(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    write_tensor(path, "image", img)
}

/// First tensor of a container file.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let f = TensorFile::read(path)?;
    let (_, t) = f
        .entries()
        .first()
        .ok_or_else(|| Error::Format(format!("{} holds no tensors", path.display())))?;
    Ok(t.to())
}

/// `[-1, 1]` to `[0, 1]`.
pub fn to_unit(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    let (h, w) = match img.dims() {
        &[3, h, w] => (h, w),
        d => {
            return Err(Error::shape(
                "write_ppm",
                format!("expected [3,H,W], got {d:?}"),
            ))
        }
    };
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..plane {
        for c in 0..3 {
            let v = ((img.data()[c * plane + p] + 1.0) * 127.5)
                .round()
                .clamp(0.0, 255.0);
            out.push(v as u8);
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Tensor image files of a directory, sorted by name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let rd = std::fs::read_dir(dir)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == IMAGE_EXT))
        .collect();
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::new(&[3, 1, 2], vec![-1.0, 1.0, 0.0, 0.0, 1.0, -1.0]).unwrap();
        let p = dir.path().join("a.ppm");
        write_ppm(&p, &img).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255, 255, 128, 0]);
        let q = dir.path().join("a.imtk");
        write_image(&q, &img).unwrap();
        assert_eq!(read_image(&q).unwrap(), img);
    }
}
