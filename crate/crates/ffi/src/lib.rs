//! C ABI over the renderer, the motion generator and the image metrics.
//!
//! Every fallible call returns an [`ImtkStatus`]; on failure the message is
//! available from [`imtk_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function. Images are planar
//! `[3, R, R]` `f32` buffers in `[-1, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use imtalker::config::RunConfig;
use imtalker::error::Error;
use imtalker::metrics;
use imtalker::motion_generator::{
    euler_sample, ConditionSet, GeneratorConfig, MotionGenerator, SamplerConfig,
};
use imtalker::numerics::{ParamStore, Tensor};
use imtalker::renderer::Renderer;
use imtalker::training::generator::load_generator;
use imtalker::training::renderer::load_renderer;
use imtalker::training::Checkpoint;

/// Result of every fallible call. Values match the CLI exit codes where
/// the meaning overlaps.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImtkStatus {
    Ok = 0,
    Runtime = 1,
    Config = 2,
    MissingArtifact = 3,
    Shape = 4,
    /// Null pointer, non-UTF-8 path or bad length.
    InvalidArgument = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// Renderer with loaded weights.
pub struct ImtkRenderer {
    renderer: Renderer,
    params: ParamStore<f32>,
}

/// Motion generator with loaded weights.
pub struct ImtkGenerator {
    generator: MotionGenerator,
    params: ParamStore<f32>,
    config: GeneratorConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(ImtkStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Config(_) | Error::Json(_) => ImtkStatus::Config,
            Error::MissingArtifact(_) => ImtkStatus::MissingArtifact,
            Error::Shape { .. } => ImtkStatus::Shape,
            Error::InvalidArgument { .. } => ImtkStatus::InvalidArgument,
            _ => ImtkStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(ImtkStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ImtkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            ImtkStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside imtalker");
            ImtkStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(p: *const f32, len: usize, what: &str) -> Result<&'a [f32], Failure> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a>(
    p: *mut f32,
    len: usize,
    need: usize,
    what: &str,
) -> Result<&'a mut [f32], Failure> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    if len != need {
        return Err(Failure(
            ImtkStatus::Shape,
            format!("{what} holds {len} values, {need} are required"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn tensor(dims: &[usize], data: &[f32]) -> Result<Tensor<f32>, Failure> {
    Ok(Tensor::new(dims, data.to_vec())?)
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn imtk_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn imtk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a renderer from a run config (JSON) and a renderer checkpoint.
///
/// # Safety
/// `config_path` and `checkpoint_path` must be NUL-terminated strings and
/// `out` a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn imtk_renderer_open(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut ImtkRenderer,
) -> ImtkStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        *out = ptr::null_mut();
        let cfg = RunConfig::read(path_arg(config_path, "config_path")?)?;
        let ck = Checkpoint::read(path_arg(checkpoint_path, "checkpoint_path")?)?;
        let (renderer, params) = load_renderer(&cfg.scale, &ck)?;
        *out = Box::into_raw(Box::new(ImtkRenderer { renderer, params }));
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a handle from [`imtk_renderer_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn imtk_renderer_free(h: *mut ImtkRenderer) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Input side length R; inputs hold `3 * R * R` values.
///
/// # Safety
/// `h` must be a live renderer handle.
#[no_mangle]
pub unsafe extern "C" fn imtk_renderer_input_res(h: *const ImtkRenderer) -> usize {
    h.as_ref().map_or(0, |h| h.renderer.scale.input_res)
}

/// Output side length; outputs hold `3 * R_out * R_out` values.
///
/// # Safety
/// `h` must be a live renderer handle.
#[no_mangle]
pub unsafe extern "C" fn imtk_renderer_output_res(h: *const ImtkRenderer) -> usize {
    h.as_ref().map_or(0, |h| h.renderer.scale.output_res())
}

/// Motion latent size.
///
/// # Safety
/// `h` must be a live renderer handle.
#[no_mangle]
pub unsafe extern "C" fn imtk_renderer_latent_dim(h: *const ImtkRenderer) -> usize {
    h.as_ref().map_or(0, |h| h.renderer.scale.d_z)
}

unsafe fn renderer_ref<'a>(h: *const ImtkRenderer) -> Result<&'a ImtkRenderer, Failure> {
    h.as_ref().ok_or_else(|| invalid("renderer handle is null"))
}

/// Renders `source` with the motion of `driving`. Both inputs hold
/// `3 * R * R` values; `out_len` must be `3 * R_out * R_out`.
///
/// # Safety
/// `h` must be a live handle and the buffers must hold the stated number
/// of values.
#[no_mangle]
pub unsafe extern "C" fn imtk_renderer_render(
    h: *const ImtkRenderer,
    source: *const f32,
    driving: *const f32,
    out: *mut f32,
    out_len: usize,
) -> ImtkStatus {
    guard(|| {
        let h = renderer_ref(h)?;
        let (r, ro) = (h.renderer.scale.input_res, h.renderer.scale.output_res());
        let dims = [3, r, r];
        let s = tensor(&dims, slice_arg(source, 3 * r * r, "source")?)?;
        let d = tensor(&dims, slice_arg(driving, 3 * r * r, "driving")?)?;
        let out = out_arg(out, out_len, 3 * ro * ro, "out")?;
        let img = h.renderer.render_frame(&h.params, &s, &d)?;
        out.copy_from_slice(img.data());
        Ok(())
    })
}

/// Renders `source` with a motion latent of `latent_len = d_z` values.
///
/// # Safety
/// As for [`imtk_renderer_render`].
#[no_mangle]
pub unsafe extern "C" fn imtk_renderer_render_latent(
    h: *const ImtkRenderer,
    source: *const f32,
    latent: *const f32,
    latent_len: usize,
    out: *mut f32,
    out_len: usize,
) -> ImtkStatus {
    guard(|| {
        let h = renderer_ref(h)?;
        let (r, ro) = (h.renderer.scale.input_res, h.renderer.scale.output_res());
        let s = tensor(&[3, r, r], slice_arg(source, 3 * r * r, "source")?)?;
        let z = tensor(&[latent_len], slice_arg(latent, latent_len, "latent")?)?;
        let out = out_arg(out, out_len, 3 * ro * ro, "out")?;
        let img = h.renderer.render_latent(&h.params, &s, &z)?;
        out.copy_from_slice(img.data());
        Ok(())
    })
}

/// Loads a motion generator from a run config and a generator checkpoint.
///
/// # Safety
/// As for [`imtk_renderer_open`].
#[no_mangle]
pub unsafe extern "C" fn imtk_generator_open(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut ImtkGenerator,
) -> ImtkStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        *out = ptr::null_mut();
        let cfg = RunConfig::read(path_arg(config_path, "config_path")?)?;
        let ck = Checkpoint::read(path_arg(checkpoint_path, "checkpoint_path")?)?;
        let (generator, params) = load_generator(&cfg.generator, &ck)?;
        *out = Box::into_raw(Box::new(ImtkGenerator {
            generator,
            params,
            config: cfg.generator,
        }));
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a handle from [`imtk_generator_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn imtk_generator_free(h: *mut ImtkGenerator) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Writes the per-frame widths of the audio, pose and gaze conditions and
/// of the output latent. Any pointer may be null.
///
/// # Safety
/// `h` must be a live generator handle; non-null pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn imtk_generator_dims(
    h: *const ImtkGenerator,
    audio_dim: *mut usize,
    pose_dim: *mut usize,
    gaze_dim: *mut usize,
    latent_dim: *mut usize,
) -> ImtkStatus {
    guard(|| {
        let c = &h
            .as_ref()
            .ok_or_else(|| invalid("generator handle is null"))?
            .config;
        for (p, v) in [
            (audio_dim, c.audio_dim),
            (pose_dim, c.pose_dim),
            (gaze_dim, c.gaze_dim),
            (latent_dim, c.d_z),
        ] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Samples a `[len, d_z]` motion sequence with `steps` Euler steps and
/// guidance scale `guidance`. Conditions are row-major `[len, dim]`.
///
/// # Safety
/// `h` must be a live handle and every buffer must hold `len` rows of its
/// width; `out_len` must be `len * d_z`.
#[no_mangle]
pub unsafe extern "C" fn imtk_generator_sample(
    h: *const ImtkGenerator,
    audio: *const f32,
    pose: *const f32,
    gaze: *const f32,
    len: usize,
    steps: usize,
    guidance: f64,
    seed: u64,
    out: *mut f32,
    out_len: usize,
) -> ImtkStatus {
    guard(|| {
        let h = h
            .as_ref()
            .ok_or_else(|| invalid("generator handle is null"))?;
        let c = &h.config;
        let conditions = ConditionSet {
            audio: tensor(
                &[len, c.audio_dim],
                slice_arg(audio, len * c.audio_dim, "audio")?,
            )?,
            pose: tensor(
                &[len, c.pose_dim],
                slice_arg(pose, len * c.pose_dim, "pose")?,
            )?,
            gaze: tensor(
                &[len, c.gaze_dim],
                slice_arg(gaze, len * c.gaze_dim, "gaze")?,
            )?,
        };
        let out = out_arg(out, out_len, len * c.d_z, "out")?;
        let sampler = SamplerConfig {
            steps,
            guidance,
            seed,
        };
        let z = euler_sample(&h.generator, &h.params, &conditions, &sampler)?;
        out.copy_from_slice(z.data());
        Ok(())
    })
}

unsafe fn image_pair(
    a: *const f32,
    b: *const f32,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<(Tensor<f32>, Tensor<f32>), Failure> {
    let dims = [channels, height, width];
    let n = channels * height * width;
    Ok((
        tensor(&dims, slice_arg(a, n, "a")?)?,
        tensor(&dims, slice_arg(b, n, "b")?)?,
    ))
}

/// PSNR in dB between two `[channels, height, width]` images with peak
/// value `max_val`; identical images give the 100 dB cap.
///
/// # Safety
/// `a` and `b` must hold `channels * height * width` values; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn imtk_psnr(
    a: *const f32,
    b: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    max_val: f64,
    out: *mut f64,
) -> ImtkStatus {
    guard(|| {
        let (a, b) = image_pair(a, b, channels, height, width)?;
        let v = metrics::psnr(&a, &b, max_val)?;
        *out.as_mut().ok_or_else(|| invalid("out is null"))? = v;
        Ok(())
    })
}

/// SSIM between two `[channels, height, width]` images in `[0, 1]`.
///
/// # Safety
/// As for [`imtk_psnr`].
#[no_mangle]
pub unsafe extern "C" fn imtk_ssim(
    a: *const f32,
    b: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> ImtkStatus {
    guard(|| {
        let (a, b) = image_pair(a, b, channels, height, width)?;
        let v = metrics::ssim(&a, &b)?;
        *out.as_mut().ok_or_else(|| invalid("out is null"))? = v;
        Ok(())
    })
}
