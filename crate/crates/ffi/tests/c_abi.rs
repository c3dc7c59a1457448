use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use imtalker::config::RunConfig;
use imtalker::metrics;
use imtalker::motion_generator::{euler_sample, ConditionSet, SamplerConfig};
use imtalker::numerics::{streams, RngState, Tensor};
use imtalker::training::{GeneratorTrainer, RendererTrainer};
use imtalker_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(imtk_last_error()) }
        .to_string_lossy()
        .into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    config: CString,
    renderer: CString,
    generator: CString,
    cfg: RunConfig,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::toy();
    let config = dir.path().join("run.json");
    std::fs::write(&config, cfg.to_json()).unwrap();
    let r = RendererTrainer::new(&cfg.scale, &cfg.train).unwrap();
    let rpath = dir.path().join("renderer.imtk");
    r.to_checkpoint("x".into()).unwrap().write(&rpath).unwrap();
    let g = GeneratorTrainer::new(&cfg.generator, &cfg.train).unwrap();
    let gpath = dir.path().join("generator.imtk");
    g.to_checkpoint("x".into()).unwrap().write(&gpath).unwrap();
    Fixture {
        config: cstr(&config),
        renderer: cstr(&rpath),
        generator: cstr(&gpath),
        cfg,
        _dir: dir,
    }
}

#[test]
fn renderer_matches_library_call() {
    let fx = fixture();
    let mut h = ptr::null_mut();
    let st = unsafe { imtk_renderer_open(fx.config.as_ptr(), fx.renderer.as_ptr(), &mut h) };
    assert_eq!(st, ImtkStatus::Ok, "{}", last_error());
    let r = unsafe { imtk_renderer_input_res(h) };
    let ro = unsafe { imtk_renderer_output_res(h) };
    assert_eq!((r, ro), (fx.cfg.scale.input_res, fx.cfg.scale.output_res()));

    let mut rng = RngState(3).stream(streams::DATA);
    let s = Tensor::<f32>::uniform(&[3, r, r], -1.0, 1.0, &mut rng);
    let d = Tensor::<f32>::uniform(&[3, r, r], -1.0, 1.0, &mut rng);
    let mut out = vec![0.0f32; 3 * ro * ro];
    let st = unsafe {
        imtk_renderer_render(
            h,
            s.data().as_ptr(),
            d.data().as_ptr(),
            out.as_mut_ptr(),
            out.len(),
        )
    };
    assert_eq!(st, ImtkStatus::Ok, "{}", last_error());

    let ck = imtalker::training::Checkpoint::read(fx.renderer.to_str().unwrap()).unwrap();
    let (renderer, ps) = imtalker::training::renderer::load_renderer(&fx.cfg.scale, &ck).unwrap();
    let expect = renderer.render_frame(&ps, &s, &d).unwrap();
    assert_eq!(out.as_slice(), expect.data());

    let st = unsafe {
        imtk_renderer_render(
            h,
            s.data().as_ptr(),
            d.data().as_ptr(),
            out.as_mut_ptr(),
            out.len() - 1,
        )
    };
    assert_eq!(st, ImtkStatus::Shape);
    assert!(last_error().contains("required"));
    let st = unsafe {
        imtk_renderer_render(
            h,
            ptr::null(),
            d.data().as_ptr(),
            out.as_mut_ptr(),
            out.len(),
        )
    };
    assert_eq!(st, ImtkStatus::InvalidArgument);

    let dz = unsafe { imtk_renderer_latent_dim(h) };
    let z = vec![0.1f32; dz];
    let st = unsafe {
        imtk_renderer_render_latent(
            h,
            s.data().as_ptr(),
            z.as_ptr(),
            dz,
            out.as_mut_ptr(),
            out.len(),
        )
    };
    assert_eq!(st, ImtkStatus::Ok, "{}", last_error());
    assert!(last_error().is_empty());
    let st = unsafe {
        imtk_renderer_render_latent(
            h,
            s.data().as_ptr(),
            z.as_ptr(),
            dz - 1,
            out.as_mut_ptr(),
            out.len(),
        )
    };
    assert_eq!(st, ImtkStatus::Shape);
    unsafe { imtk_renderer_free(h) };
}

#[test]
fn generator_matches_library_call() {
    let fx = fixture();
    let mut h = ptr::null_mut();
    let st = unsafe { imtk_generator_open(fx.config.as_ptr(), fx.generator.as_ptr(), &mut h) };
    assert_eq!(st, ImtkStatus::Ok, "{}", last_error());
    let (mut a, mut p, mut g, mut dz) = (0, 0, 0, 0);
    assert_eq!(
        unsafe { imtk_generator_dims(h, &mut a, &mut p, &mut g, &mut dz) },
        ImtkStatus::Ok
    );
    let gc = &fx.cfg.generator;
    assert_eq!(
        (a, p, g, dz),
        (gc.audio_dim, gc.pose_dim, gc.gaze_dim, gc.d_z)
    );

    let len = 5;
    let mut rng = RngState(4).stream(streams::CONDITIONS);
    let c = ConditionSet::<f32>::synthetic(len, gc, &mut rng);
    let mut out = vec![0.0f32; len * dz];
    let st = unsafe {
        imtk_generator_sample(
            h,
            c.audio.data().as_ptr(),
            c.pose.data().as_ptr(),
            c.gaze.data().as_ptr(),
            len,
            4,
            2.0,
            9,
            out.as_mut_ptr(),
            out.len(),
        )
    };
    assert_eq!(st, ImtkStatus::Ok, "{}", last_error());
    let ck = imtalker::training::Checkpoint::read(fx.generator.to_str().unwrap()).unwrap();
    let (gen, ps) = imtalker::training::generator::load_generator(gc, &ck).unwrap();
    let sc = SamplerConfig {
        steps: 4,
        guidance: 2.0,
        seed: 9,
    };
    assert_eq!(
        out.as_slice(),
        euler_sample(&gen, &ps, &c, &sc).unwrap().data()
    );

    let st = unsafe {
        imtk_generator_sample(
            h,
            c.audio.data().as_ptr(),
            c.pose.data().as_ptr(),
            c.gaze.data().as_ptr(),
            len,
            0,
            1.0,
            0,
            out.as_mut_ptr(),
            out.len(),
        )
    };
    assert_eq!(st, ImtkStatus::Config);
    unsafe { imtk_generator_free(h) };
}

#[test]
fn open_reports_missing_and_bad_inputs() {
    let fx = fixture();
    let mut h = ptr::null_mut();
    let missing = CString::new("/nonexistent/renderer.imtk").unwrap();
    let st = unsafe { imtk_renderer_open(fx.config.as_ptr(), missing.as_ptr(), &mut h) };
    assert_eq!(st, ImtkStatus::MissingArtifact);
    assert!(h.is_null());
    assert!(last_error().contains("nonexistent"));
    let st = unsafe { imtk_renderer_open(ptr::null(), fx.renderer.as_ptr(), &mut h) };
    assert_eq!(st, ImtkStatus::InvalidArgument);
    // A generator checkpoint is not a renderer.
    let st = unsafe { imtk_renderer_open(fx.config.as_ptr(), fx.generator.as_ptr(), &mut h) };
    assert_ne!(st, ImtkStatus::Ok);
    assert!(h.is_null());
    unsafe { imtk_renderer_free(ptr::null_mut()) };
    unsafe { imtk_generator_free(ptr::null_mut()) };
}

#[test]
fn metrics_match_library() {
    let mut rng = RngState(5).stream(streams::DATA);
    let a = Tensor::<f32>::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
    let b = Tensor::<f32>::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
    let (mut p, mut s) = (0.0, 0.0);
    assert_eq!(
        unsafe { imtk_psnr(a.data().as_ptr(), b.data().as_ptr(), 3, 16, 16, 1.0, &mut p) },
        ImtkStatus::Ok
    );
    assert_eq!(
        unsafe { imtk_ssim(a.data().as_ptr(), b.data().as_ptr(), 3, 16, 16, &mut s) },
        ImtkStatus::Ok
    );
    assert_eq!(p, metrics::psnr(&a, &b, 1.0).unwrap());
    assert_eq!(s, metrics::ssim(&a, &b).unwrap());
    let st = unsafe { imtk_ssim(a.data().as_ptr(), b.data().as_ptr(), 3, 4, 4, &mut s) };
    assert_eq!(st, ImtkStatus::Shape, "{}", last_error());
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(imtk_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"imtalker.h\"\nint main(void) { ImtkRenderer *h = 0; return (int)imtk_renderer_input_res(h) + IMTK_STATUS_SHAPE; }\n",
    )
    .unwrap();
    let Ok(status) = Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&header)
        .arg(&src)
        .status()
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(status.success());
}
