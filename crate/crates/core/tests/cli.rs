use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use imtalker::config::RunConfig;
use imtalker::image_io::{read_image, write_image};
use imtalker::numerics::{streams, RngState, Tensor, TensorFile};
use tempfile::TempDir;

fn imtalker(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imtalker"))
        .args(args)
        .env_remove("IMTK_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A toy config shrunk to 2 identities × 4 frames and a few steps.
fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::toy();
    cfg.data.n_identities = 2;
    cfg.data.frames_per_identity = 4;
    cfg.train.batch = 2;
    cfg.train.steps = 3;
    cfg.train.checkpoint_every = 2;
    let path = dir.join("run.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn synth(dir: &Path, config: &Path) -> PathBuf {
    let data = dir.join("data");
    let o = imtalker(&["synth-data", "--config", p(config), "--out", p(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    data
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(|v| v.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

fn file_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = walk(dir)
        .into_iter()
        .map(|f| {
            (
                f.strip_prefix(dir).unwrap().display().to_string(),
                fs::read(&f).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[test]
fn help_exits_zero_and_lists_flags() {
    let o = imtalker(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in [
        "synth-data",
        "train",
        "infer",
        "bench",
        "grad-check",
        "eval",
        "--seed",
    ] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
    let o = imtalker(&["train", "--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in [
        "--stage",
        "--config",
        "--resume",
        "--data",
        "--out",
        "--renderer",
    ] {
        assert!(text.contains(flag), "{flag} missing from train help");
    }
    assert_eq!(code(&imtalker(&["train", "--bogus"])), 2);
}

#[test]
fn missing_config_key_is_named() {
    let dir = TempDir::new().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&RunConfig::toy().to_json()).unwrap();
    v["train"].as_object_mut().unwrap().remove("batch");
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, v.to_string()).unwrap();
    let o = imtalker(&[
        "synth-data",
        "--config",
        p(&cfg),
        "--out",
        p(&dir.path().join("d")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("batch"), "{}", stderr(&o));
}

#[test]
fn synth_data_is_deterministic_and_refuses_non_empty_out() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let a = synth(dir.path(), &cfg);
    let b = dir.path().join("again");
    assert_eq!(
        code(&imtalker(&[
            "synth-data",
            "--config",
            p(&cfg),
            "--out",
            p(&b)
        ])),
        0
    );
    let files = file_bytes(&a);
    assert_eq!(files, file_bytes(&b));
    // 2 identities × 4 frames plus the motion tensor.
    assert_eq!(files.len(), 9);

    let o = imtalker(&["synth-data", "--config", p(&cfg), "--out", p(&a)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let c = dir.path().join("seeded");
    let o = imtalker(&[
        "--seed",
        "5",
        "synth-data",
        "--config",
        p(&cfg),
        "--out",
        p(&c),
    ]);
    assert_eq!(code(&o), 0);
    assert_ne!(file_bytes(&a), file_bytes(&c));
}

#[test]
fn renderer_training_logs_checkpoints_and_resumes() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let data = synth(dir.path(), &cfg);
    let run = dir.path().join("run");
    let train = |extra: &[&str]| {
        let mut args = vec![
            "train",
            "--stage",
            "renderer",
            "--config",
            p(&cfg),
            "--data",
            p(&data),
            "--out",
            p(&run),
        ];
        args.extend_from_slice(extra);
        imtalker(&args)
    };
    let o = train(&["--steps", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(run.join("renderer_step000002.imtk").exists());
    assert!(run.join("renderer.imtk").exists());
    let csv = run.join("renderer_losses.csv");
    let (header, rows) = csv_rows(&csv);
    assert_eq!(
        header,
        ["step", "rec", "lpips", "gan", "dist", "total", "disc"]
    );
    assert_eq!(rows.len(), 2);

    let o = train(&["--resume", p(&run.join("renderer.imtk"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, rows) = csv_rows(&csv);
    assert_eq!(
        rows.iter().map(|r| r[0]).collect::<Vec<_>>(),
        [1.0, 2.0, 3.0]
    );
    let w = RunConfig::toy().train.weights;
    for r in &rows {
        let total = w.lambda_rec * r[1]
            + w.lambda_lpips * r[2]
            + w.lambda_gan * r[3]
            + w.lambda_dist * r[4];
        assert!((total - r[5]).abs() <= 1e-6 * (1.0 + r[5].abs()), "{r:?}");
    }

    // A straight 3-step run reaches the same weights as 2 + resume 1.
    let straight = dir.path().join("straight");
    let o = imtalker(&[
        "train",
        "--stage",
        "renderer",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&straight),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(run.join("renderer.imtk")).unwrap(),
        fs::read(straight.join("renderer.imtk")).unwrap()
    );
    assert_eq!(
        fs::read(&csv).unwrap(),
        fs::read(straight.join("renderer_losses.csv")).unwrap()
    );

    // Resuming under a different trajectory is a config error.
    let mut other: RunConfig = RunConfig::read(&cfg).unwrap();
    other.train.lr *= 2.0;
    let other_path = dir.path().join("other.json");
    fs::write(&other_path, other.to_json()).unwrap();
    let o = imtalker(&[
        "train",
        "--stage",
        "renderer",
        "--config",
        p(&other_path),
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--resume",
        p(&run.join("renderer.imtk")),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn generator_stage_needs_renderer() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let data = synth(dir.path(), &cfg);
    let run = dir.path().join("run");
    let gen = |extra: &[&str]| {
        let mut args = vec![
            "train",
            "--stage",
            "generator",
            "--config",
            p(&cfg),
            "--data",
            p(&data),
            "--out",
            p(&run),
        ];
        args.extend_from_slice(extra);
        imtalker(&args)
    };
    let o = gen(&[]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let o = gen(&["--param-latents"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = csv_rows(&run.join("generator_losses.csv"));
    assert_eq!(header, ["step", "fm_loss"]);
    assert_eq!(rows.len(), 3);
    assert!(run.join("generator.imtk").exists());

    let o = imtalker(&[
        "train",
        "--stage",
        "renderer",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--steps",
        "1",
    ]);
    assert_eq!(code(&o), 0);
    let enc = dir.path().join("enc");
    let o = imtalker(&[
        "train",
        "--stage",
        "generator",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&enc),
        "--renderer",
        p(&run.join("renderer.imtk")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

struct Trained {
    dir: TempDir,
    cfg: PathBuf,
    renderer: PathBuf,
    generator: PathBuf,
}

fn trained() -> Trained {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let data = synth(dir.path(), &cfg);
    let run = dir.path().join("run");
    for stage in ["renderer", "generator"] {
        let o = imtalker(&[
            "train",
            "--stage",
            stage,
            "--config",
            p(&cfg),
            "--data",
            p(&data),
            "--out",
            p(&run),
            "--steps",
            "1",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    Trained {
        renderer: run.join("renderer.imtk"),
        generator: run.join("generator.imtk"),
        cfg,
        dir,
    }
}

fn random_image(res: usize, seed: u64) -> Tensor<f32> {
    let mut rng = RngState(seed).stream(streams::DATA);
    Tensor::uniform(&[3, res, res], -1.0, 1.0, &mut rng)
}

#[test]
fn infer_video_and_audio() {
    let t = trained();
    let d = t.dir.path();
    let res = RunConfig::toy().scale.input_res;
    let source = d.join("source.imtk");
    write_image(&source, &random_image(res, 1)).unwrap();
    let driving = d.join("driving");
    fs::create_dir(&driving).unwrap();
    for k in 0..3 {
        write_image(
            driving.join(format!("d{k}.imtk")),
            &random_image(res, 10 + k),
        )
        .unwrap();
    }
    let out = d.join("video");
    let o = imtalker(&[
        "infer",
        "--mode",
        "video",
        "--config",
        p(&t.cfg),
        "--source",
        p(&source),
        "--driving",
        p(&driving),
        "--checkpoint",
        p(&t.renderer),
        "--out",
        p(&out),
        "--ppm",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out_res = RunConfig::toy().scale.output_res();
    for k in 0..3 {
        let img = read_image(out.join(format!("frame_{k:04}.imtk"))).unwrap();
        assert_eq!(img.dims(), [3, out_res, out_res]);
        assert!(out.join(format!("frame_{k:04}.ppm")).exists());
    }

    let wrong = d.join("wrong.imtk");
    write_image(&wrong, &random_image(res / 2, 2)).unwrap();
    let o = imtalker(&[
        "infer",
        "--mode",
        "video",
        "--config",
        p(&t.cfg),
        "--source",
        p(&wrong),
        "--driving",
        p(&driving),
        "--checkpoint",
        p(&t.renderer),
        "--out",
        p(&d.join("bad")),
    ]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    let g = RunConfig::toy().generator;
    let len = 5;
    let mut rng = RngState(3).stream(streams::CONDITIONS);
    let mut f = TensorFile::new();
    f.push(
        "audio",
        Tensor::<f32>::randn(&[len, g.audio_dim], 1.0, &mut rng),
    )
    .unwrap();
    f.push(
        "pose",
        Tensor::<f32>::randn(&[len, g.pose_dim], 1.0, &mut rng),
    )
    .unwrap();
    f.push(
        "gaze",
        Tensor::<f32>::randn(&[len, g.gaze_dim], 1.0, &mut rng),
    )
    .unwrap();
    let conds = d.join("conds.imtk");
    f.write(&conds).unwrap();
    let audio = |steps: &str, out: &Path, seed: &str| {
        imtalker(&[
            "--seed",
            seed,
            "infer",
            "--mode",
            "audio",
            "--config",
            p(&t.cfg),
            "--source",
            p(&source),
            "--conditions",
            p(&conds),
            "--checkpoint",
            p(&t.renderer),
            "--generator",
            p(&t.generator),
            "--out",
            p(out),
            "--steps",
            steps,
        ])
    };
    for steps in ["1", "10"] {
        let out = d.join(format!("audio{steps}"));
        let o = audio(steps, &out, "4");
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_eq!(fs::read_dir(&out).unwrap().count(), len);
    }
    let again = d.join("audio10b");
    assert_eq!(code(&audio("10", &again, "4")), 0);
    assert_eq!(file_bytes(&d.join("audio10")), file_bytes(&again));

    let o = imtalker(&[
        "infer",
        "--mode",
        "audio",
        "--config",
        p(&t.cfg),
        "--source",
        p(&source),
        "--conditions",
        p(&conds),
        "--checkpoint",
        p(&t.renderer),
        "--generator",
        p(&d.join("none.imtk")),
        "--out",
        p(&d.join("x")),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn eval_on_identical_dirs() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    fs::create_dir(&a).unwrap();
    for k in 0..4 {
        write_image(a.join(format!("frame_{k:04}.imtk")), &random_image(16, k)).unwrap();
    }
    let out = dir.path().join("eval.csv");
    let o = imtalker(&[
        "eval",
        "--reference",
        p(&a),
        "--generated",
        p(&a),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut r = csv::Reader::from_path(&out).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["file", "psnr_db", "ssim"]);
    let rows: Vec<_> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        assert_eq!(row[1].parse::<f64>().unwrap(), 100.0);
        assert!((row[2].parse::<f64>().unwrap() - 1.0).abs() < 1e-9);
    }
    let o = imtalker(&[
        "eval",
        "--reference",
        p(&a),
        "--generated",
        p(&dir.path().join("none")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn bench_writes_fixed_schema() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("bench.csv");
    let o = imtalker(&[
        "bench",
        "--kernel",
        "sparse_resample",
        "--sizes",
        "64,256",
        "--reps",
        "3",
        "--warmup",
        "1",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("kernel,N,k,median_ms,p90_ms,max_abs_diff")
    );
    assert_eq!(
        lines.filter(|l| l.starts_with("sparse_resample,")).count(),
        2
    );
}

#[test]
fn grad_check_exits_zero() {
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("grad.json");
    let o = imtalker(&["grad-check", "--out", p(&report)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(v.is_object());
}
