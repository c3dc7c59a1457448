//! Command-line front end. [`run`] parses arguments, dispatches and maps
//! errors to exit codes: 0 ok, 1 runtime failure, 2 configuration or usage
//! error, 3 missing artifact, 4 shape mismatch.

pub mod bench;

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image_io::{list_images, read_image, to_unit, write_image, write_ppm};
use crate::metrics::{psnr, ssim};
use crate::motion_generator::{euler_sample, ConditionSet, SamplerConfig};
use crate::numerics::{Tensor, TensorFile};
use crate::renderer::Renderer;
use crate::training::generator::{
    clip_conditions, encode_clips, load_generator, params_as_latents, sample_clip_batch,
};
use crate::training::renderer::load_renderer;
use crate::training::{
    grad_check_all, Checkpoint, GeneratorTrainer, GradCheckConfig, RenderBatch, RendererTrainer,
    SynthDataset,
};
use bench::{run_bench, write_csv, BenchConfig, Kernel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_SHAPE: i32 = 4;

pub const RENDERER_CKPT: &str = "renderer.imtk";
pub const GENERATOR_CKPT: &str = "generator.imtk";

#[derive(Debug, Parser)]
#[command(
    name = "imtalker",
    version,
    about = "Talking-face renderer and motion generator"
)]
pub struct Cli {
    /// Seed for every random choice; overrides the seeds in the config.
    #[arg(long, global = true, env = "IMTK_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Renderer,
    Generator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Video,
    Audio,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a complete desk-scale config to edit.
    InitConfig {
        /// Destination JSON file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the synthetic portrait dataset.
    SynthData {
        /// Run config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory; must be empty or absent. Defaults to paths.data.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the renderer or the motion generator.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        /// Run config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory. Defaults to paths.data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory for checkpoints and the loss CSV. Defaults to paths.runs.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Renderer checkpoint whose motion encoder provides the generator
        /// targets. Defaults to <out>/renderer.imtk.
        #[arg(long)]
        renderer: Option<PathBuf>,
        /// Train the generator on true motion parameters instead of encoded
        /// latents (no renderer needed).
        #[arg(long)]
        param_latents: bool,
        /// Stop after this many total steps instead of train.steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Render frames driven by a video or by audio-side conditions.
    Infer {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Run config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Source image tensor file, [3, R, R].
        #[arg(long)]
        source: PathBuf,
        /// Driving frames (video mode): an image file or a directory of them.
        #[arg(long)]
        driving: Option<PathBuf>,
        /// Condition file (audio mode) holding audio, pose and gaze, [L, D] each.
        #[arg(long)]
        conditions: Option<PathBuf>,
        /// Renderer checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Generator checkpoint (audio mode).
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Euler steps (audio mode). Defaults to sampler.steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance scale (audio mode). Defaults to sampler.guidance.
        #[arg(long)]
        guidance: Option<f64>,
        /// Also write PPM images.
        #[arg(long)]
        ppm: bool,
    },
    /// Time a kernel across sizes and write CSV.
    Bench {
        #[arg(long, value_enum)]
        kernel: Kernel,
        /// Comma-separated sizes: token counts N (square grids), or the
        /// input resolution for full_frame.
        #[arg(long, value_delimiter = ',', default_values_t = [256, 1024, 4096])]
        sizes: Vec<usize>,
        /// Kept entries per row for sparse_resample.
        #[arg(long, default_value_t = 8)]
        k: usize,
        /// Channels per token.
        #[arg(long, default_value_t = 32)]
        channels: usize,
        /// Window side for window_attn.
        #[arg(long, default_value_t = 8)]
        window: usize,
        /// Timed repetitions per size.
        #[arg(long, default_value_t = 20)]
        reps: usize,
        /// Untimed warmup runs per size.
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of every op and of
    /// the composed losses.
    GradCheck {
        /// Optional JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// PSNR and SSIM between same-named images of two directories.
    Eval {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) => EXIT_CONFIG,
        Error::MissingArtifact(_) => EXIT_MISSING,
        Error::Shape { .. } => EXIT_SHAPE,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::read(path)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
        cfg.train.seed = s;
        cfg.sampler.seed = s;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::InitConfig { out } => {
            let mut cfg = RunConfig::toy();
            if let Some(s) = seed {
                cfg.data.seed = s;
                cfg.train.seed = s;
                cfg.sampler.seed = s;
            }
            fs::write(out, cfg.to_json())?;
            Ok(())
        }
        Command::SynthData { config, out } => {
            let cfg = load_config(&config, seed)?;
            let out = out.unwrap_or_else(|| cfg.paths.data.clone().into());
            synth_data(&cfg, &out)
        }
        Command::Train {
            stage,
            config,
            data,
            out,
            resume,
            renderer,
            param_latents,
            steps,
        } => {
            let cfg = load_config(&config, seed)?;
            let data = data.unwrap_or_else(|| cfg.paths.data.clone().into());
            let out = out.unwrap_or_else(|| cfg.paths.runs.clone().into());
            let steps = steps.unwrap_or(cfg.train.steps);
            fs::create_dir_all(&out)?;
            match stage {
                Stage::Renderer => train_renderer(&cfg, &data, &out, resume.as_deref(), steps),
                Stage::Generator => {
                    let renderer = renderer.unwrap_or_else(|| out.join(RENDERER_CKPT));
                    let source = (!param_latents).then_some(renderer.as_path());
                    train_generator(&cfg, &data, &out, resume.as_deref(), source, steps)
                }
            }
        }
        Command::Infer {
            mode,
            config,
            source,
            driving,
            conditions,
            checkpoint,
            generator,
            out,
            steps,
            guidance,
            ppm,
        } => {
            let cfg = load_config(&config, seed)?;
            let mut sampler = cfg.sampler;
            sampler.steps = steps.unwrap_or(sampler.steps);
            sampler.guidance = guidance.unwrap_or(sampler.guidance);
            let req = InferRequest {
                source: &source,
                checkpoint: &checkpoint,
                out: &out,
                ppm,
            };
            match mode {
                Mode::Video => {
                    let driving = driving
                        .ok_or_else(|| Error::Config("video mode needs --driving".into()))?;
                    infer_video(&cfg, &req, &driving)
                }
                Mode::Audio => {
                    let conditions = conditions
                        .ok_or_else(|| Error::Config("audio mode needs --conditions".into()))?;
                    let generator = generator
                        .ok_or_else(|| Error::Config("audio mode needs --generator".into()))?;
                    infer_audio(&cfg, &req, &conditions, &generator, &sampler)
                }
            }
        }
        Command::Bench {
            kernel,
            sizes,
            k,
            channels,
            window,
            reps,
            warmup,
            out,
        } => {
            let cfg = BenchConfig {
                k,
                channels,
                window,
                reps,
                warmup,
                seed: seed.unwrap_or(0),
            };
            let rows = run_bench(kernel, &sizes, &cfg)?;
            write_csv(&out, &rows)
        }
        Command::GradCheck { out } => {
            let cfg = GradCheckConfig {
                seed: seed.unwrap_or(0),
                ..GradCheckConfig::default()
            };
            let report = grad_check_all(&cfg)?;
            print!("{report}");
            if let Some(out) = out {
                fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
            }
            report.into_result().map(drop)
        }
        Command::Eval {
            reference,
            generated,
            out,
        } => eval_dirs(&reference, &generated, &out),
    }
}

pub fn synth_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        return Err(Error::Config(format!(
            "output directory {} is not empty",
            out.display()
        )));
    }
    let ds = SynthDataset::generate(
        cfg.data.seed,
        cfg.data.n_identities,
        cfg.data.frames_per_identity,
        cfg.scale.output_res(),
    )?;
    ds.write_dir(out)
}

fn csv_writer(path: &Path, append: bool) -> Result<csv::Writer<fs::File>> {
    let exists = append && path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(exists)
        .write(true)
        .truncate(!exists)
        .open(path)?;
    Ok(csv::WriterBuilder::new()
        .has_headers(!exists)
        .from_writer(file))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::from(e))
}

fn resume_checkpoint(path: &Path, expected_hash: &str) -> Result<Checkpoint> {
    let ck = Checkpoint::read(path)?;
    if ck.meta.config_hash != expected_hash {
        return Err(Error::Config(format!(
            "checkpoint {} was written with a different configuration",
            path.display()
        )));
    }
    Ok(ck)
}

fn checkpoint_due(step: u64, every: usize) -> bool {
    every > 0 && step.is_multiple_of(every as u64)
}

pub fn train_renderer(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    steps: usize,
) -> Result<()> {
    let ds = SynthDataset::read_dir(data)?;
    let mut trainer = RendererTrainer::new(&cfg.scale, &cfg.train)?;
    let hash = trainer.config_hash()?;
    if let Some(path) = resume {
        trainer = RendererTrainer::from_checkpoint(
            &cfg.scale,
            &cfg.train,
            &resume_checkpoint(path, &hash)?,
        )?;
    }
    let mut log = csv_writer(&out.join("renderer_losses.csv"), resume.is_some())?;
    while trainer.step < steps as u64 {
        let batch = RenderBatch::sample(
            &ds,
            cfg.train.batch,
            &cfg.scale,
            cfg.train.seed,
            trainer.step,
        )?;
        let row = trainer.train_step(&batch)?;
        log.serialize(row).map_err(csv_err)?;
        if checkpoint_due(trainer.step, cfg.train.checkpoint_every) {
            log.flush()?;
            let name = format!("renderer_step{:06}.imtk", trainer.step);
            trainer.to_checkpoint(hash.clone())?.write(out.join(name))?;
        }
    }
    log.flush()?;
    trainer.to_checkpoint(hash)?.write(out.join(RENDERER_CKPT))
}

#[derive(Serialize)]
struct GenRow {
    step: u64,
    fm_loss: f64,
}

/// Per-clip conditions and target latents for generator training.
pub fn generator_data(
    cfg: &RunConfig,
    ds: &SynthDataset,
    renderer: Option<&Path>,
) -> Result<(Vec<ConditionSet<f32>>, Tensor<f32>)> {
    let latents = match renderer {
        Some(path) => {
            if !path.exists() {
                return Err(Error::MissingArtifact(format!(
                    "renderer checkpoint {} (train the renderer first or pass --param-latents)",
                    path.display()
                )));
            }
            let (r, ps) = load_renderer(&cfg.scale, &Checkpoint::read(path)?)?;
            encode_clips(&r, &ps, ds)?
        }
        None => params_as_latents(ds, cfg.generator.d_z),
    };
    let conds = (0..ds.n_identities())
        .map(|i| clip_conditions(ds, i, &cfg.generator, cfg.data.seed))
        .collect();
    Ok((conds, latents))
}

pub fn train_generator(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    renderer: Option<&Path>,
    steps: usize,
) -> Result<()> {
    let ds = SynthDataset::read_dir(data)?;
    let (conds, latents) = generator_data(cfg, &ds, renderer)?;
    let mut trainer = GeneratorTrainer::new(&cfg.generator, &cfg.train)?;
    let hash = trainer.config_hash()?;
    if let Some(path) = resume {
        trainer = GeneratorTrainer::from_checkpoint(
            &cfg.generator,
            &cfg.train,
            &resume_checkpoint(path, &hash)?,
        )?;
    }
    let mut log = csv_writer(&out.join("generator_losses.csv"), resume.is_some())?;
    while trainer.step < steps as u64 {
        let batch = sample_clip_batch(
            &conds,
            &latents,
            cfg.train.batch,
            cfg.train.seed,
            trainer.step,
        )?;
        let fm_loss = trainer.train_step(&batch)?;
        log.serialize(GenRow {
            step: trainer.step,
            fm_loss,
        })
        .map_err(csv_err)?;
        if checkpoint_due(trainer.step, cfg.train.checkpoint_every) {
            log.flush()?;
            let name = format!("generator_step{:06}.imtk", trainer.step);
            trainer.to_checkpoint(hash.clone())?.write(out.join(name))?;
        }
    }
    log.flush()?;
    trainer.to_checkpoint(hash)?.write(out.join(GENERATOR_CKPT))
}

pub struct InferRequest<'a> {
    pub source: &'a Path,
    pub checkpoint: &'a Path,
    pub out: &'a Path,
    pub ppm: bool,
}

fn write_frames(req: &InferRequest, frames: &[Tensor<f32>]) -> Result<()> {
    fs::create_dir_all(req.out)?;
    for (i, f) in frames.iter().enumerate() {
        write_image(req.out.join(format!("frame_{i:04}.imtk")), f)?;
        if req.ppm {
            write_ppm(req.out.join(format!("frame_{i:04}.ppm")), f)?;
        }
    }
    Ok(())
}

fn load_source(
    cfg: &RunConfig,
    req: &InferRequest,
) -> Result<(Renderer, crate::numerics::ParamStore<f32>, Tensor<f32>)> {
    let (renderer, ps) = load_renderer(&cfg.scale, &Checkpoint::read(req.checkpoint)?)?;
    let source = read_image(req.source)?;
    Ok((renderer, ps, source))
}

pub fn infer_video(cfg: &RunConfig, req: &InferRequest, driving: &Path) -> Result<()> {
    let (renderer, ps, source) = load_source(cfg, req)?;
    let files = if driving.is_dir() {
        list_images(driving)?
    } else {
        vec![driving.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "no driving frames in {}",
            driving.display()
        )));
    }
    let mut frames = Vec::with_capacity(files.len());
    for f in &files {
        frames.push(renderer.render_frame(&ps, &source, &read_image(f)?)?);
    }
    write_frames(req, &frames)
}

pub fn infer_audio(
    cfg: &RunConfig,
    req: &InferRequest,
    conditions: &Path,
    generator: &Path,
    sampler: &SamplerConfig,
) -> Result<()> {
    let (renderer, ps, source) = load_source(cfg, req)?;
    let (gen, gps) = load_generator(&cfg.generator, &Checkpoint::read(generator)?)?;
    let file = TensorFile::read(conditions)?;
    let c = ConditionSet {
        audio: file.require("audio")?.to(),
        pose: file.require("pose")?.to(),
        gaze: file.require("gaze")?.to(),
    };
    let z = euler_sample(&gen, &gps, &c, sampler)?;
    let len = z.dims()[0];
    let mut frames = Vec::with_capacity(len);
    for i in 0..len {
        let zi = z.slice_first(i, 1)?.reshape(&[z.dims()[1]])?;
        frames.push(renderer.render_latent(&ps, &source, &zi)?);
    }
    write_frames(req, &frames)
}

#[derive(Serialize)]
struct EvalRow {
    file: String,
    psnr_db: f64,
    ssim: f64,
}

/// One row per reference image; images are mapped from `[-1, 1]` to
/// `[0, 1]` before scoring.
pub fn eval_dirs(reference: &Path, generated: &Path, out: &Path) -> Result<()> {
    let files = list_images(reference)?;
    let mut w = csv::Writer::from_path(out).map_err(csv_err)?;
    for f in &files {
        let name = f
            .file_name()
            .expect("listed file")
            .to_string_lossy()
            .into_owned();
        let other = generated.join(&name);
        if !other.exists() {
            return Err(Error::MissingArtifact(format!(
                "generated image {}",
                other.display()
            )));
        }
        let (a, b) = (to_unit(&read_image(f)?), to_unit(&read_image(&other)?));
        w.serialize(EvalRow {
            file: name,
            psnr_db: psnr(&a, &b, 1.0)?,
            ssim: ssim(&a, &b)?,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
