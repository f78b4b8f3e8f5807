//! The `sketchmesh` command line: dataset generation, training, inference,
//! evaluation, the ablation matrix and diagnostic rendering.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use image::GrayImage;
use sketchmesh::checkpoint::Checkpoint;
use sketchmesh::dataset::{build_dataset, fill_sketch, Dataset, DatasetConfig};
use sketchmesh::evalkit::{ablation_matrix, evaluate_threads, evaluate_with, PoseMode};
use sketchmesh::geometry::obj::{read_obj, write_obj};
use sketchmesh::geometry::{CameraPose, Projection};
use sketchmesh::networks::NetworkConfig;
use sketchmesh::pipeline::{infer, round_trip_iou, train, Supervision, TrainConfig};
use sketchmesh::rasterizer::{hard_rasterize, soft_rasterize, SilhouetteMap, SoftSettings};
use sketchmesh::Error;

/// Worker threads for evaluation.
pub const THREADS_ENV: &str = "SKETCHMESH_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "sketchmesh", version, about = "Single-sketch 3D mesh modeling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural dataset.
    Gen(GenArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Reconstruct a mesh and viewpoint from a sketch PNG.
    Infer(InferArgs),
    /// Voxel IoU of a checkpoint on the test split.
    Eval(EvalArgs),
    /// Train and evaluate the baseline, +RPS and +RPS+CD configurations.
    Ablate(AblateArgs),
    /// Render hard and soft silhouettes of an OBJ.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub shapes: usize,
    #[arg(long, default_value_t = 4)]
    pub poses: usize,
    #[arg(long, default_value_t = 64)]
    pub res: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SupervisionArg {
    Gt,
    Pred,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Gt,
    Pred,
}

impl From<ModeArg> for PoseMode {
    fn from(m: ModeArg) -> PoseMode {
        match m {
            ModeArg::Gt => PoseMode::Gt,
            ModeArg::Pred => PoseMode::Pred,
        }
    }
}

/// Options shared by `train` and `ablate`.
#[derive(Debug, Args)]
pub struct TrainOptions {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 3)]
    pub views: usize,
    #[arg(long, default_value_t = 64)]
    pub res: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = SupervisionArg::Pred)]
    pub supervision: SupervisionArg,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    /// Use the reduced desk-scale network widths.
    #[arg(long)]
    pub desk: bool,
    /// Write a checkpoint every this many epochs (0: only the final one).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
}

impl TrainOptions {
    fn config(&self, rps: bool, cd: bool) -> TrainConfig {
        let mut network = if self.desk { NetworkConfig::desk() } else { NetworkConfig::default() };
        if self.res != network.resolution {
            network.resolution = self.res;
            network.discriminator.max_resolution = self.res;
            network.discriminator.base_resolution = (self.res / 4).max(4);
        }
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            views: self.views,
            seed: self.seed,
            batch_size: self.batch_size,
            supervision: match self.supervision {
                SupervisionArg::Gt => Supervision::Gt,
                SupervisionArg::Pred => Supervision::Pred,
            },
            rps,
            cd,
            checkpoint_every: self.checkpoint_every,
            network,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub opts: TrainOptions,
    /// Disable random pose sampling (and with it every critic step).
    #[arg(long)]
    pub no_rps: bool,
    /// Replace the progressive convolutional critic by an MLP critic.
    #[arg(long)]
    pub no_cd: bool,
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out_mesh: PathBuf,
    #[arg(long)]
    pub out_pose: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate; required unless --gt-self is given.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Pred)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 32)]
    pub voxel_res: usize,
    /// Score the ground-truth meshes against themselves.
    #[arg(long)]
    pub gt_self: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub opts: TrainOptions,
    /// Pose mode of the printed table; the JSON report holds both.
    #[arg(long, value_enum, default_value_t = ModeArg::Gt)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 32)]
    pub voxel_res: usize,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub obj: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub elevation: f64,
    #[arg(long, default_value_t = 0.0)]
    pub azimuth: f64,
    #[arg(long, default_value_t = CameraPose::DEFAULT_DISTANCE)]
    pub distance: f64,
    #[arg(long, default_value_t = 64)]
    pub res: usize,
    /// Soft rasterizer sharpness; repeat for a sweep.
    #[arg(long, num_args = 1.., default_values_t = vec![1e-4])]
    pub sigma: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit code for a library error.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Shape(_)) => EXIT_USAGE,
        Some(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
        Some(Error::NonFinite { .. } | Error::Domain(_) | Error::Graph(_) | Error::Render(_)) => EXIT_NUMERIC,
        Some(_) => EXIT_DATA,
        None => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Messages go to stdout, errors to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Render(a) => cmd_render(a),
    }
}

fn threads() -> usize {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    Ok(())
}

pub fn cmd_gen(a: GenArgs) -> anyhow::Result<()> {
    let cfg = DatasetConfig { shapes: a.shapes, poses_per_shape: a.poses, resolution: a.res, seed: a.seed, ..DatasetConfig::default() };
    let m = build_dataset(&cfg, &a.out)?;
    let train = m.samples.iter().filter(|s| s.split == sketchmesh::dataset::Split::Train).count();
    println!("samples {} (train {}, test {})", m.samples.len(), train, m.samples.len() - train);
    println!("digest {}", m.digest());
    Ok(())
}

pub fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = a.opts.config(!a.no_rps, !a.no_rps && !a.no_cd);
    cfg.validate()?;
    let ds = Dataset::load(&a.opts.data)?;
    let outcome = train(&cfg, &ds, &a.opts.out, a.resume.as_deref())?;
    if let Some(last) = &outcome.last {
        println!("epoch {} step {} loss {:.6}", last.epoch + 1, last.step, last.loss.total);
    }
    println!("checkpoint {}", outcome.final_checkpoint.display());
    println!("digest {}", outcome.digest);
    Ok(())
}

pub fn cmd_infer(a: InferArgs) -> anyhow::Result<()> {
    let (ck, _) = Checkpoint::load(&a.ckpt)?;
    let nets = ck.restore()?;
    let sketch = SilhouetteMap::load_png(&a.input)?.binarized();
    let (mesh, pose) = infer(&nets, &sketch)?;
    write_obj(&mesh, &a.out_mesh)?;
    write_text(&a.out_pose, &serde_json::to_string_pretty(&pose)?)?;
    let iou = round_trip_iou(&mesh, &pose, &fill_sketch(&sketch))?;
    println!(
        "pose elevation {:.2} azimuth {:.2} distance {:.3}",
        pose.elevation, pose.azimuth, pose.distance
    );
    println!("silhouette iou {iou:.4}");
    Ok(())
}

pub fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let ds = Dataset::load(&a.data)?;
    let mode = PoseMode::from(a.mode);
    let (report, label) = if a.gt_self {
        (evaluate_with(&ds, mode, a.voxel_res, threads(), |s| Ok(ds.mesh(s.shape)?.clone()))?, "ground truth".to_string())
    } else {
        let path = a.ckpt.as_ref().ok_or_else(|| Error::Config("--ckpt is required unless --gt-self is given".into()))?;
        let nets = Checkpoint::load(path)?.0.restore()?;
        (evaluate_threads(&nets, &ds, mode, a.voxel_res, threads())?, path.display().to_string())
    };
    print!("{}", report.to_table(&label));
    if let Some(json) = &a.json {
        write_text(json, &report.to_json())?;
    }
    Ok(())
}

pub fn cmd_ablate(a: AblateArgs) -> anyhow::Result<()> {
    let base = a.opts.config(true, true);
    base.validate()?;
    let ds = Dataset::load(&a.opts.data)?;
    let report = ablation_matrix(&base, &ds, &a.opts.out, a.voxel_res, threads())?;
    std::fs::create_dir_all(&a.opts.out).context("creating the output directory")?;
    write_text(&a.opts.out.join("ablation.json"), &serde_json::to_string_pretty(&report)?)?;
    print!("{}", report.to_table(a.mode.into()));
    Ok(())
}

pub fn cmd_render(a: RenderArgs) -> anyhow::Result<()> {
    if a.sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config("every --sigma must be positive".into()).into());
    }
    let mesh = read_obj(&a.obj)?;
    let pose = CameraPose::new(a.elevation, a.azimuth, a.distance)?;
    let proj = Projection::default();
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io { path: a.out.display().to_string(), source: e })?;
    let hard = hard_rasterize(&mesh, &pose, &proj, a.res)?;
    hard.save_png(a.out.join("hard.png"))?;
    let hard_v = hard.to_vec();
    let mut sheet = vec![hard.to_image()];
    for &sigma in &a.sigma {
        let soft = sketchmesh::tensor::no_grad(|| soft_rasterize(&mesh, &pose, &proj, SoftSettings::new(a.res, sigma)))?;
        soft.save_png(a.out.join(format!("soft_{sigma:e}.png")))?;
        let diff = soft.to_vec().iter().zip(&hard_v).map(|(s, h)| (s - h).abs()).sum::<f64>() / hard_v.len() as f64;
        println!("sigma {sigma:e} mean_abs_diff {diff:.6}");
        sheet.push(soft.to_image());
    }
    let sheet_path = a.out.join("contact_sheet.png");
    contact_sheet(&sheet).save(&sheet_path).map_err(|e| Error::Image(e.to_string()))?;
    println!("contact sheet {}", sheet_path.display());
    Ok(())
}

/// Images side by side with a one-pixel gray gutter.
fn contact_sheet(images: &[GrayImage]) -> GrayImage {
    let h = images.iter().map(|i| i.height()).max().unwrap_or(0);
    let w = images.iter().map(|i| i.width() + 1).sum::<u32>().saturating_sub(1);
    let mut out = GrayImage::from_pixel(w, h, image::Luma([128]));
    let mut x0 = 0;
    for img in images {
        image::imageops::replace(&mut out, img, x0 as i64, 0);
        x0 += img.width() + 1;
    }
    out
}
