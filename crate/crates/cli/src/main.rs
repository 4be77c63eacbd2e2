//! `dynsplat`: generate synthetic data, train, segment, track, edit and serve.

mod commands;

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "dynsplat", version, about = "Deformable Gaussian splatting for dynamic volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic multi-view, multi-timestep dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Report per-timestep PSNR of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Coarse and fine segmentation.
    #[command(subcommand)]
    Segment(SegmentCommand),
    /// Write ground-truth masks of a dataset segment as a mask directory.
    GenMasks(GenMasksArgs),
    /// Render the edited scene with a segment selection.
    Track(TrackArgs),
    /// Append an edit to a segment registry.
    Edit(EditArgs),
    /// Group segments under a new id.
    Group(GroupArgs),
    /// Render per-Gaussian x-displacement as color.
    Velocity(VelocityArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Subcommand, Debug)]
enum SegmentCommand {
    /// k-means on view-independent color, then outlier removal.
    Coarse(CoarseArgs),
    /// Train an affinity field for one coarse label at one time.
    Fine(FineArgs),
    /// Segment by clicking a pixel of a rendered view.
    Pick(PickArgs),
}

/// Parses `A,B,...` into exactly `N` numbers.
#[derive(Clone, Copy, Debug, PartialEq)]
struct List<T, const N: usize>([T; N]);

impl<T: FromStr + Copy + Default, const N: usize> FromStr for List<T, N> {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != N {
            return Err(format!("expected {N} comma-separated values, got {s:?}"));
        }
        let mut out = [T::default(); N];
        for (o, p) in out.iter_mut().zip(parts) {
            *o = p.parse().map_err(|_| format!("bad number {p:?}"))?;
        }
        Ok(List(out))
    }
}

fn parse_ids(s: &str) -> Result<Vec<u64>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| format!("bad id {p:?}")))
        .collect()
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// `blobs3` or a JSON scene file.
    #[arg(long, default_value = "blobs3")]
    scene: String,
    #[arg(long, default_value_t = 20)]
    views: usize,
    #[arg(long, default_value_t = 10)]
    test_views: usize,
    #[arg(long, default_value_t = 5)]
    timesteps: usize,
    /// Image size as `W,H`.
    #[arg(long, default_value = "64,64")]
    res: List<usize, 2>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    L2,
    L1,
    #[value(name = "l2+dssim")]
    L2Dssim,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EncoderArg {
    Hybrid,
    Implicit,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML file of `key = value` lines; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long)]
    no_tv: bool,
    #[arg(long, value_enum)]
    encoder: Option<EncoderArg>,
    /// Skip the static stage and train the field from random init.
    #[arg(long)]
    no_warmup: bool,
    #[arg(long)]
    no_opacity_deform: bool,
    /// Write one JSON trace record per iteration to this file.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Log a progress line every this many iterations.
    #[arg(long, default_value_t = 500)]
    log_every: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args, Debug)]
struct CoarseArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directions averaged for the view-independent color.
    #[arg(long, default_value_t = dynsplat_core::segment::coarse::DEFAULT_DIRECTIONS)]
    directions: usize,
    /// Outlier radius; omitted means the per-cluster default.
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long, default_value_t = dynsplat_core::segment::coarse::DEFAULT_MIN_NEIGHBORS)]
    min_neighbors: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FineArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Output of `segment coarse`.
    #[arg(long)]
    coarse: PathBuf,
    #[arg(long)]
    label: u32,
    #[arg(long)]
    time: f64,
    /// Mask directory (`index.json` plus PNGs).
    #[arg(long)]
    masks: PathBuf,
    /// Dataset whose train views the masks belong to.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = dynsplat_core::segment::masks::DEFAULT_NMS_IOU)]
    nms_iou: f64,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Checkpoint holding the model, the coarse labels and the trained field.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum LevelArg {
    Coarse,
    Fine,
}

/// A dataset view, or a free camera looking at `--target` from `--eye`.
#[derive(Args, Debug)]
struct CameraArgs {
    #[arg(long, requires = "data", conflicts_with = "eye")]
    view: Option<usize>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Camera position as `X,Y,Z`.
    #[arg(long)]
    eye: Option<List<f64, 3>>,
    #[arg(long, default_value = "0,0,0")]
    target: List<f64, 3>,
    /// Vertical field of view in degrees.
    #[arg(long, default_value_t = 40.0)]
    fov: f64,
    /// Free-camera image size as `W,H`.
    #[arg(long, default_value = "256,256")]
    res: List<usize, 2>,
}

#[derive(Args, Debug)]
struct PickArgs {
    /// Checkpoint with a coarse segmentation (and fields for fine picks).
    #[arg(long)]
    ckpt: PathBuf,
    /// Coarse labels from `segment coarse`, overriding the checkpoint's.
    #[arg(long)]
    coarse: Option<PathBuf>,
    #[arg(long)]
    pixel: List<usize, 2>,
    #[command(flatten)]
    camera: CameraArgs,
    #[arg(long)]
    time: f64,
    #[arg(long, value_enum, default_value = "fine")]
    level: LevelArg,
    /// Mask scale of the query; required for fine picks.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long, default_value_t = dynsplat_core::segment::affinity::DEFAULT_TAU)]
    tau: f64,
    #[arg(long)]
    name: Option<String>,
    /// Registry the segment is added to; defaults to the checkpoint sidecar.
    #[arg(long)]
    segments: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenMasksArgs {
    #[arg(long)]
    data: PathBuf,
    /// Scene segment id; a grouping segment yields one mask per child.
    #[arg(long)]
    segment: u32,
    #[arg(long)]
    time: f64,
    /// Also emit the union of the leaf masks.
    #[arg(long)]
    union: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    All,
    Isolate,
    Highlight,
    HideOthers,
}

#[derive(Args, Debug)]
struct TrackArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Registry; defaults to the checkpoint sidecar.
    #[arg(long)]
    segments: Option<PathBuf>,
    /// Segment or group ids as `A,B,...`; defaults to every segment.
    #[arg(long, value_parser = parse_ids)]
    select: Option<::std::vec::Vec<u64>>,
    #[arg(long)]
    time: f64,
    #[arg(long, value_enum, default_value = "isolate")]
    mode: ModeArg,
    #[command(flatten)]
    camera: CameraArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("kind").required(true).args(["recolor", "opacity_scale", "translate"]))]
struct EditArgs {
    #[arg(long)]
    segments: PathBuf,
    #[arg(long)]
    segment: u64,
    /// New color as `R,G,B` in [0, 1].
    #[arg(long)]
    recolor: Option<List<f64, 3>>,
    #[arg(long)]
    opacity_scale: Option<f64>,
    /// Translation as `X,Y,Z`, applied with `--scale` about the segment pivot.
    #[arg(long)]
    translate: Option<List<f64, 3>>,
    #[arg(long, default_value_t = 1.0, requires = "translate")]
    scale: f64,
}

#[derive(Args, Debug)]
struct GroupArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    segments: Option<PathBuf>,
    /// Member segment ids as `A,B,...`.
    #[arg(long, value_parser = parse_ids)]
    ids: ::std::vec::Vec<u64>,
    #[arg(long, default_value = "group")]
    name: String,
    /// Time whose deformation sets the pivot.
    #[arg(long, default_value_t = 0.0)]
    time: f64,
}

#[derive(Args, Debug)]
struct VelocityArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    time: f64,
    #[command(flatten)]
    camera: CameraArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Dataset for named views and ground-truth mask jobs.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = commands::run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
