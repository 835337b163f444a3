//! `occ` command-line pipelines.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error. Diagnostics go to
//! standard error as `key=value` lines; results go to standard output.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Component, Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use occ_core::camera::CameraModel;
use occ_core::depthbin::{
    bce_depth_loss, bce_depth_loss_grad, bin_index_map, downsample_distribution, one_hot_target,
    DepthBinSpec, DepthDistribution, DepthMap, DEFAULT_D_MAX, DEFAULT_D_MIN,
};
use occ_core::labelgen::{
    generate_frame_label, sample_frames, split_frames, FrameDecision, LabelGenConfig,
    LabeledPointSet, RejectReason, SceneBounds, DEFAULT_FRAMES_PER_SCENE, DEFAULT_TRAIN_RATIO,
};
use occ_core::lifting::{
    fuse, project_voxels, FeatureMap, FeaturePyramid, SamplingMode, VoxelFeatureVolume, SCALES,
};
use occ_core::metrics::{format_csv, format_table, ConfusionMatrix, MethodResult};
use occ_core::tensorio::{
    read_camera, read_tensor_file, write_atomic, write_tensor_file, CameraDoc, DatasetManifest,
    DenseTensor, ManifestFrame, Split, TensorData,
};
use occ_core::voxel::{GridSpec, LabelGrid};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub stage: &'static str,
    pub source: anyhow::Error,
}

impl CliError {
    pub fn usage(stage: &'static str, source: impl Into<anyhow::Error>) -> Self {
        Self {
            kind: ErrorKind::Usage,
            stage,
            source: source.into(),
        }
    }

    pub fn data(stage: &'static str, source: impl Into<anyhow::Error>) -> Self {
        Self {
            kind: ErrorKind::Data,
            stage,
            source: source.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Usage => EXIT_USAGE,
            ErrorKind::Data => EXIT_DATA,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage={} error=\"{:#}\"", self.stage, self.source)
    }
}

impl std::error::Error for CliError {}

type CmdResult<T = ()> = Result<T, CliError>;

trait StageExt<T> {
    fn stage(self, stage: &'static str) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> StageExt<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> CmdResult<T> {
        self.map_err(|e| CliError::data(stage, e))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "occ",
    version,
    about = "Depth binning, voxel feature lifting, occupancy labels and SSC metrics"
)]
pub struct Cli {
    /// Worker threads; numeric output does not depend on this.
    #[arg(long, global = true, env = "OCC_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print depth-bin edges, or convert a depth map to bin indices / one-hot targets.
    DepthBins(DepthBinsArgs),
    /// Lift a 2D feature pyramid into a depth-weighted voxel feature volume.
    Lift(LiftArgs),
    /// Generate per-frame occupancy labels and a manifest for one scene.
    GenLabels(GenLabelsArgs),
    /// Score predicted label grids against ground truth.
    Eval(EvalArgs),
    /// Binary cross-entropy between a predicted depth distribution and a depth map.
    DepthLoss(DepthLossArgs),
}

#[derive(Debug, Clone, Args)]
pub struct BinArgs {
    /// Smallest binned depth, meters.
    #[arg(long, default_value_t = DEFAULT_D_MIN, allow_negative_numbers = true)]
    pub d_min: f64,
    /// Largest binned depth, meters.
    #[arg(long, default_value_t = DEFAULT_D_MAX, allow_negative_numbers = true)]
    pub d_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Emit {
    BinIndex,
    OneHot,
}

#[derive(Debug, Clone, Args)]
pub struct DepthBinsArgs {
    #[command(flatten)]
    pub bins: BinArgs,
    /// Number of bins.
    #[arg(long)]
    pub n_bins: usize,
    /// Depth map tensor, (H, W) or (1, H, W); values <= 0 are missing.
    #[arg(long, requires = "out")]
    pub depth: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Emit::OneHot)]
    pub emit: Emit,
    #[arg(long, requires = "depth")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GridPreset {
    /// 60 x 36 x 60 at 0.08 m
    Nyu,
    /// 240 x 144 x 240 at 0.02 m
    NyuFull,
    /// 60 x 60 x 36 at 0.08 m
    OccScannet,
}

impl GridPreset {
    pub fn spec(self) -> GridSpec {
        match self {
            GridPreset::Nyu => GridSpec::nyu_eval([0.0; 3]),
            GridPreset::NyuFull => GridSpec::nyu_full([0.0; 3]),
            GridPreset::OccScannet => GridSpec::occ_scannet([0.0; 3]),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    /// Grid preset; --dims and --voxel-size override its parts.
    #[arg(long, value_enum)]
    pub grid: Option<GridPreset>,
    #[arg(long, num_args = 3, value_names = ["X", "Y", "Z"])]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    pub voxel_size: Option<f64>,
}

impl GridArgs {
    fn resolve(&self, default: GridPreset) -> CmdResult<([usize; 3], f64)> {
        let preset = self.grid.unwrap_or(default).spec();
        let dims = match &self.dims {
            Some(d) => [d[0], d[1], d[2]],
            None => preset.dims(),
        };
        let size = self.voxel_size.unwrap_or_else(|| preset.voxel_size());
        GridSpec::new(dims, [0.0; 3], size).map_err(|e| CliError::usage("config", e))?;
        Ok((dims, size))
    }
}

#[derive(Debug, Clone, Args)]
pub struct LiftArgs {
    /// Scale-1 feature map (C, H, W).
    #[arg(long)]
    pub feat1: PathBuf,
    #[arg(long)]
    pub feat2: PathBuf,
    #[arg(long)]
    pub feat4: PathBuf,
    #[arg(long)]
    pub feat8: PathBuf,
    /// Scale-1 depth distribution (bins, H, W); coarser scales are mean-pooled from it.
    #[arg(long)]
    pub dist: PathBuf,
    /// Explicit scale-2 distribution instead of the pooled one.
    #[arg(long)]
    pub dist2: Option<PathBuf>,
    #[arg(long)]
    pub dist4: Option<PathBuf>,
    #[arg(long)]
    pub dist8: Option<PathBuf>,
    #[arg(long)]
    pub camera: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    /// World position of the grid's minimum corner.
    #[arg(long, num_args = 3, value_names = ["X", "Y", "Z"], allow_negative_numbers = true)]
    pub origin: Option<Vec<f64>>,
    #[command(flatten)]
    pub bins: BinArgs,
    /// Expected bin count; checked against the distribution file when given.
    #[arg(long)]
    pub n_bins: Option<usize>,
    #[arg(long, default_value = "nearest", value_parser = parse_mode)]
    pub mode: SamplingMode,
    /// Output volume, rank-4 f32 tensor (X, Y, Z, C).
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_mode(s: &str) -> Result<SamplingMode, String> {
    s.parse()
}

#[derive(Debug, Clone, Args)]
pub struct GenLabelsArgs {
    /// Scene directory with points.occt, bounds.json and cameras/*.json.
    #[arg(long)]
    pub scene: PathBuf,
    /// Output directory for labels/ and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Nearest-point cutoff, meters; defaults to the source voxel diagonal.
    #[arg(long)]
    pub max_dist: Option<f64>,
    /// Voxel size of the labeled source points, meters; defaults to the target voxel size.
    #[arg(long)]
    pub source_voxel_size: Option<f64>,
    /// World z of the grid's bottom face.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub floor_height: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Frames sampled per scene.
    #[arg(long, default_value_t = DEFAULT_FRAMES_PER_SCENE)]
    pub frames: usize,
    #[arg(long, default_value_t = DEFAULT_TRAIN_RATIO)]
    pub train_ratio: f64,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Directory of predicted label grids (*.occt).
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth label grids, matched by file name.
    #[arg(long)]
    pub gt: PathBuf,
    /// Also write the table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Row label in the report.
    #[arg(long, default_value = "method")]
    pub name: String,
}

#[derive(Debug, Clone, Args)]
pub struct DepthLossArgs {
    /// Predicted distribution (bins, H, W).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth depth map (H, W) or (1, H, W).
    #[arg(long)]
    pub depth: PathBuf,
    #[command(flatten)]
    pub bins: BinArgs,
    /// Write the analytic gradient (f32, shaped like the prediction).
    #[arg(long)]
    pub grad: Option<PathBuf>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            let _ = write!(stderr, "{}", e.render());
            return match e.kind() {
                K::DisplayHelp | K::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match run(&cli, stdout, stderr) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "{e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CmdResult {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage(
                "config",
                anyhow!("--threads must be positive"),
            ));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::usage("config", e))?;
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let result = pool.install(|| match &cli.command {
        Command::DepthBins(a) => cmd_depth_bins(a, &mut out),
        Command::Lift(a) => cmd_lift(a, &mut err),
        Command::GenLabels(a) => cmd_gen_labels(a, &mut out, &mut err),
        Command::Eval(a) => cmd_eval(a, &mut out, &mut err),
        Command::DepthLoss(a) => cmd_depth_loss(a, &mut out),
    });
    let _ = stderr.write_all(&err);
    stdout
        .write_all(&out)
        .and_then(|_| stdout.flush())
        .stage("output")?;
    result
}

fn bin_spec(bins: &BinArgs, n_bins: usize) -> CmdResult<DepthBinSpec> {
    DepthBinSpec::new(bins.d_min, bins.d_max, n_bins).map_err(|e| CliError::usage("config", e))
}

fn join_numbers(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn out_line(out: &mut dyn Write, line: impl fmt::Display) -> CmdResult {
    writeln!(out, "{line}").stage("output")
}

pub fn cmd_depth_bins(a: &DepthBinsArgs, stdout: &mut dyn Write) -> CmdResult {
    let spec = bin_spec(&a.bins, a.n_bins)?;
    out_line(stdout, format_args!("delta={}", spec.delta()))?;
    out_line(
        stdout,
        format_args!("edges={}", join_numbers(&spec.bin_edges())),
    )?;
    out_line(
        stdout,
        format_args!("centers={}", join_numbers(&spec.bin_centers())),
    )?;
    if let (Some(depth), Some(out)) = (&a.depth, &a.out) {
        let dm = read_tensor_file(depth)
            .map_err(anyhow::Error::from)
            .and_then(|t| Ok(DepthMap::from_tensor(&t)?))
            .with_context(|| format!("depth map {}", depth.display()))
            .stage("load")?;
        let t = match a.emit {
            Emit::BinIndex => DenseTensor::new(
                vec![dm.height(), dm.width()],
                TensorData::I64(bin_index_map(&dm, &spec)),
            ),
            Emit::OneHot => Ok(one_hot_target(&dm, &spec).dist.to_tensor()),
        }
        .stage("convert")?;
        write_tensor_file(&t, out).stage("write")?;
        out_line(stdout, format_args!("wrote={}", out.display()))?;
    }
    Ok(())
}

/// Everything `lift` reads from disk.
#[derive(Debug, Clone)]
pub struct LiftInputs {
    pub pyramid: FeaturePyramid,
    pub dist: DepthDistribution,
    /// Explicit coarse-scale distributions, keyed by scale.
    pub dist_overrides: BTreeMap<usize, DepthDistribution>,
    pub camera: CameraModel,
}

impl LiftInputs {
    pub fn load(a: &LiftArgs) -> CmdResult<Self> {
        let feat_paths = [(1, &a.feat1), (2, &a.feat2), (4, &a.feat4), (8, &a.feat8)];
        let mut levels = Vec::with_capacity(4);
        for (scale, path) in feat_paths {
            let map = read_tensor_file(path)
                .map_err(anyhow::Error::from)
                .and_then(|t| Ok(FeatureMap::from_tensor(&t)?))
                .with_context(|| format!("feature level {scale} ({})", path.display()))
                .stage("load")?;
            levels.push((scale, map));
        }
        let (height, width) = (levels[0].1.height(), levels[0].1.width());
        let pyramid = FeaturePyramid::new(height, width, levels).stage("load")?;
        let load_dist = |scale: usize, path: &Path| {
            read_tensor_file(path)
                .map_err(anyhow::Error::from)
                .and_then(|t| Ok(DepthDistribution::from_tensor(&t)?))
                .with_context(|| format!("depth distribution scale {scale} ({})", path.display()))
                .stage("load")
        };
        let dist = load_dist(1, &a.dist)?;
        let mut dist_overrides = BTreeMap::new();
        for (scale, path) in [(2, &a.dist2), (4, &a.dist4), (8, &a.dist8)] {
            if let Some(p) = path {
                dist_overrides.insert(scale, load_dist(scale, p)?);
            }
        }
        let text = std::fs::read_to_string(&a.camera)
            .with_context(|| format!("camera {}", a.camera.display()))
            .stage("load")?;
        let camera = read_camera(&text)
            .with_context(|| format!("camera {}", a.camera.display()))
            .stage("load")?;
        Ok(Self {
            pyramid,
            dist,
            dist_overrides,
            camera,
        })
    }
}

/// Projection, coarse-scale distribution pooling and fusion.
pub fn lift_volume(
    inputs: &LiftInputs,
    grid: &GridSpec,
    bins: &DepthBinSpec,
    mode: SamplingMode,
) -> CmdResult<(VoxelFeatureVolume, f64)> {
    let mut dists = BTreeMap::new();
    dists.insert(1, inputs.dist.clone());
    for k in &SCALES[1..] {
        let d = match inputs.dist_overrides.get(k) {
            Some(d) => d.clone(),
            None => downsample_distribution(&inputs.dist, *k).stage("downsample")?,
        };
        dists.insert(*k, d);
    }
    let proj = project_voxels(&inputs.camera, grid);
    let volume = fuse(&inputs.pyramid, &dists, &proj, bins, mode).stage("fuse")?;
    Ok((volume, proj.valid_fraction()))
}

pub fn cmd_lift(a: &LiftArgs, stderr: &mut dyn Write) -> CmdResult {
    let (dims, voxel_size) = a.grid.resolve(GridPreset::Nyu)?;
    let origin = a.origin.as_ref().map_or([0.0; 3], |o| [o[0], o[1], o[2]]);
    let grid = GridSpec::new(dims, origin, voxel_size).map_err(|e| CliError::usage("config", e))?;
    let inputs = LiftInputs::load(a)?;
    let n_bins = inputs.dist.n_bins();
    if let Some(n) = a.n_bins {
        if n != n_bins {
            return Err(CliError::data(
                "load",
                anyhow!("--n-bins {n} but distribution has {n_bins} bins"),
            ));
        }
    }
    let bins = bin_spec(&a.bins, n_bins)?;
    let (volume, valid_fraction) = lift_volume(&inputs, &grid, &bins, a.mode)?;
    write_tensor_file(&volume.to_tensor(), &a.out).stage("write")?;
    let _ = writeln!(
        stderr,
        "stage=lift dims={}x{}x{} channels={} valid_fraction={valid_fraction:.6} out={}",
        dims[0],
        dims[1],
        dims[2],
        volume.channels(),
        a.out.display()
    );
    Ok(())
}

/// Path of `target` relative to directory `base`, both made absolute first.
fn relative_path(target: &Path, base: &Path) -> PathBuf {
    let abs = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let (t, b) = (abs(target), abs(base));
    let tc: Vec<Component> = t.components().collect();
    let bc: Vec<Component> = b.components().collect();
    let common = tc.iter().zip(&bc).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..bc.len() {
        out.push("..");
    }
    for c in &tc[common..] {
        out.push(c.as_os_str());
    }
    out
}

fn path_string(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

/// Frame ids from camera file stems, numeric ids in numeric order first.
fn scene_frames(cameras: &Path) -> CmdResult<Vec<String>> {
    let mut ids: Vec<String> = std::fs::read_dir(cameras)
        .with_context(|| format!("camera directory {}", cameras.display()))
        .stage("load")?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort_by(|a, b| {
        let key = |s: &String| {
            (
                s.parse::<u64>().ok().is_none(),
                s.parse::<u64>().unwrap_or(0),
                s.clone(),
            )
        };
        key(a).cmp(&key(b))
    });
    Ok(ids)
}

struct FrameResult {
    id: String,
    decision: FrameDecision,
    grid: Option<LabelGrid>,
    note: Option<String>,
}

pub fn cmd_gen_labels(
    a: &GenLabelsArgs,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> CmdResult {
    let (dims, voxel_size) = a.grid.resolve(GridPreset::OccScannet)?;
    if a.frames == 0 {
        return Err(CliError::usage(
            "config",
            anyhow!("--frames must be positive"),
        ));
    }
    if !(0.0..=1.0).contains(&a.train_ratio) {
        return Err(CliError::usage(
            "config",
            anyhow!("--train-ratio must be in [0, 1]"),
        ));
    }
    if let Some(d) = a.max_dist {
        if !(d >= 0.0) {
            return Err(CliError::usage(
                "config",
                anyhow!("--max-dist must be non-negative"),
            ));
        }
    }
    let bounds_path = a.scene.join("bounds.json");
    if !bounds_path.is_file() {
        return Err(CliError::usage(
            "config",
            anyhow!("scene bounds file {} not found", bounds_path.display()),
        ));
    }
    let bounds = std::fs::read_to_string(&bounds_path)
        .map_err(anyhow::Error::from)
        .and_then(|t| Ok(SceneBounds::parse(&t)?))
        .with_context(|| format!("bounds {}", bounds_path.display()))
        .stage("load")?;
    let points_path = a.scene.join("points.occt");
    let source_voxel_size = a.source_voxel_size.unwrap_or(voxel_size);
    let points = read_tensor_file(&points_path)
        .map_err(anyhow::Error::from)
        .and_then(|t| Ok(LabeledPointSet::from_tensor(&t, source_voxel_size)?))
        .with_context(|| format!("points {}", points_path.display()))
        .stage("load")?;
    let cameras_dir = a.scene.join("cameras");
    let all_frames = scene_frames(&cameras_dir)?;
    let selected = sample_frames(&all_frames, a.frames, a.seed).stage("sample")?;
    let (train, _) = split_frames(&selected, a.train_ratio, a.seed);

    let config = LabelGenConfig {
        dims,
        voxel_size,
        max_dist: a.max_dist,
        floor_height: a.floor_height,
        seed: a.seed,
        frames_per_scene: a.frames,
        train_ratio: a.train_ratio,
    };

    let results: Vec<FrameResult> = selected
        .par_iter()
        .map(|id| {
            let cam_path = cameras_dir.join(format!("{id}.json"));
            let doc = std::fs::read_to_string(&cam_path)
                .map_err(anyhow::Error::from)
                .and_then(|t| Ok(CameraDoc::parse(&t)?));
            let doc = match doc {
                Ok(d) => d,
                Err(e) => {
                    return FrameResult {
                        id: id.clone(),
                        decision: FrameDecision::Reject(RejectReason::InvalidPose),
                        grid: None,
                        note: Some(format!("{e:#}")),
                    }
                }
            };
            match generate_frame_label(&points, &bounds, &doc, &config) {
                Ok(out) => FrameResult {
                    id: id.clone(),
                    decision: out.decision,
                    grid: out.grid,
                    note: None,
                },
                Err(e) => FrameResult {
                    id: id.clone(),
                    decision: FrameDecision::Reject(RejectReason::InvalidPose),
                    grid: None,
                    note: Some(e.to_string()),
                },
            }
        })
        .collect();

    let labels_dir = a.out.join("labels");
    std::fs::create_dir_all(&labels_dir)
        .with_context(|| format!("output directory {}", labels_dir.display()))
        .stage("write")?;

    let mut frames = Vec::with_capacity(results.len());
    let mut rejected: BTreeMap<RejectReason, usize> = BTreeMap::new();
    for r in &results {
        if let Some(note) = &r.note {
            let _ = writeln!(stderr, "stage=frame frame={} warning=\"{note}\"", r.id);
        }
        let label_file = match &r.grid {
            Some(g) => {
                let rel = format!("labels/{}.occt", r.id);
                write_tensor_file(&g.to_tensor(), a.out.join(&rel)).stage("write")?;
                Some(rel)
            }
            None => None,
        };
        if let FrameDecision::Reject(reason) = r.decision {
            *rejected.entry(reason).or_default() += 1;
        }
        let rel = |p: PathBuf| path_string(&relative_path(&p, &a.out));
        let depth = a.scene.join("depth").join(format!("{}.occt", r.id));
        frames.push(ManifestFrame {
            frame_id: r.id.clone(),
            camera_file: rel(cameras_dir.join(format!("{}.json", r.id))),
            depth_file: depth.is_file().then(|| rel(depth)),
            label_file,
            split: if train.contains(&r.id) {
                Split::Train
            } else {
                Split::Val
            },
            verdict: r.decision.verdict().to_string(),
            reason: r.decision.reason().to_string(),
            grid_origin: r.grid.as_ref().map(|g| g.spec().origin()),
        });
    }
    let scene_id = std::fs::canonicalize(&a.scene)
        .ok()
        .and_then(|p| p.file_name().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| path_string(&a.scene));
    let manifest = DatasetManifest {
        scene_id,
        seed: a.seed,
        grid_dims: Some(dims),
        voxel_size: Some(voxel_size),
        frames,
    };
    write_atomic(&a.out.join("manifest.json"), manifest.to_json().as_bytes()).stage("write")?;

    let kept = results.iter().filter(|r| r.decision.is_keep()).count();
    let n_train = manifest
        .frames
        .iter()
        .filter(|f| f.split == Split::Train)
        .count();
    let mut line = format!(
        "scene={} frames={} train={} val={} kept={kept} rejected={}",
        manifest.scene_id,
        results.len(),
        n_train,
        results.len() - n_train,
        results.len() - kept
    );
    for reason in RejectReason::ALL {
        line.push_str(&format!(
            " {}={}",
            reason.as_str(),
            rejected.get(&reason).copied().unwrap_or(0)
        ));
    }
    out_line(stdout, line)
}

fn label_files(dir: &Path) -> CmdResult<BTreeMap<String, PathBuf>> {
    Ok(std::fs::read_dir(dir)
        .with_context(|| format!("directory {}", dir.display()))
        .stage("load")?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "occt"))
        .filter_map(|p| Some((p.file_name()?.to_string_lossy().into_owned(), p)))
        .collect())
}

fn load_label_grid(path: &Path) -> CmdResult<LabelGrid> {
    read_tensor_file(path)
        .map_err(anyhow::Error::from)
        .and_then(|t| Ok(LabelGrid::from_tensor(&t, [0.0; 3], 1.0)?))
        .with_context(|| format!("label grid {}", path.display()))
        .stage("load")
}

pub fn cmd_eval(a: &EvalArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CmdResult {
    let preds = label_files(&a.pred)?;
    let gts = label_files(&a.gt)?;
    for name in preds.keys().filter(|k| !gts.contains_key(*k)) {
        let _ = writeln!(
            stderr,
            "stage=match warning=unmatched side=pred file={name}"
        );
    }
    for name in gts.keys().filter(|k| !preds.contains_key(*k)) {
        let _ = writeln!(stderr, "stage=match warning=unmatched side=gt file={name}");
    }
    let pairs: Vec<(&PathBuf, &PathBuf)> = preds
        .iter()
        .filter_map(|(k, p)| gts.get(k).map(|g| (p, g)))
        .collect();
    if pairs.is_empty() {
        return Err(CliError::data(
            "match",
            anyhow!(
                "no file names shared by {} and {}",
                a.pred.display(),
                a.gt.display()
            ),
        ));
    }
    let partials: Vec<CmdResult<ConfusionMatrix>> = pairs
        .par_iter()
        .map(|(p, g)| {
            let (pred, gt) = (load_label_grid(p)?, load_label_grid(g)?);
            let mut conf = ConfusionMatrix::new();
            conf.accumulate(&pred, &gt)
                .with_context(|| format!("{}", p.display()))
                .stage("accumulate")?;
            Ok(conf)
        })
        .collect();
    let mut conf = ConfusionMatrix::new();
    for c in partials {
        conf.merge(&c?);
    }
    let rows = [MethodResult::from_confusion(&a.name, &conf)];
    write!(stdout, "{}", format_table(&rows)).stage("output")?;
    if let Some(csv) = &a.csv {
        write_atomic(csv, format_csv(&rows).as_bytes()).stage("write")?;
    }
    let _ = writeln!(
        stderr,
        "stage=eval pairs={} voxels={} ignored={}",
        pairs.len(),
        conf.counted(),
        conf.ignored()
    );
    Ok(())
}

pub fn cmd_depth_loss(a: &DepthLossArgs, stdout: &mut dyn Write) -> CmdResult {
    let pred = read_tensor_file(&a.pred)
        .map_err(anyhow::Error::from)
        .and_then(|t| Ok(DepthDistribution::from_tensor(&t)?))
        .with_context(|| format!("prediction {}", a.pred.display()))
        .stage("load")?;
    let dm = read_tensor_file(&a.depth)
        .map_err(anyhow::Error::from)
        .and_then(|t| Ok(DepthMap::from_tensor(&t)?))
        .with_context(|| format!("depth map {}", a.depth.display()))
        .stage("load")?;
    let spec = bin_spec(&a.bins, pred.n_bins())?;
    let target = one_hot_target(&dm, &spec);
    let loss = bce_depth_loss(&pred, &target.dist, &target.mask).stage("loss")?;
    out_line(stdout, format_args!("loss={loss:.6}"))?;
    if let Some(path) = &a.grad {
        let grad = bce_depth_loss_grad(&pred, &target.dist, &target.mask).stage("loss")?;
        let t = DenseTensor::from_f32(
            vec![pred.n_bins(), pred.height(), pred.width()],
            grad.iter().map(|&g| g as f32).collect(),
        )
        .stage("write")?;
        write_tensor_file(&t, path).stage("write")?;
    }
    Ok(())
}
