//! The `rasf` command line.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 when the data or a file
//! format is rejected. Every output file is written atomically, and all
//! outputs of a command are computed before the first one is written.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::adapters::{default_surface_samples, mesh_element_embeddings, voxel_embeddings, MeshElementKind, DEFAULT_RADIUS_VOXELS};
use crate::error::{invalid, Error, Result};
use crate::field::{embed_cloud, init_grid, EmbeddingMatrix, FieldGrid, InitScheme};
use crate::geometry::{adaptive_k, PointCloud, DEFAULT_BASE_K, DEFAULT_BASE_N};
use crate::io::{self, Precision};
use crate::pretrain::{train_pretext, Matrix, PretextConfig, PretextTask, TrainReport, TrainSample};
use crate::probes::{
    curvature_response, gen_synthetic_dataset, linear_probe, response_correlations, weight_slices, Axis, ProbeConfig,
    ProbeMode, ProbeReport,
};

pub const DEFAULT_RESOLUTION: usize = 16;
pub const DEFAULT_CHANNELS: usize = 32;

/// Everything that determines a pretraining run. Loaded from `--config`
/// (JSON, every field optional) and overridden by flags; echoed into the
/// run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pretext: PretextConfig,
    pub resolution: usize,
    pub channels: usize,
    pub init: InitScheme,
    pub precision: Precision,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    /// Surface samples for mesh inputs; `None` picks a size from the mesh.
    pub n_samples: Option<usize>,
    pub radius_voxels: usize,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            pretext: PretextConfig::default(),
            resolution: DEFAULT_RESOLUTION,
            channels: DEFAULT_CHANNELS,
            init: InitScheme::default(),
            precision: Precision::default(),
            data: None,
            out: None,
            report: None,
            n_samples: None,
            radius_voxels: DEFAULT_RADIUS_VOXELS,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Serialize)]
struct RunSummary<'a> {
    run: &'a RunConfig,
    n_shapes: usize,
    report: &'a TrainReport,
}

#[derive(Debug, Parser)]
#[command(name = "rasf", version, about = "Learnable shape fields for point clouds, meshes and voxels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain a grid on a dataset directory.
    Pretrain(PretrainArgs),
    /// Embed a point cloud, mesh or voxel volume with a trained grid.
    Embed(EmbedArgs),
    /// Curvature response of a grid on a semi-ellipsoid sweep.
    ProbeEllipsoid(ProbeEllipsoidArgs),
    /// Max-projected weight slices as CSV and PGM.
    ExportSlices(ExportSlicesArgs),
    /// Fit a linear probe on grid embeddings and on raw coordinates.
    LinearProbe(LinearProbeArgs),
    /// Write a labeled synthetic dataset of spheres, cubes and cylinders.
    GenSynthetic(GenSyntheticArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Recon,
    Normal,
    Supervised,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReprArg {
    Cloud,
    MeshVertex,
    MeshEdge,
    MeshFace,
    Voxel,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AxisArg {
    X,
    Y,
    Z,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    MaxFc,
    Pointwise,
    Flatten,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::X => Axis::X,
            AxisArg::Y => Axis::Y,
            AxisArg::Z => Axis::Z,
        }
    }
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Directory of `.xyz` shapes, with `labels.csv` for supervised runs.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-epoch records; defaults to `<out>.report.jsonl`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Overrides the config seed (which defaults to 0).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    grid: PathBuf,
    /// `.xyz` cloud, OFF mesh or VOXN volume, matching `--repr`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    repr: ReprArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_RADIUS_VOXELS)]
    radius_voxels: usize,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ProbeEllipsoidArgs {
    #[arg(long)]
    grid: PathBuf,
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// Response matrix, one row per radius.
    #[arg(long)]
    out: PathBuf,
    /// Per-channel rank correlations; defaults to `<out>.spearman.csv`.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    n_theta: usize,
    #[arg(long, default_value_t = 64)]
    n_phi: usize,
}

#[derive(Debug, Args)]
struct ExportSlicesArgs {
    #[arg(long)]
    grid: PathBuf,
    #[arg(long, value_enum)]
    axis: AxisArg,
    #[arg(long)]
    outdir: PathBuf,
}

#[derive(Debug, Args)]
struct LinearProbeArgs {
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct GenSyntheticArgs {
    #[arg(long)]
    n_per_class: usize,
    #[arg(long)]
    points: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    outdir: PathBuf,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain(a) => pretrain(a),
        Command::Embed(a) => embed(a),
        Command::ProbeEllipsoid(a) => probe_ellipsoid(a),
        Command::ExportSlices(a) => export_slices(a),
        Command::LinearProbe(a) => probe(a),
        Command::GenSynthetic(a) => gen_synthetic(a),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain structs serialize");
    s.push('\n');
    s
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut run = match &a.config {
        Some(p) => load_run_config(p)?,
        None => RunConfig::default(),
    };
    run.pretext.task = match a.task {
        TaskArg::Recon => PretextTask::Reconstruction,
        TaskArg::Normal => PretextTask::NormalEstimation,
        TaskArg::Supervised => PretextTask::Supervised,
    };
    if let Some(s) = a.seed {
        run.pretext.seed = s;
    }
    if let Some(e) = a.epochs {
        run.pretext.epochs = e;
    }
    if let Some(r) = a.resolution {
        run.resolution = r;
    }
    if let Some(c) = a.channels {
        run.channels = c;
    }
    if a.k.is_some() {
        run.pretext.k = a.k;
    }
    if let Some(p) = a.precision {
        run.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    let report_path = a.report.clone().unwrap_or_else(|| with_suffix(&a.out, ".report.jsonl"));
    run.data = Some(a.data.clone());
    run.out = Some(a.out.clone());
    run.report = Some(report_path.clone());

    let dataset: Vec<TrainSample> = io::read_dataset(&a.data)?.into_iter().map(|(_, s)| s).collect();
    let grid = init_grid(run.resolution, run.channels, run.init, run.pretext.seed)?;
    let outcome = train_pretext(&dataset, &run.pretext, grid)?;

    let grid_bytes = io::encode_grid(&outcome.grid, run.precision)?;
    let jsonl = io::report_jsonl(&outcome.report.epochs);
    let summary = to_json(&RunSummary {
        run: &run,
        n_shapes: dataset.len(),
        report: &outcome.report,
    });
    io::write_atomic(&report_path, jsonl.as_bytes())?;
    io::write_atomic(&with_suffix(&a.out, ".summary.json"), summary.as_bytes())?;
    io::write_atomic(&a.out, &grid_bytes)
}

fn read_text(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path)?)
}

fn embed(a: EmbedArgs) -> Result<()> {
    let grid = io::read_grid(&a.grid)?;
    let m: EmbeddingMatrix = match a.repr {
        ReprArg::Cloud => {
            let (cloud, _) = io::parse_xyz(&read_text(&a.input)?)?;
            let k = match a.k {
                Some(k) => k,
                None => adaptive_k(cloud.len(), DEFAULT_BASE_K, DEFAULT_BASE_N)?,
            };
            embed_cloud(&grid, &cloud, k)?
        }
        ReprArg::MeshVertex | ReprArg::MeshEdge | ReprArg::MeshFace => {
            let mesh = io::parse_off(&read_text(&a.input)?)?;
            let kind = match a.repr {
                ReprArg::MeshVertex => MeshElementKind::Vertex,
                ReprArg::MeshEdge => MeshElementKind::EdgeMidpoint,
                _ => MeshElementKind::FaceBarycenter,
            };
            let n_samples = a.samples.unwrap_or_else(|| default_surface_samples(mesh.vertices().len()));
            let k = match a.k {
                Some(k) => k,
                None => adaptive_k(n_samples, DEFAULT_BASE_K, DEFAULT_BASE_N)?,
            };
            mesh_element_embeddings(&grid, &mesh, kind, n_samples, k, a.seed)?
        }
        ReprArg::Voxel => {
            let vol = io::parse_voxels(&read_text(&a.input)?)?;
            voxel_embeddings(&grid, &vol, a.radius_voxels)?.into_matrix()
        }
    };
    io::write_atomic(&a.out, io::embedding_csv(&m).as_bytes())
}

/// `channel,spearman` rows; constant channels have an empty value.
pub fn spearman_report(m: &Matrix) -> String {
    let mut s = String::from("channel,spearman\n");
    for (c, rho) in response_correlations(m).iter().enumerate() {
        match rho {
            Some(r) => {
                let _ = writeln!(s, "{c},{r}");
            }
            None => {
                let _ = writeln!(s, "{c},");
            }
        }
    }
    s
}

fn probe_ellipsoid(a: ProbeEllipsoidArgs) -> Result<()> {
    let grid = io::read_grid(&a.grid)?;
    let m = curvature_response(&grid, a.axis.into(), a.n_theta, a.n_phi)?;
    let report = a.report.clone().unwrap_or_else(|| with_suffix(&a.out, ".spearman.csv"));
    let csv = io::matrix_csv(&m);
    let rho = spearman_report(&m);
    io::write_atomic(&report, rho.as_bytes())?;
    io::write_atomic(&a.out, csv.as_bytes())
}

fn export_slices(a: ExportSlicesArgs) -> Result<()> {
    let grid = io::read_grid(&a.grid)?;
    let slices = weight_slices(&grid, a.axis.into());
    let mut files = Vec::with_capacity(2 * slices.len() + 1);
    let mut ranges = String::from("channel,min,max\n");
    for (c, m) in slices.iter().enumerate() {
        let (pgm, (lo, hi)) = io::matrix_pgm(m);
        let _ = writeln!(ranges, "{c},{lo},{hi}");
        files.push((format!("channel_{c:03}.csv"), io::matrix_csv(m)));
        files.push((format!("channel_{c:03}.pgm"), pgm));
    }
    files.push(("ranges.txt".to_string(), ranges));
    fs::create_dir_all(&a.outdir)?;
    for (name, body) in files {
        io::write_atomic(&a.outdir.join(name), body.as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct LinearProbeOutput {
    mode: ProbeMode,
    k: Option<usize>,
    config: ProbeConfig,
    /// Probe on grid embeddings.
    rasf: ProbeReport,
    /// Same probe on raw xyz coordinates.
    raw: ProbeReport,
}

type Labeled = (Matrix, usize);

/// Row-per-point embedding matrices and coordinate matrices of a labeled
/// dataset.
pub fn probe_features(
    grid: &FieldGrid,
    shapes: &[(&PointCloud, usize)],
    k: Option<usize>,
) -> Result<(Vec<Labeled>, Vec<Labeled>)> {
    let mut emb = Vec::with_capacity(shapes.len());
    let mut raw = Vec::with_capacity(shapes.len());
    for &(cloud, label) in shapes {
        let k = match k {
            Some(k) => k,
            None => adaptive_k(cloud.len(), DEFAULT_BASE_K, DEFAULT_BASE_N)?,
        };
        let e = embed_cloud(grid, cloud, k)?;
        emb.push((Matrix::new(e.rows(), e.channels(), e.values().to_vec())?, label));
        let xyz: Vec<f64> = cloud.points().iter().flat_map(|p| p.to_array()).collect();
        raw.push((Matrix::new(cloud.len(), 3, xyz)?, label));
    }
    Ok((emb, raw))
}

fn probe(a: LinearProbeArgs) -> Result<()> {
    let grid = io::read_grid(&a.grid)?;
    let data = io::read_dataset(&a.data)?;
    let labeled: Vec<(&PointCloud, usize)> = data
        .iter()
        .map(|(name, s)| {
            s.label
                .map(|l| (&s.cloud, l))
                .ok_or_else(|| invalid(format!("{name} has no label in {}", io::LABELS_FILE)))
        })
        .collect::<Result<_>>()?;
    let mode = match a.mode {
        ModeArg::MaxFc => ProbeMode::MaxFc,
        ModeArg::Pointwise => ProbeMode::PointwiseFcMaxFc,
        ModeArg::Flatten => ProbeMode::FlattenFc,
    };
    let mut cfg = ProbeConfig {
        seed: a.seed,
        ..ProbeConfig::default()
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let (emb, raw) = probe_features(&grid, &labeled, a.k)?;
    let out = LinearProbeOutput {
        mode,
        k: a.k,
        rasf: linear_probe(&emb, mode, &cfg)?,
        raw: linear_probe(&raw, mode, &cfg)?,
        config: cfg,
    };
    io::write_atomic(&a.out, to_json(&out).as_bytes())
}

fn gen_synthetic(a: GenSyntheticArgs) -> Result<()> {
    let shapes = gen_synthetic_dataset(a.n_per_class, a.points, a.noise, a.seed)?;
    let mut labels = String::from("file,label\n");
    let files: Vec<(String, String)> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let name = format!("shape_{i:05}.xyz");
            let _ = writeln!(labels, "{name},{}", s.label);
            (name, io::write_xyz(&s.cloud, Some(&s.normals)))
        })
        .collect();
    fs::create_dir_all(&a.outdir)?;
    for (name, body) in files {
        io::write_atomic(&a.outdir.join(name), body.as_bytes())?;
    }
    io::write_atomic(&a.outdir.join(io::LABELS_FILE), labels.as_bytes())
}
