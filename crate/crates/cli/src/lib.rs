//! Command-line entry points: JSON on stdout, logs on stderr.

pub mod json;

use std::io::Write;
use std::path::{Path, PathBuf};

use airwayal::metrics::{evaluate, BranchDetection, MetricsError, SegmentationReport};
use airwayal::morphology::skeletonize;
use airwayal::orchestrator::{
    centerline_tree, generate_phantom, run_experiment, Experiment, ExperimentConfig, OracleKind, OrchestratorError,
    PhantomError, PhantomSpec,
};
use airwayal::volume::{read_mask, write_volume, AnyVolume, BinaryMask, VolumeDims, VolumeError};
use clap::{Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

pub use json::stable_string;

#[derive(Debug, Parser)]
#[command(name = "airwayal", version, about = "Airway segmentation active-learning toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Thin a binary mask to its centerline.
    Skeletonize { input: PathBuf, output: PathBuf },
    /// Compare a predicted mask with ground truth.
    Metrics {
        pred: PathBuf,
        gt: PathBuf,
        /// Skip keeping the largest connected component of the prediction.
        #[arg(long)]
        no_postprocess: bool,
        /// Fraction of a branch's centerline that must be covered to count as detected.
        #[arg(long)]
        bd_threshold: Option<f64>,
    },
    /// Generate a synthetic airway phantom.
    Phantom {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `N` for a cube or `NXxNYxNZ`.
        #[arg(long, default_value = "32")]
        dims: String,
        /// `N` or an inclusive range `LO-HI`.
        #[arg(long, default_value = "3-5")]
        branches: String,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Experiment directory to create.
        #[arg(long, default_value = "experiment")]
        out: PathBuf,
    },
    /// Serve the HTTP API over an experiment directory.
    Serve {
        #[arg(long)]
        experiment: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

/// Error classes and their exit codes: usage 1, data 2, runtime 3.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("runtime: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn data(path: &Path) -> impl FnOnce(VolumeError) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn emit(out: &mut dyn Write, v: &impl Serialize) -> Result<(), CliError> {
    writeln!(out, "{}", stable_string(v)).map_err(runtime)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Skeletonize { input, output } => cmd_skeletonize(&input, &output, out),
        Command::Metrics {
            pred,
            gt,
            no_postprocess,
            bd_threshold,
        } => cmd_metrics(&pred, &gt, !no_postprocess, bd_threshold, out),
        Command::Phantom {
            seed,
            dims,
            branches,
            noise,
            out: dir,
        } => cmd_phantom(seed, &dims, &branches, noise, &dir, out),
        Command::Run { config, out: dir } => cmd_run(&config, &dir, out),
        Command::Serve { experiment, port, host } => cmd_serve(&experiment, &host, port),
    }
}

#[derive(Debug, Serialize)]
struct SkeletonSummary {
    mask_voxels: usize,
    centerline_voxels: usize,
}

pub fn cmd_skeletonize(input: &Path, output: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let mask = read_mask(input).map_err(data(input))?;
    let skel = skeletonize(&mask);
    write_volume(&AnyVolume::Mask(skel.clone()), output).map_err(runtime)?;
    emit(
        out,
        &SkeletonSummary {
            mask_voxels: mask.count(),
            centerline_voxels: skel.count(),
        },
    )
}

/// The metrics report the CLI prints; the ground-truth tree is parsed from the
/// skeleton of the ground-truth mask.
pub fn metrics_report(
    pred: &BinaryMask,
    gt: &BinaryMask,
    postprocess: bool,
    rule: BranchDetection,
) -> Result<SegmentationReport, MetricsError> {
    let tree = centerline_tree(&skeletonize(gt));
    evaluate(pred, gt, tree.as_ref(), postprocess, rule)
}

pub fn cmd_metrics(
    pred: &Path,
    gt: &Path,
    postprocess: bool,
    bd_threshold: Option<f64>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let rule = match bd_threshold {
        None => BranchDetection::default(),
        Some(t) if t > 0.0 && t <= 1.0 => BranchDetection::Fraction(t),
        Some(t) => return Err(CliError::Usage(format!("--bd-threshold {t} must lie in (0, 1]"))),
    };
    let p = read_mask(pred).map_err(data(pred))?;
    let g = read_mask(gt).map_err(data(gt))?;
    let report = metrics_report(&p, &g, postprocess, rule).map_err(|e| match e {
        MetricsError::DimMismatch => CliError::Data(format!("{} and {} differ in dims", pred.display(), gt.display())),
        e => runtime(e),
    })?;
    emit(out, &report)
}

pub fn parse_dims(s: &str) -> Result<VolumeDims, CliError> {
    let bad = || CliError::Usage(format!("--dims {s:?} is not N or NXxNYxNZ"));
    let parts: Vec<usize> = s
        .split(['x', ','])
        .map(|p| p.trim().parse().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let d = match parts.as_slice() {
        [n] => VolumeDims::new(*n, *n, *n),
        [x, y, z] => VolumeDims::new(*x, *y, *z),
        _ => return Err(bad()),
    };
    d.map_err(|e| CliError::Usage(e.to_string()))
}

pub fn parse_branches(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("--branches {s:?} is not N or LO-HI"));
    let num = |p: &str| p.trim().parse::<usize>().map_err(|_| bad());
    match s.split_once('-') {
        Some((lo, hi)) => Ok((num(lo)?, num(hi)?)),
        None => {
            let n = num(s)?;
            Ok((n, n))
        }
    }
}

#[derive(Debug, Serialize)]
pub struct PhantomSummary {
    pub seed: u64,
    pub dims: [usize; 3],
    pub branch_count: usize,
    pub files: Vec<String>,
}

pub const PHANTOM_FILES: [&str; 4] = ["image.vvol", "gt.vvol", "centerline.vvol", "tree.json"];

pub fn cmd_phantom(
    seed: u64,
    dims: &str,
    branches: &str,
    noise: Option<f64>,
    dir: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let mut spec = PhantomSpec {
        dims: parse_dims(dims)?,
        branch_count: parse_branches(branches)?,
        ..PhantomSpec::default()
    };
    if let Some(n) = noise {
        if !(n >= 0.0 && n.is_finite()) {
            return Err(CliError::Usage(format!("--noise {n} must be non-negative")));
        }
        spec.noise = n;
    }
    let p = generate_phantom(seed, &spec).map_err(|e| match e {
        PhantomError::SpecInfeasible(_) => CliError::Data(e.to_string()),
        e => runtime(e),
    })?;
    let centerline = skeletonize(&p.gt_mask);
    let tree = centerline_tree(&centerline).ok_or_else(|| runtime("generated phantom has no centerline"))?;
    std::fs::create_dir_all(dir).map_err(runtime)?;
    write_volume(&AnyVolume::Image(p.image), dir.join(PHANTOM_FILES[0])).map_err(runtime)?;
    write_volume(&AnyVolume::Mask(p.gt_mask), dir.join(PHANTOM_FILES[1])).map_err(runtime)?;
    write_volume(&AnyVolume::Mask(centerline), dir.join(PHANTOM_FILES[2])).map_err(runtime)?;
    std::fs::write(dir.join(PHANTOM_FILES[3]), stable_string(&tree)).map_err(runtime)?;
    emit(
        out,
        &PhantomSummary {
            seed,
            dims: spec.dims.as_array(),
            branch_count: p.branch_count,
            files: PHANTOM_FILES.iter().map(|f| f.to_string()).collect(),
        },
    )
}

/// Reads and validates a config file: unreadable is a data error, malformed a usage error.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn orchestrator_error(e: OrchestratorError) -> CliError {
    match e {
        OrchestratorError::InvalidConfig(m) => CliError::Usage(m),
        OrchestratorError::Phantom(PhantomError::SpecInfeasible(m)) => CliError::Data(m),
        e => runtime(e),
    }
}

/// Simulated oracle: runs every round and prints the log. Human oracle: creates
/// the experiment (round 0) for `serve` and prints its first record.
pub fn cmd_run(config: &Path, dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    if dir.exists() && dir.read_dir().map_err(runtime)?.next().is_some() {
        return Err(CliError::Usage(format!(
            "{} already exists and is not empty",
            dir.display()
        )));
    }
    match cfg.oracle {
        OracleKind::Simulated => {
            let log = run_experiment(&cfg, Some(dir)).map_err(orchestrator_error)?;
            eprintln!("experiment written to {}", dir.display());
            emit(out, &log)
        }
        OracleKind::Human => {
            let exp = Experiment::create(&cfg, Some(dir)).map_err(orchestrator_error)?;
            eprintln!(
                "experiment created in {}; advance rounds through `serve`",
                dir.display()
            );
            emit(out, &exp.state.records)
        }
    }
}

pub fn cmd_serve(dir: &Path, host: &str, port: u16) -> Result<(), CliError> {
    let app = airwayal_server::Shared::open(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(runtime)?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .map_err(|e| CliError::Runtime(format!("cannot bind {host}:{port}: {e}")))?;
        let addr = listener.local_addr().map_err(runtime)?;
        eprintln!("listening on http://{addr}");
        airwayal_server::serve(listener, app, airwayal_server::shutdown_signal())
            .await
            .map_err(runtime)?;
        eprintln!("shut down");
        Ok(())
    })
}
