//! Batch front-end wiring the core modules into a reproducible pipeline:
//! `project`, `align`, `losses`, `export`, `render`, and `synth` subcommands
//! over PNG / PFM / PLY files with JSON reports.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod pfm;
pub mod pngio;

pub use config::PipelineConfig;

/// Process-level error classification: input errors exit with 2, numeric
/// failures (non-finite energy) with 3.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Input(String),
    Numeric(String),
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        CliError::Numeric(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(msg) => write!(f, "{msg}"),
            CliError::Numeric(msg) => write!(f, "numeric failure: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

/// CLI flags mirroring [`PipelineConfig`] keys; set flags override config
/// file values.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigOverrides {
    #[arg(long, global = true)]
    pub fov_deg: Option<f64>,
    #[arg(long, global = true)]
    pub face_resolution: Option<usize>,
    #[arg(long, global = true)]
    pub pano_width: Option<usize>,
    #[arg(long, global = true)]
    pub grid_side: Option<usize>,
    #[arg(long, global = true)]
    pub fuse_power: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub lambda_cross: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_scale: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_mag: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_grid: Option<f64>,
    #[arg(long, global = true)]
    pub max_iters: Option<usize>,
    #[arg(long, global = true)]
    pub step_init: Option<f64>,
    #[arg(long, global = true)]
    pub huber_eps: Option<f64>,
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_pho: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_geo: Option<f64>,
    #[arg(long, global = true)]
    pub ssim_window: Option<usize>,
    #[arg(long, global = true)]
    pub ssim_sigma: Option<f64>,
    #[arg(long, global = true)]
    pub ssim_c1: Option<f64>,
    #[arg(long, global = true)]
    pub ssim_c2: Option<f64>,
}

impl ConfigOverrides {
    fn apply(&self, cfg: &mut PipelineConfig) {
        macro_rules! over {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        over!(
            fov_deg,
            face_resolution,
            pano_width,
            grid_side,
            fuse_power,
            seed,
            lambda_cross,
            lambda_scale,
            lambda_mag,
            lambda_grid,
            max_iters,
            step_init,
            huber_eps,
            tol,
            lambda_pho,
            lambda_geo,
            ssim_window,
            ssim_sigma,
            ssim_c1,
            ssim_c2
        );
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "panofuse",
    about = "Icosahedral tangent-image projection, panoramic depth alignment, losses, and RGB-D point-cloud export",
    version
)]
pub struct Cli {
    /// Line-oriented `key = value` config file; flags override file values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(flatten)]
    pub overrides: ConfigOverrides,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Project an equirectangular panorama onto the 20 icosahedron faces
    /// (PNG input -> face PNGs, PFM depth input -> face PFMs).
    Project {
        /// Input panorama (.png for RGB, .pfm for depth).
        #[arg(long)]
        pano: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Align per-face depth maps (face_00.pfm .. face_19.pfm) and fuse them
    /// into a panoramic depth map plus an energy trace.
    Align {
        /// Directory holding the 20 face PFM files.
        #[arg(long)]
        faces: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Photometric and geometry-aware losses of a render against ground
    /// truth, optionally with depth (and normals) rasters.
    Losses {
        #[arg(long)]
        render: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Pinhole z-depth PFM; enables the geometry-aware term.
        #[arg(long)]
        depth: Option<PathBuf>,
        /// 3-channel PFM of unit normals; recomputed from depth when absent.
        #[arg(long)]
        normals: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unproject panoramic RGB-D into a colored, normal-equipped PLY cloud.
    Export {
        #[arg(long)]
        pano: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        /// Keep every `stride`-th pixel in each direction.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render preview splats of a PLY cloud along a virtual trajectory and
    /// report per-pose coverage.
    Render {
        #[arg(long)]
        cloud: PathBuf,
        /// orbit | spiral | lemniscate
        #[arg(long, default_value = "orbit")]
        kind: String,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 0.5)]
        radius: f64,
        /// Output image side in pixels (defaults to face_resolution).
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long, default_value_t = 2)]
        splat: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic oracle scene: panorama triplet (PNG + depth PFM +
    /// normal PFM) and per-face depth maps, optionally corrupted.
    Synth {
        /// box | sphere
        #[arg(long, default_value = "box")]
        scene: String,
        /// Sphere radius (sphere scene).
        #[arg(long, default_value_t = 2.0)]
        radius: f64,
        /// Box half extents as `x,y,z` (box scene).
        #[arg(long, default_value = "2.5,2.0,1.6")]
        half_extents: String,
        /// Camera offset as `x,y,z` (box scene).
        #[arg(long, default_value = "0.3,-0.2,0.1")]
        camera_offset: String,
        /// none | per_face_constant | smooth_field
        #[arg(long, default_value = "none")]
        corrupt: String,
        /// Scale corruption range as `lo,hi`.
        #[arg(long, default_value = "0.7,1.4")]
        s_range: String,
        /// Offset corruption range as `lo,hi`.
        #[arg(long, default_value = "-0.2,0.2")]
        o_range: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Resolves the effective config (defaults, then file, then flags) and runs
/// the requested command.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    cfg.validate()?;

    match &cli.command {
        Command::Project { pano, out } => commands::project(pano, out, &cfg),
        Command::Align { faces, out } => commands::align(faces, out, &cfg),
        Command::Losses {
            render,
            gt,
            depth,
            normals,
            out,
        } => commands::losses(render, gt, depth.as_deref(), normals.as_deref(), out, &cfg),
        Command::Export {
            pano,
            depth,
            stride,
            out,
        } => commands::export(pano, depth, *stride, out, &cfg),
        Command::Render {
            cloud,
            kind,
            frames,
            radius,
            resolution,
            splat,
            out,
        } => commands::render(cloud, kind, *frames, *radius, *resolution, *splat, out, &cfg),
        Command::Synth {
            scene,
            radius,
            half_extents,
            camera_offset,
            corrupt,
            s_range,
            o_range,
            out,
        } => commands::synth(
            scene,
            *radius,
            half_extents,
            camera_offset,
            corrupt,
            s_range,
            o_range,
            out,
            &cfg,
        ),
    }
}
