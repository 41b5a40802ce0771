//! Subcommand implementations. Every command is deterministic given its
//! inputs, the effective config, and the seed; JSON reports embed the config
//! for provenance.

use std::fs;
use std::path::Path;

use panofuse_core::nalgebra::Vector3;
use serde::Serialize;

use panofuse_core::align::{optimize, AlignError, FaceDepth};
use panofuse_core::cloud::{
    camera_trajectory, read_ply, render_points, unproject_panorama, write_ply, TrajectoryKind,
};
use panofuse_core::loss::{gaussian_loss, normals_from_depth, photometric_loss, LossValues, NormalMap};
use panofuse_core::raster::Raster;
use panofuse_core::sphere::{icosahedron_frames, project_to_faces, EquirectImage, FACE_COUNT};
use panofuse_core::synth::{
    analytic_face_depths, analytic_panorama, corrupt_faces, CorruptionMode, CorruptionSpec,
    SyntheticScene,
};

use crate::config::PipelineConfig;
use crate::pfm::{read_pfm, write_pfm};
use crate::pngio::{read_png, write_png};
use crate::CliError;

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::input(format!("cannot create {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::input(format!("cannot serialize report: {e}")))?;
    text.push('\n');
    fs::write(path, text)
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

fn equirect(raster: Raster, what: &str) -> Result<EquirectImage, CliError> {
    EquirectImage::from_raster(raster)
        .map_err(|e| CliError::input(format!("{what}: {e}")))
}

fn align_error(e: AlignError) -> CliError {
    match e {
        AlignError::NonFiniteEnergy => CliError::numeric(e.to_string()),
        other => CliError::input(other.to_string()),
    }
}

pub fn project(pano: &Path, out: &Path, cfg: &PipelineConfig) -> Result<(), CliError> {
    ensure_dir(out)?;
    let is_depth = pano.extension().and_then(|e| e.to_str()) == Some("pfm");
    let image = if is_depth {
        equirect(read_pfm(pano, true)?, "depth panorama")?
    } else {
        equirect(read_png(pano)?, "panorama")?
    };
    let frames = icosahedron_frames(cfg.fov_deg, cfg.face_resolution)
        .map_err(|e| CliError::input(e.to_string()))?;
    let views = project_to_faces(&image, &frames).map_err(|e| CliError::input(e.to_string()))?;
    for view in &views {
        let id = view.frame.face_id;
        if is_depth {
            write_pfm(&out.join(format!("face_{id:02}.pfm")), &view.image)?;
        } else {
            write_png(&out.join(format!("face_{id:02}.png")), &view.image)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EnergyRecord {
    data: f64,
    cross: f64,
    scale: f64,
    magnitude: f64,
    grid: f64,
    total: f64,
}

#[derive(Serialize)]
struct TraceReport<'a> {
    config: &'a PipelineConfig,
    trace: Vec<EnergyRecord>,
}

pub fn align(faces: &Path, out: &Path, cfg: &PipelineConfig) -> Result<(), CliError> {
    ensure_dir(out)?;
    let mut depths = Vec::with_capacity(FACE_COUNT);
    for id in 0..FACE_COUNT {
        let path = faces.join(format!("face_{id:02}.pfm"));
        if !path.exists() {
            return Err(CliError::input(format!("missing face file {}", path.display())));
        }
        let raster = read_pfm(&path, true)?;
        if raster.width() != raster.height() {
            return Err(CliError::input(format!(
                "{}: face rasters must be square",
                path.display()
            )));
        }
        if raster.width() != cfg.face_resolution {
            return Err(CliError::input(format!(
                "{}: face side {} does not match face_resolution {}",
                path.display(),
                raster.width(),
                cfg.face_resolution
            )));
        }
        let side = raster.width();
        let values: Vec<f64> = raster.data().iter().map(|&v| v as f64).collect();
        let validity: Vec<bool> = (0..side * side)
            .map(|i| raster.is_valid(i % side, i / side))
            .collect();
        depths.push(FaceDepth::with_validity(id, side, values, validity));
    }

    let frames = icosahedron_frames(cfg.fov_deg, cfg.face_resolution)
        .map_err(|e| CliError::input(e.to_string()))?;
    let result = optimize(&depths, &frames, cfg.grid_side, &cfg.alignment(), &cfg.fuse())
        .map_err(align_error)?;

    write_pfm(&out.join("fused.pfm"), result.fused.raster())?;
    let report = TraceReport {
        config: cfg,
        trace: result
            .trace
            .iter()
            .map(|e| EnergyRecord {
                data: e.data,
                cross: e.cross,
                scale: e.scale,
                magnitude: e.magnitude,
                grid: e.grid,
                total: e.total,
            })
            .collect(),
    };
    write_json(&out.join("trace.json"), &report)
}

#[derive(Serialize)]
struct LossRecord {
    l1: f64,
    ssim_value: f64,
    l_ssim: f64,
    l_pho: f64,
    l_geo: f64,
    l_gaussian: f64,
}

#[derive(Serialize)]
struct LossReport<'a> {
    config: &'a PipelineConfig,
    losses: LossRecord,
}

pub fn losses(
    render: &Path,
    gt: &Path,
    depth: Option<&Path>,
    normals: Option<&Path>,
    out: &Path,
    cfg: &PipelineConfig,
) -> Result<(), CliError> {
    ensure_dir(out)?;
    let render = read_png(render)?;
    let gt = read_png(gt)?;
    let loss_cfg = cfg.loss();

    let values: LossValues = match depth {
        None => photometric_loss(&render, &gt, &loss_cfg)
            .map_err(|e| CliError::input(e.to_string()))?,
        Some(depth_path) => {
            let depth = read_pfm(depth_path, true)?;
            let focal = depth.width() as f64 / (2.0 * (cfg.fov_deg.to_radians() / 2.0).tan());
            let nmap: NormalMap = match normals {
                Some(npath) => {
                    let nr = read_pfm(npath, false)?;
                    if nr.width() != depth.width() || nr.height() != depth.height() {
                        return Err(CliError::input("normals and depth dimensions differ"));
                    }
                    NormalMap::from_raster(&nr).map_err(|e| CliError::input(e.to_string()))?
                }
                None => normals_from_depth(&depth, focal)
                    .map_err(|e| CliError::input(e.to_string()))?,
            };
            gaussian_loss(&render, &gt, &depth, &nmap, focal, &loss_cfg)
                .map_err(|e| CliError::input(e.to_string()))?
        }
    };

    let report = LossReport {
        config: cfg,
        losses: LossRecord {
            l1: values.l1,
            ssim_value: values.ssim_value,
            l_ssim: values.l_ssim,
            l_pho: values.l_pho,
            l_geo: values.l_geo,
            l_gaussian: values.l_gaussian,
        },
    };
    write_json(&out.join("losses.json"), &report)
}

pub fn export(
    pano: &Path,
    depth: &Path,
    stride: usize,
    out: &Path,
    _cfg: &PipelineConfig,
) -> Result<(), CliError> {
    ensure_dir(out)?;
    let rgb = equirect(read_png(pano)?, "panorama")?;
    let depth = equirect(read_pfm(depth, true)?, "depth panorama")?;
    if rgb.width() != depth.width() || rgb.height() != depth.height() {
        return Err(CliError::input("panorama and depth dimensions differ"));
    }
    let cloud = unproject_panorama(&rgb, &depth, stride)
        .map_err(|e| CliError::input(e.to_string()))?;
    fs::write(out.join("scene.ply"), write_ply(&cloud))
        .map_err(|e| CliError::input(format!("cannot write scene.ply: {e}")))
}

#[derive(Serialize)]
struct PoseCoverage {
    pose_index: usize,
    covered_fraction: f64,
}

#[derive(Serialize)]
struct CoverageReport<'a> {
    config: &'a PipelineConfig,
    kind: &'a str,
    frames: usize,
    radius: f64,
    coverage: Vec<PoseCoverage>,
}

#[allow(clippy::too_many_arguments)]
pub fn render(
    cloud: &Path,
    kind: &str,
    frames: usize,
    radius: f64,
    resolution: Option<usize>,
    splat: usize,
    out: &Path,
    cfg: &PipelineConfig,
) -> Result<(), CliError> {
    ensure_dir(out)?;
    let kind_parsed = TrajectoryKind::parse(kind)
        .ok_or_else(|| CliError::input(format!("unknown trajectory kind '{kind}'")))?;
    let bytes = fs::read(cloud)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", cloud.display())))?;
    let cloud = read_ply(&bytes).map_err(|e| CliError::input(e.to_string()))?;
    let resolution = resolution.unwrap_or(cfg.face_resolution);

    let poses = camera_trajectory(kind_parsed, frames, radius, cfg.fov_deg)
        .map_err(|e| CliError::input(e.to_string()))?;
    let mut coverage = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        let view = render_points(&cloud, pose, resolution, splat)
            .map_err(|e| CliError::input(e.to_string()))?;
        write_png(&out.join(format!("pose_{i:03}.png")), &view.rgb)?;
        coverage.push(PoseCoverage {
            pose_index: i,
            covered_fraction: view.covered_fraction(),
        });
    }
    let report = CoverageReport {
        config: cfg,
        kind,
        frames,
        radius,
        coverage,
    };
    write_json(&out.join("coverage.json"), &report)
}

fn parse_vec3(text: &str, what: &str) -> Result<Vector3<f64>, CliError> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::input(format!("bad {what} '{text}', expected x,y,z")))?;
    if parts.len() != 3 {
        return Err(CliError::input(format!("bad {what} '{text}', expected x,y,z")));
    }
    Ok(Vector3::new(parts[0], parts[1], parts[2]))
}

fn parse_range(text: &str, what: &str) -> Result<(f64, f64), CliError> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::input(format!("bad {what} '{text}', expected lo,hi")))?;
    if parts.len() != 2 {
        return Err(CliError::input(format!("bad {what} '{text}', expected lo,hi")));
    }
    Ok((parts[0], parts[1]))
}

#[derive(Serialize)]
struct AppliedRecord {
    face_id: usize,
    grid_side: usize,
    scales: Vec<f64>,
    offsets: Vec<f64>,
}

#[derive(Serialize)]
struct CorruptionReport<'a> {
    config: &'a PipelineConfig,
    mode: &'a str,
    s_range: (f64, f64),
    o_range: (f64, f64),
    faces: Vec<AppliedRecord>,
}

#[allow(clippy::too_many_arguments)]
pub fn synth(
    scene: &str,
    radius: f64,
    half_extents: &str,
    camera_offset: &str,
    corrupt: &str,
    s_range: &str,
    o_range: &str,
    out: &Path,
    cfg: &PipelineConfig,
) -> Result<(), CliError> {
    ensure_dir(out)?;
    let scene = match scene {
        "sphere" => SyntheticScene::SphereRoom { radius },
        "box" => SyntheticScene::BoxRoom {
            half_extents: parse_vec3(half_extents, "half extents")?,
            camera_offset: parse_vec3(camera_offset, "camera offset")?,
        },
        other => return Err(CliError::input(format!("unknown scene '{other}'"))),
    };

    let (w, h) = (cfg.pano_width, cfg.pano_width / 2);
    let (rgb, depth, normals) =
        analytic_panorama(&scene, w, h).map_err(|e| CliError::input(e.to_string()))?;
    write_png(&out.join("pano.png"), rgb.raster())?;
    write_pfm(&out.join("depth.pfm"), depth.raster())?;
    write_pfm(&out.join("normals.pfm"), normals.raster())?;

    let frames = icosahedron_frames(cfg.fov_deg, cfg.face_resolution)
        .map_err(|e| CliError::input(e.to_string()))?;
    let truth = analytic_face_depths(&scene, &frames).map_err(|e| CliError::input(e.to_string()))?;

    let faces_dir = out.join("faces");
    ensure_dir(&faces_dir)?;
    let mode = match corrupt {
        "none" => None,
        "per_face_constant" => Some(CorruptionMode::PerFaceConstant),
        "smooth_field" => Some(CorruptionMode::SmoothField),
        other => return Err(CliError::input(format!("unknown corruption mode '{other}'"))),
    };

    let (faces, report) = match mode {
        None => (truth, None),
        Some(mode) => {
            let spec = CorruptionSpec {
                mode,
                s_range: parse_range(s_range, "s_range")?,
                o_range: parse_range(o_range, "o_range")?,
                seed: cfg.seed,
            };
            let (corrupted, applied) =
                corrupt_faces(&truth, &spec).map_err(|e| CliError::input(e.to_string()))?;
            let records = applied
                .into_iter()
                .map(|a| AppliedRecord {
                    face_id: a.face_id,
                    grid_side: a.grid_side,
                    scales: a.scales,
                    offsets: a.offsets,
                })
                .collect();
            (corrupted, Some(records))
        }
    };

    for face in &faces {
        let side = face.side();
        let mut raster = Raster::new(side, side, 1);
        for y in 0..side {
            for x in 0..side {
                raster.pixel_mut(x, y)[0] = face.value(x, y) as f32;
                if !face.is_valid(x, y) {
                    raster.set_valid(x, y, false);
                }
            }
        }
        write_pfm(&faces_dir.join(format!("face_{:02}.pfm", face.face_id)), &raster)?;
    }

    if let Some(records) = report {
        let corruption = CorruptionReport {
            config: cfg,
            mode: corrupt,
            s_range: parse_range(s_range, "s_range")?,
            o_range: parse_range(o_range, "o_range")?,
            faces: records,
        };
        write_json(&out.join("corruption.json"), &corruption)?;
    }
    Ok(())
}
