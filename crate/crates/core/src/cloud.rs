//! Point-cloud export of fused panoramic RGB-D, virtual camera trajectories,
//! and a z-buffered square-splat preview renderer that exposes coverage holes.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::TAU;
use core::fmt;

#[cfg_attr(test, allow(unused_imports))]
use num_traits::Float;
use nalgebra::Vector3;

use crate::raster::Raster;
use crate::sphere::{EquirectImage, SphericalCoord};

#[derive(Debug, Clone, PartialEq)]
pub enum ExportError {
    DimensionMismatch,
    BadParameter(&'static str),
}

impl fmt::Display for ExportError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExportError::DimensionMismatch => write!(f, "input rasters differ in dimensions"),
            ExportError::BadParameter(msg) => write!(f, "{msg}"),
        }
    }
}

impl core::error::Error for ExportError {}

/// PLY parse failure, pointing at the offending line (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct PlyError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for PlyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PLY parse error at line {}: {}", self.line, self.message)
    }
}

impl core::error::Error for PlyError {}

/// One colored, oriented surface point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudPoint {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<CloudPoint>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A virtual pinhole camera pose.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub position: Vector3<f64>,
    pub forward: Vector3<f64>,
    pub up: Vector3<f64>,
    pub fov_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryKind {
    /// Horizontal circle about the origin, looking outward.
    Orbit,
    /// Orbit with height varying linearly from `-radius/2` to `+radius/2`.
    Spiral,
    /// Figure-eight (lemniscate of Bernoulli) in the horizontal plane.
    Lemniscate,
}

impl TrajectoryKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "orbit" => Some(Self::Orbit),
            "spiral" => Some(Self::Spiral),
            "lemniscate" => Some(Self::Lemniscate),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Orbit => "orbit",
            Self::Spiral => "spiral",
            Self::Lemniscate => "lemniscate",
        }
    }
}

fn color_of(px: &[f32]) -> [u8; 3] {
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match px.len() {
        1 => [q(px[0]); 3],
        _ => [q(px[0]), q(px[1]), q(px[2])],
    }
}

/// Unprojects a panoramic RGB-D pair into a point cloud: one point per valid
/// depth pixel on the stride grid, at `depth * direction` from the panorama
/// camera at the origin.
///
/// Normals come from the cross product of spherical finite-difference
/// tangents (wrapping in longitude, one-sided at the pole rows), flipped to
/// face the camera; where the stencil is incomplete or degenerate the inward
/// radial direction is used instead.
pub fn unproject_panorama(
    rgb: &EquirectImage,
    depth: &EquirectImage,
    stride: usize,
) -> Result<PointCloud, ExportError> {
    if rgb.width() != depth.width() || rgb.height() != depth.height() {
        return Err(ExportError::DimensionMismatch);
    }
    if depth.channels() != 1 {
        return Err(ExportError::BadParameter("depth panorama must be single-channel"));
    }
    if stride < 1 {
        return Err(ExportError::BadParameter("stride must be >= 1"));
    }
    let (w, h) = (depth.width(), depth.height());

    let point_at = |u: usize, v: usize| -> Option<Vector3<f64>> {
        if !depth.raster().is_valid(u, v) {
            return None;
        }
        let d = depth.raster().pixel(u, v)[0] as f64;
        Some(depth.dir_at(u, v) * d)
    };

    let mut points = Vec::new();
    for v in (0..h).step_by(stride) {
        for u in (0..w).step_by(stride) {
            let Some(position) = point_at(u, v) else {
                continue;
            };
            let dir = depth.dir_at(u, v);

            // spherical stencil: wrap u, one-sided at the pole rows
            let um = (u + w - 1) % w;
            let up_ = (u + 1) % w;
            let vm = v.saturating_sub(1);
            let vp = (v + 1).min(h - 1);
            let normal = match (point_at(um, v), point_at(up_, v), point_at(u, vm), point_at(u, vp)) {
                (Some(pxm), Some(pxp), Some(pym), Some(pyp)) => {
                    let n = (pxp - pxm).cross(&(pyp - pym));
                    let norm = n.norm();
                    if norm > 1e-12 && norm.is_finite() {
                        let n = n / norm;
                        if n.dot(&dir) > 0.0 {
                            -n
                        } else {
                            n
                        }
                    } else {
                        -dir
                    }
                }
                _ => -dir,
            };

            let color = color_of(rgb.raster().pixel(u, v));
            points.push(CloudPoint {
                position,
                normal,
                color,
            });
        }
    }
    Ok(PointCloud { points })
}

/// Deterministic virtual camera trajectories about the origin. Pose 0 sits at
/// azimuth 0 with forward along +X; all poses keep `up = +Z`, so forward
/// stays horizontal and orthogonal to up.
pub fn camera_trajectory(
    kind: TrajectoryKind,
    n: usize,
    radius: f64,
    fov_deg: f64,
) -> Result<Vec<CameraPose>, ExportError> {
    if n < 1 {
        return Err(ExportError::BadParameter("trajectory needs at least one pose"));
    }
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(ExportError::BadParameter("radius must be finite and >= 0"));
    }
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(ExportError::BadParameter("fov must lie in (0, 180) degrees"));
    }
    let up = Vector3::z();
    let mut poses = Vec::with_capacity(n);
    for i in 0..n {
        let t = TAU * i as f64 / n as f64;
        let (position, forward) = match kind {
            TrajectoryKind::Orbit => {
                let out = Vector3::new(t.cos(), t.sin(), 0.0);
                (out * radius, out)
            }
            TrajectoryKind::Spiral => {
                let out = Vector3::new(t.cos(), t.sin(), 0.0);
                let z = if n > 1 {
                    -radius / 2.0 + radius * i as f64 / (n - 1) as f64
                } else {
                    0.0
                };
                (out * radius + Vector3::new(0.0, 0.0, z), out)
            }
            TrajectoryKind::Lemniscate => {
                let denom = 1.0 + t.sin() * t.sin();
                let position = Vector3::new(
                    radius * t.cos() / denom,
                    radius * t.sin() * t.cos() / denom,
                    0.0,
                );
                let horiz = position.xy().norm();
                let forward = if horiz > 1e-9 * radius.max(1.0) {
                    Vector3::new(position.x / horiz, position.y / horiz, 0.0)
                } else {
                    // at the origin crossing look along +X
                    Vector3::x()
                };
                (position, forward)
            }
        };
        poses.push(CameraPose {
            position,
            forward,
            up,
            fov_deg,
        });
    }
    Ok(poses)
}

/// A rendered preview: RGB, z-depth, and per-pixel coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub rgb: Raster,
    pub depth: Raster,
    pub covered: Vec<bool>,
}

impl RenderedView {
    pub fn covered_fraction(&self) -> f64 {
        if self.covered.is_empty() {
            return 0.0;
        }
        self.covered.iter().filter(|&&c| c).count() as f64 / self.covered.len() as f64
    }
}

struct ZBuffer {
    width: usize,
    height: usize,
    rgb: Raster,
    depth: Raster,
    z: Vec<f64>,
    covered: Vec<bool>,
}

impl ZBuffer {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: Raster::new(width, height, 3),
            depth: Raster::new(width, height, 1),
            z: vec![f64::INFINITY; width * height],
            covered: vec![false; width * height],
        }
    }

    /// Splats a square of side `splat_px` centered at the continuous pixel
    /// position; nearer points win, ties keep the earlier point.
    fn splat(&mut self, px: f64, py: f64, z: f64, color: [u8; 3], splat_px: usize) {
        let half = (splat_px as i64 - 1) / 2;
        // pixel i spans [i - 0.5, i + 0.5): the containing pixel is
        // floor(p + 0.5), not floor(p)
        let cx = (px + 0.5).floor() as i64;
        let cy = (py + 0.5).floor() as i64;
        for dy in -half..=(splat_px as i64 - 1 - half) {
            for dx in -half..=(splat_px as i64 - 1 - half) {
                let (x, y) = (cx + dx, cy + dy);
                if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
                    continue;
                }
                let (x, y) = (x as usize, y as usize);
                let i = y * self.width + x;
                if z < self.z[i] {
                    self.z[i] = z;
                    self.covered[i] = true;
                    let p = self.rgb.pixel_mut(x, y);
                    p[0] = color[0] as f32 / 255.0;
                    p[1] = color[1] as f32 / 255.0;
                    p[2] = color[2] as f32 / 255.0;
                    self.depth.pixel_mut(x, y)[0] = z as f32;
                }
            }
        }
    }

    fn finish(mut self) -> RenderedView {
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.covered[y * self.width + x] {
                    self.rgb.set_valid(x, y, false);
                    self.depth.set_valid(x, y, false);
                }
            }
        }
        RenderedView {
            rgb: self.rgb,
            depth: self.depth,
            covered: self.covered,
        }
    }
}

/// Renders a point cloud through a pinhole camera at the pose with square
/// z-buffered splats. Uncovered pixels are flagged in the coverage mask (and
/// marked invalid in the rasters). Deterministic: on exact depth ties the
/// lowest point index wins.
pub fn render_points(
    cloud: &PointCloud,
    pose: &CameraPose,
    resolution: usize,
    splat_px: usize,
) -> Result<RenderedView, ExportError> {
    if resolution < 1 {
        return Err(ExportError::BadParameter("resolution must be >= 1"));
    }
    if splat_px < 1 {
        return Err(ExportError::BadParameter("splat_px must be >= 1"));
    }
    if !(pose.fov_deg > 0.0 && pose.fov_deg < 180.0) {
        return Err(ExportError::BadParameter("fov must lie in (0, 180) degrees"));
    }
    // right-handed camera frame: x right, y down, z forward
    let z_cam = pose.forward.normalize();
    let x_cam = pose.forward.cross(&pose.up).normalize();
    let y_cam = z_cam.cross(&x_cam);

    let res = resolution as f64;
    let f = res / (2.0 * (pose.fov_deg.to_radians() / 2.0).tan());
    let c = res / 2.0;

    let mut buf = ZBuffer::new(resolution, resolution);
    for p in &cloud.points {
        let q = p.position - pose.position;
        let z = q.dot(&z_cam);
        if z <= 0.0 {
            continue;
        }
        let px = f * q.dot(&x_cam) / z + c - 0.5;
        let py = f * q.dot(&y_cam) / z + c - 0.5;
        buf.splat(px, py, z, p.color, splat_px);
    }
    Ok(buf.finish())
}

/// Renders a point cloud back through the panorama camera at the origin;
/// the depth raster holds radial distance.
pub fn render_points_pano(
    cloud: &PointCloud,
    width: usize,
    height: usize,
    splat_px: usize,
) -> Result<RenderedView, ExportError> {
    if width != 2 * height || height == 0 {
        return Err(ExportError::BadParameter("panorama raster must be 2:1"));
    }
    if splat_px < 1 {
        return Err(ExportError::BadParameter("splat_px must be >= 1"));
    }
    let mut buf = ZBuffer::new(width, height);
    for p in &cloud.points {
        let r = p.position.norm();
        if !(r > 0.0) || !r.is_finite() {
            continue;
        }
        let coord = SphericalCoord::from_dir(&(p.position / r));
        let (px, py) = coord.to_pixel(width, height);
        buf.splat(px, py, r, p.color, splat_px);
    }
    Ok(buf.finish())
}

const PLY_PROPERTIES: [&str; 9] = [
    "property float x",
    "property float y",
    "property float z",
    "property float nx",
    "property float ny",
    "property float nz",
    "property uchar red",
    "property uchar green",
    "property uchar blue",
];

/// Serializes a cloud as ASCII PLY (positions and normals as float32, colors
/// as uchar). `f32` values print in shortest round-trip form, so
/// [`read_ply`] recovers them exactly.
pub fn write_ply(cloud: &PointCloud) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", cloud.len()));
    for p in PLY_PROPERTIES {
        out.push_str(p);
        out.push('\n');
    }
    out.push_str("end_header\n");
    for p in &cloud.points {
        let pos = p.position.map(|v| v as f32);
        let nrm = p.normal.map(|v| v as f32);
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {} {}\n",
            pos.x, pos.y, pos.z, nrm.x, nrm.y, nrm.z, p.color[0], p.color[1], p.color[2]
        ));
    }
    out
}

/// Parses the ASCII PLY dialect produced by [`write_ply`].
pub fn read_ply(bytes: &[u8]) -> Result<PointCloud, PlyError> {
    let text = core::str::from_utf8(bytes).map_err(|e| PlyError {
        line: 0,
        message: format!("not valid UTF-8: {e}"),
    })?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
    let mut next = |expect: &str| -> Result<(usize, String), PlyError> {
        lines.next().map(|(n, l)| (n, l.to_string())).ok_or(PlyError {
            line: 0,
            message: format!("unexpected end of file, expected {expect}"),
        })
    };

    let (n, l) = next("magic line 'ply'")?;
    if l != "ply" {
        return Err(PlyError {
            line: n,
            message: format!("expected 'ply', got '{l}'"),
        });
    }
    let (n, l) = next("'format ascii 1.0'")?;
    if l != "format ascii 1.0" {
        return Err(PlyError {
            line: n,
            message: format!("expected 'format ascii 1.0', got '{l}'"),
        });
    }
    let (n, l) = next("'element vertex N'")?;
    let count: usize = l
        .strip_prefix("element vertex ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| PlyError {
            line: n,
            message: format!("expected 'element vertex N', got '{l}'"),
        })?;
    for want in PLY_PROPERTIES {
        let (n, l) = next("vertex property")?;
        if l != want {
            return Err(PlyError {
                line: n,
                message: format!("expected '{want}', got '{l}'"),
            });
        }
    }
    let (n, l) = next("'end_header'")?;
    if l != "end_header" {
        return Err(PlyError {
            line: n,
            message: format!("expected 'end_header', got '{l}'"),
        });
    }

    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, l) = match lines.next() {
            Some(v) => v,
            None => {
                return Err(PlyError {
                    line: 0,
                    message: format!("body truncated: expected {count} vertices, got {}", points.len()),
                })
            }
        };
        let fields: Vec<&str> = l.split_whitespace().collect();
        if fields.len() != 9 {
            return Err(PlyError {
                line: n,
                message: format!("expected 9 fields, got {}", fields.len()),
            });
        }
        let fl = |i: usize| -> Result<f32, PlyError> {
            fields[i].parse().map_err(|_| PlyError {
                line: n,
                message: format!("bad float '{}'", fields[i]),
            })
        };
        let by = |i: usize| -> Result<u8, PlyError> {
            fields[i].parse().map_err(|_| PlyError {
                line: n,
                message: format!("bad color byte '{}'", fields[i]),
            })
        };
        points.push(CloudPoint {
            position: Vector3::new(fl(0)? as f64, fl(1)? as f64, fl(2)? as f64),
            normal: Vector3::new(fl(3)? as f64, fl(4)? as f64, fl(5)? as f64),
            color: [by(6)?, by(7)?, by(8)?],
        });
    }
    if let Some((n, l)) = lines.next() {
        if !l.trim().is_empty() {
            return Err(PlyError {
                line: n,
                message: format!("trailing content after vertex body: '{l}'"),
            });
        }
    }
    Ok(PointCloud { points })
}
