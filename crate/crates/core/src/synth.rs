//! Analytic ground-truth scenes, corruption models, and error metrics.
//!
//! Every numerical claim of the other modules is checked against these
//! closed-form scenes instead of pretrained networks: a sphere room (constant
//! depth) and an axis-aligned box room, both textured with a fixed
//! band-limited RGB function of the view direction.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[cfg_attr(test, allow(unused_imports))]
use num_traits::Float;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::FaceDepth;
use crate::raster::{grid_eval, Raster};
use crate::sphere::{EquirectImage, GeomError, TangentFrame};

#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    /// The camera must sit strictly inside the scene geometry.
    CameraOutsideGeometry,
    BadSceneParameter(&'static str),
    BadRange(&'static str),
    /// Metric inputs disagree on dimensions.
    DimensionMismatch,
    /// No pixel is valid in both inputs of a metric.
    NoJointlyValidPixels,
    Geometry(GeomError),
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::CameraOutsideGeometry => {
                write!(f, "camera is not strictly inside the scene geometry")
            }
            OracleError::BadSceneParameter(msg) => write!(f, "bad scene parameter: {msg}"),
            OracleError::BadRange(msg) => write!(f, "bad corruption range: {msg}"),
            OracleError::DimensionMismatch => write!(f, "metric inputs differ in dimensions"),
            OracleError::NoJointlyValidPixels => write!(f, "no jointly valid pixels"),
            OracleError::Geometry(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for OracleError {}

impl From<GeomError> for OracleError {
    fn from(e: GeomError) -> Self {
        OracleError::Geometry(e)
    }
}

/// Closed-form room geometry observed from an interior camera.
#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticScene {
    /// Sphere of the given radius centered on the camera; depth is the radius
    /// in every direction.
    SphereRoom { radius: f64 },
    /// Axis-aligned box `[-h, h]^3` seen from `camera_offset`.
    BoxRoom {
        half_extents: Vector3<f64>,
        camera_offset: Vector3<f64>,
    },
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<(), OracleError> {
        match self {
            SyntheticScene::SphereRoom { radius } => {
                if !(*radius > 0.0) || !radius.is_finite() {
                    return Err(OracleError::BadSceneParameter("sphere radius must be positive"));
                }
            }
            SyntheticScene::BoxRoom {
                half_extents,
                camera_offset,
            } => {
                if !half_extents.iter().all(|h| *h > 0.0 && h.is_finite()) {
                    return Err(OracleError::BadSceneParameter("half extents must be positive"));
                }
                let inside = camera_offset
                    .iter()
                    .zip(half_extents.iter())
                    .all(|(c, h)| c.abs() < *h);
                if !inside {
                    return Err(OracleError::CameraOutsideGeometry);
                }
            }
        }
        Ok(())
    }

    /// Ray length from the camera along a unit direction to the surface.
    pub fn depth_along(&self, dir: &Vector3<f64>) -> f64 {
        match self {
            SyntheticScene::SphereRoom { radius } => *radius,
            SyntheticScene::BoxRoom {
                half_extents,
                camera_offset,
            } => {
                let mut t = f64::INFINITY;
                for axis in 0..3 {
                    let d = dir[axis];
                    if d.abs() < 1e-15 {
                        continue;
                    }
                    let wall = if d > 0.0 { half_extents[axis] } else { -half_extents[axis] };
                    t = t.min((wall - camera_offset[axis]) / d);
                }
                t
            }
        }
    }

    /// Camera-facing surface normal at the hit point along a unit direction.
    pub fn normal_along(&self, dir: &Vector3<f64>) -> Vector3<f64> {
        match self {
            SyntheticScene::SphereRoom { .. } => -dir,
            SyntheticScene::BoxRoom {
                half_extents,
                camera_offset,
            } => {
                let mut best_t = f64::INFINITY;
                let mut best_axis = 0;
                let mut sign = 1.0;
                for axis in 0..3 {
                    let d = dir[axis];
                    if d.abs() < 1e-15 {
                        continue;
                    }
                    let wall = if d > 0.0 { half_extents[axis] } else { -half_extents[axis] };
                    let t = (wall - camera_offset[axis]) / d;
                    if t < best_t {
                        best_t = t;
                        best_axis = axis;
                        sign = -d.signum();
                    }
                }
                let mut n = Vector3::zeros();
                n[best_axis] = sign;
                n
            }
        }
    }
}

/// Fixed band-limited procedural texture: three low-frequency sinusoids of
/// the direction components per channel, with range well inside (0, 1).
pub fn texture_rgb(dir: &Vector3<f64>) -> [f32; 3] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    [
        (0.55 + 0.22 * (3.0 * x + 2.0 * y).sin() + 0.13 * (2.0 * z).cos()) as f32,
        (0.50 + 0.20 * (2.0 * y + 1.5 * z).sin() + 0.15 * (3.0 * x).cos()) as f32,
        (0.45 + 0.18 * (2.5 * z + 2.0 * x).sin() + 0.17 * (2.0 * y).cos()) as f32,
    ]
}

/// Exact per-pixel ray-geometry intersection of a scene: RGB from the
/// procedural texture, radial depth, and camera-facing surface normals.
pub fn analytic_panorama(
    scene: &SyntheticScene,
    width: usize,
    height: usize,
) -> Result<(EquirectImage, EquirectImage, EquirectImage), OracleError> {
    scene.validate()?;
    let rgb = EquirectImage::from_dir_fn(width, height, 3, texture_rgb)?;
    let depth = EquirectImage::from_dir_fn(width, height, 1, |d| {
        [scene.depth_along(d) as f32, 0.0, 0.0]
    })?;
    let normals = EquirectImage::from_dir_fn(width, height, 3, |d| {
        let n = scene.normal_along(d);
        [n.x as f32, n.y as f32, n.z as f32]
    })?;
    Ok((rgb, depth, normals))
}

/// Analytic per-face radial depth maps (the exact values the per-face
/// monocular predictor would produce for a consistent scene).
pub fn analytic_face_depths(
    scene: &SyntheticScene,
    frames: &[TangentFrame],
) -> Result<Vec<FaceDepth>, OracleError> {
    scene.validate()?;
    Ok(frames
        .iter()
        .map(|frame| {
            let side = frame.resolution;
            let mut depth = vec![0.0f64; side * side];
            for iy in 0..side {
                for ix in 0..side {
                    let dir = frame.pixel_dir(ix, iy);
                    depth[iy * side + ix] = scene.depth_along(&dir);
                }
            }
            FaceDepth::new(frame.face_id, side, depth)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionMode {
    /// One `(s, o)` pair per face.
    PerFaceConstant,
    /// Low-frequency multiplicative/additive fields: a seeded 2x2 grid per
    /// face, bilinearly interpolated over the raster.
    SmoothField,
}

/// Seeded affine corruption of per-face depth maps.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionSpec {
    pub mode: CorruptionMode,
    pub s_range: (f64, f64),
    pub o_range: (f64, f64),
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<(), OracleError> {
        let (s0, s1) = self.s_range;
        let (o0, o1) = self.o_range;
        if !(s0 <= s1) || !s0.is_finite() || !s1.is_finite() {
            return Err(OracleError::BadRange("scale range must be finite and ordered"));
        }
        if s0 <= 0.0 && s1 >= 0.0 {
            return Err(OracleError::BadRange("scale range must exclude 0"));
        }
        if !(o0 <= o1) || !o0.is_finite() || !o1.is_finite() {
            return Err(OracleError::BadRange("offset range must be finite and ordered"));
        }
        Ok(())
    }
}

/// The exact affine corruption applied to one face, recorded so tests can
/// invert it. A 1x1 grid is a per-face constant.
#[derive(Debug, Clone, PartialEq)]
pub struct AppliedCorruption {
    pub face_id: usize,
    pub grid_side: usize,
    pub scales: Vec<f64>,
    pub offsets: Vec<f64>,
}

impl AppliedCorruption {
    /// `(s, o)` at continuous pixel coordinates of a `raster_side` raster.
    pub fn eval(&self, px: f64, py: f64, raster_side: usize) -> (f64, f64) {
        (
            grid_eval(&self.scales, self.grid_side, px, py, raster_side),
            grid_eval(&self.offsets, self.grid_side, px, py, raster_side),
        )
    }
}

fn draw(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..=range.1)
    }
}

/// Applies `D'(p) = s(p) D(p) + o(p)` per face with parameters drawn from the
/// seeded generator; bit-identical for equal seeds.
pub fn corrupt_faces(
    true_faces: &[FaceDepth],
    spec: &CorruptionSpec,
) -> Result<(Vec<FaceDepth>, Vec<AppliedCorruption>), OracleError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let grid_side = match spec.mode {
        CorruptionMode::PerFaceConstant => 1,
        CorruptionMode::SmoothField => 2,
    };
    let n = grid_side * grid_side;

    let mut corrupted = Vec::with_capacity(true_faces.len());
    let mut applied = Vec::with_capacity(true_faces.len());
    for face in true_faces {
        let scales: Vec<f64> = (0..n).map(|_| draw(&mut rng, spec.s_range)).collect();
        let offsets: Vec<f64> = (0..n).map(|_| draw(&mut rng, spec.o_range)).collect();
        let record = AppliedCorruption {
            face_id: face.face_id,
            grid_side,
            scales,
            offsets,
        };
        let side = face.side();
        let mut depth = vec![0.0f64; side * side];
        for y in 0..side {
            for x in 0..side {
                let (s, o) = record.eval(x as f64, y as f64, side);
                depth[y * side + x] = s * face.value(x, y) + o;
            }
        }
        corrupted.push(FaceDepth::with_validity(
            face.face_id,
            side,
            depth,
            face.validity().to_vec(),
        ));
        applied.push(record);
    }
    Ok((corrupted, applied))
}

/// Gauge handling of [`depth_rmse`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RmseGauge {
    /// Compare values directly.
    None,
    /// First fit the scalar `(s, o)` minimizing `sum (s a + o - b)^2` in
    /// closed form, then report the residual RMSE.
    GlobalAffine,
}

/// RMSE between two depth panoramas over jointly valid pixels.
pub fn depth_rmse(a: &EquirectImage, b: &EquirectImage, gauge: RmseGauge) -> Result<f64, OracleError> {
    if a.width() != b.width() || a.height() != b.height() || a.channels() != 1 || b.channels() != 1 {
        return Err(OracleError::DimensionMismatch);
    }
    let mut xs: Vec<(f64, f64)> = Vec::new();
    for v in 0..a.height() {
        for u in 0..a.width() {
            if a.raster().is_valid(u, v) && b.raster().is_valid(u, v) {
                xs.push((a.raster().pixel(u, v)[0] as f64, b.raster().pixel(u, v)[0] as f64));
            }
        }
    }
    if xs.is_empty() {
        return Err(OracleError::NoJointlyValidPixels);
    }
    let n = xs.len() as f64;
    let (s, o) = match gauge {
        RmseGauge::None => (1.0, 0.0),
        RmseGauge::GlobalAffine => {
            let sum_a: f64 = xs.iter().map(|(x, _)| x).sum();
            let sum_b: f64 = xs.iter().map(|(_, y)| y).sum();
            let sum_aa: f64 = xs.iter().map(|(x, _)| x * x).sum();
            let sum_ab: f64 = xs.iter().map(|(x, y)| x * y).sum();
            let det = sum_aa * n - sum_a * sum_a;
            if det.abs() <= 1e-12 * sum_aa.max(1.0) * n {
                // a is (near) constant: only the offset is identifiable
                (1.0, (sum_b - sum_a) / n)
            } else {
                let s = (sum_ab * n - sum_a * sum_b) / det;
                let o = (sum_b - s * sum_a) / n;
                (s, o)
            }
        }
    };
    let mse: f64 = xs
        .iter()
        .map(|(x, y)| {
            let r = s * x + o - y;
            r * r
        })
        .sum::<f64>()
        / n;
    Ok(mse.sqrt())
}

/// Peak signal-to-noise ratio in dB for unit-range rasters, over jointly
/// valid pixels; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Raster, b: &Raster) -> Result<f64, OracleError> {
    if a.width() != b.width() || a.height() != b.height() || a.channels() != b.channels() {
        return Err(OracleError::DimensionMismatch);
    }
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if !a.is_valid(x, y) || !b.is_valid(x, y) {
                continue;
            }
            for (pa, pb) in a.pixel(x, y).iter().zip(b.pixel(x, y).iter()) {
                let d = *pa as f64 - *pb as f64;
                acc += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(OracleError::NoJointlyValidPixels);
    }
    let mse = acc / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}
