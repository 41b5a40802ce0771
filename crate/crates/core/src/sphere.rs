//! Directions-on-the-sphere math: equirectangular pixel/direction mapping,
//! icosahedron tangent frames, gnomonic projection, and resampling between
//! equirectangular and perspective rasters.
//!
//! Conventions used throughout the crate:
//! * longitude `theta` in `[0, 2*pi)` measured from +X toward +Y,
//! * latitude `phi` in `[-pi/2, +pi/2]` with +Z at `phi = +pi/2`,
//! * direction `(cos(phi)cos(theta), cos(phi)sin(theta), sin(phi))`,
//! * pixel `(u, v)` of a `W x H` equirectangular raster maps to
//!   `theta = 2*pi*(u+0.5)/W`, `phi = pi/2 - pi*(v+0.5)/H`,
//! * continuous raster coordinates place the center of pixel `i` at `i`.

use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};
use core::fmt;

#[cfg_attr(test, allow(unused_imports))]
use num_traits::Float;
use nalgebra::Vector3;

use crate::raster::Raster;

/// Number of faces of the icosahedral layout.
pub const FACE_COUNT: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub enum GeomError {
    /// Per-side field of view must lie strictly inside (0, 180) degrees.
    FovOutOfRange(f64),
    /// Face rasters need at least 2 pixels per side.
    ResolutionTooSmall(usize),
    /// A direction argument was not unit length.
    NonUnitDirection { norm: f64 },
    /// Equirectangular rasters must be twice as wide as tall.
    NotEquirect { width: usize, height: usize },
    /// Only 1-channel (scalar) and 3-channel rasters are supported.
    BadChannelCount(usize),
    /// An operation over tangent frames received an empty frame list.
    NoFrames,
}

impl fmt::Display for GeomError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeomError::FovOutOfRange(v) => {
                write!(f, "field of view {v} deg outside the open interval (0, 180)")
            }
            GeomError::ResolutionTooSmall(r) => write!(f, "face resolution {r} < 2"),
            GeomError::NonUnitDirection { norm } => {
                write!(f, "direction has norm {norm}, expected 1")
            }
            GeomError::NotEquirect { width, height } => {
                write!(f, "raster {width}x{height} is not 2:1 equirectangular")
            }
            GeomError::BadChannelCount(c) => write!(f, "unsupported channel count {c}"),
            GeomError::NoFrames => write!(f, "empty tangent frame list"),
        }
    }
}

impl core::error::Error for GeomError {}

/// Longitude/latitude pair in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalCoord {
    /// Longitude in `[0, 2*pi)`.
    pub theta: f64,
    /// Latitude in `[-pi/2, +pi/2]`.
    pub phi: f64,
}

impl SphericalCoord {
    /// Wraps `theta` modulo `2*pi` and clamps `phi` at the poles.
    pub fn new(theta: f64, phi: f64) -> Self {
        let mut t = theta % TAU;
        if t < 0.0 {
            t += TAU;
        }
        Self {
            theta: t,
            phi: phi.clamp(-PI / 2.0, PI / 2.0),
        }
    }

    /// Coordinates of the center of pixel `(u, v)` in a `width x height` raster.
    pub fn from_pixel(u: usize, v: usize, width: usize, height: usize) -> Self {
        Self::new(
            TAU * (u as f64 + 0.5) / width as f64,
            PI / 2.0 - PI * (v as f64 + 0.5) / height as f64,
        )
    }

    pub fn from_dir(dir: &Vector3<f64>) -> Self {
        Self::new(dir.y.atan2(dir.x), dir.z.clamp(-1.0, 1.0).asin())
    }

    pub fn dir(&self) -> Vector3<f64> {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        Vector3::new(cp * ct, cp * st, sp)
    }

    /// Continuous pixel coordinates (pixel `i` centered at `i`); `u` may fall
    /// in `[-0.5, width - 0.5)` and wraps at the seam.
    pub fn to_pixel(&self, width: usize, height: usize) -> (f64, f64) {
        (
            self.theta / TAU * width as f64 - 0.5,
            (PI / 2.0 - self.phi) / PI * height as f64 - 0.5,
        )
    }
}

/// Equirectangular raster: RGB, scalar depth, or packed normal components.
#[derive(Debug, Clone, PartialEq)]
pub struct EquirectImage {
    raster: Raster,
}

impl EquirectImage {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self, GeomError> {
        if width != 2 * height || height == 0 {
            return Err(GeomError::NotEquirect { width, height });
        }
        if channels != 1 && channels != 3 {
            return Err(GeomError::BadChannelCount(channels));
        }
        Ok(Self {
            raster: Raster::new(width, height, channels),
        })
    }

    /// Builds an image by evaluating `f` on each pixel-center direction.
    pub fn from_dir_fn<F>(width: usize, height: usize, channels: usize, mut f: F) -> Result<Self, GeomError>
    where
        F: FnMut(&Vector3<f64>) -> [f32; 3],
    {
        let mut img = Self::new(width, height, channels)?;
        for v in 0..height {
            for u in 0..width {
                let d = SphericalCoord::from_pixel(u, v, width, height).dir();
                let val = f(&d);
                img.raster.pixel_mut(u, v).copy_from_slice(&val[..channels]);
            }
        }
        Ok(img)
    }

    pub fn from_raster(raster: Raster) -> Result<Self, GeomError> {
        if raster.width() != 2 * raster.height() {
            return Err(GeomError::NotEquirect {
                width: raster.width(),
                height: raster.height(),
            });
        }
        Ok(Self { raster })
    }

    pub fn width(&self) -> usize {
        self.raster.width()
    }

    pub fn height(&self) -> usize {
        self.raster.height()
    }

    pub fn channels(&self) -> usize {
        self.raster.channels()
    }

    pub fn raster(&self) -> &Raster {
        &self.raster
    }

    pub fn raster_mut(&mut self) -> &mut Raster {
        &mut self.raster
    }

    pub fn into_raster(self) -> Raster {
        self.raster
    }

    /// Direction of the center of pixel `(u, v)`.
    pub fn dir_at(&self, u: usize, v: usize) -> Vector3<f64> {
        SphericalCoord::from_pixel(u, v, self.width(), self.height()).dir()
    }

    /// Bilinear sample at a unit direction with longitude wrap-around and
    /// latitude clamping. Invalid pixels are dropped from the stencil and the
    /// remaining weights renormalized; `None` when all four taps are invalid.
    ///
    /// Returns the first `channels()` entries of the array; the rest are zero.
    pub fn sample(&self, dir: &Vector3<f64>) -> Option<[f64; 3]> {
        let w = self.width();
        let h = self.height();
        let (pu, pv) = SphericalCoord::from_dir(dir).to_pixel(w, h);

        let u0 = pu.floor();
        let fu = pu - u0;
        let v0 = pv.floor();
        let fv = pv - v0;
        let u0 = u0 as i64;
        let v0 = v0 as i64;

        let wrap_u = |u: i64| -> usize { u.rem_euclid(w as i64) as usize };
        let clamp_v = |v: i64| -> usize { v.clamp(0, h as i64 - 1) as usize };

        let taps = [
            (wrap_u(u0), clamp_v(v0), (1.0 - fu) * (1.0 - fv)),
            (wrap_u(u0 + 1), clamp_v(v0), fu * (1.0 - fv)),
            (wrap_u(u0), clamp_v(v0 + 1), (1.0 - fu) * fv),
            (wrap_u(u0 + 1), clamp_v(v0 + 1), fu * fv),
        ];

        let mut acc = [0.0f64; 3];
        let mut wsum = 0.0f64;
        for &(tu, tv, tw) in &taps {
            if !self.raster.is_valid(tu, tv) {
                continue;
            }
            let px = self.raster.pixel(tu, tv);
            for (a, &p) in acc.iter_mut().zip(px.iter()) {
                *a += tw * p as f64;
            }
            wsum += tw;
        }
        if wsum <= 0.0 {
            return None;
        }
        for a in &mut acc {
            *a /= wsum;
        }
        Some(acc)
    }
}

/// One icosahedron-face pinhole camera: an orthonormal (right, up, center)
/// triad with a square field of view.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentFrame {
    pub face_id: usize,
    /// Unit face-center direction (the camera's optical axis).
    pub center: Vector3<f64>,
    /// Unit vector orthogonal to `center`; image rows run against it.
    pub up: Vector3<f64>,
    /// Per-side field of view in degrees.
    pub fov_deg: f64,
    /// Pixels per side of the square raster.
    pub resolution: usize,
}

impl TangentFrame {
    pub fn right(&self) -> Vector3<f64> {
        self.up.cross(&self.center)
    }

    /// Half-extent of the tangent-plane square: `tan(fov/2)`.
    pub fn half_tangent(&self) -> f64 {
        (self.fov_deg.to_radians() / 2.0).tan()
    }

    /// Focal length in pixels: `resolution / (2 tan(fov/2))`.
    pub fn focal_px(&self) -> f64 {
        self.resolution as f64 / (2.0 * self.half_tangent())
    }

    /// Tangent-plane coordinates of continuous pixel coordinates
    /// (x grows with columns, y grows upward, i.e. against rows).
    pub fn tangent_from_pixel(&self, px: f64, py: f64) -> (f64, f64) {
        let c = self.resolution as f64 / 2.0;
        let f = self.focal_px();
        ((px + 0.5 - c) / f, (c - (py + 0.5)) / f)
    }

    /// Inverse of [`TangentFrame::tangent_from_pixel`].
    pub fn pixel_from_tangent(&self, x: f64, y: f64) -> (f64, f64) {
        let c = self.resolution as f64 / 2.0;
        let f = self.focal_px();
        (x * f + c - 0.5, c - 0.5 - y * f)
    }

    /// Unit direction through the center of pixel `(ix, iy)`.
    pub fn pixel_dir(&self, ix: usize, iy: usize) -> Vector3<f64> {
        let (x, y) = self.tangent_from_pixel(ix as f64, iy as f64);
        gnomonic_unproject(x, y, self)
    }

    /// Whether tangent coordinates fall strictly inside the field of view.
    pub fn contains_tangent(&self, x: f64, y: f64) -> bool {
        let t = self.half_tangent();
        x.abs() < t && y.abs() < t
    }
}

/// A tangent frame together with its resampled square raster.
#[derive(Debug, Clone, PartialEq)]
pub struct PerspectiveView {
    pub frame: TangentFrame,
    pub image: Raster,
}

/// The 20 tangent frames of a regular icosahedron.
///
/// Face-center directions are the normalized face normals of the icosahedron
/// built from golden-ratio vertex coordinates; faces are enumerated sorted by
/// `(z, atan2(y, x))` of the center. Up vectors project global +Z onto the
/// tangent plane, falling back to +X for a face aimed at a pole.
pub fn icosahedron_frames(fov_deg: f64, resolution: usize) -> Result<Vec<TangentFrame>, GeomError> {
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(GeomError::FovOutOfRange(fov_deg));
    }
    if resolution < 2 {
        return Err(GeomError::ResolutionTooSmall(resolution));
    }

    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = Vec::with_capacity(12);
    for &a in &[-1.0, 1.0] {
        for &b in &[-phi, phi] {
            verts.push(Vector3::new(0.0, a, b));
            verts.push(Vector3::new(a, b, 0.0));
            verts.push(Vector3::new(b, 0.0, a));
        }
    }

    // Faces are the vertex triples whose pairwise distances all equal the
    // edge length (2 for this vertex set).
    let edge2 = 4.0;
    let mut centers: Vec<Vector3<f64>> = Vec::with_capacity(FACE_COUNT);
    for i in 0..verts.len() {
        for j in (i + 1)..verts.len() {
            if ((verts[i] - verts[j]).norm_squared() - edge2).abs() > 1e-9 {
                continue;
            }
            for k in (j + 1)..verts.len() {
                if ((verts[i] - verts[k]).norm_squared() - edge2).abs() > 1e-9
                    || ((verts[j] - verts[k]).norm_squared() - edge2).abs() > 1e-9
                {
                    continue;
                }
                centers.push((verts[i] + verts[j] + verts[k]).normalize());
            }
        }
    }
    debug_assert_eq!(centers.len(), FACE_COUNT);

    centers.sort_by(|a, b| {
        a.z.total_cmp(&b.z)
            .then_with(|| a.y.atan2(a.x).total_cmp(&b.y.atan2(b.x)))
    });

    let frames = centers
        .into_iter()
        .enumerate()
        .map(|(face_id, center)| {
            let seed = if center.x.hypot(center.y) < 1e-9 {
                Vector3::x()
            } else {
                Vector3::z()
            };
            let mut up = seed - center * seed.dot(&center);
            up.normalize_mut();
            // one re-orthogonalization pass keeps center.dot(up) at the
            // 1e-12 tolerance even for near-degenerate seeds
            up -= center * up.dot(&center);
            up.normalize_mut();
            TangentFrame {
                face_id,
                center,
                up,
                fov_deg,
                resolution,
            }
        })
        .collect();
    Ok(frames)
}

/// Gnomonic (tangent-plane) projection of a unit direction.
///
/// `Ok(None)` means the direction lies behind the tangent plane
/// (`dir . center <= 0`).
pub fn gnomonic_project(
    dir: &Vector3<f64>,
    frame: &TangentFrame,
) -> Result<Option<(f64, f64)>, GeomError> {
    let norm = dir.norm();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(GeomError::NonUnitDirection { norm });
    }
    Ok(project_unit(dir, frame))
}

/// Projection without the unit-norm check, for hot loops over directions that
/// are unit by construction.
#[inline]
fn project_unit(dir: &Vector3<f64>, frame: &TangentFrame) -> Option<(f64, f64)> {
    let denom = dir.dot(&frame.center);
    if denom <= 0.0 {
        return None;
    }
    let right = frame.right();
    Some((dir.dot(&right) / denom, dir.dot(&frame.up) / denom))
}

/// Inverse gnomonic projection: `normalize(center + x*right + y*up)`.
pub fn gnomonic_unproject(x: f64, y: f64, frame: &TangentFrame) -> Vector3<f64> {
    (frame.center + frame.right() * x + frame.up * y).normalize()
}

/// Bilinear sample of an equirectangular image at a unit direction.
///
/// Free-function form of [`EquirectImage::sample`].
pub fn sample_equirect(img: &EquirectImage, dir: &Vector3<f64>) -> Option<[f64; 3]> {
    img.sample(dir)
}

/// Resamples a panorama into one perspective view per tangent frame.
pub fn project_to_faces(
    pano: &EquirectImage,
    frames: &[TangentFrame],
) -> Result<Vec<PerspectiveView>, GeomError> {
    if frames.is_empty() {
        return Err(GeomError::NoFrames);
    }
    let channels = pano.channels();
    let mut views = Vec::with_capacity(frames.len());
    for frame in frames {
        let res = frame.resolution;
        let mut image = Raster::new(res, res, channels);
        for iy in 0..res {
            for ix in 0..res {
                let dir = frame.pixel_dir(ix, iy);
                match pano.sample(&dir) {
                    Some(v) => {
                        for (dst, &s) in image.pixel_mut(ix, iy).iter_mut().zip(v.iter()) {
                            *dst = s as f32;
                        }
                    }
                    None => image.set_valid(ix, iy, false),
                }
            }
        }
        views.push(PerspectiveView {
            frame: frame.clone(),
            image,
        });
    }
    Ok(views)
}

/// One face-`a` pixel that face `b` also observes, with its resampling
/// location in face `b`'s raster (continuous pixel coordinates).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapSample {
    pub ax: u32,
    pub ay: u32,
    pub bx: f64,
    pub by: f64,
}

/// Pixels of face `a` whose directions fall strictly inside face `b`'s
/// field of view.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapMask {
    pub face_a: usize,
    pub face_b: usize,
    pub samples: Vec<OverlapSample>,
}

impl OverlapMask {
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }
}

/// Computes the overlap mask of an ordered face pair.
pub fn overlap_mask(a: &TangentFrame, b: &TangentFrame) -> OverlapMask {
    assert!(
        a.face_id != b.face_id,
        "overlap of a face with itself is the whole face"
    );
    let mut samples = Vec::new();
    for ay in 0..a.resolution {
        for ax in 0..a.resolution {
            let dir = a.pixel_dir(ax, ay);
            if let Some((x, y)) = project_unit(&dir, b) {
                if b.contains_tangent(x, y) {
                    let (bx, by) = b.pixel_from_tangent(x, y);
                    samples.push(OverlapSample {
                        ax: ax as u32,
                        ay: ay as u32,
                        bx,
                        by,
                    });
                }
            }
        }
    }
    OverlapMask {
        face_a: a.face_id,
        face_b: b.face_id,
        samples,
    }
}

/// Overlap masks of every unordered frame pair with a nonempty overlap,
/// with `face_a < face_b`.
pub fn face_overlaps(frames: &[TangentFrame]) -> Vec<OverlapMask> {
    let mut masks = Vec::new();
    for i in 0..frames.len() {
        for j in (i + 1)..frames.len() {
            let m = overlap_mask(&frames[i], &frames[j]);
            if !m.is_empty() {
                masks.push(m);
            }
        }
    }
    masks
}
