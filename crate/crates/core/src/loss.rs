//! Photometric and geometry-aware losses on image, depth, and normal rasters.
//!
//! All losses are means rather than sums, so values are independent of the
//! raster resolution. `l_pho = (1 - lambda_pho) L1 + lambda_pho (1 - SSIM)`
//! and `l_gaussian = l_pho + lambda_geo * l_geo` hold as exact arithmetic
//! identities of the returned parts.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[cfg_attr(test, allow(unused_imports))]
use num_traits::Float;
use nalgebra::Vector3;

use crate::raster::Raster;

#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    DimensionMismatch,
    /// Expected a single-channel raster.
    NotScalar { channels: usize },
    /// Raster smaller than the SSIM window.
    WindowTooLarge {
        window: usize,
        width: usize,
        height: usize,
    },
    BadConfig(&'static str),
    NonPositiveFocal(f64),
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::DimensionMismatch => write!(f, "raster dimensions differ"),
            LossError::NotScalar { channels } => {
                write!(f, "expected a single-channel raster, got {channels}")
            }
            LossError::WindowTooLarge {
                window,
                width,
                height,
            } => write!(f, "SSIM window {window} exceeds raster {width}x{height}"),
            LossError::BadConfig(msg) => write!(f, "bad loss config: {msg}"),
            LossError::NonPositiveFocal(v) => write!(f, "focal length {v} must be positive"),
        }
    }
}

impl core::error::Error for LossError {}

/// Photometric and geometric loss weights plus SSIM parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Mixing weight of the SSIM term inside the photometric loss.
    pub lambda_pho: f64,
    /// Weight of the geometry-aware term in the combined loss.
    pub lambda_geo: f64,
    /// Odd SSIM window side.
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_pho: 0.2,
            lambda_geo: 0.05,
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.lambda_pho) {
            return Err(LossError::BadConfig("lambda_pho must lie in [0, 1]"));
        }
        if !(self.lambda_geo >= 0.0) {
            return Err(LossError::BadConfig("lambda_geo must be >= 0"));
        }
        if self.ssim_window < 3 || self.ssim_window % 2 == 0 {
            return Err(LossError::BadConfig("ssim_window must be odd and >= 3"));
        }
        if !(self.ssim_sigma > 0.0) {
            return Err(LossError::BadConfig("ssim_sigma must be positive"));
        }
        if !(self.ssim_c1 >= 0.0) || !(self.ssim_c2 >= 0.0) {
            return Err(LossError::BadConfig("SSIM stabilizers must be >= 0"));
        }
        Ok(())
    }
}

/// All loss parts of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub l1: f64,
    pub ssim_value: f64,
    /// `1 - ssim_value`.
    pub l_ssim: f64,
    pub l_pho: f64,
    pub l_geo: f64,
    pub l_gaussian: f64,
}

impl LossValues {
    fn assemble(l1: f64, ssim_value: f64, l_geo: f64, cfg: &LossConfig) -> Self {
        let l_ssim = 1.0 - ssim_value;
        let l_pho = (1.0 - cfg.lambda_pho) * l1 + cfg.lambda_pho * l_ssim;
        Self {
            l1,
            ssim_value,
            l_ssim,
            l_pho,
            l_geo,
            l_gaussian: l_pho + cfg.lambda_geo * l_geo,
        }
    }
}

/// Per-pixel unit normals in the camera frame (camera looks down +Z, valid
/// normals face the camera: `n.z <= 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    width: usize,
    height: usize,
    normals: Vec<Vector3<f64>>,
    validity: Vec<bool>,
}

impl NormalMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            normals: vec![Vector3::new(0.0, 0.0, -1.0); width * height],
            validity: vec![false; width * height],
        }
    }

    /// Constant normal map with every pixel valid (mostly for tests and
    /// fixed priors).
    pub fn constant(width: usize, height: usize, n: Vector3<f64>) -> Self {
        let n = n.normalize();
        Self {
            width,
            height,
            normals: vec![n; width * height],
            validity: vec![true; width * height],
        }
    }

    /// Builds a normal map from an interleaved 3-channel raster, normalizing
    /// each vector; degenerate or invalid pixels are marked invalid.
    pub fn from_raster(raster: &Raster) -> Result<Self, LossError> {
        if raster.channels() != 3 {
            return Err(LossError::NotScalar {
                channels: raster.channels(),
            });
        }
        let mut out = Self::new(raster.width(), raster.height());
        for y in 0..raster.height() {
            for x in 0..raster.width() {
                if !raster.is_valid(x, y) {
                    continue;
                }
                let p = raster.pixel(x, y);
                let v = Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64);
                let n = v.norm();
                if n > 1e-9 && n.is_finite() {
                    out.set(x, y, v / n);
                }
            }
        }
        Ok(out)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn normal(&self, x: usize, y: usize) -> Vector3<f64> {
        self.normals[y * self.width + x]
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.validity[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, n: Vector3<f64>) {
        self.normals[y * self.width + x] = n;
        self.validity[y * self.width + x] = true;
    }

    pub fn set_invalid(&mut self, x: usize, y: usize) {
        self.validity[y * self.width + x] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.validity.iter().filter(|&&v| v).count()
    }
}

fn check_dims(a: &Raster, b: &Raster) -> Result<(), LossError> {
    if a.width() != b.width() || a.height() != b.height() || a.channels() != b.channels() {
        return Err(LossError::DimensionMismatch);
    }
    Ok(())
}

/// Mean absolute difference over all channels and pixels.
pub fn l1_loss(a: &Raster, b: &Raster) -> Result<f64, LossError> {
    check_dims(a, b)?;
    let n = a.data().len() as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| ((x as f64) - (y as f64)).abs())
        .sum();
    Ok(sum / n)
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let r = (window / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Gaussian-weighted valid convolution along x then y.
fn blur_valid(src: &[f64], width: usize, height: usize, kernel: &[f64]) -> (Vec<f64>, usize, usize) {
    let r = kernel.len() / 2;
    let ow = width - 2 * r;
    let mut tmp = vec![0.0f64; ow * height];
    for y in 0..height {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * src[y * width + x + k];
            }
            tmp[y * ow + x] = acc;
        }
    }
    let oh = height - 2 * r;
    let mut out = vec![0.0f64; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * tmp[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, ow, oh)
}

/// Single-scale SSIM with a Gaussian window, evaluated on windows that fit
/// entirely inside the rasters and averaged over pixels and channels.
/// Inputs are expected in `[0, 1]` (the stabilizer defaults assume dynamic
/// range 1).
pub fn ssim(a: &Raster, b: &Raster, cfg: &LossConfig) -> Result<f64, LossError> {
    check_dims(a, b)?;
    cfg.validate()?;
    let (w, h) = (a.width(), a.height());
    if w < cfg.ssim_window || h < cfg.ssim_window {
        return Err(LossError::WindowTooLarge {
            window: cfg.ssim_window,
            width: w,
            height: h,
        });
    }
    let kernel = gaussian_kernel(cfg.ssim_window, cfg.ssim_sigma);
    let channels = a.channels();

    let mut acc = 0.0f64;
    let mut count = 0usize;
    let mut xa = vec![0.0f64; w * h];
    let mut xb = vec![0.0f64; w * h];
    let mut xaa = vec![0.0f64; w * h];
    let mut xbb = vec![0.0f64; w * h];
    let mut xab = vec![0.0f64; w * h];
    for c in 0..channels {
        for i in 0..w * h {
            let va = a.data()[i * channels + c] as f64;
            let vb = b.data()[i * channels + c] as f64;
            xa[i] = va;
            xb[i] = vb;
            xaa[i] = va * va;
            xbb[i] = vb * vb;
            xab[i] = va * vb;
        }
        let (mu_a, ow, oh) = blur_valid(&xa, w, h, &kernel);
        let (mu_b, _, _) = blur_valid(&xb, w, h, &kernel);
        let (e_aa, _, _) = blur_valid(&xaa, w, h, &kernel);
        let (e_bb, _, _) = blur_valid(&xbb, w, h, &kernel);
        let (e_ab, _, _) = blur_valid(&xab, w, h, &kernel);
        for i in 0..ow * oh {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let saa = e_aa[i] - ma * ma;
            let sbb = e_bb[i] - mb * mb;
            let sab = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + cfg.ssim_c1) * (2.0 * sab + cfg.ssim_c2);
            let den = (ma * ma + mb * mb + cfg.ssim_c1) * (saa + sbb + cfg.ssim_c2);
            acc += num / den;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Photometric loss `(1 - lambda_pho) L1 + lambda_pho (1 - SSIM)`; the
/// geometric parts of the result are zero.
pub fn photometric_loss(render: &Raster, gt: &Raster, cfg: &LossConfig) -> Result<LossValues, LossError> {
    let l1 = l1_loss(render, gt)?;
    let s = ssim(render, gt, cfg)?;
    Ok(LossValues::assemble(l1, s, 0.0, cfg))
}

/// Pinhole unprojection `P(i, j) = z * ((i + 0.5 - W/2)/f, (j + 0.5 - H/2)/f, 1)`
/// of a z-depth raster; image y grows downward.
fn unproject(depth: &Raster, f: f64, x: usize, y: usize) -> Vector3<f64> {
    let z = depth.pixel(x, y)[0] as f64;
    let u = (x as f64 + 0.5 - depth.width() as f64 / 2.0) / f;
    let v = (y as f64 + 0.5 - depth.height() as f64 / 2.0) / f;
    Vector3::new(z * u, z * v, z)
}

/// Central-difference surface tangents of the unprojected depth at `(x, y)`,
/// one-sided at raster borders. Returns `(t_x, t_y)`.
fn depth_tangents(depth: &Raster, f: f64, x: usize, y: usize) -> (Vector3<f64>, Vector3<f64>) {
    let (w, h) = (depth.width(), depth.height());
    let xm = x.saturating_sub(1);
    let xp = (x + 1).min(w - 1);
    let ym = y.saturating_sub(1);
    let yp = (y + 1).min(h - 1);
    (
        unproject(depth, f, xp, y) - unproject(depth, f, xm, y),
        unproject(depth, f, x, yp) - unproject(depth, f, x, ym),
    )
}

/// Surface normals from a pinhole z-depth raster: normalized cross product of
/// the unprojected central-difference tangents, sign-flipped so normals face
/// the camera. A pixel is valid only when its whole (clamped) 3x3 depth
/// neighbourhood is valid and the tangents are nondegenerate.
pub fn normals_from_depth(depth: &Raster, f: f64) -> Result<NormalMap, LossError> {
    if depth.channels() != 1 {
        return Err(LossError::NotScalar {
            channels: depth.channels(),
        });
    }
    if !(f > 0.0) || !f.is_finite() {
        return Err(LossError::NonPositiveFocal(f));
    }
    let (w, h) = (depth.width(), depth.height());
    let mut out = NormalMap::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut ok = true;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let nx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    let ny = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    ok &= depth.is_valid(nx, ny);
                }
            }
            if !ok {
                continue;
            }
            let (tx, ty) = depth_tangents(depth, f, x, y);
            let n = tx.cross(&ty);
            let norm = n.norm();
            if !(norm > 1e-15) || !norm.is_finite() {
                continue;
            }
            let mut n = n / norm;
            if n.dot(&unproject(depth, f, x, y)) > 0.0 {
                n = -n;
            }
            out.set(x, y, n);
        }
    }
    Ok(out)
}

/// Geometry-aware loss: the mean over valid interior pixels of
/// `|t_x . n| + |t_y . n|` with `t_x`, `t_y` the normalized unprojected
/// depth tangents. Zero exactly when the surface implied by the depth is
/// tangent to the supplied normals.
pub fn geo_loss(depth: &Raster, normals: &NormalMap, f: f64) -> Result<f64, LossError> {
    if depth.channels() != 1 {
        return Err(LossError::NotScalar {
            channels: depth.channels(),
        });
    }
    if depth.width() != normals.width() || depth.height() != normals.height() {
        return Err(LossError::DimensionMismatch);
    }
    if !(f > 0.0) || !f.is_finite() {
        return Err(LossError::NonPositiveFocal(f));
    }
    let (w, h) = (depth.width(), depth.height());
    if w < 3 || h < 3 {
        return Ok(0.0);
    }
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            if !normals.is_valid(x, y) {
                continue;
            }
            let stencil_ok = depth.is_valid(x - 1, y)
                && depth.is_valid(x + 1, y)
                && depth.is_valid(x, y - 1)
                && depth.is_valid(x, y + 1);
            if !stencil_ok {
                continue;
            }
            let (tx, ty) = depth_tangents(depth, f, x, y);
            let (nx, ny) = (tx.norm(), ty.norm());
            if !(nx > 1e-15) || !(ny > 1e-15) {
                continue;
            }
            let n = normals.normal(x, y);
            acc += (tx.dot(&n) / nx).abs() + (ty.dot(&n) / ny).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(acc / count as f64)
}

/// Combined loss of one render/ground-truth pair with its depth and normals:
/// `l_gaussian = l_pho + lambda_geo * l_geo`.
pub fn gaussian_loss(
    render: &Raster,
    gt: &Raster,
    depth: &Raster,
    normals: &NormalMap,
    f: f64,
    cfg: &LossConfig,
) -> Result<LossValues, LossError> {
    let l1 = l1_loss(render, gt)?;
    let s = ssim(render, gt, cfg)?;
    let geo = geo_loss(depth, normals, f)?;
    Ok(LossValues::assemble(l1, s, geo, cfg))
}
