//! Alignment of independently scaled per-face depth maps.
//!
//! Each face carries a low-resolution affine transformation field (a grid of
//! per-control-point scale/offset pairs, bilinearly interpolated to pixel
//! resolution). The fields are optimized by gradient descent so that depths
//! agree wherever two faces observe the same directions, regularized against
//! field disagreement across faces, scale drift away from 1, large field
//! magnitudes, and rough intra-face field variation. Aligned faces are then
//! fused into a single panoramic depth map with normalized cos-power weights.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;


#[cfg_attr(test, allow(unused_imports))]
use num_traits::Float;
use crate::raster::{grid_eval, grid_weights};
use crate::sphere::{self, EquirectImage, GeomError, OverlapMask, PerspectiveView, TangentFrame};

#[derive(Debug, Clone, PartialEq)]
pub enum AlignError {
    /// A face depth map and an affine field (or frame) disagree on face ids.
    FaceMismatch { expected: usize, got: usize },
    /// Face rasters of one alignment problem must share one resolution.
    SideMismatch { expected: usize, got: usize },
    /// Number of depth maps does not match the number of frames.
    CountMismatch { depths: usize, frames: usize },
    /// A face has no valid pixel at all.
    AllInvalid { face_id: usize },
    EmptyInput,
    /// Energy is not finite at the starting point.
    NonFiniteEnergy,
    BadConfig(&'static str),
    /// A view handed to [`FaceDepth::from_view`] was not single-channel.
    NotScalar { channels: usize },
    Geometry(GeomError),
}

impl fmt::Display for AlignError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlignError::FaceMismatch { expected, got } => {
                write!(f, "face id mismatch: expected {expected}, got {got}")
            }
            AlignError::SideMismatch { expected, got } => {
                write!(f, "face raster side mismatch: expected {expected}, got {got}")
            }
            AlignError::CountMismatch { depths, frames } => {
                write!(f, "{depths} depth maps for {frames} frames")
            }
            AlignError::AllInvalid { face_id } => {
                write!(f, "face {face_id} has no valid depth pixel")
            }
            AlignError::EmptyInput => write!(f, "no faces to align"),
            AlignError::NonFiniteEnergy => write!(f, "non-finite alignment energy"),
            AlignError::BadConfig(msg) => write!(f, "bad alignment config: {msg}"),
            AlignError::NotScalar { channels } => {
                write!(f, "expected a single-channel raster, got {channels} channels")
            }
            AlignError::Geometry(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for AlignError {}

impl From<GeomError> for AlignError {
    fn from(e: GeomError) -> Self {
        AlignError::Geometry(e)
    }
}

/// Square per-face depth raster in `f64`, with a validity mask.
///
/// Valid depths are strictly positive and finite; constructors derive the
/// mask accordingly.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceDepth {
    pub face_id: usize,
    side: usize,
    depth: Vec<f64>,
    validity: Vec<bool>,
}

impl FaceDepth {
    /// Marks exactly the strictly positive, finite entries valid.
    pub fn new(face_id: usize, side: usize, depth: Vec<f64>) -> Self {
        assert_eq!(depth.len(), side * side, "depth buffer does not match side");
        let validity = depth.iter().map(|&d| d > 0.0 && d.is_finite()).collect();
        Self {
            face_id,
            side,
            depth,
            validity,
        }
    }

    /// Like [`FaceDepth::new`] but additionally masks out pixels the caller
    /// already knows to be invalid.
    pub fn with_validity(face_id: usize, side: usize, depth: Vec<f64>, validity: Vec<bool>) -> Self {
        assert_eq!(validity.len(), side * side);
        let mut out = Self::new(face_id, side, depth);
        for (m, v) in out.validity.iter_mut().zip(validity.iter()) {
            *m = *m && *v;
        }
        out
    }

    /// Converts a single-channel perspective view (e.g. a projected depth
    /// panorama) into a face depth map.
    pub fn from_view(view: &PerspectiveView) -> Result<Self, AlignError> {
        if view.image.channels() != 1 {
            return Err(AlignError::NotScalar {
                channels: view.image.channels(),
            });
        }
        let side = view.frame.resolution;
        let depth: Vec<f64> = view.image.data().iter().map(|&v| v as f64).collect();
        let mut validity = vec![true; side * side];
        if let Some(mask) = view.image.validity() {
            validity.copy_from_slice(mask);
        }
        Ok(Self::with_validity(view.frame.face_id, side, depth, validity))
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[f64] {
        &self.depth
    }

    pub fn validity(&self) -> &[bool] {
        &self.validity
    }

    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.side + x]
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.validity[y * self.side + x]
    }

    pub fn valid_count(&self) -> usize {
        self.validity.iter().filter(|&&v| v).count()
    }

    /// Bilinear taps at continuous pixel coordinates (pixel `i` centered at
    /// `i`), clamped at the borders.
    fn taps(&self, bx: f64, by: f64) -> [(usize, usize, f64); 4] {
        let side = self.side as i64;
        let x0 = bx.floor();
        let fx = bx - x0;
        let y0 = by.floor();
        let fy = by - y0;
        let cx = |x: i64| x.clamp(0, side - 1) as usize;
        let (x0, y0) = (x0 as i64, y0 as i64);
        [
            (cx(x0), cx(y0), (1.0 - fx) * (1.0 - fy)),
            (cx(x0 + 1), cx(y0), fx * (1.0 - fy)),
            (cx(x0), cx(y0 + 1), (1.0 - fx) * fy),
            (cx(x0 + 1), cx(y0 + 1), fx * fy),
        ]
    }

    /// Bilinear sample; `None` when any tap is invalid.
    pub(crate) fn sample_strict(&self, bx: f64, by: f64) -> Option<f64> {
        let taps = self.taps(bx, by);
        let mut acc = 0.0;
        for &(x, y, w) in &taps {
            if !self.is_valid(x, y) {
                return None;
            }
            acc += w * self.value(x, y);
        }
        Some(acc)
    }

    /// Bilinear sample skipping invalid taps with weight renormalization;
    /// `None` when all taps are invalid.
    pub(crate) fn sample_renorm(&self, bx: f64, by: f64) -> Option<f64> {
        let taps = self.taps(bx, by);
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for &(x, y, w) in &taps {
            if self.is_valid(x, y) {
                acc += w * self.value(x, y);
                wsum += w;
            }
        }
        (wsum > 0.0).then(|| acc / wsum)
    }
}

/// Per-face affine transformation field: a `G x G` control grid of scale and
/// offset values, bilinearly interpolated over the face raster. `G = 1`
/// degenerates to one global `(s, o)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineField {
    pub face_id: usize,
    grid_side: usize,
    scales: Vec<f64>,
    offsets: Vec<f64>,
}

impl AffineField {
    /// The identity field: `s = 1`, `o = 0` everywhere.
    pub fn identity(face_id: usize, grid_side: usize) -> Self {
        assert!(grid_side >= 1, "control grid needs at least one point");
        Self {
            face_id,
            grid_side,
            scales: vec![1.0; grid_side * grid_side],
            offsets: vec![0.0; grid_side * grid_side],
        }
    }

    pub fn from_values(face_id: usize, grid_side: usize, scales: Vec<f64>, offsets: Vec<f64>) -> Self {
        assert!(grid_side >= 1);
        assert_eq!(scales.len(), grid_side * grid_side);
        assert_eq!(offsets.len(), grid_side * grid_side);
        Self {
            face_id,
            grid_side,
            scales,
            offsets,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn scales_mut(&mut self) -> &mut [f64] {
        &mut self.scales
    }

    pub fn offsets_mut(&mut self) -> &mut [f64] {
        &mut self.offsets
    }

    /// `(s, o)` at continuous pixel coordinates of a `raster_side` raster.
    pub fn eval(&self, px: f64, py: f64, raster_side: usize) -> (f64, f64) {
        (
            grid_eval(&self.scales, self.grid_side, px, py, raster_side),
            grid_eval(&self.offsets, self.grid_side, px, py, raster_side),
        )
    }
}

/// Weights and stopping parameters of the alignment energy.
///
/// The regularizer weights follow the energy layout: `lambda_cross` scales the
/// cross-face field-consistency sum over overlap pixels, `lambda_scale` the
/// `(s-1)^2` pull per control point, `lambda_mag` the Huber-smoothed
/// `|s| + |o|` magnitude sum, and `lambda_grid` the squared differences of
/// adjacent control points within each face.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentConfig {
    pub lambda_cross: f64,
    pub lambda_scale: f64,
    pub lambda_mag: f64,
    pub lambda_grid: f64,
    pub max_iters: usize,
    pub step_init: f64,
    pub huber_eps: f64,
    /// Relative total-energy decrease below which descent stops.
    pub tol: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            // The cross term sums over overlap pixels while the scale anchor
            // sums over control points, a ratio of roughly 200:1 at the
            // default geometry; 1e-4 keeps the anchor in charge of the gauge.
            lambda_cross: 1e-4,
            lambda_scale: 0.1,
            lambda_mag: 1e-3,
            lambda_grid: 0.5,
            max_iters: 200,
            step_init: 1.0,
            huber_eps: 1e-3,
            tol: 1e-6,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<(), AlignError> {
        let weights = [
            self.lambda_cross,
            self.lambda_scale,
            self.lambda_mag,
            self.lambda_grid,
        ];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(AlignError::BadConfig("weights must be finite and >= 0"));
        }
        if self.max_iters < 1 {
            return Err(AlignError::BadConfig("max_iters must be >= 1"));
        }
        if !(self.step_init > 0.0) || !self.step_init.is_finite() {
            return Err(AlignError::BadConfig("step_init must be positive"));
        }
        if !(self.huber_eps > 0.0) {
            return Err(AlignError::BadConfig("huber_eps must be positive"));
        }
        if !(self.tol >= 0.0) {
            return Err(AlignError::BadConfig("tol must be >= 0"));
        }
        Ok(())
    }
}

/// Output panorama geometry and blending exponent for depth fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct FuseConfig {
    pub pano_width: usize,
    pub pano_height: usize,
    /// Exponent of the `max(0, d . center)^power` blend weights.
    pub power: f64,
}

impl Default for FuseConfig {
    fn default() -> Self {
        Self {
            pano_width: 512,
            pano_height: 256,
            power: 4.0,
        }
    }
}

/// Unweighted energy parts plus the weighted total
/// `data + lc*cross + ls*scale + lm*magnitude + lg*grid`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyBreakdown {
    pub data: f64,
    pub cross: f64,
    pub scale: f64,
    pub magnitude: f64,
    pub grid: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    fn combine(cfg: &AlignmentConfig, data: f64, cross: f64, scale: f64, magnitude: f64, grid: f64) -> Self {
        Self {
            data,
            cross,
            scale,
            magnitude,
            grid,
            total: data
                + cfg.lambda_cross * cross
                + cfg.lambda_scale * scale
                + cfg.lambda_mag * magnitude
                + cfg.lambda_grid * grid,
        }
    }
}

/// Result of [`optimize`]: the fields, the aligned faces, the fused panoramic
/// depth map, and the energy at the start plus every accepted iterate.
#[derive(Debug, Clone)]
pub struct AlignmentResult {
    pub fields: Vec<AffineField>,
    pub aligned: Vec<FaceDepth>,
    pub fused: EquirectImage,
    pub trace: Vec<EnergyBreakdown>,
}

/// Huber-smoothed absolute value of width `eps`: quadratic inside
/// `[-eps, eps]`, `|x| - eps/2` outside; C^1 everywhere.
pub(crate) fn huber(x: f64, eps: f64) -> f64 {
    let a = x.abs();
    if a <= eps {
        x * x / (2.0 * eps)
    } else {
        a - eps / 2.0
    }
}

fn huber_grad(x: f64, eps: f64) -> f64 {
    if x.abs() <= eps {
        x / eps
    } else {
        x.signum()
    }
}

/// Applies an affine field to a face depth map: `D~(p) = s(p) D(p) + o(p)`.
///
/// The validity mask carries over; output pixels that end up non-positive are
/// marked invalid.
pub fn apply_affine(d: &FaceDepth, field: &AffineField) -> Result<FaceDepth, AlignError> {
    if d.face_id != field.face_id {
        return Err(AlignError::FaceMismatch {
            expected: d.face_id,
            got: field.face_id,
        });
    }
    let side = d.side();
    let mut depth = vec![0.0f64; side * side];
    let mut validity = vec![false; side * side];
    for y in 0..side {
        for x in 0..side {
            let i = y * side + x;
            let (s, o) = field.eval(x as f64, y as f64, side);
            let v = s * d.depth[i] + o;
            depth[i] = v;
            validity[i] = d.validity[i] && v > 0.0 && v.is_finite();
        }
    }
    Ok(FaceDepth {
        face_id: d.face_id,
        side,
        depth,
        validity,
    })
}

/// Overlap-consistency energy: for every unordered pair `(a, b)` and every
/// mask pixel, the squared difference between face `a`'s aligned depth and
/// the bilinear resample of face `b`'s aligned raster, skipping samples that
/// touch an invalid pixel on either side.
pub fn data_energy(aligned: &[FaceDepth], overlaps: &[OverlapMask]) -> f64 {
    let mut acc = 0.0;
    for m in overlaps {
        let da = &aligned[m.face_a];
        let db = &aligned[m.face_b];
        for s in &m.samples {
            let (ax, ay) = (s.ax as usize, s.ay as usize);
            if !da.is_valid(ax, ay) {
                continue;
            }
            if let Some(vb) = db.sample_strict(s.bx, s.by) {
                let r = da.value(ax, ay) - vb;
                acc += r * r;
            }
        }
    }
    acc
}

/// Regularizer parts (unweighted) of the alignment energy; `data` is zero and
/// `total` carries only the weighted regularizers.
pub fn reg_energy(
    fields: &[AffineField],
    overlaps: &[OverlapMask],
    raster_side: usize,
    cfg: &AlignmentConfig,
) -> EnergyBreakdown {
    let (cross, scale, magnitude, grid) = reg_parts(fields, overlaps, raster_side, cfg.huber_eps);
    EnergyBreakdown::combine(cfg, 0.0, cross, scale, magnitude, grid)
}

fn reg_parts(
    fields: &[AffineField],
    overlaps: &[OverlapMask],
    raster_side: usize,
    huber_eps: f64,
) -> (f64, f64, f64, f64) {
    let mut cross = 0.0;
    for m in overlaps {
        let fa = &fields[m.face_a];
        let fb = &fields[m.face_b];
        for s in &m.samples {
            let (sa, oa) = fa.eval(s.ax as f64, s.ay as f64, raster_side);
            let (sb, ob) = fb.eval(s.bx, s.by, raster_side);
            cross += (sa - sb) * (sa - sb) + (oa - ob) * (oa - ob);
        }
    }

    let mut scale = 0.0;
    let mut magnitude = 0.0;
    let mut grid = 0.0;
    for f in fields {
        for &s in f.scales() {
            scale += (s - 1.0) * (s - 1.0);
            magnitude += huber(s, huber_eps);
        }
        for &o in f.offsets() {
            magnitude += huber(o, huber_eps);
        }
        let g = f.grid_side();
        for gy in 0..g {
            for gx in 0..g {
                let i = gy * g + gx;
                if gx + 1 < g {
                    let ds = f.scales()[i] - f.scales()[i + 1];
                    let dof = f.offsets()[i] - f.offsets()[i + 1];
                    grid += ds * ds + dof * dof;
                }
                if gy + 1 < g {
                    let ds = f.scales()[i] - f.scales()[i + g];
                    let dof = f.offsets()[i] - f.offsets()[i + g];
                    grid += ds * ds + dof * dof;
                }
            }
        }
    }
    (cross, scale, magnitude, grid)
}

/// Full energy: data term plus lambda-weighted regularizers.
pub fn total_energy(
    aligned: &[FaceDepth],
    fields: &[AffineField],
    overlaps: &[OverlapMask],
    cfg: &AlignmentConfig,
) -> EnergyBreakdown {
    let side = aligned.first().map(|d| d.side()).unwrap_or(1);
    let data = data_energy(aligned, overlaps);
    let (cross, scale, magnitude, grid) = reg_parts(fields, overlaps, side, cfg.huber_eps);
    EnergyBreakdown::combine(cfg, data, cross, scale, magnitude, grid)
}

/// Per-pixel control indices and bilinear weights of one face raster; the
/// layout is shared by every face of an alignment problem.
struct GridMap {
    idx: Vec<[u32; 4]>,
    w: Vec<[f64; 4]>,
}

fn build_grid_map(side: usize, g: usize) -> GridMap {
    let mut idx = Vec::with_capacity(side * side);
    let mut w = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (i, wi) = grid_weights(g, x as f64, y as f64, side);
            idx.push([i[0] as u32, i[1] as u32, i[2] as u32, i[3] as u32]);
            w.push(wi);
        }
    }
    GridMap { idx, w }
}

/// One overlap sample with every fixed coefficient the optimizer needs:
/// the face-`a` pixel, the four bilinear taps into face `b`, and the field
/// control weights at the continuous resample position.
struct PackedSample {
    a_pix: u32,
    b_tap: [u32; 4],
    b_beta: [f64; 4],
    bf_ctrl: [u32; 4],
    bf_w: [f64; 4],
}

struct PackedPair {
    a: usize,
    b: usize,
    start: usize,
    end: usize,
}

/// Overlap geometry baked into flat coefficient arrays. Everything here is
/// constant during descent; only the control values move.
struct Packed {
    side: usize,
    grid_side: usize,
    grid: GridMap,
    pairs: Vec<PackedPair>,
    samples: Vec<PackedSample>,
}

fn pack_problem(overlaps: &[OverlapMask], side: usize, grid_side: usize) -> Packed {
    let grid = build_grid_map(side, grid_side);
    let mut pairs = Vec::with_capacity(overlaps.len());
    let mut samples = Vec::new();
    for m in overlaps {
        let start = samples.len();
        for s in &m.samples {
            let x0 = s.bx.floor();
            let fx = s.bx - x0;
            let y0 = s.by.floor();
            let fy = s.by - y0;
            let cl = |v: f64| (v as i64).clamp(0, side as i64 - 1) as u32;
            let (x0i, y0i) = (x0, y0);
            let tap = |x: f64, y: f64| cl(y) * side as u32 + cl(x);
            let (fi, fw) = grid_weights(grid_side, s.bx, s.by, side);
            samples.push(PackedSample {
                a_pix: s.ay * side as u32 + s.ax,
                b_tap: [
                    tap(x0i, y0i),
                    tap(x0i + 1.0, y0i),
                    tap(x0i, y0i + 1.0),
                    tap(x0i + 1.0, y0i + 1.0),
                ],
                b_beta: [
                    (1.0 - fx) * (1.0 - fy),
                    fx * (1.0 - fy),
                    (1.0 - fx) * fy,
                    fx * fy,
                ],
                bf_ctrl: [fi[0] as u32, fi[1] as u32, fi[2] as u32, fi[3] as u32],
                bf_w: fw,
            });
        }
        pairs.push(PackedPair {
            a: m.face_a,
            b: m.face_b,
            start,
            end: samples.len(),
        });
    }
    Packed {
        side,
        grid_side,
        grid,
        pairs,
        samples,
    }
}

/// Per-face aligned values and validity, stored flat for the hot loops.
struct AlignedBufs {
    vals: Vec<Vec<f64>>,
    ok: Vec<Vec<bool>>,
}

impl Packed {
    fn n_ctrl(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// `apply_affine` over all faces, against the control vector directly.
    fn apply(&self, depths: &[FaceDepth], x: &[f64], out: &mut AlignedBufs) {
        let n_ctrl = self.n_ctrl();
        for (fi, d) in depths.iter().enumerate() {
            let scales = &x[fi * 2 * n_ctrl..fi * 2 * n_ctrl + n_ctrl];
            let offsets = &x[fi * 2 * n_ctrl + n_ctrl..(fi + 1) * 2 * n_ctrl];
            let vals = &mut out.vals[fi];
            let ok = &mut out.ok[fi];
            for p in 0..self.side * self.side {
                let idx = &self.grid.idx[p];
                let w = &self.grid.w[p];
                let mut s = 0.0;
                let mut o = 0.0;
                for k in 0..4 {
                    s += w[k] * scales[idx[k] as usize];
                    o += w[k] * offsets[idx[k] as usize];
                }
                let v = s * d.values()[p] + o;
                vals[p] = v;
                ok[p] = d.validity()[p] && v > 0.0 && v.is_finite();
            }
        }
    }

    /// Exact Hessian of the energy with the data-term active set and the
    /// Huber branches frozen at the current point (the energy is quadratic
    /// under that freeze). Layout matches [`fields_to_vec`].
    fn assemble_hessian(
        &self,
        depths: &[FaceDepth],
        aligned: &AlignedBufs,
        cfg: &AlignmentConfig,
        x: &[f64],
        h: &mut nalgebra::DMatrix<f64>,
    ) {
        let n_ctrl = self.n_ctrl();
        let base = |face: usize| face * 2 * n_ctrl;
        h.fill(0.0);

        // coefficient scratch for one data residual (<= 8 a-side + 32 b-side)
        let mut idx = [0usize; 40];
        let mut coef = [0.0f64; 40];

        for pair in &self.pairs {
            let (a, b) = (pair.a, pair.b);
            let (ao, bo) = (&aligned.ok[a], &aligned.ok[b]);
            let araw = depths[a].values();
            let braw = depths[b].values();
            for s in &self.samples[pair.start..pair.end] {
                let ap = s.a_pix as usize;
                let aw = &self.grid.w[ap];
                let ai = &self.grid.idx[ap];

                // cross term: 2 lc (sum wa s_a - sum wb s_b)^2 and likewise
                // for the offsets
                let lc2 = 2.0 * cfg.lambda_cross;
                if lc2 > 0.0 {
                    let mut ci = [0usize; 8];
                    let mut cw = [0.0f64; 8];
                    for k in 0..4 {
                        ci[k] = base(a) + ai[k] as usize;
                        cw[k] = aw[k];
                        ci[4 + k] = base(b) + s.bf_ctrl[k] as usize;
                        cw[4 + k] = -s.bf_w[k];
                    }
                    for p in 0..8 {
                        let hp = lc2 * cw[p];
                        for q in 0..8 {
                            h[(ci[p], ci[q])] += hp * cw[q];
                        }
                    }
                    // offsets occupy the same sparsity shifted by n_ctrl
                    for p in 0..8 {
                        let hp = lc2 * cw[p];
                        for q in 0..8 {
                            h[(ci[p] + n_ctrl, ci[q] + n_ctrl)] += hp * cw[q];
                        }
                    }
                }

                let active = ao[ap] && s.b_tap.iter().all(|&t| bo[t as usize]);
                if !active {
                    continue;
                }
                let draw = araw[ap];
                let mut n = 0usize;
                for k in 0..4 {
                    idx[n] = base(a) + ai[k] as usize;
                    coef[n] = aw[k] * draw;
                    idx[n + 1] = base(a) + n_ctrl + ai[k] as usize;
                    coef[n + 1] = aw[k];
                    n += 2;
                }
                for k in 0..4 {
                    let t = s.b_tap[k] as usize;
                    let beta = s.b_beta[k];
                    let ti = &self.grid.idx[t];
                    let tw = &self.grid.w[t];
                    let draw_b = braw[t];
                    for q in 0..4 {
                        idx[n] = base(b) + ti[q] as usize;
                        coef[n] = -beta * tw[q] * draw_b;
                        idx[n + 1] = base(b) + n_ctrl + ti[q] as usize;
                        coef[n + 1] = -beta * tw[q];
                        n += 2;
                    }
                }
                for p in 0..n {
                    let hp = 2.0 * coef[p];
                    let ip = idx[p];
                    for q in 0..n {
                        h[(ip, idx[q])] += hp * coef[q];
                    }
                }
            }
        }

        let g = self.grid_side;
        for fi in 0..depths.len() {
            for ci in 0..n_ctrl {
                let si = base(fi) + ci;
                let oi = si + n_ctrl;
                h[(si, si)] += 2.0 * cfg.lambda_scale;
                if x[si].abs() <= cfg.huber_eps {
                    h[(si, si)] += cfg.lambda_mag / cfg.huber_eps;
                }
                if x[oi].abs() <= cfg.huber_eps {
                    h[(oi, oi)] += cfg.lambda_mag / cfg.huber_eps;
                }
                let (gx, gy) = (ci % g, ci / g);
                for j in [
                    (gx + 1 < g).then(|| ci + 1),
                    (gy + 1 < g).then(|| ci + g),
                ]
                .into_iter()
                .flatten()
                {
                    let sj = base(fi) + j;
                    let oj = sj + n_ctrl;
                    let lg2 = 2.0 * cfg.lambda_grid;
                    h[(si, si)] += lg2;
                    h[(sj, sj)] += lg2;
                    h[(si, sj)] -= lg2;
                    h[(sj, si)] -= lg2;
                    h[(oi, oi)] += lg2;
                    h[(oj, oj)] += lg2;
                    h[(oi, oj)] -= lg2;
                    h[(oj, oi)] -= lg2;
                }
            }
        }
    }

    /// Jacobi preconditioner: an estimate of the energy's diagonal curvature
    /// per control value. The data/cross/scale/grid curvatures are exact for
    /// the quadratic terms (with the active set and Huber branches frozen at
    /// the current point); entries are clamped away from zero.
    fn curvature_diag(
        &self,
        depths: &[FaceDepth],
        aligned: &AlignedBufs,
        cfg: &AlignmentConfig,
        x: &[f64],
        out: &mut [f64],
    ) {
        let n_ctrl = self.n_ctrl();
        let base = |face: usize| face * 2 * n_ctrl;
        out.iter_mut().for_each(|v| *v = 0.0);

        for pair in &self.pairs {
            let (a, b) = (pair.a, pair.b);
            let (ao, bo) = (&aligned.ok[a], &aligned.ok[b]);
            let araw = depths[a].values();
            let braw = depths[b].values();
            for s in &self.samples[pair.start..pair.end] {
                let ap = s.a_pix as usize;
                let aw = &self.grid.w[ap];
                let ai = &self.grid.idx[ap];
                let lc = cfg.lambda_cross;
                for k in 0..4 {
                    out[base(a) + ai[k] as usize] += lc * 2.0 * aw[k] * aw[k];
                    out[base(a) + n_ctrl + ai[k] as usize] += lc * 2.0 * aw[k] * aw[k];
                    out[base(b) + s.bf_ctrl[k] as usize] += lc * 2.0 * s.bf_w[k] * s.bf_w[k];
                    out[base(b) + n_ctrl + s.bf_ctrl[k] as usize] += lc * 2.0 * s.bf_w[k] * s.bf_w[k];
                }
                let active = ao[ap] && s.b_tap.iter().all(|&t| bo[t as usize]);
                if !active {
                    continue;
                }
                let draw = araw[ap];
                for k in 0..4 {
                    let c_s = aw[k] * draw;
                    out[base(a) + ai[k] as usize] += 2.0 * c_s * c_s;
                    out[base(a) + n_ctrl + ai[k] as usize] += 2.0 * aw[k] * aw[k];
                }
                for k in 0..4 {
                    let t = s.b_tap[k] as usize;
                    let beta = s.b_beta[k];
                    let ti = &self.grid.idx[t];
                    let tw = &self.grid.w[t];
                    let draw_b = braw[t];
                    for q in 0..4 {
                        let c_s = beta * tw[q] * draw_b;
                        let c_o = beta * tw[q];
                        out[base(b) + ti[q] as usize] += 2.0 * c_s * c_s;
                        out[base(b) + n_ctrl + ti[q] as usize] += 2.0 * c_o * c_o;
                    }
                }
            }
        }

        let g = self.grid_side;
        let n_faces = depths.len();
        for fi in 0..n_faces {
            for ci in 0..n_ctrl {
                let (gx, gy) = (ci % g, ci / g);
                let mut degree = 0.0;
                if gx > 0 {
                    degree += 1.0;
                }
                if gx + 1 < g {
                    degree += 1.0;
                }
                if gy > 0 {
                    degree += 1.0;
                }
                if gy + 1 < g {
                    degree += 1.0;
                }
                let grid_curv = cfg.lambda_grid * 2.0 * degree;
                let sv = x[base(fi) + ci];
                let ov = x[base(fi) + n_ctrl + ci];
                let hub = |v: f64| {
                    if v.abs() <= cfg.huber_eps {
                        cfg.lambda_mag / cfg.huber_eps
                    } else {
                        0.0
                    }
                };
                out[base(fi) + ci] += cfg.lambda_scale * 2.0 + hub(sv) + grid_curv;
                out[base(fi) + n_ctrl + ci] += hub(ov) + grid_curv;
            }
        }

        let floor = out.iter().cloned().fold(0.0f64, f64::max) * 1e-9 + f64::MIN_POSITIVE;
        for v in out.iter_mut() {
            *v = v.max(floor);
        }
    }

    /// Energy (and gradient) from the packed coefficients; numerically
    /// equivalent to [`evaluate`] up to summation order.
    fn eval(
        &self,
        depths: &[FaceDepth],
        x: &[f64],
        aligned: &AlignedBufs,
        cfg: &AlignmentConfig,
        mut grad: Option<&mut [f64]>,
    ) -> (EnergyBreakdown, usize) {
        let n_ctrl = self.n_ctrl();
        let base = |face: usize| face * 2 * n_ctrl;
        if let Some(gr) = grad.as_deref_mut() {
            gr.iter_mut().for_each(|v| *v = 0.0);
        }

        let mut data = 0.0;
        let mut cross = 0.0;
        let mut active = 0usize;
        for pair in &self.pairs {
            let (a, b) = (pair.a, pair.b);
            let (sa_x, oa_x) = (&x[base(a)..base(a) + n_ctrl], &x[base(a) + n_ctrl..base(a) + 2 * n_ctrl]);
            let (sb_x, ob_x) = (&x[base(b)..base(b) + n_ctrl], &x[base(b) + n_ctrl..base(b) + 2 * n_ctrl]);
            let (av, ao) = (&aligned.vals[a], &aligned.ok[a]);
            let (bv, bo) = (&aligned.vals[b], &aligned.ok[b]);
            let araw = depths[a].values();
            let braw = depths[b].values();
            for s in &self.samples[pair.start..pair.end] {
                let ap = s.a_pix as usize;
                let aw = &self.grid.w[ap];
                let ai = &self.grid.idx[ap];

                let mut sa = 0.0;
                let mut oa = 0.0;
                for k in 0..4 {
                    sa += aw[k] * sa_x[ai[k] as usize];
                    oa += aw[k] * oa_x[ai[k] as usize];
                }
                let mut sb = 0.0;
                let mut ob = 0.0;
                for k in 0..4 {
                    sb += s.bf_w[k] * sb_x[s.bf_ctrl[k] as usize];
                    ob += s.bf_w[k] * ob_x[s.bf_ctrl[k] as usize];
                }
                let ds = sa - sb;
                let dof = oa - ob;
                cross += ds * ds + dof * dof;

                let mut want = ao[ap];
                let mut vb = 0.0;
                if want {
                    for k in 0..4 {
                        let t = s.b_tap[k] as usize;
                        if !bo[t] {
                            want = false;
                            break;
                        }
                        vb += s.b_beta[k] * bv[t];
                    }
                }
                let r = if want {
                    active += 1;
                    av[ap] - vb
                } else {
                    0.0
                };
                data += r * r;

                if let Some(gr) = grad.as_deref_mut() {
                    let lc = cfg.lambda_cross;
                    for k in 0..4 {
                        gr[base(a) + ai[k] as usize] += lc * 2.0 * ds * aw[k];
                        gr[base(a) + n_ctrl + ai[k] as usize] += lc * 2.0 * dof * aw[k];
                        gr[base(b) + s.bf_ctrl[k] as usize] -= lc * 2.0 * ds * s.bf_w[k];
                        gr[base(b) + n_ctrl + s.bf_ctrl[k] as usize] -= lc * 2.0 * dof * s.bf_w[k];
                    }
                    if want {
                        let draw = araw[ap];
                        for k in 0..4 {
                            gr[base(a) + ai[k] as usize] += 2.0 * r * aw[k] * draw;
                            gr[base(a) + n_ctrl + ai[k] as usize] += 2.0 * r * aw[k];
                        }
                        for k in 0..4 {
                            let t = s.b_tap[k] as usize;
                            let beta = s.b_beta[k];
                            let ti = &self.grid.idx[t];
                            let tw = &self.grid.w[t];
                            let draw_b = braw[t];
                            for q in 0..4 {
                                gr[base(b) + ti[q] as usize] -= 2.0 * r * beta * tw[q] * draw_b;
                                gr[base(b) + n_ctrl + ti[q] as usize] -= 2.0 * r * beta * tw[q];
                            }
                        }
                    }
                }
            }
        }

        let n_faces = depths.len();
        let g = self.grid_side;
        let mut scale = 0.0;
        let mut magnitude = 0.0;
        let mut grid = 0.0;
        for fi in 0..n_faces {
            let scales = &x[base(fi)..base(fi) + n_ctrl];
            let offsets = &x[base(fi) + n_ctrl..base(fi) + 2 * n_ctrl];
            for (ci, &sv) in scales.iter().enumerate() {
                scale += (sv - 1.0) * (sv - 1.0);
                magnitude += huber(sv, cfg.huber_eps);
                if let Some(gr) = grad.as_deref_mut() {
                    gr[base(fi) + ci] += cfg.lambda_scale * 2.0 * (sv - 1.0)
                        + cfg.lambda_mag * huber_grad(sv, cfg.huber_eps);
                }
            }
            for (ci, &ov) in offsets.iter().enumerate() {
                magnitude += huber(ov, cfg.huber_eps);
                if let Some(gr) = grad.as_deref_mut() {
                    gr[base(fi) + n_ctrl + ci] += cfg.lambda_mag * huber_grad(ov, cfg.huber_eps);
                }
            }
            for gy in 0..g {
                for gx in 0..g {
                    let i = gy * g + gx;
                    for j in [(gx + 1 < g).then(|| i + 1), (gy + 1 < g).then(|| i + g)]
                        .into_iter()
                        .flatten()
                    {
                        let ds = scales[i] - scales[j];
                        let dof = offsets[i] - offsets[j];
                        grid += ds * ds + dof * dof;
                        if let Some(gr) = grad.as_deref_mut() {
                            let lg = cfg.lambda_grid;
                            gr[base(fi) + i] += lg * 2.0 * ds;
                            gr[base(fi) + j] -= lg * 2.0 * ds;
                            gr[base(fi) + n_ctrl + i] += lg * 2.0 * dof;
                            gr[base(fi) + n_ctrl + j] -= lg * 2.0 * dof;
                        }
                    }
                }
            }
        }

        (
            EnergyBreakdown::combine(cfg, data, cross, scale, magnitude, grid),
            active,
        )
    }
}

/// Parameter-vector layout: per face, `G*G` scales then `G*G` offsets.
fn fields_to_vec(fields: &[AffineField]) -> Vec<f64> {
    let mut x = Vec::new();
    for f in fields {
        x.extend_from_slice(f.scales());
        x.extend_from_slice(f.offsets());
    }
    x
}

fn vec_to_fields(x: &[f64], template: &[AffineField]) -> Vec<AffineField> {
    let mut out = Vec::with_capacity(template.len());
    let mut at = 0;
    for t in template {
        let n = t.grid_side() * t.grid_side();
        out.push(AffineField::from_values(
            t.face_id,
            t.grid_side(),
            x[at..at + n].to_vec(),
            x[at + n..at + 2 * n].to_vec(),
        ));
        at += 2 * n;
    }
    out
}

/// Energy and, when `grad` is provided, the analytic gradient w.r.t. every
/// control value (layout of [`fields_to_vec`]). The `aligned` rasters must be
/// `apply_affine(depths, fields)` of the same fields. Also returns the number
/// of overlap samples that contributed to the data term.
fn evaluate(
    depths: &[FaceDepth],
    fields: &[AffineField],
    aligned: &[FaceDepth],
    overlaps: &[OverlapMask],
    cfg: &AlignmentConfig,
    mut grad: Option<&mut [f64]>,
) -> (EnergyBreakdown, usize) {
    let side = aligned[0].side();
    let g = fields[0].grid_side();
    let n_ctrl = g * g;
    let base = |face: usize| face * 2 * n_ctrl;

    if let Some(gr) = grad.as_deref_mut() {
        gr.iter_mut().for_each(|v| *v = 0.0);
    }

    let mut data = 0.0;
    let mut cross = 0.0;
    let mut active = 0usize;
    for m in overlaps {
        let (a, b) = (m.face_a, m.face_b);
        let (da, db) = (&aligned[a], &aligned[b]);
        let (ra, rb) = (&depths[a], &depths[b]);
        let (fa, fb) = (&fields[a], &fields[b]);
        for s in &m.samples {
            let (ax, ay) = (s.ax as usize, s.ay as usize);
            let (axf, ayf) = (s.ax as f64, s.ay as f64);

            // cross-face field consistency over the whole overlap region
            let (sa, oa) = fa.eval(axf, ayf, side);
            let (sb, ob) = fb.eval(s.bx, s.by, side);
            let ds = sa - sb;
            let dof = oa - ob;
            cross += ds * ds + dof * dof;

            let mut want_data = da.is_valid(ax, ay);
            let taps = db.taps(s.bx, s.by);
            let mut vb = 0.0;
            if want_data {
                for &(x, y, w) in &taps {
                    if !db.is_valid(x, y) {
                        want_data = false;
                        break;
                    }
                    vb += w * db.value(x, y);
                }
            }
            let r = if want_data { da.value(ax, ay) - vb } else { 0.0 };
            if want_data {
                data += r * r;
                active += 1;
            }

            if let Some(gr) = grad.as_deref_mut() {
                let (ia, wa) = grid_weights(g, axf, ayf, side);
                let (ib, wb) = grid_weights(g, s.bx, s.by, side);
                let lc = cfg.lambda_cross;
                for k in 0..4 {
                    gr[base(a) + ia[k]] += lc * 2.0 * ds * wa[k];
                    gr[base(a) + n_ctrl + ia[k]] += lc * 2.0 * dof * wa[k];
                    gr[base(b) + ib[k]] -= lc * 2.0 * ds * wb[k];
                    gr[base(b) + n_ctrl + ib[k]] -= lc * 2.0 * dof * wb[k];
                }
                if want_data {
                    let draw = ra.value(ax, ay);
                    for k in 0..4 {
                        gr[base(a) + ia[k]] += 2.0 * r * wa[k] * draw;
                        gr[base(a) + n_ctrl + ia[k]] += 2.0 * r * wa[k];
                    }
                    for &(x, y, w) in &taps {
                        let (iq, wq) = grid_weights(g, x as f64, y as f64, side);
                        let dbraw = rb.value(x, y);
                        for k in 0..4 {
                            gr[base(b) + iq[k]] -= 2.0 * r * w * wq[k] * dbraw;
                            gr[base(b) + n_ctrl + iq[k]] -= 2.0 * r * w * wq[k];
                        }
                    }
                }
            }
        }
    }

    let mut scale = 0.0;
    let mut magnitude = 0.0;
    let mut grid = 0.0;
    for (fi, f) in fields.iter().enumerate() {
        for (ci, &sv) in f.scales().iter().enumerate() {
            scale += (sv - 1.0) * (sv - 1.0);
            magnitude += huber(sv, cfg.huber_eps);
            if let Some(gr) = grad.as_deref_mut() {
                gr[base(fi) + ci] += cfg.lambda_scale * 2.0 * (sv - 1.0)
                    + cfg.lambda_mag * huber_grad(sv, cfg.huber_eps);
            }
        }
        for (ci, &ov) in f.offsets().iter().enumerate() {
            magnitude += huber(ov, cfg.huber_eps);
            if let Some(gr) = grad.as_deref_mut() {
                gr[base(fi) + n_ctrl + ci] += cfg.lambda_mag * huber_grad(ov, cfg.huber_eps);
            }
        }
        for gy in 0..g {
            for gx in 0..g {
                let i = gy * g + gx;
                for j in [
                    (gx + 1 < g).then(|| i + 1),
                    (gy + 1 < g).then(|| i + g),
                ]
                .into_iter()
                .flatten()
                {
                    let ds = f.scales()[i] - f.scales()[j];
                    let dof = f.offsets()[i] - f.offsets()[j];
                    grid += ds * ds + dof * dof;
                    if let Some(gr) = grad.as_deref_mut() {
                        let lg = cfg.lambda_grid;
                        gr[base(fi) + i] += lg * 2.0 * ds;
                        gr[base(fi) + j] -= lg * 2.0 * ds;
                        gr[base(fi) + n_ctrl + i] += lg * 2.0 * dof;
                        gr[base(fi) + n_ctrl + j] -= lg * 2.0 * dof;
                    }
                }
            }
        }
    }

    (
        EnergyBreakdown::combine(cfg, data, cross, scale, magnitude, grid),
        active,
    )
}

fn apply_all(depths: &[FaceDepth], fields: &[AffineField]) -> Result<Vec<FaceDepth>, AlignError> {
    depths
        .iter()
        .zip(fields.iter())
        .map(|(d, f)| apply_affine(d, f))
        .collect()
}

/// Total energy together with its analytic gradient w.r.t. every control
/// value. Gradient layout: per face, `G*G` scale entries then `G*G` offset
/// entries, faces in order.
pub fn total_energy_gradient(
    depths: &[FaceDepth],
    fields: &[AffineField],
    overlaps: &[OverlapMask],
    cfg: &AlignmentConfig,
) -> Result<(EnergyBreakdown, Vec<f64>), AlignError> {
    if depths.len() != fields.len() || depths.is_empty() {
        return Err(AlignError::EmptyInput);
    }
    let g = fields[0].grid_side();
    if fields.iter().any(|f| f.grid_side() != g) {
        return Err(AlignError::BadConfig("fields must share one grid side"));
    }
    let aligned = apply_all(depths, fields)?;
    let mut grad = vec![0.0f64; depths.len() * 2 * g * g];
    let (energy, _) = evaluate(depths, fields, &aligned, overlaps, cfg, Some(&mut grad));
    Ok((energy, grad))
}

/// Minimizes the alignment energy over all field control values, starting
/// from the identity field (`s = 1`, `o = 0`).
///
/// Descent directions are nonlinear conjugate gradients (Polak-Ribiere with
/// restarts whenever the conjugate direction stops being a descent
/// direction); each step is accepted by a backtracking line search that
/// halves the step until the energy strictly decreases, up to 30 halvings.
/// Descent stops at `max_iters`, when the relative total-energy decrease
/// falls below `tol`, or when no decreasing step exists. The trace holds the
/// initial energy plus one entry per accepted iterate and is non-increasing
/// in `total`.
///
/// The line search only accepts a step if it does not shrink the set of
/// overlap samples contributing to the data term: a large step could
/// otherwise push depths non-positive and be "rewarded" for emptying the
/// data term instead of reducing it.
pub fn optimize(
    depths: &[FaceDepth],
    frames: &[TangentFrame],
    grid_side: usize,
    cfg: &AlignmentConfig,
    fuse: &FuseConfig,
) -> Result<AlignmentResult, AlignError> {
    cfg.validate()?;
    if depths.is_empty() {
        return Err(AlignError::EmptyInput);
    }
    if depths.len() != frames.len() {
        return Err(AlignError::CountMismatch {
            depths: depths.len(),
            frames: frames.len(),
        });
    }
    if grid_side < 1 {
        return Err(AlignError::BadConfig("grid_side must be >= 1"));
    }
    let side = depths[0].side();
    for (d, f) in depths.iter().zip(frames.iter()) {
        if d.face_id != f.face_id {
            return Err(AlignError::FaceMismatch {
                expected: f.face_id,
                got: d.face_id,
            });
        }
        if d.side() != side || f.resolution != side {
            return Err(AlignError::SideMismatch {
                expected: side,
                got: d.side().min(f.resolution),
            });
        }
        if d.valid_count() == 0 {
            return Err(AlignError::AllInvalid { face_id: d.face_id });
        }
    }

    let overlaps = sphere::face_overlaps(frames);
    let packed = pack_problem(&overlaps, side, grid_side);
    let n_ctrl = grid_side * grid_side;
    let n_vars = depths.len() * 2 * n_ctrl;

    let template: Vec<AffineField> = depths
        .iter()
        .map(|d| AffineField::identity(d.face_id, grid_side))
        .collect();
    let mut x = fields_to_vec(&template);
    let mut bufs = AlignedBufs {
        vals: depths.iter().map(|d| vec![0.0; d.values().len()]).collect(),
        ok: depths.iter().map(|d| vec![false; d.values().len()]).collect(),
    };
    let mut trial = AlignedBufs {
        vals: bufs.vals.clone(),
        ok: bufs.ok.clone(),
    };

    packed.apply(depths, &x, &mut bufs);
    let mut grad = vec![0.0f64; n_vars];
    let (mut energy, mut active) = packed.eval(depths, &x, &bufs, cfg, Some(&mut grad));
    if !energy.total.is_finite() {
        return Err(AlignError::NonFiniteEnergy);
    }
    let mut trace = vec![energy];

    let mut precond = vec![0.0f64; n_vars];
    packed.curvature_diag(depths, &bufs, cfg, &x, &mut precond);
    let mut z: Vec<f64> = grad.iter().zip(precond.iter()).map(|(&g, &m)| g / m).collect();
    let mut dir: Vec<f64> = z.iter().map(|&zi| -zi).collect();
    let mut g_dot_z = grad.iter().zip(z.iter()).map(|(&g, &zi)| g * zi).sum::<f64>();
    let mut step = cfg.step_init;
    let mut restarted = false;

    // Up to this many control values the descent direction comes from a
    // damped Newton solve of the frozen-branch quadratic (one dense Cholesky
    // per iteration); larger problems fall back to preconditioned conjugate
    // gradients. The smooth near-null field modes of the energy make plain
    // first-order steps impractically slow.
    const NEWTON_MAX_VARS: usize = 4096;
    let newton = n_vars <= NEWTON_MAX_VARS;
    let mut hess = newton.then(|| nalgebra::DMatrix::<f64>::zeros(n_vars, n_vars));

    for _ in 0..cfg.max_iters {
        if g_dot_z == 0.0 {
            break;
        }
        if let Some(h) = hess.as_mut() {
            packed.assemble_hessian(depths, &bufs, cfg, &x, h);
            let diag_max = (0..n_vars).map(|i| h[(i, i)]).fold(0.0f64, f64::max);
            let g_vec = nalgebra::DVector::from_column_slice(&grad);
            let mut damping = 1e-9 * diag_max.max(1e-300);
            let mut solved = None;
            for _ in 0..8 {
                let mut hd = h.clone();
                for i in 0..n_vars {
                    hd[(i, i)] += damping;
                }
                if let Some(chol) = hd.cholesky() {
                    solved = Some(chol.solve(&g_vec));
                    break;
                }
                damping *= 100.0;
            }
            let mut newton_ok = false;
            if let Some(d) = solved {
                let descent: f64 = d.iter().zip(grad.iter()).map(|(&di, &gi)| di * gi).sum();
                if descent > 0.0 && d.iter().all(|v| v.is_finite()) {
                    for i in 0..n_vars {
                        dir[i] = -d[i];
                    }
                    newton_ok = true;
                }
            }
            if !newton_ok {
                for i in 0..n_vars {
                    dir[i] = -z[i];
                }
            }
            // the natural Newton step is 1
            step = cfg.step_init.min(1.0) / 2.0;
        }
        let slope: f64 = grad.iter().zip(dir.iter()).map(|(&g, &d)| g * d).sum();
        let probe = |t: f64, trial: &mut AlignedBufs| -> (Vec<f64>, EnergyBreakdown, usize) {
            let xc: Vec<f64> = x.iter().zip(dir.iter()).map(|(&xi, &di)| xi + t * di).collect();
            packed.apply(depths, &xc, trial);
            let (ec, cc) = packed.eval(depths, &xc, trial, cfg, None);
            (xc, ec, cc)
        };
        let good = |ec: &EnergyBreakdown, cc: usize| {
            ec.total.is_finite() && ec.total < energy.total && cc >= active
        };

        // quadratic-interpolation line search: the energy along a direction
        // is near-quadratic, so one probe pins its vertex; fall back to
        // halving when interpolation fails to decrease
        let mut t = (step * 2.0).min(cfg.step_init);
        let mut accepted = None;
        for _ in 0..=30 {
            let (xc, ec, cc) = probe(t, &mut trial);
            let curv = ec.total - energy.total - slope * t;
            if curv > 0.0 {
                let t_star = -slope * t * t / (2.0 * curv);
                if t_star > 0.0 && t_star.is_finite() && (t_star - t).abs() > 1e-3 * t {
                    let mut vertex = AlignedBufs {
                        vals: trial.vals.clone(),
                        ok: trial.ok.clone(),
                    };
                    let (xv, ev, cv) = probe(t_star, &mut vertex);
                    if good(&ev, cv) && ev.total <= ec.total {
                        trial = vertex;
                        accepted = Some((xv, ev, cv, t_star));
                        break;
                    }
                }
            }
            if good(&ec, cc) {
                accepted = Some((xc, ec, cc, t));
                break;
            }
            t *= 0.5;
        }
        let Some((xc, ec, cc, t)) = accepted else {
            if restarted {
                break;
            }
            // the conjugate direction is exhausted; retry once along the
            // preconditioned steepest descent before giving up
            restarted = true;
            dir = z.iter().map(|&zi| -zi).collect();
            continue;
        };
        restarted = false;
        x = xc;
        core::mem::swap(&mut bufs, &mut trial);
        step = t;
        active = cc;
        let prev = energy.total;
        energy = ec;
        trace.push(energy);

        let mut grad_new = vec![0.0f64; n_vars];
        packed.eval(depths, &x, &bufs, cfg, Some(&mut grad_new));
        let z_new: Vec<f64> = grad_new
            .iter()
            .zip(precond.iter())
            .map(|(&g, &m)| g / m)
            .collect();
        // preconditioned Polak-Ribiere+ conjugacy coefficient
        let num: f64 = grad_new
            .iter()
            .zip(z_new.iter().zip(grad.iter()))
            .map(|(&gn, (&zn, &go))| zn * (gn - go))
            .sum();
        let beta = (num / g_dot_z).max(0.0);
        let mut descent = 0.0;
        for i in 0..n_vars {
            dir[i] = -z_new[i] + beta * dir[i];
            descent += dir[i] * grad_new[i];
        }
        if descent >= 0.0 {
            for i in 0..n_vars {
                dir[i] = -z_new[i];
            }
        }
        grad = grad_new;
        z = z_new;
        g_dot_z = grad.iter().zip(z.iter()).map(|(&g, &zi)| g * zi).sum::<f64>();

        let rel = (prev - energy.total) / prev.abs().max(f64::MIN_POSITIVE);
        if rel < cfg.tol {
            break;
        }
    }

    let fields = vec_to_fields(&x, &template);
    let aligned = apply_all(depths, &fields)?;
    let fused = fuse_faces(&aligned, frames, fuse)?;
    Ok(AlignmentResult {
        fields,
        aligned,
        fused,
        trace,
    })
}

/// Fuses aligned face depths into one panoramic depth map with normalized
/// `max(0, d . center)^power` weights over the faces whose field of view
/// strictly contains each pixel direction. Pixels no face covers are marked
/// invalid.
pub fn fuse_faces(
    aligned: &[FaceDepth],
    frames: &[TangentFrame],
    fuse: &FuseConfig,
) -> Result<EquirectImage, AlignError> {
    if aligned.is_empty() {
        return Err(AlignError::EmptyInput);
    }
    if aligned.len() != frames.len() {
        return Err(AlignError::CountMismatch {
            depths: aligned.len(),
            frames: frames.len(),
        });
    }
    for (d, f) in aligned.iter().zip(frames.iter()) {
        if d.face_id != f.face_id {
            return Err(AlignError::FaceMismatch {
                expected: f.face_id,
                got: d.face_id,
            });
        }
        if d.side() != f.resolution {
            return Err(AlignError::SideMismatch {
                expected: f.resolution,
                got: d.side(),
            });
        }
    }
    if !(fuse.power >= 0.0) || !fuse.power.is_finite() {
        return Err(AlignError::BadConfig("fuse power must be finite and >= 0"));
    }

    let mut out = EquirectImage::new(fuse.pano_width, fuse.pano_height, 1)?;
    for v in 0..fuse.pano_height {
        for u in 0..fuse.pano_width {
            let dir = out.dir_at(u, v);
            let mut num = 0.0;
            let mut den = 0.0;
            for (d, frame) in aligned.iter().zip(frames.iter()) {
                let cosang = dir.dot(&frame.center);
                if cosang <= 0.0 {
                    continue;
                }
                let x = dir.dot(&frame.right()) / cosang;
                let y = dir.dot(&frame.up) / cosang;
                if !frame.contains_tangent(x, y) {
                    continue;
                }
                let (bx, by) = frame.pixel_from_tangent(x, y);
                if let Some(val) = d.sample_renorm(bx, by) {
                    let w = cosang.powf(fuse.power);
                    num += w * val;
                    den += w;
                }
            }
            if den > 0.0 {
                out.raster_mut().pixel_mut(u, v)[0] = (num / den) as f32;
            } else {
                out.raster_mut().set_valid(u, v, false);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::icosahedron_frames;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_frames(n: usize, res: usize) -> Vec<TangentFrame> {
        // an adjacent cluster: face 0 plus its nearest neighbours, re-indexed
        let all = icosahedron_frames(80.0, res).unwrap();
        let mut idx: Vec<usize> = (1..all.len()).collect();
        idx.sort_by(|&i, &j| {
            all[j]
                .center
                .dot(&all[0].center)
                .total_cmp(&all[i].center.dot(&all[0].center))
        });
        let mut frames = vec![all[0].clone()];
        frames.extend(idx.into_iter().take(n - 1).map(|i| all[i].clone()));
        for (k, f) in frames.iter_mut().enumerate() {
            f.face_id = k;
        }
        frames
    }

    fn random_depth(face_id: usize, side: usize, rng: &mut ChaCha8Rng) -> FaceDepth {
        let vals = (0..side * side)
            .map(|_| rng.gen_range(1.0..3.0))
            .collect();
        FaceDepth::new(face_id, side, vals)
    }

    fn random_field(face_id: usize, g: usize, rng: &mut ChaCha8Rng) -> AffineField {
        let n = g * g;
        let scales = (0..n).map(|_| rng.gen_range(0.9..1.1)).collect();
        let offsets = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();
        AffineField::from_values(face_id, g, scales, offsets)
    }

    #[test]
    fn apply_affine_identity_and_constant() {
        let d = FaceDepth::new(0, 4, vec![2.0; 16]);
        let id = AffineField::identity(0, 3);
        let out = apply_affine(&d, &id).unwrap();
        assert_eq!(out.values(), d.values());

        let f = AffineField::from_values(0, 1, vec![1.5], vec![0.5]);
        let out = apply_affine(&d, &f).unwrap();
        assert!(out.values().iter().all(|&v| (v - 3.5).abs() < 1e-15));

        let wrong = AffineField::identity(1, 2);
        assert!(matches!(
            apply_affine(&d, &wrong),
            Err(AlignError::FaceMismatch { .. })
        ));
    }

    #[test]
    fn apply_affine_matches_bruteforce_bilinear() {
        let side = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = random_depth(0, side, &mut rng);
        let scales = vec![0.8, 1.2, 1.1, 0.9];
        let offsets = vec![-0.2, 0.3, 0.1, -0.1];
        let f = AffineField::from_values(0, 2, scales.clone(), offsets.clone());
        let out = apply_affine(&d, &f).unwrap();
        for y in 0..side {
            for x in 0..side {
                // independent per-pixel bilinear evaluation of the 2x2 grid
                let tx = ((x as f64 + 0.5) / side as f64).clamp(0.0, 1.0);
                let ty = ((y as f64 + 0.5) / side as f64).clamp(0.0, 1.0);
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let s = lerp(lerp(scales[0], scales[1], tx), lerp(scales[2], scales[3], tx), ty);
                let o = lerp(
                    lerp(offsets[0], offsets[1], tx),
                    lerp(offsets[2], offsets[3], tx),
                    ty,
                );
                let want = s * d.value(x, y) + o;
                assert!(
                    (out.value(x, y) - want).abs() < 1e-12,
                    "pixel ({x},{y}): {} vs {want}",
                    out.value(x, y)
                );
            }
        }
    }

    #[test]
    fn apply_affine_marks_nonpositive_invalid() {
        let d = FaceDepth::new(0, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let f = AffineField::from_values(0, 1, vec![1.0], vec![-2.5]);
        let out = apply_affine(&d, &f).unwrap();
        assert!(!out.is_valid(0, 0)); // 1.0 - 2.5 < 0
        assert!(!out.is_valid(1, 0)); // 2.0 - 2.5 < 0
        assert!(out.is_valid(0, 1));
        assert!(out.is_valid(1, 1));
    }

    #[test]
    fn data_energy_trivial_cases() {
        let frames = small_frames(2, 16);
        let overlaps = sphere::face_overlaps(&frames);
        assert_eq!(overlaps.len(), 1);

        let a = FaceDepth::new(0, 16, vec![2.0; 256]);
        let b = FaceDepth::new(1, 16, vec![2.0; 256]);
        assert_eq!(data_energy(&[a.clone(), b], &overlaps), 0.0);

        let c = 0.25;
        let b = FaceDepth::new(1, 16, vec![2.0 + c; 256]);
        let n = overlaps[0].len() as f64;
        let e = data_energy(&[a, b], &overlaps);
        assert!((e - n * c * c).abs() < 1e-9 * n, "e = {e}, want {}", n * c * c);

        assert_eq!(data_energy(&[], &[]), 0.0);
    }

    #[test]
    fn data_energy_matches_bruteforce() {
        let frames = small_frames(3, 16);
        let overlaps = sphere::face_overlaps(&frames);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let faces: Vec<FaceDepth> = (0..3).map(|i| random_depth(i, 16, &mut rng)).collect();

        // independent accumulation with its own bilinear resampling
        let mut want = 0.0;
        for m in &overlaps {
            for s in &m.samples {
                let da = &faces[m.face_a];
                let db = &faces[m.face_b];
                let x0 = s.bx.floor() as i64;
                let y0 = s.by.floor() as i64;
                let fx = s.bx - x0 as f64;
                let fy = s.by - y0 as f64;
                let cl = |v: i64| v.clamp(0, 15) as usize;
                let v00 = db.value(cl(x0), cl(y0));
                let v10 = db.value(cl(x0 + 1), cl(y0));
                let v01 = db.value(cl(x0), cl(y0 + 1));
                let v11 = db.value(cl(x0 + 1), cl(y0 + 1));
                let vb = v00 * (1.0 - fx) * (1.0 - fy)
                    + v10 * fx * (1.0 - fy)
                    + v01 * (1.0 - fx) * fy
                    + v11 * fx * fy;
                let r = da.value(s.ax as usize, s.ay as usize) - vb;
                want += r * r;
            }
        }
        let got = data_energy(&faces, &overlaps);
        assert!(
            (got - want).abs() <= 1e-9 * want.abs().max(1.0),
            "got {got}, want {want}"
        );
    }

    #[test]
    fn reg_energy_identity_fields() {
        let frames = small_frames(3, 16);
        let overlaps = sphere::face_overlaps(&frames);
        let g = 4;
        let fields: Vec<AffineField> = (0..3).map(|i| AffineField::identity(i, g)).collect();
        let cfg = AlignmentConfig::default();
        let e = reg_energy(&fields, &overlaps, 16, &cfg);
        // bilinear weights of an all-ones grid sum to 1 only up to rounding
        assert!(e.cross < 1e-24, "cross = {}", e.cross);
        assert_eq!(e.scale, 0.0);
        assert_eq!(e.grid, 0.0);
        let want_mag = 3.0 * (g * g) as f64 * huber(1.0, cfg.huber_eps);
        assert!((e.magnitude - want_mag).abs() < 1e-12);
    }

    #[test]
    fn grid_term_counts_adjacent_edges() {
        let mut f = AffineField::identity(0, 2);
        f.scales_mut().copy_from_slice(&[1.0, 1.0, 1.0, 2.0]);
        let cfg = AlignmentConfig::default();
        let e = reg_energy(&[f], &[], 2, &cfg);
        // the 2 sits on two grid edges, each contributing (1-2)^2
        assert!((e.grid - 2.0).abs() < 1e-15, "grid = {}", e.grid);
    }

    #[test]
    fn reg_energy_matches_bruteforce() {
        let frames = small_frames(3, 16);
        let overlaps = sphere::face_overlaps(&frames);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = 3;
        let fields: Vec<AffineField> = (0..3).map(|i| random_field(i, g, &mut rng)).collect();
        let cfg = AlignmentConfig::default();
        let e = reg_energy(&fields, &overlaps, 16, &cfg);

        // independent grid interpolation for the cross term
        let eval = |px: f64, py: f64, vals: &[f64]| -> f64 {
            let t = |p: f64| ((p + 0.5) / 16.0 * (g - 1) as f64).clamp(0.0, (g - 1) as f64);
            let (tx, ty) = (t(px), t(py));
            let (ix, iy) = ((tx as usize).min(g - 2), (ty as usize).min(g - 2));
            let (fx, fy) = (tx - ix as f64, ty - iy as f64);
            let v = |x: usize, y: usize| vals[y * g + x];
            v(ix, iy) * (1.0 - fx) * (1.0 - fy)
                + v(ix + 1, iy) * fx * (1.0 - fy)
                + v(ix, iy + 1) * (1.0 - fx) * fy
                + v(ix + 1, iy + 1) * fx * fy
        };
        let mut cross = 0.0;
        for m in &overlaps {
            let (fa, fb) = (&fields[m.face_a], &fields[m.face_b]);
            for s in &m.samples {
                let sa = eval(s.ax as f64, s.ay as f64, fa.scales());
                let oa = eval(s.ax as f64, s.ay as f64, fa.offsets());
                let sb = eval(s.bx, s.by, fb.scales());
                let ob = eval(s.bx, s.by, fb.offsets());
                cross += (sa - sb) * (sa - sb) + (oa - ob) * (oa - ob);
            }
        }
        let mut scale = 0.0;
        let mut mag = 0.0;
        let mut grid = 0.0;
        for f in &fields {
            for &s in f.scales() {
                scale += (s - 1.0) * (s - 1.0);
                mag += huber(s, cfg.huber_eps);
            }
            for &o in f.offsets() {
                mag += huber(o, cfg.huber_eps);
            }
            for gy in 0..g {
                for gx in 0..g {
                    if gx + 1 < g {
                        let a = gy * g + gx;
                        let b = a + 1;
                        grid += (f.scales()[a] - f.scales()[b]).powi(2)
                            + (f.offsets()[a] - f.offsets()[b]).powi(2);
                    }
                    if gy + 1 < g {
                        let a = gy * g + gx;
                        let b = a + g;
                        grid += (f.scales()[a] - f.scales()[b]).powi(2)
                            + (f.offsets()[a] - f.offsets()[b]).powi(2);
                    }
                }
            }
        }
        let rel = |x: f64, y: f64| (x - y).abs() / y.abs().max(1e-300);
        assert!(rel(e.cross, cross) < 1e-9, "cross {} vs {}", e.cross, cross);
        assert!(rel(e.scale, scale) < 1e-9);
        assert!(rel(e.magnitude, mag) < 1e-9);
        assert!(rel(e.grid, grid) < 1e-9);
    }

    #[test]
    fn total_energy_identity() {
        let frames = small_frames(3, 16);
        let overlaps = sphere::face_overlaps(&frames);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let depths: Vec<FaceDepth> = (0..3).map(|i| random_depth(i, 16, &mut rng)).collect();
        let fields: Vec<AffineField> = (0..3).map(|i| random_field(i, 3, &mut rng)).collect();
        let aligned: Vec<FaceDepth> = depths
            .iter()
            .zip(&fields)
            .map(|(d, f)| apply_affine(d, f).unwrap())
            .collect();

        let cfg = AlignmentConfig {
            lambda_cross: 0.7,
            lambda_scale: 0.3,
            lambda_mag: 0.01,
            lambda_grid: 0.2,
            ..AlignmentConfig::default()
        };
        let e = total_energy(&aligned, &fields, &overlaps, &cfg);
        let want = e.data
            + cfg.lambda_cross * e.cross
            + cfg.lambda_scale * e.scale
            + cfg.lambda_mag * e.magnitude
            + cfg.lambda_grid * e.grid;
        assert_eq!(e.total, want, "total must be the exact weighted sum");

        let zero = AlignmentConfig {
            lambda_cross: 0.0,
            lambda_scale: 0.0,
            lambda_mag: 0.0,
            lambda_grid: 0.0,
            ..AlignmentConfig::default()
        };
        let e0 = total_energy(&aligned, &fields, &overlaps, &zero);
        assert_eq!(e0.total, e0.data);

        // parts must match the standalone operations exactly
        assert_eq!(e.data, data_energy(&aligned, &overlaps));
        let r = reg_energy(&fields, &overlaps, 16, &cfg);
        assert_eq!(e.cross, r.cross);
        assert_eq!(e.scale, r.scale);
        assert_eq!(e.magnitude, r.magnitude);
        assert_eq!(e.grid, r.grid);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let frames = small_frames(3, 12);
        let overlaps = sphere::face_overlaps(&frames);
        let g = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let depths: Vec<FaceDepth> = (0..3).map(|i| random_depth(i, 12, &mut rng)).collect();
        let fields: Vec<AffineField> = (0..3).map(|i| random_field(i, g, &mut rng)).collect();
        let cfg = AlignmentConfig {
            lambda_cross: 0.5,
            lambda_scale: 0.3,
            lambda_mag: 0.05,
            lambda_grid: 0.4,
            ..AlignmentConfig::default()
        };

        let aligned = apply_all(&depths, &fields).unwrap();
        let mut grad = vec![0.0; 3 * 2 * g * g];
        evaluate(&depths, &fields, &aligned, &overlaps, &cfg, Some(&mut grad));

        let x0 = fields_to_vec(&fields);
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp[i] += h;
            let fp = vec_to_fields(&xp, &fields);
            let ap = apply_all(&depths, &fp).unwrap();
            let ep = evaluate(&depths, &fp, &ap, &overlaps, &cfg, None).0.total;
            let mut xm = x0.clone();
            xm[i] -= h;
            let fm = vec_to_fields(&xm, &fields);
            let am = apply_all(&depths, &fm).unwrap();
            let em = evaluate(&depths, &fm, &am, &overlaps, &cfg, None).0.total;
            let fd = (ep - em) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-8);
            worst = worst.max((fd - grad[i]).abs() / denom);
        }
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn packed_path_matches_reference_evaluation() {
        // the optimizer's precomputed-coefficient path must agree with the
        // straightforward evaluation used by the public energy operations
        let frames = small_frames(3, 16);
        let overlaps = sphere::face_overlaps(&frames);
        let g = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let depths: Vec<FaceDepth> = (0..3).map(|i| random_depth(i, 16, &mut rng)).collect();
        let fields: Vec<AffineField> = (0..3).map(|i| random_field(i, g, &mut rng)).collect();
        let cfg = AlignmentConfig {
            lambda_cross: 0.4,
            lambda_scale: 0.2,
            lambda_mag: 0.03,
            lambda_grid: 0.6,
            ..AlignmentConfig::default()
        };

        let aligned = apply_all(&depths, &fields).unwrap();
        let mut grad_ref = vec![0.0; 3 * 2 * g * g];
        let (e_ref, n_ref) =
            evaluate(&depths, &fields, &aligned, &overlaps, &cfg, Some(&mut grad_ref));

        let packed = pack_problem(&overlaps, 16, g);
        let x = fields_to_vec(&fields);
        let mut bufs = AlignedBufs {
            vals: depths.iter().map(|d| vec![0.0; d.values().len()]).collect(),
            ok: depths.iter().map(|d| vec![false; d.values().len()]).collect(),
        };
        packed.apply(&depths, &x, &mut bufs);
        let mut grad_fast = vec![0.0; 3 * 2 * g * g];
        let (e_fast, n_fast) = packed.eval(&depths, &x, &bufs, &cfg, Some(&mut grad_fast));

        assert_eq!(n_ref, n_fast);
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
        assert!(rel(e_fast.data, e_ref.data) < 1e-9);
        assert!(rel(e_fast.cross, e_ref.cross) < 1e-9);
        assert!(rel(e_fast.total, e_ref.total) < 1e-9);
        for (gf, gr) in grad_fast.iter().zip(grad_ref.iter()) {
            assert!((gf - gr).abs() <= 1e-9 * gr.abs().max(1.0), "{gf} vs {gr}");
        }
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let frames = small_frames(3, 12);
        let overlaps = sphere::face_overlaps(&frames);
        let g = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let depths: Vec<FaceDepth> = (0..3).map(|i| random_depth(i, 12, &mut rng)).collect();
        let fields: Vec<AffineField> = (0..3).map(|i| random_field(i, g, &mut rng)).collect();
        let cfg = AlignmentConfig {
            lambda_cross: 0.3,
            lambda_scale: 0.2,
            lambda_mag: 0.05,
            lambda_grid: 0.7,
            ..AlignmentConfig::default()
        };

        let packed = pack_problem(&overlaps, 12, g);
        let x = fields_to_vec(&fields);
        let n = x.len();
        let mut bufs = AlignedBufs {
            vals: depths.iter().map(|d| vec![0.0; d.values().len()]).collect(),
            ok: depths.iter().map(|d| vec![false; d.values().len()]).collect(),
        };
        packed.apply(&depths, &x, &mut bufs);
        let mut h = nalgebra::DMatrix::<f64>::zeros(n, n);
        packed.assemble_hessian(&depths, &bufs, &cfg, &x, &mut h);

        // H v against central differences of the gradient along v
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eps = 1e-6;
        let grad_at = |xs: &[f64]| -> Vec<f64> {
            let mut b = AlignedBufs {
                vals: depths.iter().map(|d| vec![0.0; d.values().len()]).collect(),
                ok: depths.iter().map(|d| vec![false; d.values().len()]).collect(),
            };
            packed.apply(&depths, xs, &mut b);
            let mut gr = vec![0.0; n];
            packed.eval(&depths, xs, &b, &cfg, Some(&mut gr));
            gr
        };
        let xp: Vec<f64> = x.iter().zip(&v).map(|(&xi, &vi)| xi + eps * vi).collect();
        let xm: Vec<f64> = x.iter().zip(&v).map(|(&xi, &vi)| xi - eps * vi).collect();
        let (gp, gm) = (grad_at(&xp), grad_at(&xm));
        for i in 0..n {
            let fd = (gp[i] - gm[i]) / (2.0 * eps);
            let hv: f64 = (0..n).map(|j| h[(i, j)] * v[j]).sum();
            let denom = fd.abs().max(hv.abs()).max(1.0);
            assert!(
                (fd - hv).abs() / denom < 1e-5,
                "row {i}: Hv = {hv}, finite diff = {fd}"
            );
        }
    }

    #[test]
    fn consistent_faces_stay_near_identity() {
        // all faces agree already: the only pull on the fields comes from the
        // magnitude/scale regularizers
        let frames = small_frames(4, 16);
        let scene = crate::synth::SyntheticScene::BoxRoom {
            half_extents: nalgebra::Vector3::new(2.0, 2.4, 1.8),
            camera_offset: nalgebra::Vector3::new(0.2, -0.3, 0.1),
        };
        let depths = crate::synth::analytic_face_depths(&scene, &frames).unwrap();
        let cfg = AlignmentConfig::default();
        let fuse = FuseConfig {
            pano_width: 64,
            pano_height: 32,
            power: 4.0,
        };
        let res = optimize(&depths, &frames, 4, &cfg, &fuse).unwrap();
        for f in &res.fields {
            for &s in f.scales() {
                assert!((s - 1.0).abs() < 0.05, "scale drifted to {s}");
            }
            for &o in f.offsets() {
                assert!(o.abs() < 0.05, "offset drifted to {o}");
            }
        }
        for w in res.trace.windows(2) {
            assert!(w[1].total <= w[0].total + 1e-12);
        }
    }

    #[test]
    fn optimize_rejects_fully_invalid_face() {
        let frames = small_frames(2, 8);
        let good = random_depth(0, 8, &mut ChaCha8Rng::seed_from_u64(1));
        let bad = FaceDepth::new(1, 8, vec![-1.0; 64]);
        let err = optimize(
            &[good, bad],
            &frames,
            2,
            &AlignmentConfig::default(),
            &FuseConfig::default(),
        );
        assert!(matches!(err, Err(AlignError::AllInvalid { face_id: 1 })));
    }

    #[test]
    fn single_control_point_matches_closed_form_least_squares() {
        // Two faces, G = 1. With a Huber width larger than every |s|, |o| on
        // the solution path, the magnitude term is exactly quadratic and the
        // whole energy is a solvable least-squares problem in
        // (s0, o0, s1, o1); without the magnitude anchor the offset sum
        // would be a gauge direction.
        let frames = small_frames(2, 16);
        let scene = crate::synth::SyntheticScene::BoxRoom {
            half_extents: nalgebra::Vector3::new(2.0, 1.8, 1.5),
            camera_offset: nalgebra::Vector3::new(0.3, 0.2, -0.2),
        };
        let truth = crate::synth::analytic_face_depths(&scene, &frames).unwrap();
        let corrupt = |d: &FaceDepth, s: f64, o: f64| {
            FaceDepth::new(d.face_id, d.side(), d.values().iter().map(|&v| s * v + o).collect())
        };
        let depths = vec![corrupt(&truth[0], 1.3, -0.1), corrupt(&truth[1], 0.8, 0.15)];

        let overlaps = sphere::face_overlaps(&frames);
        assert_eq!(overlaps.len(), 1);

        // normal equations of
        //   sum_p (s0 A_p + o0 - s1 B_p - o1)^2 + ls ((s0-1)^2 + (s1-1)^2)
        //   + lm/(2 eps) (s0^2 + o0^2 + s1^2 + o1^2)
        // where B_p is the bilinear resample of face 1's raw depths
        let (ls, lm, eps) = (0.1, 1.0, 3.0);
        let mut m = nalgebra::Matrix4::<f64>::zeros();
        let mut rhs = nalgebra::Vector4::<f64>::zeros();
        for s in &overlaps[0].samples {
            let a = depths[0].value(s.ax as usize, s.ay as usize);
            let b = depths[1].sample_strict(s.bx, s.by).unwrap();
            let row = nalgebra::Vector4::new(a, 1.0, -b, -1.0);
            m += row * row.transpose();
        }
        m[(0, 0)] += ls + lm / (2.0 * eps);
        m[(1, 1)] += lm / (2.0 * eps);
        m[(2, 2)] += ls + lm / (2.0 * eps);
        m[(3, 3)] += lm / (2.0 * eps);
        rhs[0] += ls;
        rhs[2] += ls;
        let sol = m.lu().solve(&rhs).expect("normal equations solvable");

        let cfg = AlignmentConfig {
            lambda_cross: 0.0,
            lambda_scale: ls,
            lambda_mag: lm,
            lambda_grid: 0.0,
            max_iters: 50_000,
            step_init: 1.0,
            huber_eps: eps,
            tol: 0.0,
        };
        let fuse = FuseConfig {
            pano_width: 64,
            pano_height: 32,
            power: 4.0,
        };
        let res = optimize(&depths, &frames, 1, &cfg, &fuse).unwrap();
        let got = [
            res.fields[0].scales()[0],
            res.fields[0].offsets()[0],
            res.fields[1].scales()[0],
            res.fields[1].offsets()[0],
        ];
        for (g, w) in got.iter().zip(sol.iter()) {
            assert!((g - w).abs() < 1e-3, "got {got:?}, want {sol:?}");
        }
    }

    #[test]
    fn fuse_constant_faces() {
        let frames = icosahedron_frames(80.0, 16).unwrap();
        let faces: Vec<FaceDepth> = frames
            .iter()
            .map(|f| FaceDepth::new(f.face_id, 16, vec![2.5; 256]))
            .collect();
        let fuse = FuseConfig {
            pano_width: 128,
            pano_height: 64,
            power: 4.0,
        };
        let out = fuse_faces(&faces, &frames, &fuse).unwrap();
        assert!(out.raster().fully_valid(), "coverage must be complete");
        for &v in out.raster().data() {
            assert!((v - 2.5).abs() < 1e-6);
        }
    }
}
