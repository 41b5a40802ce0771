//! Row-major float rasters with optional per-pixel validity masks.

use alloc::vec;
use alloc::vec::Vec;

/// A `width x height` grid of `channels` interleaved `f32` samples.
///
/// A missing validity mask means every pixel is valid; the mask is only
/// materialized once some pixel is marked invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
    validity: Option<Vec<bool>>,
}

impl Raster {
    /// Zero-filled raster with all pixels valid.
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(width > 0 && height > 0, "raster dimensions must be nonzero");
        assert!(channels == 1 || channels == 3, "rasters carry 1 or 3 channels");
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
            validity: None,
        }
    }

    /// Builds a raster by evaluating `f(x, y)` at every pixel.
    pub fn from_fn<F>(width: usize, height: usize, channels: usize, mut f: F) -> Self
    where
        F: FnMut(usize, usize) -> [f32; 3],
    {
        let mut out = Self::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                let i = out.index(x, y);
                out.data[i..i + channels].copy_from_slice(&v[..channels]);
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    fn index(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        (y * self.width + x) * self.channels
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = self.index(x, y);
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = self.index(x, y);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        match &self.validity {
            Some(mask) => mask[y * self.width + x],
            None => true,
        }
    }

    pub fn set_valid(&mut self, x: usize, y: usize, valid: bool) {
        let n = self.width * self.height;
        let mask = self.validity.get_or_insert_with(|| vec![true; n]);
        mask[y * self.width + x] = valid;
    }

    /// `None` when every pixel is valid.
    pub fn validity(&self) -> Option<&[bool]> {
        self.validity.as_deref()
    }

    pub fn fully_valid(&self) -> bool {
        match &self.validity {
            Some(mask) => mask.iter().all(|&v| v),
            None => true,
        }
    }

    pub fn valid_count(&self) -> usize {
        match &self.validity {
            Some(mask) => mask.iter().filter(|&&v| v).count(),
            None => self.width * self.height,
        }
    }
}

/// Bilinear weights of a control grid of side `grid_side` spanning a raster of
/// side `raster_side`, evaluated at continuous pixel coordinates (pixel `i`
/// has its center at coordinate `i`).
///
/// Control point `(0, 0)` sits at the raster's top-left corner and
/// `(grid_side-1, grid_side-1)` at the bottom-right corner; a 1x1 grid is the
/// constant field. Returns the four (row-major) control indices with their
/// weights; degenerate axes repeat an index with the weight split.
pub(crate) fn grid_weights(
    grid_side: usize,
    px: f64,
    py: f64,
    raster_side: usize,
) -> ([usize; 4], [f64; 4]) {
    debug_assert!(grid_side >= 1 && raster_side >= 1);
    if grid_side == 1 {
        return ([0; 4], [1.0, 0.0, 0.0, 0.0]);
    }
    let axis = |p: f64| -> (usize, f64) {
        let t = (p + 0.5) / raster_side as f64 * (grid_side - 1) as f64;
        let t = t.clamp(0.0, (grid_side - 1) as f64);
        let mut i0 = t as usize;
        if i0 >= grid_side - 1 {
            i0 = grid_side - 2;
        }
        (i0, t - i0 as f64)
    };
    let (gx, fx) = axis(px);
    let (gy, fy) = axis(py);
    let idx = |x: usize, y: usize| y * grid_side + x;
    (
        [
            idx(gx, gy),
            idx(gx + 1, gy),
            idx(gx, gy + 1),
            idx(gx + 1, gy + 1),
        ],
        [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
    )
}

/// Evaluates a `grid_side x grid_side` grid of values bilinearly at continuous
/// pixel coordinates of a `raster_side`-sided raster.
pub(crate) fn grid_eval(values: &[f64], grid_side: usize, px: f64, py: f64, raster_side: usize) -> f64 {
    let (idx, w) = grid_weights(grid_side, px, py, raster_side);
    idx.iter().zip(w.iter()).map(|(&i, &wi)| values[i] * wi).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validity_lazily_materialized() {
        let mut r = Raster::new(4, 2, 1);
        assert!(r.validity().is_none());
        assert!(r.is_valid(3, 1));
        r.set_valid(3, 1, false);
        assert!(!r.is_valid(3, 1));
        assert!(r.is_valid(0, 0));
        assert_eq!(r.valid_count(), 7);
    }

    #[test]
    fn grid_eval_constant_for_single_point() {
        let v = [2.5];
        for &(px, py) in &[(0.0, 0.0), (31.0, 17.0), (-0.4, 63.4)] {
            assert_eq!(grid_eval(&v, 1, px, py, 64), 2.5);
        }
    }

    #[test]
    fn grid_eval_hits_corners() {
        // 2x2 grid over a 4-pixel raster: pixel centers sit strictly inside,
        // the corner control values are reached at the raster corners.
        let v = [1.0, 2.0, 3.0, 4.0];
        let eval = |px, py| grid_eval(&v, 2, px, py, 4);
        assert!((eval(-0.5, -0.5) - 1.0).abs() < 1e-15);
        assert!((eval(3.5, -0.5) - 2.0).abs() < 1e-15);
        assert!((eval(-0.5, 3.5) - 3.0).abs() < 1e-15);
        assert!((eval(3.5, 3.5) - 4.0).abs() < 1e-15);
        // center of the raster averages all four
        assert!((eval(1.5, 1.5) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn grid_weights_partition_unity() {
        for g in [1usize, 2, 3, 8] {
            for px in [-0.5, 0.0, 3.7, 63.49] {
                let (_, w) = grid_weights(g, px, px * 0.3, 64);
                let sum: f64 = w.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "g={g} px={px} sum={sum}");
            }
        }
    }
}
