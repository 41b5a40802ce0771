//! 8-bit PNG IO mapped to unit-range float rasters.

use std::path::Path;

use image::ImageReader;
use panofuse_core::raster::Raster;

use crate::CliError;

/// Reads an 8-bit PNG into a 3-channel raster with values in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Raster, CliError> {
    let img = ImageReader::open(path)
        .map_err(|e| CliError::input(format!("cannot open {}: {e}", path.display())))?
        .decode()
        .map_err(|e| CliError::input(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut raster = Raster::new(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            let out = raster.pixel_mut(x, y);
            for k in 0..3 {
                out[k] = p[k] as f32 / 255.0;
            }
        }
    }
    Ok(raster)
}

/// Writes a 1- or 3-channel unit-range raster as an 8-bit PNG; invalid
/// pixels come out black.
pub fn write_png(path: &Path, raster: &Raster) -> Result<(), CliError> {
    let (w, h) = (raster.width(), raster.height());
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut rgb = [0u8; 3];
            if raster.is_valid(x, y) {
                let px = raster.pixel(x, y);
                for (k, v) in rgb.iter_mut().enumerate() {
                    let s = px[k.min(raster.channels() - 1)];
                    *v = (s.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(rgb));
        }
    }
    img.save(path)
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}
