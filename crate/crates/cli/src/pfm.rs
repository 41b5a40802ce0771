//! Portable FloatMap IO.
//!
//! `Pf` is single-channel, `PF` three-channel. The scale line's sign encodes
//! endianness (negative = little-endian, the form this tool writes) and rows
//! are stored bottom-to-top per the de-facto standard.

use std::fs;
use std::path::Path;

use panofuse_core::raster::Raster;

use crate::CliError;

/// Writes a raster (1 or 3 channels) as PFM. Invalid pixels are stored as 0.
pub fn write_pfm(path: &Path, raster: &Raster) -> Result<(), CliError> {
    let magic = match raster.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(CliError::input(format!("PFM supports 1 or 3 channels, got {c}"))),
    };
    let (w, h, c) = (raster.width(), raster.height(), raster.channels());
    let mut bytes = Vec::with_capacity(64 + w * h * c * 4);
    bytes.extend_from_slice(format!("{magic}\n{w} {h}\n-1.0\n").as_bytes());
    for y in (0..h).rev() {
        for x in 0..w {
            let px = raster.pixel(x, y);
            for k in 0..c {
                let v = if raster.is_valid(x, y) { px[k] } else { 0.0 };
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, bytes)
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

/// Reads a PFM file. When `depth_validity` is set, non-finite and
/// non-positive samples are marked invalid (the convention for depth maps;
/// normals keep every pixel).
pub fn read_pfm(path: &Path, depth_validity: bool) -> Result<Raster, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    parse_pfm(&bytes, depth_validity)
        .map_err(|msg| CliError::input(format!("{}: {msg}", path.display())))
}

fn parse_pfm(bytes: &[u8], depth_validity: bool) -> Result<Raster, String> {
    // header: three whitespace-separated tokens after the magic
    let mut pos = 0usize;
    let mut token = || -> Result<String, String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        let tok = std::str::from_utf8(&bytes[start..pos]).map_err(|_| "binary garbage in header")?;
        // consume exactly one whitespace byte after the token
        if pos < bytes.len() {
            pos += 1;
        }
        Ok(tok.to_string())
    };

    let magic = token()?;
    let channels = match magic.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(format!("bad PFM magic '{other}'")),
    };
    let w: usize = token()?.parse().map_err(|_| "bad width")?;
    let h: usize = token()?.parse().map_err(|_| "bad height")?;
    let scale: f64 = token()?.parse().map_err(|_| "bad scale")?;
    if w == 0 || h == 0 {
        return Err("zero dimensions".into());
    }
    let little_endian = scale < 0.0;

    let need = w * h * channels * 4;
    let body = &bytes[pos..];
    if body.len() < need {
        return Err(format!("body holds {} bytes, expected {need}", body.len()));
    }

    let mut raster = Raster::new(w, h, channels);
    let mut at = 0usize;
    for y in (0..h).rev() {
        for x in 0..w {
            for k in 0..channels {
                let b: [u8; 4] = body[at..at + 4].try_into().unwrap();
                let v = if little_endian {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                };
                raster.pixel_mut(x, y)[k] = v;
                at += 4;
            }
            if depth_validity {
                let v = raster.pixel(x, y)[0];
                if !(v > 0.0) || !v.is_finite() {
                    raster.set_valid(x, y, false);
                }
            }
        }
    }
    Ok(raster)
}
