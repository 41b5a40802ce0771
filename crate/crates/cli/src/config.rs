//! Pipeline configuration: defaults, `key = value` config files, and CLI
//! overrides. The effective config is echoed into every JSON report.

use serde::Serialize;
use std::fs;
use std::path::Path;

use panofuse_core::align::{AlignmentConfig, FuseConfig};
use panofuse_core::loss::LossConfig;

use crate::CliError;

/// Every tunable of the pipeline. Field order is the JSON key order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub fov_deg: f64,
    pub face_resolution: usize,
    pub pano_width: usize,
    pub grid_side: usize,
    pub fuse_power: f64,
    pub seed: u64,
    pub lambda_cross: f64,
    pub lambda_scale: f64,
    pub lambda_mag: f64,
    pub lambda_grid: f64,
    pub max_iters: usize,
    pub step_init: f64,
    pub huber_eps: f64,
    pub tol: f64,
    pub lambda_pho: f64,
    pub lambda_geo: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let align = AlignmentConfig::default();
        let loss = LossConfig::default();
        let fuse = FuseConfig::default();
        Self {
            fov_deg: 80.0,
            face_resolution: 128,
            pano_width: fuse.pano_width,
            grid_side: 8,
            fuse_power: fuse.power,
            seed: 0,
            lambda_cross: align.lambda_cross,
            lambda_scale: align.lambda_scale,
            lambda_mag: align.lambda_mag,
            lambda_grid: align.lambda_grid,
            max_iters: align.max_iters,
            step_init: align.step_init,
            huber_eps: align.huber_eps,
            tol: align.tol,
            lambda_pho: loss.lambda_pho,
            lambda_geo: loss.lambda_geo,
            ssim_window: loss.ssim_window,
            ssim_sigma: loss.ssim_sigma,
            ssim_c1: loss.ssim_c1,
            ssim_c2: loss.ssim_c2,
        }
    }
}

impl PipelineConfig {
    /// Applies one `key = value` assignment; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
            value.trim().parse().map_err(|_| {
                CliError::input(format!("bad value '{value}' for config key '{key}'"))
            })
        }
        match key {
            "fov_deg" => self.fov_deg = parse(key, value)?,
            "face_resolution" => self.face_resolution = parse(key, value)?,
            "pano_width" => self.pano_width = parse(key, value)?,
            "grid_side" => self.grid_side = parse(key, value)?,
            "fuse_power" => self.fuse_power = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "lambda_cross" => self.lambda_cross = parse(key, value)?,
            "lambda_scale" => self.lambda_scale = parse(key, value)?,
            "lambda_mag" => self.lambda_mag = parse(key, value)?,
            "lambda_grid" => self.lambda_grid = parse(key, value)?,
            "max_iters" => self.max_iters = parse(key, value)?,
            "step_init" => self.step_init = parse(key, value)?,
            "huber_eps" => self.huber_eps = parse(key, value)?,
            "tol" => self.tol = parse(key, value)?,
            "lambda_pho" => self.lambda_pho = parse(key, value)?,
            "lambda_geo" => self.lambda_geo = parse(key, value)?,
            "ssim_window" => self.ssim_window = parse(key, value)?,
            "ssim_sigma" => self.ssim_sigma = parse(key, value)?,
            "ssim_c1" => self.ssim_c1 = parse(key, value)?,
            "ssim_c2" => self.ssim_c2 = parse(key, value)?,
            _ => return Err(CliError::input(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Loads a line-oriented `key = value` file over the defaults. Blank
    /// lines and `#` comments are skipped.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::input(format!(
                    "{}:{}: expected 'key = value', got '{line}'",
                    path.display(),
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.pano_width % 2 != 0 || self.pano_width == 0 {
            return Err(CliError::input("pano_width must be a positive even number"));
        }
        self.alignment()
            .validate()
            .map_err(|e| CliError::input(e.to_string()))?;
        self.loss()
            .validate()
            .map_err(|e| CliError::input(e.to_string()))?;
        Ok(())
    }

    pub fn alignment(&self) -> AlignmentConfig {
        AlignmentConfig {
            lambda_cross: self.lambda_cross,
            lambda_scale: self.lambda_scale,
            lambda_mag: self.lambda_mag,
            lambda_grid: self.lambda_grid,
            max_iters: self.max_iters,
            step_init: self.step_init,
            huber_eps: self.huber_eps,
            tol: self.tol,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda_pho: self.lambda_pho,
            lambda_geo: self.lambda_geo,
            ssim_window: self.ssim_window,
            ssim_sigma: self.ssim_sigma,
            ssim_c1: self.ssim_c1,
            ssim_c2: self.ssim_c2,
        }
    }

    pub fn fuse(&self) -> FuseConfig {
        FuseConfig {
            pano_width: self.pano_width,
            pano_height: self.pano_width / 2,
            power: self.fuse_power,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = PipelineConfig::default();
        assert!(cfg.set("fov_deg", "70").is_ok());
        assert_eq!(cfg.fov_deg, 70.0);
        assert!(cfg.set("not_a_key", "1").is_err());
        assert!(cfg.set("fov_deg", "abc").is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.txt");
        std::fs::write(&path, "# comment\nfov_deg = 75\n\nseed=3\nlambda_geo = 0.1\n").unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.fov_deg, 75.0);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.lambda_geo, 0.1);
        assert_eq!(cfg.face_resolution, PipelineConfig::default().face_resolution);

        std::fs::write(&path, "bogus_key = 1\n").unwrap();
        assert!(PipelineConfig::load(&path).is_err());
    }
}
