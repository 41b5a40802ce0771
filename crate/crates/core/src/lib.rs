//! Geometric and numerical core for panoramic RGB-D scene bootstrapping:
//! icosahedral tangent-plane projection of equirectangular panoramas,
//! affine-field alignment of per-face depth maps into one panoramic depth
//! map, photometric and geometry-aware losses, and point-cloud export with
//! virtual camera trajectories. A synthetic-scene module provides analytic
//! ground truth so every numerical claim is testable offline.
//!
//! The crate is `no_std` (with `alloc`); file formats and the CLI live in the
//! companion `panofuse` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub use nalgebra;

pub mod align;
pub mod cloud;
pub mod loss;
pub mod raster;
pub mod sphere;
pub mod synth;

pub use align::{
    apply_affine, data_energy, fuse_faces, optimize, reg_energy, total_energy,
    total_energy_gradient, AffineField, AlignmentConfig, AlignmentResult, EnergyBreakdown,
    FaceDepth, FuseConfig,
};
pub use cloud::{
    camera_trajectory, read_ply, render_points, unproject_panorama, write_ply, CameraPose,
    CloudPoint, PointCloud, TrajectoryKind,
};
pub use loss::{
    gaussian_loss, geo_loss, l1_loss, normals_from_depth, photometric_loss, ssim, LossConfig,
    LossValues, NormalMap,
};
pub use raster::Raster;
pub use sphere::{
    face_overlaps, gnomonic_project, gnomonic_unproject, icosahedron_frames, overlap_mask,
    project_to_faces, sample_equirect, EquirectImage, OverlapMask, PerspectiveView,
    SphericalCoord, TangentFrame, FACE_COUNT,
};
pub use synth::{
    analytic_panorama, corrupt_faces, depth_rmse, psnr, AppliedCorruption, CorruptionMode,
    CorruptionSpec, RmseGauge, SyntheticScene,
};
