// Scratch probe of corrupt-then-recover behavior at acceptance scale.

use std::time::Instant;

use nalgebra::Vector3;
use panofuse_core::{
    align::{optimize, AlignmentConfig, FuseConfig},
    synth::{
        analytic_face_depths, analytic_panorama, corrupt_faces, depth_rmse, CorruptionMode,
        CorruptionSpec, RmseGauge, SyntheticScene,
    },
    sphere::icosahedron_frames,
};

fn main() {
    let scene = SyntheticScene::BoxRoom {
        half_extents: Vector3::new(2.5, 2.0, 1.6),
        camera_offset: Vector3::new(0.3, -0.2, 0.1),
    };
    let frames = icosahedron_frames(80.0, 128).unwrap();
    let truth = analytic_face_depths(&scene, &frames).unwrap();
    let (_, gt_depth, _) = analytic_panorama(&scene, 512, 256).unwrap();
    let mean_depth = gt_depth.raster().data().iter().map(|&v| v as f64).sum::<f64>()
        / gt_depth.raster().data().len() as f64;

    for mode in [CorruptionMode::PerFaceConstant, CorruptionMode::SmoothField] {
        println!("=== mode {mode:?} ===");
        for seed in [0u64, 1, 2, 3, 4, 7] {
        let spec = CorruptionSpec {
            mode,
            s_range: (0.7, 1.4),
            o_range: (-0.2, 0.2),
            seed,
        };
        let (corrupted, _) = corrupt_faces(&truth, &spec).unwrap();

        for (ls, lg) in [(0.1, 2.0), (0.1, 5.0), (0.05, 2.0), (0.05, 5.0)] {
            let cfg = AlignmentConfig {
                lambda_cross: 1e-4,
                lambda_scale: ls,
                lambda_grid: lg,
                max_iters: 100,
                tol: 1e-10,
                ..AlignmentConfig::default()
            };
            let fuse = FuseConfig::default();
            let t0 = Instant::now();
            let res = optimize(&corrupted, &frames, 8, &cfg, &fuse).unwrap();
            let dt = t0.elapsed().as_secs_f64();

            let rmse_none = depth_rmse(&res.fused, &gt_depth, RmseGauge::None).unwrap();
            let rmse_gauge = depth_rmse(&res.fused, &gt_depth, RmseGauge::GlobalAffine).unwrap();
            let last = res.trace.last().unwrap();
            println!(
                "seed={seed} ls={ls:<4} lg={lg:<3}: iters={:>5} {dt:>6.2}s  E={:.3e} (data {:.3e})  rmse/mean: none={:.2}% gauge={:.3}%",
                res.trace.len() - 1,
                last.total,
                last.data,
                100.0 * rmse_none / mean_depth,
                100.0 * rmse_gauge / mean_depth,
            );
        }
        }
    }
}
