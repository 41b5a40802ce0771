//! End-to-end checks of the CLI: exit codes, report invariants, and
//! byte-level determinism of re-runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_panofuse")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("failed to spawn panofuse")
}

fn run_ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Small, fast settings shared by the pipeline tests.
const SMALL: &[&str] = &[
    "--pano-width",
    "128",
    "--face-resolution",
    "32",
    "--grid-side",
    "4",
    "--max-iters",
    "40",
];

fn collect_files(dir: &Path) -> Vec<PathBuf> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path);
            }
        }
    }
    files.sort();
    files
}

fn assert_dirs_identical(a: &Path, b: &Path) {
    let fa = collect_files(a);
    let fb = collect_files(b);
    let rel = |f: &PathBuf, root: &Path| f.strip_prefix(root).unwrap().to_path_buf();
    assert_eq!(
        fa.iter().map(|f| rel(f, a)).collect::<Vec<_>>(),
        fb.iter().map(|f| rel(f, b)).collect::<Vec<_>>(),
        "directory listings differ"
    );
    for (pa, pb) in fa.iter().zip(fb.iter()) {
        let ba = fs::read(pa).unwrap();
        let bb = fs::read(pb).unwrap();
        assert_eq!(ba, bb, "bytes differ for {}", rel(pa, a).display());
    }
}

fn pipeline(root: &Path) {
    let synth = root.join("synth");
    run_ok(
        &[
            &[
                "synth",
                "--scene",
                "box",
                "--corrupt",
                "per_face_constant",
                "--seed",
                "11",
                "--out",
                synth.to_str().unwrap(),
            ],
            SMALL,
        ]
        .concat(),
    );
    let aligned = root.join("aligned");
    run_ok(
        &[
            &[
                "align",
                "--faces",
                synth.join("faces").to_str().unwrap(),
                "--out",
                aligned.to_str().unwrap(),
            ],
            SMALL,
        ]
        .concat(),
    );
    let scene = root.join("scene");
    run_ok(
        &[
            &[
                "export",
                "--pano",
                synth.join("pano.png").to_str().unwrap(),
                "--depth",
                aligned.join("fused.pfm").to_str().unwrap(),
                "--stride",
                "2",
                "--out",
                scene.to_str().unwrap(),
            ],
            SMALL,
        ]
        .concat(),
    );
    let renders = root.join("renders");
    run_ok(
        &[
            &[
                "render",
                "--cloud",
                scene.join("scene.ply").to_str().unwrap(),
                "--kind",
                "spiral",
                "--frames",
                "3",
                "--radius",
                "0.4",
                "--resolution",
                "48",
                "--out",
                renders.to_str().unwrap(),
            ],
            SMALL,
        ]
        .concat(),
    );
    let proj = root.join("proj");
    run_ok(
        &[
            &[
                "project",
                "--pano",
                synth.join("pano.png").to_str().unwrap(),
                "--out",
                proj.to_str().unwrap(),
            ],
            SMALL,
        ]
        .concat(),
    );
    let lossdir = root.join("losses");
    run_ok(
        &[
            &[
                "losses",
                "--render",
                renders.join("pose_000.png").to_str().unwrap(),
                "--gt",
                renders.join("pose_001.png").to_str().unwrap(),
                "--out",
                lossdir.to_str().unwrap(),
            ],
            SMALL,
        ]
        .concat(),
    );
}

#[test]
fn full_pipeline_reruns_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    pipeline(&a);
    pipeline(&b);
    assert_dirs_identical(&a, &b);
}

#[test]
fn missing_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cases: Vec<Vec<&str>> = vec![
        vec!["project", "--pano", "/nonexistent/p.png", "--out", out.to_str().unwrap()],
        vec!["align", "--faces", "/nonexistent", "--out", out.to_str().unwrap()],
        vec![
            "losses",
            "--render",
            "/nonexistent/a.png",
            "--gt",
            "/nonexistent/b.png",
            "--out",
            out.to_str().unwrap(),
        ],
        vec![
            "export",
            "--pano",
            "/nonexistent/p.png",
            "--depth",
            "/nonexistent/d.pfm",
            "--out",
            out.to_str().unwrap(),
        ],
        vec![
            "render",
            "--cloud",
            "/nonexistent/c.ply",
            "--out",
            out.to_str().unwrap(),
        ],
    ];
    for args in cases {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(2), "args {args:?}");
    }
}

#[test]
fn bad_parameters_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("s");
    run_ok(
        &[
            &["synth", "--scene", "sphere", "--out", synth.to_str().unwrap()],
            SMALL,
        ]
        .concat(),
    );

    // unknown trajectory kind
    let out = run(&[
        "render",
        "--cloud",
        synth.join("pano.png").to_str().unwrap(),
        "--kind",
        "zigzag",
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // unknown config key in a config file
    let cfg = dir.path().join("cfg.txt");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = run(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // camera outside the box
    let out = run(&[
        "synth",
        "--scene",
        "box",
        "--camera-offset",
        "9,0,0",
        "--out",
        dir.path().join("y").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn trace_report_is_monotone_and_carries_config() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("s");
    run_ok(
        &[
            &[
                "synth",
                "--scene",
                "box",
                "--corrupt",
                "smooth_field",
                "--out",
                synth.to_str().unwrap(),
            ],
            SMALL,
        ]
        .concat(),
    );
    let aligned = dir.path().join("a");
    run_ok(
        &[
            &[
                "align",
                "--faces",
                synth.join("faces").to_str().unwrap(),
                "--out",
                aligned.to_str().unwrap(),
            ],
            SMALL,
        ]
        .concat(),
    );

    let text = fs::read_to_string(aligned.join("trace.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(json["config"]["face_resolution"], 32);
    assert_eq!(json["config"]["grid_side"], 4);
    let trace = json["trace"].as_array().unwrap();
    assert!(trace.len() >= 2, "trace should record iterations");
    let mut prev = f64::INFINITY;
    for rec in trace {
        let total = rec["total"].as_f64().unwrap();
        let parts = rec["data"].as_f64().unwrap()
            + json["config"]["lambda_cross"].as_f64().unwrap() * rec["cross"].as_f64().unwrap()
            + json["config"]["lambda_scale"].as_f64().unwrap() * rec["scale"].as_f64().unwrap()
            + json["config"]["lambda_mag"].as_f64().unwrap() * rec["magnitude"].as_f64().unwrap()
            + json["config"]["lambda_grid"].as_f64().unwrap() * rec["grid"].as_f64().unwrap();
        assert!((total - parts).abs() <= 1e-9 * total.abs().max(1.0));
        assert!(total <= prev + 1e-12, "trace must be non-increasing");
        prev = total;
    }

    // corruption report exists and is invertible metadata
    let corr: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(synth.join("corruption.json")).unwrap()).unwrap();
    assert_eq!(corr["faces"].as_array().unwrap().len(), 20);
    assert_eq!(corr["mode"], "smooth_field");
}

#[test]
fn losses_identities_hold_in_reports() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("s");
    run_ok(
        &[
            &["synth", "--scene", "box", "--out", synth.to_str().unwrap()],
            SMALL,
        ]
        .concat(),
    );
    let pano = synth.join("pano.png");

    // identical inputs: all photometric losses vanish
    let same = dir.path().join("same");
    run_ok(&[
        "losses",
        "--render",
        pano.to_str().unwrap(),
        "--gt",
        pano.to_str().unwrap(),
        "--out",
        same.to_str().unwrap(),
    ]);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(same.join("losses.json")).unwrap()).unwrap();
    assert_eq!(json["losses"]["l1"].as_f64().unwrap(), 0.0);
    assert!(json["losses"]["l_pho"].as_f64().unwrap() < 1e-9);
    assert!(json["losses"]["l_gaussian"].as_f64().unwrap() < 1e-9);

    // lambda_geo = 0 forces l_gaussian == l_pho even with geometry present
    let geo0 = dir.path().join("geo0");
    run_ok(&[
        "losses",
        "--render",
        pano.to_str().unwrap(),
        "--gt",
        pano.to_str().unwrap(),
        "--depth",
        synth.join("depth.pfm").to_str().unwrap(),
        "--normals",
        synth.join("normals.pfm").to_str().unwrap(),
        "--lambda-geo",
        "0",
        "--out",
        geo0.to_str().unwrap(),
    ]);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(geo0.join("losses.json")).unwrap()).unwrap();
    assert_eq!(
        json["losses"]["l_gaussian"].as_f64().unwrap(),
        json["losses"]["l_pho"].as_f64().unwrap()
    );
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.txt");
    fs::write(
        &cfg,
        "fov_deg = 70\npano_width = 128\nface_resolution = 32\ngrid_side = 4\nmax_iters = 5\n",
    )
    .unwrap();
    let synth = dir.path().join("s");
    run_ok(&[
        "synth",
        "--scene",
        "sphere",
        "--config",
        cfg.to_str().unwrap(),
        "--fov-deg",
        "80",
        "--out",
        synth.to_str().unwrap(),
    ]);
    let aligned = dir.path().join("a");
    run_ok(&[
        "align",
        "--faces",
        synth.join("faces").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--fov-deg",
        "80",
        "--out",
        aligned.to_str().unwrap(),
    ]);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(aligned.join("trace.json")).unwrap()).unwrap();
    assert_eq!(json["config"]["fov_deg"].as_f64().unwrap(), 80.0);
    assert_eq!(json["config"]["pano_width"], 128);
}

#[test]
fn coverage_fractions_lie_in_unit_interval() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("s");
    run_ok(
        &[
            &["synth", "--scene", "sphere", "--out", synth.to_str().unwrap()],
            SMALL,
        ]
        .concat(),
    );
    let scene = dir.path().join("scene");
    run_ok(&[
        "export",
        "--pano",
        synth.join("pano.png").to_str().unwrap(),
        "--depth",
        synth.join("depth.pfm").to_str().unwrap(),
        "--stride",
        "2",
        "--out",
        scene.to_str().unwrap(),
    ]);
    let renders = dir.path().join("r");
    run_ok(&[
        "render",
        "--cloud",
        scene.join("scene.ply").to_str().unwrap(),
        "--kind",
        "lemniscate",
        "--frames",
        "4",
        "--radius",
        "0.5",
        "--resolution",
        "40",
        "--splat",
        "2",
        "--out",
        renders.to_str().unwrap(),
    ]);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(renders.join("coverage.json")).unwrap()).unwrap();
    let cov = json["coverage"].as_array().unwrap();
    assert_eq!(cov.len(), 4);
    for (i, rec) in cov.iter().enumerate() {
        assert_eq!(rec["pose_index"].as_u64().unwrap() as usize, i);
        let f = rec["covered_fraction"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&f), "fraction {f}");
        // a camera inside a sphere-room cloud must see something
        assert!(f > 0.0);
    }
    for i in 0..4 {
        assert!(renders.join(format!("pose_{i:03}.png")).exists());
    }
}
