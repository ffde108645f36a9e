use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::Vector3;
use scalesplat::io::{self, ColmapModel};
use scalesplat::posegraph::Camera;
use scalesplat::splat::{render, GaussianPrimitive, ViewCamera, COV2D_DILATION};
use scalesplat::synth::trajectory_rmse;
use scalesplat::traj::load_trajectory;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_scalesplat"));
    c.env_remove("SCALESPLAT_THREADS");
    c
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, world: &str, seed: u64, extra: &[&str]) -> PathBuf {
    let out = dir.join(format!("{world}_{seed}"));
    let seed = seed.to_string();
    let mut args = vec!["synth", "--world", world, "--seed", &seed, "-o", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = run_in(dir, &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn rig_args(ds: &Path) -> Vec<String> {
    [
        ("--trajectory", "lidar.tum"),
        ("--extrinsic", "extrinsic.txt"),
        ("--camera-times", "camera_times.txt"),
    ]
    .iter()
    .flat_map(|(f, p)| [f.to_string(), ds.join(p).to_str().unwrap().to_string()])
    .collect()
}

fn run_owned(dir: &Path, args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run_in(dir, &refs)
}

fn refine(dir: &Path, ds: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["refine-poses".to_string()];
    args.extend(rig_args(ds));
    args.extend(["--colmap".into(), ds.join("sparse").to_str().unwrap().into()]);
    args.extend(["-o".into(), out.to_str().unwrap().into()]);
    args.extend(extra.iter().map(|s| s.to_string()));
    run_owned(dir, &args)
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn help_lists_config_keys_and_unknown_flags_fail() {
    let o = bin().arg("--help").output().unwrap();
    assert_eq!(code(&o), 0);
    let help = stdout(&o);
    for key in ["seed", "paths.trajectory", "solver.huber_delta_px", "loss.lambda_en", "loss.lambda_smooth", "train.learning_rates.mean", "init.neighbors"] {
        assert!(help.contains(key), "help is missing {key}");
    }
    let o = bin().args(["train", "--help"]).output().unwrap();
    assert!(stdout(&o).contains("constraints.prior_translation_weight"));

    let o = bin().args(["train", "--no-such-flag"]).output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--no-such-flag"));
}

#[test]
fn interpolate_recovers_ground_truth_at_zero_noise() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), "circle_room", 2, &["--zero-noise", "--no-images"]);
    let out = dir.path().join("priors.tum");
    let mut args = vec!["interpolate".to_string()];
    args.extend(rig_args(&ds));
    args.extend(["-o".into(), out.to_str().unwrap().into()]);
    let o = run_owned(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let priors = load_trajectory(&out).unwrap();
    let gt = load_trajectory(&ds.join("gt/poses.tum")).unwrap();
    assert_eq!(priors.len(), gt.len());
    for (a, b) in priors.samples().iter().zip(gt.samples()) {
        assert_eq!(a.timestamp, b.timestamp);
        assert!((a.translation - b.translation).norm() < 1e-9);
        assert!(a.rotation.angle_to(&b.rotation) < 1e-9);
    }
}

#[test]
fn missing_trajectory_is_an_input_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), "circle_room", 0, &["--no-images"]);
    let missing = dir.path().join("absent.tum");
    let o = run_in(
        dir.path(),
        &[
            "interpolate",
            "--trajectory",
            missing.to_str().unwrap(),
            "--extrinsic",
            ds.join("extrinsic.txt").to_str().unwrap(),
            "--camera-times",
            ds.join("camera_times.txt").to_str().unwrap(),
            "-o",
            "x.tum",
        ],
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains(missing.to_str().unwrap()));
    assert!(!dir.path().join("x.tum").exists());
}

#[test]
fn refine_poses_on_exact_inputs_returns_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), "circle_room", 3, &["--zero-noise", "--no-images"]);
    let out = dir.path().join("refined");
    let o = refine(dir.path(), &ds, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let est = load_trajectory(&out.join("poses.tum")).unwrap();
    let gt = load_trajectory(&ds.join("gt/poses.tum")).unwrap();
    assert!(trajectory_rmse(est.samples(), gt.samples()) < 1e-6);
    ColmapModel::read(&out.join("sparse")).unwrap();
}

#[test]
fn refine_poses_reports_monotone_costs_and_flags_non_convergence() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), "circle_room", 4, &["--no-images"]);

    let out = dir.path().join("full");
    let o = refine(dir.path(), &ds, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["converged"], true);
    let hist = report["history"].as_array().unwrap();
    assert!(!hist.is_empty());
    let mut last: Option<(u64, f64)> = None;
    for rec in hist {
        let cost = &rec["cost"];
        for term in ["prior", "relative", "reprojection", "total"] {
            assert!(cost[term].is_f64(), "missing {term}");
        }
        let round = rec["round"].as_u64().unwrap();
        let total = cost["total"].as_f64().unwrap();
        if let Some((r, prev)) = last {
            if r == round {
                assert!(total <= prev, "cost rose within round {round}: {prev} -> {total}");
            }
        }
        last = Some((round, total));
    }

    let out = dir.path().join("capped");
    let o = refine(dir.path(), &ds, &out, &["--max-iterations", "1"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(out.join("poses.tum").exists());
    assert!(out.join("sparse/images.txt").exists());
    assert_eq!(read_json(&out.join("report.json"))["termination"], "max_iterations");

    let again = dir.path().join("capped_again");
    let o = refine(dir.path(), &ds, &again, &["--max-iterations", "1"]);
    assert_eq!(code(&o), 3);
    for f in ["poses.tum", "report.json", "sparse/points3D.txt"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

fn train_args(ds: &Path, out: &Path, extra: &[&str]) -> Vec<String> {
    let mut args: Vec<String> = vec![
        "train".into(),
        "--colmap".into(),
        ds.join("sparse").to_str().unwrap().into(),
        "--images".into(),
        ds.join("images").to_str().unwrap().into(),
        "--normals".into(),
        ds.join("normals").to_str().unwrap().into(),
        "-o".into(),
        out.to_str().unwrap().into(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    args
}

#[test]
fn train_reaches_target_psnr_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), "planar_board", 0, &[]);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run_owned(dir.path(), &train_args(&ds, out, &["--iterations", "2000", "--snapshot-every", "1000"]));
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("test PSNR"));
    }
    let summary = read_json(&a.join("summary.json"));
    let psnr = summary["test_psnr"].as_f64().unwrap();
    assert!(psnr >= 25.0, "held-out PSNR {psnr}");
    for f in ["metrics.jsonl", "scene.ply", "summary.json", "snapshots/iter_001000.ply", "snapshots/iter_002000.ply"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

fn step_lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["type"] == "step")
        .collect()
}

#[test]
fn ablation_flags_switch_off_their_terms() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), "planar_board", 1, &[]);
    for (flags, zero, live) in [
        (vec![], vec![], vec!["scale", "normal", "smooth"]),
        (vec!["--no-normal"], vec!["scale", "normal", "smooth"], vec![]),
        (vec!["--no-shape"], vec!["erank"], vec!["scale", "normal", "smooth"]),
        (vec!["--no-normal", "--no-shape"], vec!["scale", "normal", "smooth", "erank"], vec![]),
    ] {
        let out = dir.path().join(flags.join("_"));
        let mut extra = vec!["--iterations", "20"];
        extra.extend(flags.iter());
        let o = run_owned(dir.path(), &train_args(&ds, &out, &extra));
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let steps = step_lines(&out.join("metrics.jsonl"));
        assert_eq!(steps.len(), 20);
        // `smooth` is logged unweighted; its weighted share is what remains of the total
        let term = |s: &serde_json::Value, t: &str| -> f64 {
            let f = |k: &str| s[k].as_f64().unwrap();
            match t {
                "smooth" => f("total") - f("img") - f("erank") - f("scale") - f("normal"),
                _ => f(t),
            }
        };
        for s in &steps {
            for t in &zero {
                assert!(term(s, t).abs() < 1e-12, "{flags:?} {t}");
            }
        }
        for t in &live {
            assert!(steps.iter().any(|s| term(s, t) > 1e-9), "{flags:?} {t}");
        }
    }
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), "planar_board", 2, &[]);
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            "seed = 5\n[paths]\ncolmap = \"{0}/sparse\"\nimages = \"{0}/images\"\nnormals = \"{0}/normals\"\noutput = \"out\"\n[train]\niterations = 7\n",
            ds.file_name().unwrap().to_str().unwrap()
        ),
    )
    .unwrap();
    let o = run_in(dir.path(), &["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(step_lines(&dir.path().join("out/metrics.jsonl")).len(), 7);

    let o = run_in(dir.path(), &["--config", cfg.to_str().unwrap(), "train", "--iterations", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(step_lines(&dir.path().join("out/metrics.jsonl")).len(), 3);

    fs::write(&cfg, "[train]\niteratons = 7\n").unwrap();
    let o = run_in(dir.path(), &["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("iteratons"));
}

fn render_explicit(dir: &Path, scene: &Path, out: &Path, cam: [f64; 6], pose: [f64; 7]) -> Output {
    let mut args: Vec<String> = vec!["render".into(), "--scene".into(), scene.to_str().unwrap().into(), "--camera".into()];
    args.extend(cam.iter().map(|v| v.to_string()));
    args.push("--pose".into());
    args.extend(pose.iter().map(|v| v.to_string()));
    args.extend(["-o".into(), out.to_str().unwrap().into()]);
    run_owned(dir, &args)
}

#[test]
fn render_single_primitive_matches_the_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let (f, s, z, o) = (20.0, 0.1, 2.0, 0.6);
    let scene = dir.path().join("one.ply");
    // values exactly representable in float32
    io::write_ply(&scene, &[GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, z), s, o, [0.5, 0.5, 0.5])]).unwrap();
    let out = dir.path().join("r");
    let res = render_explicit(dir.path(), &scene, &out, [f, f, 8.5, 8.5, 17.0, 17.0], [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let alpha = io::read_pfm(&out.join("alpha.pfm")).unwrap();
    let opacity = io::read_ply(&scene).unwrap()[0].opacity();
    assert!((alpha.get(8, 8, 0) - opacity).abs() < 1e-6);
    let var = (f * s / z).powi(2) + COV2D_DILATION;
    let expect = opacity * (-0.5 / var).exp();
    assert!((alpha.get(9, 8, 0) - expect).abs() < 1e-6);
    assert!((alpha.get(8, 9, 0) - expect).abs() < 1e-6);
}

#[test]
fn render_empty_scene_gives_zero_buffers() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("empty.ply");
    io::write_ply(&scene, &[]).unwrap();
    let out = dir.path().join("r");
    let res = render_explicit(dir.path(), &scene, &out, [30.0, 30.0, 16.0, 12.0, 32.0, 24.0], [0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    for f in ["color.pfm", "normal.pfm", "alpha.pfm"] {
        let img = io::read_pfm(&out.join(f)).unwrap();
        assert_eq!((img.width, img.height), (32, 24));
        assert!(img.data.iter().all(|v| *v == 0.0), "{f}");
    }
}

#[test]
fn render_matches_the_library_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), "planar_board", 3, &[]);
    let scene_path = ds.join("gt/scene.ply");
    let out = dir.path().join("r");
    let o = run_in(
        dir.path(),
        &[
            "render",
            "--scene",
            scene_path.to_str().unwrap(),
            "--colmap",
            ds.join("sparse").to_str().unwrap(),
            "--image",
            "cam_005.png",
            "-o",
            out.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let model = ColmapModel::read(&ds.join("sparse")).unwrap();
    let img = model.images.iter().find(|i| i.name == "cam_005.png").unwrap();
    let view = ViewCamera::new(model.cameras[&img.camera_id].camera, img.world_to_camera).unwrap();
    let b = render(&io::read_ply(&scene_path).unwrap(), &view);
    for (f, expect) in [("color.pfm", &b.color), ("normal.pfm", &b.normal), ("alpha.pfm", &b.alpha)] {
        let got = io::read_pfm(&out.join(f)).unwrap();
        let want: Vec<f64> = expect.data.iter().map(|v| *v as f32 as f64).collect();
        assert_eq!(got.data, want, "{f}");
    }
    assert!(b.alpha.data.iter().any(|a| *a > 0.5));

    // explicit pose and intrinsics agree with the model image
    let pose = img.pose();
    let [w, x, y, z] = pose.rotation.wxyz();
    let t = pose.translation;
    let c: Camera = view.camera;
    let out2 = dir.path().join("r2");
    let o = render_explicit(
        dir.path(),
        &scene_path,
        &out2,
        [c.fx, c.fy, c.cx, c.cy, c.width as f64, c.height as f64],
        [t.x, t.y, t.z, x, y, z, w],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let a = io::read_pfm(&out.join("color.pfm")).unwrap();
    let bb = io::read_pfm(&out2.join("color.pfm")).unwrap();
    let max = a.data.iter().zip(&bb.data).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(max < 1e-5, "{max}");

    let o = run_in(dir.path(), &["render", "--scene", scene_path.to_str().unwrap(), "-o", "x"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn check_gradients_passes_and_detects_a_corrupted_block() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("grad.json");
    let o = run_in(dir.path(), &["check-gradients", "--report", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let rows = read_json(&report);
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), scalesplat::gradcheck::BLOCKS.len());
    for r in rows {
        assert!(r["error"].as_f64().unwrap() < r["tolerance"].as_f64().unwrap());
        assert_eq!(r["passed"], true);
    }

    let o = run_in(dir.path(), &["check-gradients", "--samples", "10", "--scenes", "1", "--corrupt", "prior.translation"]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("prior.translation"));
    assert!(stdout(&o).lines().any(|l| l.starts_with("prior.translation") && l.ends_with("FAIL")));
    assert!(!stdout(&o).lines().any(|l| l.starts_with("prior.rotation") && l.ends_with("FAIL")));

    let o = run_in(dir.path(), &["check-gradients", "--corrupt", "nonsense"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn synth_is_idempotent_and_rejects_unknown_worlds() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "corridor", 9, &[]);
    let snapshot = |d: &Path| -> Vec<(PathBuf, Vec<u8>)> {
        let mut v: Vec<_> = walk(d).into_iter().map(|p| (p.strip_prefix(d).unwrap().to_path_buf(), fs::read(&p).unwrap())).collect();
        v.sort();
        v
    };
    let first = snapshot(&a);
    synth(dir.path(), "corridor", 9, &[]);
    assert_eq!(first, snapshot(&a));
    assert!(first.iter().any(|(p, _)| p.starts_with("images")));

    let o = run_in(dir.path(), &["synth", "--world", "atrium", "-o", "x"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("atrium"));
    let o = run_in(dir.path(), &["synth", "--world", "corridor", "--sigma-pixel", "-1", "-o", "x"]);
    assert_eq!(code(&o), 2);
}

fn walk(d: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(d).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn thread_count_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .current_dir(dir.path())
        .env("SCALESPLAT_THREADS", "2")
        .args(["check-gradients", "--samples", "5", "--scenes", "1"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = bin()
        .current_dir(dir.path())
        .env("SCALESPLAT_THREADS", "many")
        .args(["check-gradients"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("SCALESPLAT_THREADS"));
}
