use std::fs;
use std::path::Path;
use std::process::Command;

fn rotlight(args: &[&str]) -> (i32, String, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_rotlight")).args(args).env("RUST_LOG", "warn").output().unwrap();
    (o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stdout).into(), String::from_utf8_lossy(&o.stderr).into())
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_2() {
    let (code, _, err) = rotlight(&["frobnicate"]);
    assert_eq!(code, 2);
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn help_succeeds_and_lists_subcommands() {
    let (code, out, _) = rotlight(&["--help"]);
    assert_eq!(code, 0);
    for s in ["gen", "stage1", "extract-mesh", "pretrain-cache", "stage2", "render", "relight", "ao", "metrics"] {
        assert!(out.contains(s), "{s} missing from help");
    }
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"no_such_key": 1}"#).unwrap();
    let (code, _, err) = rotlight(&["stage2", "--data", "x", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    let (code, _, _) = rotlight(&["stage2", "--data", "x", "--lights", ""]);
    assert_eq!(code, 2);
}

const GEN: &str = r#"{"scene": "sphere-plane", "angles_deg": [0, 180], "views_per_angle": 4, "n_test": 2,
  "width": 12, "height": 12, "path": {"spp": 4}, "gt_ao_samples": 8}"#;

const RUN: &str = r#"{"known_geometry": true, "seed_options": {"spacing": 0.15},
  "stage1": {"steps": 2},
  "cache": {"hidden": 8, "grid": {"levels": 2, "table_size": 64, "features": 2, "base_resolution": 2, "growth": 2.0}},
  "pretrain": {"steps": 5, "batch": 32},
  "stage2": {"steps": 3, "pixels_per_step": 16, "residual_samples": 8, "shade": {"n_samples": 2}, "env_height": 4},
  "relight": {"shade": {"n_samples": 2}, "bounce_samples": 2},
  "eval": {"ao_samples": 4}}"#;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_decompose_render_and_score_with_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (gen_cfg, run_cfg) = (dir.path().join("gen.json"), dir.path().join("run.json"));
    fs::write(&gen_cfg, GEN).unwrap();
    fs::write(&run_cfg, RUN).unwrap();
    let data = dir.path().join("data");
    let (code, _, err) = rotlight(&["gen", "--config", s(&gen_cfg), "--out", s(&data)]);
    assert_eq!(code, 0, "{err}");

    let mut csv = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let (code, stdout, err) =
            rotlight(&["stage2", "--config", s(&run_cfg), "--data", s(&data), "--out", s(&out), "--seed", "7", "--backend", "mesh"]);
        assert_eq!(code, 0, "{err}");
        assert!(stdout.starts_with("view,albedo_psnr"));
        csv.push(fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(csv[0], csv[1], "same seed, same metrics bytes");

    let out = dir.path().join("a");
    let common = ["--config", s(&run_cfg), "--data", s(&data), "--out", s(&out)];
    let (code, _, err) = rotlight(&[&["render"][..], &common].concat());
    assert_eq!(code, 0, "{err}");
    assert!(out.join("renders/test_r_0.pfm").exists());
    let (code, _, err) = rotlight(&[&["relight", "--env", s(&data.join("env.pfm")), "--angle-deg", "90"][..], &common].concat());
    assert_eq!(code, 0, "{err}");
    assert!(out.join("relight/test_r_1.png").exists());
    let (code, _, err) = rotlight(&[&["ao", "--backend", "gaussian", "--offset", "0.05"][..], &common].concat());
    assert_eq!(code, 0, "{err}");
    assert!(out.join("ao/test_r_0_gaussian.pfm").exists());
    let (code, stdout, err) = rotlight(&[&["metrics"][..], &common].concat());
    assert_eq!(code, 0, "{err}");
    assert_eq!(stdout.trim_end().as_bytes(), String::from_utf8(csv[0].clone()).unwrap().trim_end().as_bytes());
}

#[test]
fn staged_commands_chain_through_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let (gen_cfg, run_cfg) = (dir.path().join("gen.json"), dir.path().join("run.json"));
    fs::write(&gen_cfg, GEN).unwrap();
    fs::write(&run_cfg, RUN).unwrap();
    let data = dir.path().join("data");
    assert_eq!(rotlight(&["gen", "--config", s(&gen_cfg), "--out", s(&data)]).0, 0);
    let out = dir.path().join("o");
    let common = ["--config", s(&run_cfg), "--data", s(&data), "--out", s(&out)];
    let (code, _, err) = rotlight(&[&["pretrain-cache"][..], &common].concat());
    assert_eq!(code, 1, "needs stage 1 output first: {err}");
    assert!(err.contains("stage1"));
    for cmd in ["stage1", "extract-mesh", "pretrain-cache"] {
        let (code, _, err) = rotlight(&[&[cmd][..], &common].concat());
        assert_eq!(code, 0, "{cmd}: {err}");
    }
    assert!(out.join("cache_0.bin").exists() && out.join("cache_1.bin").exists());
}
