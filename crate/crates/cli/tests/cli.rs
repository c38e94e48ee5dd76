//! CLI behavior: config validation, presets, locking, metadata siblings,
//! and machine-readable failures.

use std::path::Path;
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_condkl")
}

const SMALL_CONFIG: &str = r#"
seed = 3

[domain]
lx = 2.0
ly = 1.0

[grid]
nx = 10
ny = 5

[kernel]
sigma = 0.65
l1 = 0.3
l2 = 0.3

[observations]
count = 4

[propagation]
method = "mc"
samples = 4
"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn smoke_run_completes_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL_CONFIG);
    let out = dir.path().join("out");
    let start = std::time::Instant::now();
    let status = Command::new(bin())
        .args(["--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .arg("propagate")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(start.elapsed().as_secs() < 1, "smoke run took {:?}", start.elapsed());
    for name in ["g_moments.csv", "u_moments.csv", "mc_convergence.csv", "propagate.json"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
}

#[test]
fn unknown_config_keys_are_rejected_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        &format!("{SMALL_CONFIG}\n[kernel2]\nbogus = 1\n"),
    );
    let out = dir.path().join("out");
    let output = Command::new(bin())
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .arg("synth")
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    let parsed: serde_json::Value =
        serde_json::from_str(stderr.lines().last().unwrap()).expect("machine-readable error");
    assert_eq!(parsed["stage"], "config");
    let msg = parsed["error"].as_str().unwrap();
    assert!(msg.contains("kernel2"), "error does not name the bad key: {msg}");
    assert!(msg.contains("line"), "error does not point at a line: {msg}");
}

#[test]
fn invalid_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = SMALL_CONFIG.replace("sigma = 0.65", "sigma = -1.0");
    let config = write_config(dir.path(), &bad);
    let output = Command::new(bin())
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .arg("synth")
        .output()
        .unwrap();
    assert!(!output.status.success());
}

#[test]
fn presets_parse_and_are_listed_in_errors() {
    let dir = tempfile::tempdir().unwrap();
    let output = Command::new(bin())
        .arg("--preset")
        .arg("nope")
        .arg("--out")
        .arg(dir.path().join("out"))
        .arg("synth")
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("paper-sigma065"));
    assert!(stderr.contains("paper-sigma13"));
}

#[test]
fn lockfile_blocks_concurrent_writers() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL_CONFIG);
    let out = dir.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(".condkl.lock"), "held\n").unwrap();
    let output = Command::new(bin())
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .arg("synth")
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("locked"), "unexpected error: {stderr}");

    // Released locks allow the next run.
    std::fs::remove_file(out.join(".condkl.lock")).unwrap();
    let status = Command::new(bin())
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .arg("synth")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(!out.join(".condkl.lock").exists(), "lock not released");
}

#[test]
fn every_output_carries_a_metadata_sibling() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL_CONFIG);
    let out = dir.path().join("out");
    let status = Command::new(bin())
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .arg("synth")
        .status()
        .unwrap();
    assert!(status.success());
    for entry in std::fs::read_dir(&out).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name.ends_with(".csv") {
            let meta = format!("{}.meta.json", name.trim_end_matches(".csv"));
            let meta_path = out.join(&meta);
            assert!(meta_path.exists(), "missing sibling {meta}");
            let parsed: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(meta_path).unwrap()).unwrap();
            assert!(parsed["config_sha256"].as_str().unwrap().len() == 64);
            assert_eq!(parsed["seed"], 3);
        }
    }
    // CSV headers name their columns.
    let obs = std::fs::read_to_string(out.join("observations.csv")).unwrap();
    assert!(obs.starts_with("x1,x2,value"));
}

#[test]
fn env_var_overrides_config_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL_CONFIG);
    let out = dir.path().join("from_env");
    let status = Command::new(bin())
        .arg("--config")
        .arg(&config)
        .arg("synth")
        .env("CONDKL_OUT", &out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("g_ref.csv").exists());
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL_CONFIG);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for (out, seed) in [(&out_a, "3"), (&out_b, "4")] {
        let status = Command::new(bin())
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(out)
            .arg("--seed")
            .arg(seed)
            .arg("synth")
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(out_a.join("g_ref.csv")).unwrap();
    let b = std::fs::read(out_b.join("g_ref.csv")).unwrap();
    assert_ne!(a, b, "different seeds must give different reference fields");

    // And the sibling metadata reflects the override.
    let meta: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_b.join("g_ref.meta.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(meta["seed"], 4);
}

#[test]
fn zero_sigma_is_rejected_cleanly() {
    // sigma = 0 breaks the positivity invariant; the CLI reports it rather
    // than emitting degenerate fields.
    let dir = tempfile::tempdir().unwrap();
    let bad = SMALL_CONFIG.replace("sigma = 0.65", "sigma = 0.0");
    let config = write_config(dir.path(), &bad);
    let output = Command::new(bin())
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .arg("synth")
        .output()
        .unwrap();
    assert!(!output.status.success());
}
