use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml")
}

fn fracbayes(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fracbayes"))
        .args(args)
        .arg("--config")
        .arg(fixture())
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], out: &Path) {
    let o = fracbayes(args, out);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn stderr_of(args: &[&str], out: &Path) -> String {
    let o = fracbayes(args, out);
    assert!(!o.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Map from file name to sha256 of every file in `dir` except the manifest.
fn hashes(dir: &Path) -> BTreeMap<String, String> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.toml")
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p.file_name().unwrap().to_string_lossy().into_owned(), hex::encode(Sha256::digest(bytes)))
        })
        .collect()
}

fn manifest(dir: &Path) -> toml::Table {
    toml::from_str(&std::fs::read_to_string(dir.join("manifest.toml")).unwrap()).unwrap()
}

#[test]
fn pipeline_is_deterministic_across_thread_counts_and_fully_manifested() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for stage in ["map", "implicit", "lmap", "mcmc", "diagnose"] {
        ok(&[stage, "--threads", "1"], &a);
        ok(&[stage, "--threads", "3"], &b);
    }
    let (ha, hb) = (hashes(&a), hashes(&b));
    assert_eq!(ha, hb);

    let m = manifest(&a);
    let files = m["files"].as_table().unwrap();
    assert_eq!(files.len(), ha.len());
    for (name, hash) in &ha {
        assert_eq!(files[name]["sha256"].as_str().unwrap(), hash, "{name}");
    }
    assert_eq!(m["config_hash"], manifest(&b)["config_hash"]);
    for name in ["ensemble.csv", "chain.csv", "moments.csv", "intervals.csv", "acf.csv", "weight_table.csv"] {
        assert!(ha.contains_key(name), "{name} missing");
    }
}

#[test]
fn ensemble_weights_sum_to_one() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["map"], tmp.path());
    ok(&["implicit"], tmp.path());
    let mut r = csv::Reader::from_path(tmp.path().join("ensemble.csv")).unwrap();
    let head: Vec<String> = r.headers().unwrap().iter().take(4).map(str::to_string).collect();
    assert_eq!(head, ["sample_id", "weight", "F", "Fhat"]);
    let sum: f64 = r.records().map(|rec| rec.unwrap()[1].parse::<f64>().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-12, "sum of weights {sum}");
}

#[test]
fn forward_writes_trajectory_and_flux() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["forward"], tmp.path());
    let mut r = csv::Reader::from_path(tmp.path().join("trajectory.csv")).unwrap();
    assert_eq!(r.records().count(), 10 * 64);
    let mut r = csv::Reader::from_path(tmp.path().join("flux.csv")).unwrap();
    let h = r.headers().unwrap().clone();
    assert!(h.iter().any(|c| c == "flux_multiscale"));
    assert_eq!(r.records().count(), 2 * 2 * 8);
}

#[test]
fn synth_is_reproducible_and_seed_sensitive() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(&["synth"], &a);
    ok(&["synth"], &b);
    ok(&["synth", "--seed", "9"], &c);
    let read = |d: &Path| std::fs::read(d.join("data.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert_eq!(manifest(&c)["seeds"]["noise"].as_integer(), Some(9002));
}

#[test]
fn missing_prerequisite_names_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let err = stderr_of(&["implicit"], tmp.path());
    assert!(err.contains("stage `implicit`"), "{err}");
    assert!(err.contains("fracbayes map"), "{err}");
    let err = stderr_of(&["diagnose"], tmp.path());
    assert!(err.contains("stage `diagnose`") && err.contains("fracbayes implicit"), "{err}");
}

#[test]
fn artifacts_from_another_configuration_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["map"], tmp.path());
    let err = stderr_of(&["implicit", "--seed", "5"], tmp.path());
    assert!(err.contains("different configuration"), "{err}");
}

#[test]
fn edited_artifacts_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["map"], tmp.path());
    let path = tmp.path().join("map.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("alpha1,", "alpha1,1")).unwrap();
    let err = stderr_of(&["lmap"], tmp.path());
    assert!(err.contains("stage `lmap`") && err.contains("map.csv"), "{err}");
}

#[test]
fn bad_configuration_fails_in_config_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    let text = std::fs::read_to_string(fixture()).unwrap().replace("coarse = [2, 2]", "coarse = [3, 3]");
    std::fs::write(&cfg, text).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_fracbayes"))
        .args(["map", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage `config`"));
}

#[test]
fn shipped_configurations_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let text = std::fs::read_to_string(&path).unwrap();
            fracbayes_core::experiment::ExperimentConfig::from_toml(&text)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            count += 1;
        }
    }
    assert!(count >= 8, "found {count} configurations");
}
