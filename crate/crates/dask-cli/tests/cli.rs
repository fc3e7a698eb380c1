//! End-to-end tests of the command-line surface: subcommands, artifacts,
//! determinism, and exit codes.

use std::path::Path;
use std::process::Command;

fn dask() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dask"))
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{
  "seed": 7,
  "benchmark": {"seen_domains": 2, "unseen_domains": 1, "ids_per_domain": 4, "views_per_id": 4, "image_height": 32, "image_width": 16},
  "rehearser": {"epochs": 1, "batch_size": 4},
  "train": {"epochs_first": 2, "epochs_later": 2, "identities_per_batch": 2, "instances_per_identity": 2, "passes_per_epoch": 1, "embed_dim": 16}
}"#,
    )
    .unwrap();
    path
}

#[test]
fn gen_data_then_run_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let data = dir.path().join("data");
    let status = dask()
        .args(["gen-data", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(data.join("manifest.json").exists());
    assert!(data.join("config_resolved.json").exists());

    let run = |out: &Path| {
        let status = dask()
            .args(["run", "--config"])
            .arg(&config)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    };
    let out1 = dir.path().join("run1");
    let out2 = dir.path().join("run2");
    run(&out1);
    run(&out2);

    let m1 = std::fs::read(out1.join("metrics.json")).unwrap();
    let m2 = std::fs::read(out2.join("metrics.json")).unwrap();
    assert_eq!(m1, m2, "metrics.json must be byte-identical across reruns");

    for name in [
        "config_resolved.json",
        "embeddings.csv",
        "reid_step1.ckpt",
        "reid_step2.ckpt",
        "rehearser_step1.ckpt",
        "rehearser_step2.ckpt",
    ] {
        assert!(out1.join(name).exists(), "missing artifact {name}");
    }

    // The metrics report carries the schema fields.
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out1.join("metrics.json")).unwrap()).unwrap();
    for key in [
        "seed",
        "config_hash",
        "variant",
        "seen",
        "unseen",
        "seen_avg",
        "unseen_avg",
        "steps",
        "config",
    ] {
        assert!(report.get(key).is_some(), "metrics.json missing '{key}'");
    }

    // Embeddings: header plus one row per evaluation image.
    let embeddings = std::fs::read_to_string(out1.join("embeddings.csv")).unwrap();
    let mut lines = embeddings.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("domain,role,split,identity,f0,"));
    // 2 seen + 1 unseen domains, each with 2 query + 6 gallery images.
    assert_eq!(lines.count(), 3 * 8);
}

#[test]
fn transfer_with_identity_initialized_rehearser_changes_little() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    // Zero rehearser epochs: training returns the identity-offset init.
    std::fs::write(
        &config_path,
        r#"{
  "seed": 3,
  "benchmark": {"seen_domains": 1, "unseen_domains": 0, "ids_per_domain": 4, "views_per_id": 4, "image_height": 32, "image_width": 16},
  "rehearser": {"epochs": 0},
  "train": {"epochs_first": 1, "epochs_later": 1, "identities_per_batch": 2, "instances_per_identity": 2, "passes_per_epoch": 1, "embed_dim": 16}
}"#,
    )
    .unwrap();
    let data = dir.path().join("data");
    assert!(dask()
        .args(["gen-data", "--config"])
        .arg(&config_path)
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap()
        .success());
    let ckpt = dir.path().join("rehearser.ckpt");
    assert!(dask()
        .args(["train-rehearser", "--config"])
        .arg(&config_path)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&ckpt)
        .status()
        .unwrap()
        .success());

    let input = data.join("seen_0/img_0000.ppm");
    let output = dir.path().join("styled.ppm");
    assert!(dask()
        .args(["transfer", "--rehearser"])
        .arg(&ckpt)
        .arg("--in")
        .arg(&input)
        .arg("--out")
        .arg(&output)
        .status()
        .unwrap()
        .success());

    let a = dask_core::image::read_ppm(&input).unwrap();
    let b = dask_core::image::read_ppm(&output).unwrap();
    let max_abs = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    assert!(
        max_abs <= 0.05,
        "identity-initialized transfer moved a pixel by {max_abs}"
    );
}

#[test]
fn ablate_loss_suite_writes_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = dir.path().join("ablation");
    assert!(dask()
        .args(["ablate", "--config"])
        .arg(&config)
        .args(["--suite", "loss", "--out"])
        .arg(&out)
        .status()
        .unwrap()
        .success());
    let table = std::fs::read_to_string(out.join("table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(
        lines[0],
        "label,seen_avg_map,seen_avg_r1,unseen_avg_map,unseen_avg_r1"
    );
    assert_eq!(lines.len(), 5, "header plus four rows:\n{table}");
    assert!(lines[1].starts_with("baseline,"));
    assert!(lines[2].starts_with("rehearsed_reid,"));
    assert!(lines[3].starts_with("rehearsed_skd,"));
    assert!(lines[4].starts_with("rehearsed_both,"));
    assert!(out.join("table.json").exists());
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());

    // Usage error: unknown subcommand.
    let status = dask().arg("frobnicate").output().unwrap();
    assert_eq!(status.status.code(), Some(1));

    // Config validation error.
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"retained_capacity": 0}"#).unwrap();
    let status = dask()
        .args(["gen-data", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));

    // Data validation error: running against a missing dataset directory.
    let status = dask()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--data")
        .arg(dir.path().join("nope"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));

    // Checkpoint kind/magic errors.
    let fake = dir.path().join("fake.ckpt");
    std::fs::write(&fake, b"NOTMAGICxxxxxxxxxxxx").unwrap();
    let status = dask()
        .args(["transfer", "--rehearser"])
        .arg(&fake)
        .arg("--in")
        .arg(dir.path().join("missing.ppm"))
        .arg("--out")
        .arg(dir.path().join("o.ppm"))
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));
}

#[test]
fn failed_runs_leave_no_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = dir.path().join("partial");
    // Missing data dir: the command fails after staging begins.
    let status = dask()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--data")
        .arg(dir.path().join("missing-data"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(!status.status.success());
    assert!(!out.exists(), "failed run must not leave the output directory");
    assert!(
        !out.with_extension("staging").exists(),
        "staging directory must be cleaned up"
    );

    // Refuses to clobber a non-empty output directory.
    let busy = dir.path().join("busy");
    std::fs::create_dir_all(&busy).unwrap();
    std::fs::write(busy.join("keep.txt"), "precious").unwrap();
    let data = dir.path().join("data");
    assert!(dask()
        .args(["gen-data", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap()
        .success());
    let status = dask()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&busy)
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));
    assert!(busy.join("keep.txt").exists(), "existing files untouched");
}
