//! End-to-end checks of the `masseg` binary: exit codes, output files, and
//! determinism of the phantom generator across reruns and thread counts.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn masseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_masseg"))
        .args(args)
        .env_remove("MASSEG_THREADS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path.display().to_string()
}

const SMALL_PHANTOM: &str = r#"
seed = 11
[phantom]
count = 2
[phantom.spec]
extents = [24, 32, 32]
lesion_count = 1
"#;

fn generate_cases(dir: &Path) -> String {
    let config = write_config(dir, SMALL_PHANTOM);
    let out = dir.join("data");
    let status = masseg(&["phantom", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    out.join("manifest.toml").display().to_string()
}

#[test]
fn phantom_writes_cases_manifest_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_cases(dir.path());
    let data = dir.path().join("data");
    assert!(data.join("case-000.vraw").is_file());
    assert!(data.join("case-001_mask.vraw").is_file());
    assert!(data.join("phantom-config.toml").is_file());
    let text = fs::read_to_string(manifest).unwrap();
    assert_eq!(text.matches("[[cases]]").count(), 2);
    let snapshot = fs::read_to_string(data.join("phantom-config.toml")).unwrap();
    assert!(snapshot.contains("seed = 11"));
}

#[test]
fn phantom_count_zero_writes_empty_manifest_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[phantom]\ncount = 0\n");
    let out = dir.path().join("data");
    let result = masseg(&["phantom", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(result.status.success());
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(!manifest.contains("[[cases]]"));
}

#[test]
fn phantom_is_deterministic_across_reruns_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL_PHANTOM);
    let mut payloads: Vec<Vec<u8>> = Vec::new();
    for (sub, threads) in [("a", "1"), ("b", "1"), ("c", "2")] {
        let out = dir.path().join(sub);
        let result = Command::new(env!("CARGO_BIN_EXE_masseg"))
            .args(["phantom", "--config", &config, "--out", out.to_str().unwrap()])
            .env("MASSEG_THREADS", threads)
            .output()
            .unwrap();
        assert!(result.status.success());
        payloads.push(fs::read(out.join("case-001.raw")).unwrap());
    }
    assert_eq!(payloads[0], payloads[1]);
    assert_eq!(payloads[0], payloads[2]);
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL_PHANTOM);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    masseg(&["phantom", "--config", &config, "--out", out_a.to_str().unwrap()]);
    masseg(&["phantom", "--config", &config, "--seed", "999", "--out",
        out_b.to_str().unwrap()]);
    let a = fs::read(out_a.join("case-000.raw")).unwrap();
    let b = fs::read(out_b.join("case-000.raw")).unwrap();
    assert_ne!(a, b);
    let snap = fs::read_to_string(out_b.join("phantom-config.toml")).unwrap();
    assert!(snap.contains("seed = 999"));
}

#[test]
fn train_without_manifest_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let result = masseg(&["train", "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(2));
    let config = write_config(dir.path(), "manifest = \"/nonexistent/manifest.toml\"\n");
    let result = masseg(&["train", "--config", &config, "--out",
        dir.path().join("o2").to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn missing_out_flag_exits_2() {
    let result = masseg(&["phantom"]);
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "seed = \"not a number\"\n");
    let result = masseg(&["phantom", "--config", &config, "--out",
        dir.path().join("o").to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn segment_stub_emits_single_entry_traces_and_masks() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_cases(dir.path());
    let config = write_config(
        dir.path(),
        &format!(
            "manifest = \"{manifest}\"\n[segment]\npatch_extents = [8, 16, 16]\n"
        ),
    );
    let out = dir.path().join("seg");
    let result = masseg(&["segment", "--stub", "--config", &config, "--out",
        out.to_str().unwrap()]);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    for id in ["case-000", "case-001"] {
        assert!(out.join(format!("{id}_lesion0_mask.vraw")).is_file());
        let trace = fs::read_to_string(out.join(format!("{id}_lesion0_trace.csv"))).unwrap();
        // Header plus exactly one accepted attempt for the background stub.
        assert_eq!(trace.lines().count(), 2);
        assert!(trace.lines().nth(1).unwrap().ends_with("true"));
    }
    let summary = fs::read_to_string(out.join("summary.toml")).unwrap();
    assert!(summary.contains("warnings = 0"));
}

#[test]
fn segment_checkpoint_architecture_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_cases(dir.path());
    let model = masseg_lib_checkpoint(dir.path());
    // Configured model (depth 3) disagrees with the depth-1 checkpoint.
    let config = write_config(
        dir.path(),
        &format!(
            "manifest = \"{manifest}\"\n\
             [model]\ndepth = 3\n\
             [segment]\ncheckpoint = \"{model}\"\n"
        ),
    );
    let result = masseg(&["segment", "--config", &config, "--out",
        dir.path().join("seg").to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(2));
}

fn masseg_lib_checkpoint(dir: &Path) -> String {
    use masseg::models::{save_checkpoint, Model, ModelConfig};
    let model = Model::<f32>::build(&ModelConfig::single_3d(1, 2), 1).unwrap();
    let path = dir.join("tiny.ckpt");
    save_checkpoint(&model, &path).unwrap();
    path.display().to_string()
}

#[test]
fn report_scores_one_for_identical_predictions_and_zero_for_empty() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_cases(dir.path());
    let data = dir.path().join("data");

    // Predictions identical to ground truth.
    let perfect = dir.path().join("perfect");
    fs::create_dir(&perfect).unwrap();
    for id in ["case-000", "case-001"] {
        for ext in ["vraw", "raw"] {
            fs::copy(
                data.join(format!("{id}_mask.{ext}")),
                perfect.join(format!("{id}_mask.{ext}")),
            )
            .unwrap();
        }
    }
    let config = write_config(
        dir.path(),
        &format!(
            "manifest = \"{manifest}\"\n[report]\npredictions = \"{}\"\n",
            perfect.display()
        ),
    );
    let out = dir.path().join("rep");
    let result = masseg(&["report", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    let summary = fs::read_to_string(out.join("summary.toml")).unwrap();
    assert!(summary.contains("mean_dsc = 1"), "{summary}");
    for file in [
        "records.csv",
        "diameter_cdf.svg",
        "dsc_vs_compactness.svg",
        "dsc_vs_size.svg",
        "gt_vs_pred_compactness.svg",
    ] {
        assert!(out.join(file).is_file(), "missing {file}");
    }

    // All-background predictions score zero.
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    for id in ["case-000", "case-001"] {
        let gt = masseg::volumes::read_volume_u8(&data.join(format!("{id}_mask.vraw"))).unwrap();
        let blank = masseg::volumes::Volume::new(gt.extents, gt.spacing, 0u8).unwrap();
        masseg::volumes::write_volume(&blank, &empty.join(format!("{id}_mask.vraw"))).unwrap();
    }
    let config = write_config(
        dir.path(),
        &format!(
            "manifest = \"{manifest}\"\n[report]\npredictions = \"{}\"\n",
            empty.display()
        ),
    );
    let out2 = dir.path().join("rep2");
    let result = masseg(&["report", "--config", &config, "--out", out2.to_str().unwrap()]);
    assert!(result.status.success());
    let summary = fs::read_to_string(out2.join("summary.toml")).unwrap();
    assert!(summary.contains("mean_dsc = 0\n"), "{summary}");
}

#[test]
fn report_with_no_predictions_at_all_fails_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_cases(dir.path());
    let nowhere = dir.path().join("nowhere");
    fs::create_dir(&nowhere).unwrap();
    let config = write_config(
        dir.path(),
        &format!(
            "manifest = \"{manifest}\"\n[report]\npredictions = \"{}\"\n",
            nowhere.display()
        ),
    );
    let out = dir.path().join("rep");
    let result = masseg(&["report", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_ne!(result.status.code(), Some(0));
    let errors = fs::read_to_string(out.join("errors.csv")).unwrap();
    assert!(errors.contains("case-000"));
    assert!(errors.contains("case-001"));
}

#[test]
fn denoise_rewrites_manifest_cases() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_cases(dir.path());
    let config = write_config(
        dir.path(),
        &format!("manifest = \"{manifest}\"\n[denoise]\nsearch_radius = 2\n"),
    );
    let out = dir.path().join("dn");
    let result = masseg(&["denoise", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    assert!(out.join("manifest.toml").is_file());
    let original = masseg::volumes::read_volume_r32(
        &dir.path().join("data").join("case-000.vraw"),
    )
    .unwrap();
    let denoised = masseg::volumes::read_volume_r32(&out.join("case-000.vraw")).unwrap();
    assert_eq!(original.extents, denoised.extents);
    assert_ne!(original.data, denoised.data);
}
