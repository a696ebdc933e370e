//! End-to-end CLI tests: every verb against the synthetic dataset with the
//! mock backend, plus the error/exit-code contract.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn textalign(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_textalign"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_base_config(dir: &Path) -> PathBuf {
    let path = dir.join("textalign.toml");
    fs::write(
        &path,
        r#"
[dataset]
manifest = "synthetic.jsonl"
train_fraction = 0.75

[run]
seed = 11
repeats = 1

[backend]
kind = "mock"
mock_seed = 7
cache_dir = ".cache/llm"

[training]
epochs = 2
feature_dim = 48

[scenarios]
kinds = ["missing"]

[synthetic]
size = 24
num_classes = 3
seed = 4

[output]
dir = "runs"
"#,
    )
    .unwrap();
    path
}

fn run_dirs(dir: &Path, verb: &str) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir.join("runs"))
        .map(|entries| {
            entries
                .filter_map(Result::ok)
                .map(|e| e.path())
                .filter(|p| {
                    p.file_name()
                        .map(|n| n.to_string_lossy().starts_with(&format!("{verb}-")))
                        .unwrap_or(false)
                })
                .collect()
        })
        .unwrap_or_default();
    dirs.sort();
    dirs
}

#[test]
fn synth_ingest_train_evaluate_smoke() {
    let dir = tempfile::tempdir().unwrap();
    write_base_config(dir.path());

    let synth = textalign(dir.path(), &["synth", "-c", "textalign.toml"]);
    assert!(synth.status.success(), "{}", String::from_utf8_lossy(&synth.stderr));
    assert!(dir.path().join("synthetic.jsonl").exists());

    let ingest = textalign(dir.path(), &["ingest", "-c", "textalign.toml"]);
    assert!(ingest.status.success());
    let stdout = String::from_utf8_lossy(&ingest.stdout);
    assert!(stdout.contains("24 samples"), "summary line missing: {stdout}");

    let train = textalign(dir.path(), &["train", "-c", "textalign.toml"]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let train_dir = run_dirs(dir.path(), "train").pop().unwrap();
    assert!(train_dir.join("checkpoint.json").exists());
    assert!(train_dir.join("resolved_config.toml").exists());

    let evaluate = textalign(dir.path(), &["evaluate", "-c", "textalign.toml"]);
    assert!(
        evaluate.status.success(),
        "{}",
        String::from_utf8_lossy(&evaluate.stderr)
    );
    let eval_dir = run_dirs(dir.path(), "evaluate").pop().unwrap();
    assert!(eval_dir.join("report-missing.json").exists());
    assert!(eval_dir.join("report-missing.csv").exists());
    let report = fs::read_to_string(eval_dir.join("report-missing.json")).unwrap();
    assert!(report.contains("\"schema_version\": 1"));

    // report verb: convert the JSON back into a CSV.
    let report_path = eval_dir.join("report-missing.json");
    let convert = textalign(
        dir.path(),
        &[
            "report",
            "-c",
            "textalign.toml",
            "--set",
            &format!("report.input=\"{}\"", report_path.display()),
        ],
    );
    assert!(
        convert.status.success(),
        "{}",
        String::from_utf8_lossy(&convert.stderr)
    );
    let convert_dir = run_dirs(dir.path(), "report").pop().unwrap();
    let csv = fs::read_to_string(convert_dir.join("report.csv")).unwrap();
    assert!(csv.starts_with("condition,level,metric,drop_ratio"));
}

#[test]
fn align_and_perturb_write_dumps() {
    let dir = tempfile::tempdir().unwrap();
    write_base_config(dir.path());
    assert!(textalign(dir.path(), &["synth", "-c", "textalign.toml"]).status.success());

    let align = textalign(
        dir.path(),
        &["align", "-c", "textalign.toml", "--set", "pipeline.align_dump_samples=3"],
    );
    assert!(align.status.success(), "{}", String::from_utf8_lossy(&align.stderr));
    let align_dir = run_dirs(dir.path(), "align").pop().unwrap();
    let dump = fs::read_to_string(align_dir.join("align.jsonl")).unwrap();
    assert_eq!(dump.lines().count(), 3);
    assert!(dump.contains("<<seg:TABULAR>>"));

    let perturb = textalign(
        dir.path(),
        &[
            "perturb",
            "-c",
            "textalign.toml",
            "--set",
            "perturbation.perturb_dump_samples=2",
        ],
    );
    assert!(perturb.status.success(), "{}", String::from_utf8_lossy(&perturb.stderr));
    let perturb_dir = run_dirs(dir.path(), "perturb").pop().unwrap();
    let dump = fs::read_to_string(perturb_dir.join("adversarial.jsonl")).unwrap();
    assert_eq!(dump.lines().count(), 2);
    assert!(dump.contains("instruction_id"));
}

#[test]
fn ablate_writes_four_reports() {
    let dir = tempfile::tempdir().unwrap();
    write_base_config(dir.path());
    assert!(textalign(dir.path(), &["synth", "-c", "textalign.toml"]).status.success());

    let ablate = textalign(dir.path(), &["ablate", "-c", "textalign.toml"]);
    assert!(ablate.status.success(), "{}", String::from_utf8_lossy(&ablate.stderr));
    let ablate_dir = run_dirs(dir.path(), "ablate").pop().unwrap();
    let reports: Vec<_> = fs::read_dir(&ablate_dir)
        .unwrap()
        .filter_map(Result::ok)
        .map(|e| e.file_name().to_string_lossy().to_string())
        .filter(|n| n.starts_with("report-missing-") && n.ends_with(".json"))
        .collect();
    assert_eq!(reports.len(), 4, "expected 4 ablation reports, got {reports:?}");
    let stdout = String::from_utf8_lossy(&ablate.stdout);
    for label in ["[full]", "[w/o alignment]", "[w/o perturbation]", "[w/o both]"] {
        assert!(stdout.contains(label), "missing {label} in {stdout}");
    }
}

#[test]
fn unknown_verb_prints_usage_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = textalign(dir.path(), &["frobnicate"]);
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.to_lowercase().contains("usage"), "{stderr}");
}

#[test]
fn multiplier_over_cap_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    write_base_config(dir.path());
    let out = textalign(
        dir.path(),
        &[
            "train",
            "-c",
            "textalign.toml",
            "--set",
            "run.adversarial_iteration_multiplier=11",
            "--set",
            "training.mode=\"text_adversarial\"",
        ],
    );
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2), "config errors exit 2");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("1..=10"), "must cite the cap: {stderr}");
}

#[test]
fn missing_manifest_maps_to_data_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    write_base_config(dir.path());
    let out = textalign(dir.path(), &["ingest", "-c", "textalign.toml"]);
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(3), "data errors exit 3");
}

#[test]
fn invalid_override_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    write_base_config(dir.path());
    let out = textalign(
        dir.path(),
        &["ingest", "-c", "textalign.toml", "--set", "training.epoochs=3"],
    );
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("training.epoochs"), "{stderr}");
}

#[test]
fn resolved_config_snapshot_carries_hash_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    write_base_config(dir.path());
    assert!(textalign(dir.path(), &["synth", "-c", "textalign.toml"]).status.success());
    let synth_dir = run_dirs(dir.path(), "synth").pop().unwrap();
    let snapshot = fs::read_to_string(synth_dir.join("resolved_config.toml")).unwrap();
    assert!(snapshot.starts_with("# config_hash = "));
    // Defaults materialized even though the file never set them.
    assert!(snapshot.contains("rng_algorithm"));
    assert!(snapshot.contains("adversarial_iteration_multiplier"));
}
