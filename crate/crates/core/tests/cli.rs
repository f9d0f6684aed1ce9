//! End-to-end checks of the `prefpack` subcommands and exit codes.

use std::path::Path;

use prefpack::cli::{random_examples, run_from_args, EXIT_OK, EXIT_USAGE, EXIT_VERIFY_FAILED};
use prefpack::dataset::{example_to_json, load_preference_jsonl, PreferenceExample};
use prefpack::packer::{unpack, PackedLayout};

fn write_jsonl(path: &Path, examples: &[PreferenceExample]) {
    let text: String = examples
        .iter()
        .map(|e| example_to_json(e).to_string() + "\n")
        .collect();
    std::fs::write(path, text).unwrap();
}

fn run(args: &[&str]) -> prefpack::cli::CmdOutput {
    run_from_args(std::iter::once("prefpack").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Five examples whose mean lengths are 228.2 / 251.0 / 129.6.
fn orca_like() -> Vec<PreferenceExample> {
    let prompts = [228, 228, 228, 228, 229];
    let mins = [129, 130, 130, 130, 129];
    (0..5)
        .map(|i| {
            PreferenceExample::new(
                format!("orca-{i}"),
                vec![7; prompts[i]],
                vec![vec![8; 251], vec![9; mins[i]]],
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn analyze_reports_orca_like_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("orca.jsonl");
    write_jsonl(&data, &orca_like());

    let out = run(&["analyze", "--dataset", s(&data)]);
    assert_eq!(out.code, EXIT_OK, "{}", out.stderr);
    assert!(out.stdout.contains("0.8070"), "{}", out.stdout);
    assert!(out.stdout.contains("0.6352"), "{}", out.stdout);
    assert!(out.stdout.contains("model-predicted"));

    let out = run(&["analyze", "--dataset", s(&data), "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&out.stdout).unwrap();
    let report = &v["dataset"]["reports"][0]["report"];
    assert!((report["compute_ratio"].as_f64().unwrap() - 0.807).abs() < 5e-4);
    assert!((report["memory_ratio_flash"].as_f64().unwrap() - 0.635).abs() < 5e-4);
}

#[test]
fn analyze_rejects_empty_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(run(&["analyze", "--dataset", s(&empty)]).code, EXIT_USAGE);
    let missing = dir.path().join("missing.jsonl");
    let out = run(&["analyze", "--dataset", s(&missing)]);
    assert_eq!(out.code, EXIT_USAGE);
    assert!(out.stderr.contains("missing.jsonl"));
}

#[test]
fn analyze_writes_to_out() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("report.json");
    let out = run(&["analyze", "--format", "json", "--out", s(&out_path)]);
    assert_eq!(out.code, EXIT_OK);
    assert!(out.stdout.is_empty());
    let text = std::fs::read_to_string(&out_path).unwrap();
    assert!(serde_json::from_str::<serde_json::Value>(&text).is_ok());
}

#[test]
fn pack_roundtrips_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    let layouts = dir.path().join("layouts.jsonl");
    let mut examples = random_examples(2, 257, 4);
    examples.push(
        PreferenceExample::new(
            "four",
            vec![1, 2, 3],
            vec![vec![4], vec![5, 6], vec![7], vec![8, 9, 10]],
        )
        .unwrap(),
    );
    write_jsonl(&data, &examples);

    let out = run(&["pack", "--dataset", s(&data), "--out", s(&layouts)]);
    assert_eq!(out.code, EXIT_OK, "{}", out.stderr);
    let text = std::fs::read_to_string(&layouts).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    for (line, original) in lines.iter().zip(&examples) {
        let layout = PackedLayout::from_json(&serde_json::from_str(line).unwrap()).unwrap();
        layout.validate().unwrap();
        assert_eq!(&unpack(&layout).unwrap(), original);
    }
    let last = PackedLayout::from_json(&serde_json::from_str(lines[2]).unwrap()).unwrap();
    assert_eq!(last.segments.len(), 5);

    let reread = load_preference_jsonl(&data, 257).unwrap();
    assert_eq!(reread, examples);
}

#[test]
fn pack_requires_existing_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    write_jsonl(&data, &random_examples(1, 257, 1));
    let out = run(&[
        "pack",
        "--dataset",
        s(&data),
        "--out",
        s(&dir.path().join("no/such/out.jsonl")),
    ]);
    assert_eq!(out.code, EXIT_USAGE);
}

#[test]
fn verify_passes_on_pairwise_examples() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("pairs.jsonl");
    let pairs: Vec<PreferenceExample> = random_examples(80, 257, 6)
        .into_iter()
        .map(|mut e| {
            e.responses.truncate(2);
            e
        })
        .collect();
    write_jsonl(&data, &pairs);
    let out = run(&[
        "verify",
        "--dataset",
        s(&data),
        "--n-samples",
        "50",
        "--format",
        "json",
        "--no-gradients",
    ]);
    assert_eq!(out.code, EXIT_OK, "{}", out.stderr);
    let v: serde_json::Value = serde_json::from_str(&out.stdout).unwrap();
    assert_eq!(v["summary"]["n_examples"], 50);
    assert!(v["summary"]["max_logit_diff"].as_f64().unwrap() <= 1e-9);
    assert_eq!(v["passed"], true);
}

#[test]
fn verify_flags_injected_leak() {
    let out = run(&[
        "verify",
        "--n-samples",
        "4",
        "--inject-leak",
        "--no-gradients",
    ]);
    assert_eq!(out.code, EXIT_VERIFY_FAILED);
    assert!(out.stderr.contains("rand-0"), "{}", out.stderr);
    assert!(out.stdout.contains("FAIL"));
}

#[test]
fn verify_fp32_and_rotary() {
    let out = run(&[
        "verify",
        "--n-samples",
        "6",
        "--precision",
        "fp32",
        "--positional",
        "rotary",
    ]);
    assert_eq!(out.code, EXIT_OK, "{}{}", out.stdout, out.stderr);
}

#[test]
fn verify_rejects_bad_input() {
    assert_eq!(run(&["verify", "--n-samples", "0"]).code, EXIT_USAGE);
    assert_eq!(run(&["verify", "--beta", "0"]).code, EXIT_USAGE);
    assert_eq!(run(&["verify", "--precision", "fp16"]).code, EXIT_USAGE);
    assert_eq!(
        run(&["verify", "--n-samples", "2", "--d-model", "31"]).code,
        EXIT_USAGE
    );
}

fn scenario(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("scenario.json");
    std::fs::write(&path, body).unwrap();
    path
}

const HEAVY_TAIL: &str = r#""synthetic": {"n_examples": 3000, "k": 2, "median_prompt": 400, "median_response": 150, "sigma_prompt": 1.0, "sigma_response": 0.8, "max_len": 16384}"#;

#[test]
fn simulate_orders_strategies() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario(
        dir.path(),
        &format!(r#"{{{HEAVY_TAIL}, "batch_size": 8, "n_ranks": 8, "seed": 3}}"#),
    );
    let out = run(&["simulate", "--scenario", s(&path), "--format", "json"]);
    assert_eq!(out.code, EXIT_OK, "{}", out.stderr);
    let v: serde_json::Value = serde_json::from_str(&out.stdout).unwrap();
    let rel: Vec<f64> = v["report"]["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["relative"].as_f64().unwrap())
        .collect();
    assert_eq!(rel[0], 1.0);
    assert!(
        rel[3] > rel[2] && rel[2] > rel[1] && rel[1] > rel[0],
        "{rel:?}"
    );

    let table = run(&["simulate", "--scenario", s(&path)]);
    assert!(table.stdout.contains("w/ both"));
}

#[test]
fn simulate_vanilla_only_is_anchor() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario(
        dir.path(),
        &format!(r#"{{{HEAVY_TAIL}, "batch_size": 4, "n_ranks": 2, "strategies": ["vanilla"]}}"#),
    );
    let out = run(&["simulate", "--scenario", s(&path), "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&out.stdout).unwrap();
    assert_eq!(v["report"]["rows"][0]["relative"].as_f64(), Some(1.0));
}

#[test]
fn simulate_reads_relative_dataset_path() {
    let dir = tempfile::tempdir().unwrap();
    write_jsonl(&dir.path().join("data.jsonl"), &random_examples(40, 257, 2));
    let path = scenario(
        dir.path(),
        r#"{"dataset": "data.jsonl", "batch_size": 4, "n_ranks": 2, "bucket_batches": 2}"#,
    );
    let out = run(&["simulate", "--scenario", s(&path)]);
    assert_eq!(out.code, EXIT_OK, "{}", out.stderr);
}

#[test]
fn simulate_rejects_bad_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run(&[
            "simulate",
            "--scenario",
            s(&dir.path().join("missing.json"))
        ])
        .code,
        EXIT_USAGE
    );
    let path = scenario(dir.path(), r#"{"batch_size": 8, "n_ranks": 8}"#);
    assert_eq!(run(&["simulate", "--scenario", s(&path)]).code, EXIT_USAGE);
    let path = scenario(
        dir.path(),
        &format!(r#"{{{HEAVY_TAIL}, "batch_size": 0, "n_ranks": 8}}"#),
    );
    assert_eq!(run(&["simulate", "--scenario", s(&path)]).code, EXIT_USAGE);
    let path = scenario(dir.path(), "not json");
    assert_eq!(run(&["simulate", "--scenario", s(&path)]).code, EXIT_USAGE);
}

#[test]
fn help_exits_zero() {
    let out = run(&["--help"]);
    assert_eq!(out.code, EXIT_OK);
    assert!(out.stdout.contains("verify"));
}
