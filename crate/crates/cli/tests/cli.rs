use std::path::Path;
use std::process::{Command, Output};

fn gprompt(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gprompt"))
        .args(args)
        .current_dir(dir)
        .env_remove("GPROMPT_OUTPUT_DIR")
        .output()
        .expect("spawn gprompt")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn synth(dir: &Path, n: usize) {
    let out = gprompt(
        &["synth", "--n-graphs", &n.to_string(), "--out", "data.json"],
        dir,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

const FAST: [&str; 8] = [
    "--set",
    "pretrain.epochs=3",
    "--set",
    "prompt.epochs=2",
    "--set",
    "n_seeds=1",
    "--set",
    "n_trials=1",
];

#[test]
fn split_manifest_is_half_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 41);
    let mut manifests = Vec::new();
    for name in ["a.json", "b.json"] {
        let out = gprompt(
            &[
                "split",
                "--dataset",
                "data.json",
                "--seed",
                "3",
                "--out",
                name,
            ],
            dir.path(),
        );
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        manifests.push(std::fs::read_to_string(dir.path().join(name)).unwrap());
    }
    assert_eq!(manifests[0], manifests[1]);
    let v: serde_json::Value = serde_json::from_str(&manifests[0]).unwrap();
    assert_eq!(v["source"].as_array().unwrap().len(), 20);
    assert_eq!(v["target"].as_array().unwrap().len(), 21);
}

#[test]
fn pagerank_on_graph_task_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 20);
    let out = gprompt(
        &[
            "split",
            "--dataset",
            "data.json",
            "--task",
            "graph",
            "--property",
            "pagerank",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 1);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gprompt(&["split", "--dataset", "nope.json"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 20);
    let out = gprompt(
        &["eval", "--dataset", "data.json", "--model", "missing.json"],
        dir.path(),
    );
    assert_eq!(code(&out), 1);
}

#[test]
fn unknown_flag_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gprompt(&["run", "--bogus"], dir.path())), 1);
}

#[test]
fn pretrain_prompt_eval_and_export() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 40);
    let base = [
        "--dataset",
        "data.json",
        "--set",
        "output_dir=\"out\"",
        "--set",
        "hidden_dim=6",
    ];
    let with = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd];
        args.extend(base);
        args.extend(&FAST);
        args.extend(extra);
        let out = gprompt(&args, dir.path());
        assert_eq!(
            code(&out),
            0,
            "{cmd}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    };
    with("pretrain", &[]);
    assert!(dir.path().join("out/model.json").exists());
    with("prompt-train", &["--model", "out/model.json"]);
    let log = std::fs::read_to_string(dir.path().join("out/prompt_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2);
    let eval = with(
        "eval",
        &["--model", "out/model.json", "--prompt", "out/prompt.json"],
    );
    assert!(eval.lines().any(|l| l.starts_with("ugprompt,")));

    let small = tempfile::tempdir().unwrap();
    synth(small.path(), 10);
    std::fs::copy(
        dir.path().join("out/model.json"),
        small.path().join("model.json"),
    )
    .unwrap();
    let out = gprompt(
        &[
            "export-embeddings",
            "--dataset",
            "data.json",
            "--model",
            "model.json",
            "--out",
            "emb.csv",
        ],
        small.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(small.path().join("emb.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 20);
    assert!(lines.iter().all(|l| l.split(',').count() == 4 + 6));
}

#[test]
fn run_writes_results_and_honours_output_env() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 40);
    let mut args = vec!["run", "--dataset", "data.json"];
    args.extend(&FAST);
    let out = Command::new(env!("CARGO_BIN_EXE_gprompt"))
        .args(&args)
        .current_dir(dir.path())
        .env("GPROMPT_OUTPUT_DIR", "env_out")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let results = std::fs::read_to_string(dir.path().join("env_out/results.csv")).unwrap();
    assert!(results.starts_with("seed,trial,method,f1,imp\n"));
    assert_eq!(results.lines().count(), 3);
    assert!(dir.path().join("env_out/summary.csv").exists());
}
