use std::path::Path;
use std::process::{Command, Output};

fn cfrag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfrag"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn cfrag")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn small_config(root: &Path) -> std::path::PathBuf {
    let data = root.join("data");
    let path = root.join("run.cfg");
    std::fs::write(
        &path,
        format!(
            "# small end-to-end run\ndataset = {}\noracle = {}\nout_dir = {}\ndim = 16\nuser_epochs = 2\nretriever_steps = 5\nreranker_steps = 5\n",
            data.join("dataset.jsonl").display(),
            data.join("oracle.json").display(),
            root.join("run").display()
        ),
    )
    .unwrap();
    path
}

#[test]
fn staged_commands_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let out = ok(&cfrag(&[
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--clusters",
        "2",
        "--set",
        "samples_per_user=2",
    ]));
    assert!(out.contains("wrote 8 users and 16 samples"), "{out}");

    let cfg = small_config(root);
    let cfg = cfg.to_str().unwrap();

    // Stage order is enforced.
    let early = cfrag(&["train-retriever", "--config", cfg]);
    assert!(!early.status.success());
    assert!(String::from_utf8_lossy(&early.stderr).contains("error"));

    ok(&cfrag(&["train-user", "--config", cfg]));
    ok(&cfrag(&["train-retriever", "--config", cfg]));
    ok(&cfrag(&["train-reranker", "--config", cfg]));
    let eval = ok(&cfrag(&["eval", "--config", cfg]));
    assert!(eval.contains("no_user_retrieval"), "{eval}");

    let report_path = root.join("run/report.json");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["config"]["dim"], 16);
    assert_eq!(report["config"]["retriever_steps"], 5);

    let csv_dir = root.join("copy");
    let summary = ok(&cfrag(&[
        "report",
        "--config",
        cfg,
        "--csv",
        csv_dir.to_str().unwrap(),
    ]));
    assert!(summary.contains("seed 17"), "{summary}");
    assert_eq!(
        std::fs::read(csv_dir.join("report.json")).unwrap(),
        std::fs::read(&report_path).unwrap()
    );
}

#[test]
fn cli_overrides_beat_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(&cfrag(&[
        "synth",
        "--out",
        root.join("data").to_str().unwrap(),
        "--clusters",
        "2",
        "--samples-per-user",
        "2",
    ]));
    let cfg = small_config(root);
    ok(&cfrag(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--user-epochs",
        "1",
        "--set",
        "retriever_steps=3",
    ]));
    let losses: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("run/train_losses.json")).unwrap())
            .unwrap();
    assert_eq!(losses["user"].as_array().unwrap().len(), 1);
    assert_eq!(losses["retriever"].as_array().unwrap().len(), 3);
    assert_eq!(losses["reranker"].as_array().unwrap().len(), 5);
}

#[test]
fn bad_input_is_reported() {
    let out = cfrag(&["train", "--set", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("KEY=VALUE"));

    let out = cfrag(&["eval", "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    let out = cfrag(&["train", "--k", "0"]);
    assert_eq!(out.status.code(), Some(2));
}
