mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{
    ai2d_fixture, food_chain_example, scienceqa_fixture, states_example, synthetic,
    worked_example_fixture, write_dataset, StubReply, StubServer, FOOD_CHAIN_ID, STATES_ID,
};
use mm_poe::metrics::EvalReport;
use mm_poe::types::Split;

fn poe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poe"))
        .args(args)
        .env_remove(mm_poe::backend::ENDPOINT_ENV)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn example_setup(dir: &Path) -> (String, String) {
    let data = write_dataset(dir, &[states_example(), food_chain_example()]);
    let fx = dir.join("fixture.json");
    worked_example_fixture().save(&fx).unwrap();
    (data.display().to_string(), fx.display().to_string())
}

#[test]
fn inspect_reproduces_scienceqa_trace() {
    let dir = tempfile::tempdir().unwrap();
    let (data, fx) = example_setup(dir.path());
    let o = poe(&[
        "inspect",
        "--data",
        &data,
        "--id",
        STATES_ID,
        "--method",
        "poe",
        "--mock-fixture",
        &fx,
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let text = stdout(&o);
    assert!(
        text.contains("Predicted Masks: West Virginia, Louisiana, [MASK], [MASK]\n"),
        "{text}"
    );
    assert!(text.contains("Predicted Option: West Virginia\n"));
    assert!(text.contains("Ground Truth Option: West Virginia\n"));
    assert!(text.contains("Correct: true\n"));
    assert!(text.contains("C. [MASK]\nD. [MASK]\nAnswer: "));
}

#[test]
fn inspect_reproduces_ai2d_trace() {
    let dir = tempfile::tempdir().unwrap();
    let (data, fx) = example_setup(dir.path());
    let o = poe(&[
        "inspect",
        "--data",
        &data,
        "--id",
        FOOD_CHAIN_ID,
        "--method",
        "poe",
        "--mock-fixture",
        &fx,
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(
        text.contains("Predicted Masks: [MASK], predator, prey, NA\n"),
        "{text}"
    );
    assert!(text.contains("Predicted Option: prey\n"));
}

#[test]
fn inspect_unknown_id_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = example_setup(dir.path());
    let o = poe(&[
        "inspect", "--data", &data, "--id", "nope", "--method", "mcp",
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn run_writes_report_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path(), &synthetic(12, Split::Dev));
    let out = dir.path().join("report.json");
    let o = poe(&[
        "run",
        "--data",
        data.to_str().unwrap(),
        "--method",
        "poe",
        "--step1-method",
        "lm",
        "--seeds",
        "1,2,3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report.per_seed.len(), 3);
    assert_eq!(report.aggregate.instance_count, 12);
    assert!(report.aggregate.mean_mask_accuracy.is_some());
    let table = stdout(&o);
    assert!(table.contains("mask accuracy"), "{table}");
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path(), &synthetic(5, Split::Dev));
    let out = dir.path().join("r.json");
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "data_path = {:?}\nmethod = \"lm\"\nseeds = [4, 5]\noutput_path = {:?}\n",
            data.to_str().unwrap(),
            out.to_str().unwrap()
        ),
    )
    .unwrap();
    let o = poe(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--method",
        "channel",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report.config_echo.method.to_string(), "Channel");
    assert_eq!(report.config_echo.seeds, vec![4, 5]);

    std::fs::write(&cfg, "methd = \"lm\"\n").unwrap();
    let o = poe(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path(), &synthetic(5, Split::Dev));
    let d = data.to_str().unwrap();
    let out = dir.path().join("r.json");
    let o = out.to_str().unwrap();
    for args in [
        vec![
            "run", "--data", d, "--method", "lm", "--seeds", "1,1", "--out", o,
        ],
        vec![
            "run",
            "--data",
            d,
            "--method",
            "lm",
            "--max-parallel",
            "0",
            "--out",
            o,
        ],
        vec![
            "run",
            "--data",
            d,
            "--method",
            "lm",
            "--backend",
            "network",
            "--out",
            o,
        ],
        vec![
            "run",
            "--data",
            d,
            "--method",
            "lm",
            "--endpoint",
            "http://x",
            "--out",
            o,
        ],
        vec![
            "run",
            "--data",
            d,
            "--method",
            "lm",
            "--n-shot",
            "1",
            "--demo-split",
            "dev",
            "--out",
            o,
        ],
        vec!["run", "--data", d, "--out", o],
        vec!["run", "--data", d, "--method", "bogus", "--out", o],
    ] {
        assert_eq!(poe(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn mock_runs_ignore_endpoint_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path(), &synthetic(3, Split::Dev));
    let out = dir.path().join("r.json");
    let o = Command::new(env!("CARGO_BIN_EXE_poe"))
        .args([
            "run",
            "--data",
            data.to_str().unwrap(),
            "--method",
            "mcp",
            "--out",
            out.to_str().unwrap(),
        ])
        .env(mm_poe::backend::ENDPOINT_ENV, "http://127.0.0.1:9/score")
        .output()
        .unwrap();
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn few_shot_run_uses_train_demos() {
    let dir = tempfile::tempdir().unwrap();
    let mut all = synthetic(6, Split::Dev);
    all.extend(synthetic(8, Split::Train));
    let data = write_dataset(dir.path(), &all);
    let out = dir.path().join("r.json");
    let o = poe(&[
        "run",
        "--data",
        data.to_str().unwrap(),
        "--method",
        "poe",
        "--n-shot",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report.aggregate.instance_count, 6);
}

#[test]
fn network_failure_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path(), &synthetic(1, Split::Dev));
    let stub = StubServer::start(|_, _| StubReply::status(500));
    let out = dir.path().join("r.json");
    let o = poe(&[
        "run",
        "--data",
        data.to_str().unwrap(),
        "--method",
        "mcp",
        "--backend",
        "network",
        "--endpoint",
        &stub.url,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(String::from_utf8_lossy(&o.stderr).contains("transport failure"));
    let n = stub.request_count();
    assert!((3..=12).contains(&n) && n.is_multiple_of(3), "{n} requests");
    assert!(!out.exists());
}

#[test]
fn network_run_succeeds_against_stub() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path(), &synthetic(3, Split::Dev));
    let stub = StubServer::start(|req, _| {
        let v = if req.continuation == "B" { -0.1 } else { -2.0 };
        StubReply::ok(&[req.continuation.as_str()], &[v])
    });
    let out = dir.path().join("r.json");
    let o = poe(&[
        "run",
        "--data",
        data.to_str().unwrap(),
        "--method",
        "poe",
        "--backend",
        "network",
        "--endpoint",
        &stub.url,
        "--max-parallel",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let traces = report.per_seed[0].instance_traces.as_ref().unwrap();
    assert!(traces.iter().all(|t| t.predicted_index == 1));
}

#[test]
fn convert_prints_stats() {
    let dir = tempfile::tempdir().unwrap();
    let (read, kept, ..) = scienceqa_fixture(&dir.path().join("sqa"));
    let out = dir.path().join("sqa.jsonl");
    let o = poe(&[
        "convert",
        "--dataset",
        "scienceqa",
        "--input",
        dir.path().join("sqa").to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let stats: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(stats["read"], read);
    assert_eq!(stats["kept"], kept);

    let (read, ..) = ai2d_fixture(&dir.path().join("ai2d"));
    let o = poe(&[
        "convert",
        "--dataset",
        "ai2d",
        "--input",
        dir.path().join("ai2d").to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let stats: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(stats["read"], read);

    let o = poe(&[
        "convert",
        "--dataset",
        "ai2d",
        "--input",
        "/nonexistent",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(poe(&[]).status.code(), Some(2));
    assert_eq!(
        poe(&["run", "--method", "lm", "--seeds", "x"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(poe(&["--version"]).status.code(), Some(0));
}
