//! Binary-level checks: subcommand behavior and the exit-code contract
//! (0 success, 2 config, 3 divergence, 4 io/schema).

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cory"))
}

fn outdir(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join("cory_cli_test").join(tag);
    std::fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn config_print_output_parses_back() {
    let out = bin()
        .args(["config-print", "--set", "method=ppo", "--set", "seed=9"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("method = ppo"));
    assert!(text.contains("seed = 9"));
    let dir = outdir("cfgprint");
    let path = dir.join("echo.cfg");
    std::fs::write(&path, &text).unwrap();
    let reparsed = bin()
        .args(["config-print", "--config", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(reparsed.status.success());
    assert_eq!(String::from_utf8(reparsed.stdout).unwrap(), text);
}

#[test]
fn bad_config_exits_with_code_two() {
    let out = bin()
        .args(["config-print", "--set", "no_such_key=1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .args(["train", "--set", "clip_range=7"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_smoke_and_passk_eval() {
    let dir = outdir("train");
    let out = bin()
        .args([
            "train",
            "--set",
            "iterations=2",
            "--set",
            "batch_size=8",
            "--set",
            "pretrain_steps=40",
            "--set",
            "eval_instances=8",
            "--set",
            "run_name=smoke",
            "--out",
            dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let ckpt = dir.join("smoke").join("checkpoint_agent1.bin");
    assert!(ckpt.exists());
    let eval = bin()
        .args([
            "eval-passk",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--k",
            "2",
            "--instances",
            "8",
        ])
        .output()
        .unwrap();
    assert!(
        eval.status.success(),
        "{}",
        String::from_utf8_lossy(&eval.stderr)
    );
    assert!(String::from_utf8_lossy(&eval.stdout).contains("pass@2"));
}

#[test]
fn divergence_exits_with_code_three() {
    let dir = outdir("diverge");
    let out = bin()
        .args([
            "train",
            "--set",
            "optimizer=sgd",
            "--set",
            "learning_rate=1e8",
            "--set",
            "iterations=8",
            "--set",
            "batch_size=8",
            "--set",
            "pretrain_steps=40",
            "--set",
            "run_name=boom",
            "--out",
            dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(dir.join("boom").join("report.json").exists());
}

#[test]
fn io_errors_exit_with_code_four() {
    let out = bin()
        .args(["plot-data", "--out", "/tmp/p.tsv", "/no/such/metrics.tsv"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn plot_data_aggregates_run_metrics() {
    let dir = outdir("plot");
    for seed in [0, 1] {
        let st = bin()
            .args([
                "train",
                "--set",
                "iterations=3",
                "--set",
                "batch_size=8",
                "--set",
                "pretrain_steps=40",
                "--set",
                "eval_instances=4",
                "--set",
                &format!("seed={seed}"),
                "--set",
                &format!("run_name=s{seed}"),
                "--out",
                dir.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(st.success());
    }
    let table = dir.join("agg.tsv");
    let out = bin()
        .args([
            "plot-data",
            "--out",
            table.to_str().unwrap(),
            dir.join("s0").join("metrics.tsv").to_str().unwrap(),
            dir.join("s1").join("metrics.tsv").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(&table).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("iteration\tagent\tn\ttask_reward_mean\ttask_reward_std"));
    // two agents x three iterations, each averaged over two seeds
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.split('\t').nth(2) == Some("2")));
}

#[test]
fn sweep_lr_writes_table() {
    let dir = outdir("sweeplr");
    let out = bin()
        .args([
            "sweep-lr",
            "--set",
            "iterations=2",
            "--set",
            "batch_size=8",
            "--set",
            "pretrain_steps=40",
            "--set",
            "eval_instances=4",
            "--factors",
            "1,10",
            "--seeds",
            "0",
            "--methods",
            "cory",
            "--out",
            dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let table = std::fs::read_to_string(dir.join("sweep-lr").join("lr_grid.tsv")).unwrap();
    assert!(table.contains("learning_rate"));
    assert!(table.lines().filter(|l| l.starts_with("cory")).count() >= 2);
}
