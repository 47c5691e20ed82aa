use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lqpsf::certify;
use lqpsf::filters::{Checkpoint, CheckpointMetadata, FilterConfig, LqpCheckpoint};
use lqpsf::linalg::from_rows;
use lqpsf::model::load_benchmark;
use lqpsf::{LqpParams, SafeSet};
use nalgebra::DVector;

fn lqpsf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lqpsf"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn lqpsf")
}

fn save_checkpoint(dir: &Path, name: &str, params: &LqpParams) -> PathBuf {
    let meta = CheckpointMetadata {
        system: "double_integrator".into(),
        seed: 0,
        git_rev: "test".into(),
        config: serde_json::Value::Null,
    };
    let path = dir.join(name);
    Checkpoint::Lqp(LqpCheckpoint::new(params, &FilterConfig::default(), meta))
        .save(&path)
        .unwrap();
    path
}

fn hexagon() -> SafeSet {
    SafeSet::new(
        from_rows(&[
            &[1.0, 0.0],
            &[-1.0, 0.0],
            &[0.0, 1.0],
            &[0.0, -1.0],
            &[1.0, 1.0],
            &[-1.0, -1.0],
        ]),
        DVector::from_element(6, 0.25),
    )
    .unwrap()
}

#[test]
fn metrics_recompute_from_trajectory_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = lqpsf(
        dir.path(),
        &[
            "eval",
            "--filter",
            "passthrough",
            "--episodes",
            "6",
            "--noise",
            "1",
            "--trajectories",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("eval_out/eval.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let (vio_pct, dev): (f64, f64) = (row[10].parse().unwrap(), row[11].parse().unwrap());

    let (mut steps, mut violating, mut dev_sum) = (0usize, 0usize, 0.0);
    for ep in 0..6 {
        let text = fs::read_to_string(dir.path().join(format!("eval_out/trajectories/n1_ep{ep:03}.csv"))).unwrap();
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
        let (uh, u, v) = (col("u_hat0"), col("u0"), col("violated"));
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            let d = cells[uh].parse::<f64>().unwrap() - cells[u].parse::<f64>().unwrap();
            dev_sum += d * d;
            violating += usize::from(cells[v] == "1");
            steps += 1;
        }
    }
    assert_eq!(steps, 600);
    assert!((100.0 * violating as f64 / steps as f64 - vio_pct).abs() <= 1e-10);
    assert!((dev_sum / 6.0 - dev).abs() <= 1e-10);
}

#[test]
fn bad_configuration_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"eval": {"episodes": 3, "typo": 1}}"#).unwrap();
    fs::write(dir.path().join("neg.json"), r#"{"filter": {"alpha": -1.0}}"#).unwrap();
    for args in [
        vec!["--config", "bad.json", "flops"],
        vec!["--config", "neg.json", "flops"],
        vec!["--config", "missing.json", "flops"],
        vec!["eval", "--system", "no_such_system"],
        vec!["verify", "--checkpoint", "missing.json"],
    ] {
        let out = lqpsf(dir.path(), &args);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let out = lqpsf(dir.path(), &["eval", "--episodes", "not_a_number"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"eval": {"episodes": 3, "noise_levels": [0.0, 2.0], "task": "tracking"}}"#,
    )
    .unwrap();
    let out = lqpsf(dir.path(), &["--config", "cfg.json", "eval", "--filter", "psf"]);
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("eval_out/eval.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    for row in &rows {
        assert_eq!(row[1], "tracking");
        assert_eq!(row[7], "3");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval_out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["eval"]["episodes"], 3);
}

#[test]
fn verify_passes_on_an_invariant_set() {
    let dir = tempfile::tempdir().unwrap();
    let s = load_benchmark("double_integrator").unwrap();
    let safe = hexagon();
    let params = certify::safe_set_params(&s.model, &safe, &s.input_bounds, 4).unwrap();
    let ck = save_checkpoint(dir.path(), "safe.json", &params);
    fs::write(dir.path().join("set.json"), serde_json::to_string(&safe).unwrap()).unwrap();
    let out = lqpsf(
        dir.path(),
        &[
            "verify",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--safe-set",
            "set.json",
            "--samples",
            "500",
            "--grid",
            "0.05",
        ],
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(stdout.starts_with("PASS"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("verify_out/verify.json")).unwrap()).unwrap();
    assert_eq!(report["samples"]["verdict"], "PASS");
    assert_eq!(report["grid"]["verdict"], "PASS");
}

#[test]
fn export_round_trips_through_the_parser() {
    let dir = tempfile::tempdir().unwrap();
    let s = load_benchmark("double_integrator").unwrap();
    let params = certify::vacuous_params(2, &s.input_bounds, 4, 6).unwrap();
    let ck = save_checkpoint(dir.path(), "vac.json", &params);
    let out = lqpsf(
        dir.path(),
        &["export-sdp", "--checkpoint", ck.to_str().unwrap(), "--out", "c.dat-s"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("c.dat-s")).unwrap();
    let sdp = certify::parse_sdpa(&text).unwrap();
    assert_eq!(certify::write_sdpa(&sdp), text);
    // 1 + n + m + m_G + n_qp + m_qp
    assert_eq!(sdp.moment_dim, 1 + 2 + 1 + 4 + 4 + 6);
}

#[test]
fn flops_report_is_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let out = lqpsf(dir.path(), &["flops", "--system", "cartpole"]);
    assert!(out.status.success());
    let reports: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("flops_out/flops.json")).unwrap()).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 3);
    for r in reports {
        let sum: u64 = r["phases"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| p["flops"].as_u64().unwrap())
            .sum();
        assert_eq!(sum, r["total"].as_u64().unwrap());
    }
}

#[test]
fn short_training_run_writes_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"train": {"ppo": {"total_updates": 2, "rollout_steps": 200, "minibatch_size": 100, "epochs_per_update": 2},
                     "eval_every": 1, "eval_episodes": 2}}"#,
    )
    .unwrap();
    for filter in ["lqp", "mlp"] {
        let out_dir = format!("run_{filter}");
        let out = lqpsf(
            dir.path(),
            &[
                "--config",
                "cfg.json",
                "train",
                "--filter",
                filter,
                "--seed",
                "3",
                "--out-dir",
                &out_dir,
            ],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let run = dir.path().join(&out_dir);
        let ck = Checkpoint::load(run.join("checkpoint.json")).unwrap();
        assert_eq!(ck.metadata().seed, 3);
        let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 2);
        assert!(run.join("manifest.json").exists());

        let eval = lqpsf(
            dir.path(),
            &[
                "eval",
                "--filter",
                run.join("checkpoint.json").to_str().unwrap(),
                "--episodes",
                "2",
                "--noise",
                "0",
            ],
        );
        assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    }
}
