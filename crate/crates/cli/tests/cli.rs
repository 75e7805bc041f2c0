use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use diprl_core::envs::{make_env, EnvOptions};
use diprl_core::extract::discretize;
use diprl_core::program::{DiscreteProgram, ProgramContext};
use diprl_core::trainer::metrics::{parse_csv, HEADER};
use diprl_core::trainer::{Checkpoint, RegularizerMode, TrainConfig};

fn diprl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diprl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = diprl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn reference_program() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/cartpole_reference.prog")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A short CartPole run: 4 rollouts of 512 steps, evaluated after every two.
fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("small.json");
    let text = format!(
        r#"{{"env": "cartpole", "total_steps": 2048, "rollout_length": 512, "checkpoint_every": 2,
            "eval": {{"episodes": 5, "every": 2, "seed": 10000}}{extra}}}"#
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn train_populates_the_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let run = tmp.path().join("run");
    let stdout = ok(&["train", "--config", s(&cfg), "--seed", "5", "--sequential", "--run-dir", s(&run)]);
    assert!(stdout.contains("normalized entropy"));
    for f in ["config.json", "metrics.csv", "final.prog", "extraction_report.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert!(run.join("checkpoints/step_1024.json").is_file());
    assert!(run.join("checkpoints/step_2048.json").is_file());
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), HEADER);
    assert_eq!(parse_csv(&csv).unwrap().len(), 2);

    let echo: TrainConfig = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo.seed, 5);
    assert_eq!(echo.gamma, Some(0.99));

    let inspect = ok(&["inspect", "--checkpoint", s(&run.join("checkpoints/step_2048.json"))]);
    assert!(inspect.contains("p_d: [") && inspect.contains("argmax depth"));
}

#[test]
fn echoed_config_reproduces_metrics_bit_for_bit() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["train", "--config", s(&cfg), "--sequential", "--run-dir", s(&a)]);
    ok(&["train", "--config", s(&a.join("config.json")), "--sequential", "--run-dir", s(&b)]);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("config.json")).unwrap(), fs::read(b.join("config.json")).unwrap());
    assert_eq!(fs::read(a.join("final.prog")).unwrap(), fs::read(b.join("final.prog")).unwrap());
}

#[test]
fn eval_of_the_final_program_matches_the_logged_greedy_return() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let run = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--sequential", "--run-dir", s(&run)]);
    let rows = parse_csv(&fs::read_to_string(run.join("metrics.csv")).unwrap()).unwrap();
    let logged = rows.last().unwrap().eval_return_greedy;
    let out = tmp.path().join("eval.json");
    ok(&[
        "eval",
        "--program",
        s(&run.join("final.prog")),
        "--env",
        "cartpole",
        "--episodes",
        "5",
        "--seed",
        "10000",
        "--out",
        s(&out),
    ]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(report["program"]["mean"].as_f64().unwrap().to_bits(), logged.to_bits());
}

#[test]
fn config_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let unknown = small_config(tmp.path(), r#", "learning_rate": 0.1"#);
    let run = tmp.path().join("run");
    for args in [
        vec!["train", "--config", s(&unknown), "--run-dir", s(&run)],
        vec!["train", "--env", "pong", "--run-dir", s(&run)],
        vec!["train", "--target-frac", "1.5", "--run-dir", s(&run)],
        vec!["train", "--max-depth", "0", "--run-dir", s(&run)],
        vec!["eval", "--program", s(&reference_program())],
    ] {
        let out = diprl(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(!run.exists());
}

#[test]
fn ablation_overrides_reach_the_config_echo() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    ok(&[
        "train",
        "--total-steps",
        "0",
        "--alpha-fixed",
        "0.5",
        "--target-frac",
        "0.1",
        "--run-dir",
        s(&run),
    ]);
    let echo: TrainConfig = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo.regularizer.mode, RegularizerMode::Fixed);
    assert_eq!(echo.regularizer.alpha_fixed, 0.5);
    assert_eq!(echo.target_entropy(), 0.1 * 6f64.ln());
}

#[test]
fn reference_program_scores_500() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("eval.json");
    let stdout = ok(&["eval", "--program", s(&reference_program()), "--env", "cartpole", "--out", s(&out)]);
    assert!(stdout.contains("500.00 ± 0.00 over 30 episodes"), "{stdout}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(report["program"]["mean"].as_f64(), Some(500.0));
}

#[test]
fn single_episode_eval_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let prog = reference_program();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&["eval", "--program", s(&prog), "--env", "cartpole", "--episodes", "1", "--seed", "3", "--out", s(&out)]);
        fs::read_to_string(out).unwrap()
    };
    assert_eq!(run("a.json"), run("b.json"));
}

#[test]
fn program_with_too_many_features_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let prog = tmp.path().join("wide.prog");
    fs::write(&prog, "if (1 * f0 + 2 * f4 > 0):\n    Left\nelse:\n    Right\n").unwrap();
    let out = diprl(&["eval", "--program", s(&prog), "--env", "cartpole"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dimension"), "{err}");
}

#[test]
fn extraction_from_an_untrained_checkpoint_is_depth_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("frozen.json");
    fs::write(
        &cfg,
        r#"{"total_steps": 512, "rollout_length": 512, "checkpoint_every": 1, "ppo": {"lr": 0.0}}"#,
    )
    .unwrap();
    let run = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--run-dir", s(&run)]);
    let ck_path = run.join("checkpoints/step_512.json");
    let out_dir = tmp.path().join("extracted");
    let stdout = ok(&["extract", "--checkpoint", s(&ck_path), "--out-dir", s(&out_dir)]);
    assert!(stdout.contains("depth 1") && stdout.contains("bound chain holds"), "{stdout}");

    let ck = Checkpoint::load(&ck_path).unwrap();
    let (expected, _) = discretize(&ck.policy).unwrap();
    assert_eq!(expected.depth(), 1);
    let env = make_env("cartpole", &EnvOptions::default()).unwrap();
    let ctx = ProgramContext::for_env(env.as_ref(), 6);
    let text = fs::read_to_string(out_dir.join("final.prog")).unwrap();
    assert!(DiscreteProgram::parse(&text, &ctx).unwrap().bit_eq(&expected));
}

#[test]
fn extracted_coefficients_survive_the_text_file_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let run = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--run-dir", s(&run)]);
    let ck = Checkpoint::load(&run.join("checkpoints/step_2048.json")).unwrap();
    let (expected, _) = discretize(&ck.policy).unwrap();
    let env = make_env("cartpole", &EnvOptions::default()).unwrap();
    let ctx = ProgramContext::for_env(env.as_ref(), 6);
    let parsed = DiscreteProgram::parse(&fs::read_to_string(run.join("final.prog")).unwrap(), &ctx).unwrap();
    assert!(parsed.bit_eq(&expected));
}

#[test]
fn corrupt_checkpoint_reports_its_version() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"version": 7}"#).unwrap();
    let out = diprl(&["extract", "--checkpoint", s(&bad)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("version 7"));
}

#[test]
fn verify_theory_is_deterministic_and_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.json");
    let b = tmp.path().join("b.json");
    for p in [&a, &b] {
        let out = diprl(&["verify-theory", "--seed", "3", "--n-instances", "20", "--out", s(p)]);
        assert!(out.status.success());
        assert!(String::from_utf8_lossy(&out.stderr).contains("PASS"));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let reports: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(&a).unwrap()).unwrap();
    assert_eq!(reports.len(), 20);

    let out = diprl(&["verify-theory", "--n-instances", "0"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn gradcheck_reports_small_errors() {
    let stdout = ok(&["gradcheck", "--cases", "10"]);
    assert_eq!(stdout.lines().filter(|l| l.ends_with(" ok")).count(), 3, "{stdout}");
}

#[test]
fn plot_draws_every_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let run = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--run-dir", s(&run)]);
    ok(&["plot", "--run-dir", s(&run)]);
    for f in ["return.svg", "arch_entropy.svg", "norm_entropy.svg"] {
        let svg = fs::read_to_string(run.join("plots").join(f)).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"), "{f}");
    }
    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    fs::write(empty.join("metrics.csv"), format!("{HEADER}\n")).unwrap();
    assert!(!diprl(&["plot", "--run-dir", s(&empty)]).status.success());
}
