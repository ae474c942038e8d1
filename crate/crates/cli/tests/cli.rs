use std::path::Path;
use std::process::Command;

use contsysid::data::{load_csv, CsvSchema};
use contsysid_cli::commands::{self, EvalInputs, EXPORT_FILE, PARAMS_FILE, REPORT_FILE};
use contsysid_cli::config::{FlagOverrides, InitialState, RunConfig};
use serde_json::{json, Value};

fn rlc_doc(n_data: usize, n_iter: usize) -> Value {
    json!({
        "dataset": {"rlc": {"generator": {"n": n_data}}},
        "preprocessing": [
            {"normalize": {"channel": "y1"}},
            {"normalize": {"channel": "y2"}},
            {"normalize": {"channel": "u1"}}
        ],
        "model": {
            "structure": {"variant": "fully_observed", "n_x": 2, "n_u": 1, "hidden_f": 8, "activation": "relu"},
            "time_unit": 5e-8
        },
        "training": {"algorithm": "tsem", "n": n_iter, "q": 4, "m": 8, "lr": 1e-3}
    })
}

fn config(dir: &Path, doc: Value) -> RunConfig {
    let path = dir.join("cfg.json");
    std::fs::write(&path, doc.to_string()).unwrap();
    let flags = FlagOverrides {
        out: Some(dir.join("out")),
        ..Default::default()
    };
    RunConfig::load(Some(&path), Vec::<(String, String)>::new(), &flags).unwrap()
}

fn binary() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_contsysid"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

#[test]
fn generate_writes_full_sized_deterministic_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), json!({"dataset": {"rlc": {}}}));
    let first = commands::generate(&cfg).unwrap();
    let ds = load_csv(&first.noisy, &CsvSchema::default()).unwrap();
    assert_eq!(ds.len(), 4000);
    assert!((ds.uniform_step().unwrap() - 0.5e-6).abs() < 1e-15);
    let noisy = std::fs::read(&first.noisy).unwrap();
    commands::generate(&cfg).unwrap();
    assert_eq!(std::fs::read(&first.noisy).unwrap(), noisy);
    assert!(String::from_utf8(noisy).unwrap().contains(&cfg.hash()));

    let cfg = config(
        dir.path(),
        json!({"dataset": {"rlc": {"generator": {"n": 300, "noise_std": [0.0, 0.0]}}}}),
    );
    let out = commands::generate(&cfg).unwrap();
    assert_eq!(
        std::fs::read(&out.clean).unwrap(),
        std::fs::read(&out.noisy).unwrap()
    );
}

#[test]
fn zero_iterations_save_the_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), rlc_doc(200, 0));
    let run = commands::train(&cfg).unwrap();
    assert!(run.fit.j_tot.is_empty());
    let st = contsysid::models::ModelStructure::from_config(cfg.model().unwrap()).unwrap();
    let saved = commands::read_params(&cfg.output_dir.join(PARAMS_FILE)).unwrap();
    assert_eq!(saved, st.init_params(0).into_values());
}

#[test]
fn train_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), rlc_doc(200, 3));
    let run = commands::train(&cfg).unwrap();
    assert_eq!(run.fit.j_tot.len(), 3);
    assert_eq!(run.trajectory.channels, vec!["v_C", "i_L"]);

    // Evaluating on the training record from the fitted state reproduces
    // the training metrics.
    let eval = commands::eval(&cfg, &EvalInputs::default()).unwrap();
    assert_eq!(eval.metrics, run.metrics);
    assert_eq!(eval.x0, run.fit.x0());

    let traj = load_csv(
        cfg.output_dir.join(commands::EVAL_TRAJECTORY_FILE),
        &CsvSchema::default(),
    )
    .unwrap();
    assert_eq!(traj.len(), 200);
    assert_eq!((traj.n_u(), traj.n_y()), (1, 2));

    let path = commands::export(&cfg.output_dir.join(REPORT_FILE), &cfg.output_dir).unwrap();
    let rows = commands::read_export(&path).unwrap();
    assert_eq!(rows, commands::export_rows(&run));
    for loss in ["loss/j_tot", "loss/j_fit", "loss/j_reg"] {
        assert_eq!(rows.iter().filter(|r| r.series == loss).count(), 3);
    }
    for series in [
        "measured/v_C",
        "simulated/v_C",
        "measured/i_L",
        "simulated/i_L",
    ] {
        assert_eq!(
            rows.iter().filter(|r| r.series == series).count(),
            200,
            "{series}"
        );
    }
    assert!(std::fs::read_to_string(&path)
        .unwrap()
        .contains(&run.config_sha256));
}

#[test]
fn end_to_end_runs_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = commands::train(&config(a.path(), rlc_doc(150, 5))).unwrap();
    let rb = commands::train(&config(b.path(), rlc_doc(150, 5))).unwrap();
    assert_eq!(ra.metrics, rb.metrics);
    assert_eq!(ra.fit.theta, rb.fit.theta);
    assert_eq!(ra.config_sha256, rb.config_sha256);
}

#[test]
fn eval_initial_state_options_and_layout_check() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), rlc_doc(120, 2));
    commands::train(&cfg).unwrap();
    for x0 in [
        InitialState::Zeros,
        InitialState::Estimated,
        InitialState::Explicit(vec![0.1, -0.2]),
    ] {
        cfg.evaluation.x0 = x0;
        let r = commands::eval(&cfg, &EvalInputs::default()).unwrap();
        assert!(r.metrics.r2.iter().all(|v| v.is_finite()));
    }
    cfg.evaluation.x0 = InitialState::Explicit(vec![0.0]);
    assert!(commands::eval(&cfg, &EvalInputs::default()).is_err());

    let mut other = cfg.clone();
    other.model = serde_json::from_value(json!({
        "structure": {"variant": "fully_observed", "n_x": 2, "n_u": 1, "hidden_f": 9}
    }))
    .unwrap();
    other.evaluation.x0 = InitialState::Zeros;
    let err = commands::eval(&other, &EvalInputs::default()).unwrap_err();
    assert!(format!("{err:#}").contains("layout mismatch"), "{err:#}");
}

#[test]
fn binary_runs_with_env_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, rlc_doc(120, 50).to_string()).unwrap();
    let out = dir.path().join("run");
    let status = binary()
        .args(["train", "--config"])
        .arg(&path)
        .args(["--seed", "4", "--workers", "1", "--out"])
        .arg(&out)
        .env("CONTSYSID_TRAINING__N", "2")
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    let report = commands::load_report(&out.join(REPORT_FILE)).unwrap();
    assert_eq!(report.fit.j_tot.len(), 2);
    assert_eq!(report.config.seed, Some(4));

    let status = binary()
        .arg("export")
        .arg("--report")
        .arg(out.join(REPORT_FILE))
        .output()
        .unwrap();
    assert!(status.status.success());
    assert!(out.join(EXPORT_FILE).is_file());

    let schema = binary().arg("schema").output().unwrap();
    let schema: Value = serde_json::from_slice(&schema.stdout).unwrap();
    assert!(schema["properties"]["training"].is_object());
}

#[test]
fn binary_reports_errors_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    let doc = json!({"dataset": {"csv": {"path": dir.path().join("absent.csv")}}});
    std::fs::write(&path, doc.to_string()).unwrap();
    let out = binary()
        .args(["train", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));

    let mut doc = rlc_doc(120, 20);
    doc["training"]["lr"] = json!(1e300);
    std::fs::write(&path, doc.to_string()).unwrap();
    let out = binary()
        .args(["train", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("diverged") || stderr.contains("non-finite"),
        "{stderr}"
    );
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let cfg: RunConfig =
            serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        contsysid::models::ModelStructure::from_config(cfg.model().unwrap()).unwrap();
        count += 1;
    }
    assert!(count >= 3);
}
