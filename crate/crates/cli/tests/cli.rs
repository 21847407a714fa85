use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ceem_cli::ExperimentConfig;

const LTI: &str = r#"
[model]
id = "lti"

[model.lti]
a = [[0.9, 0.2], [-0.2, 0.9]]
c = [[1.0, 0.0]]
free = ["A[0,0]", "A[0,1]"]

[data]
horizon = 60
dt = 1.0
trajectories = 3
sigma_w = 0.05
sigma_v = 0.1
seed = 3
test_trajectories = 2

[ceem]
max_epochs = 5

[pem]
epochs = 3
particles = 20
backward_samples = 2
"#;

fn ceem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ceem"))
        .args(args)
        .env_remove("CEEM_OUT_DIR")
        .env_remove("CEEM_THREADS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn fit_then_evaluate_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "lti.toml", LTI);
    let out = tmp.path().join("out");
    let fit = ceem(&["--out-dir", s(&out), "fit", "--config", s(&config)]);
    assert!(fit.status.success(), "{}", String::from_utf8_lossy(&fit.stderr));
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,J,eps,wall_s,theta_0,theta_1"));
    assert!(history.lines().count() >= 2);

    let echoed = ExperimentConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!(echoed, ExperimentConfig::load(&config).unwrap());

    let eval = ceem(&["--out-dir", s(&out), "evaluate", "--config", s(&config), "--params", s(&out.join("params.toml"))]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let stdout = String::from_utf8_lossy(&eval.stdout);
    assert!(stdout.contains("Q = I, R = I, Sigma0 = I, x0 = 0, drop_first = 25"), "{stdout}");
    for f in ["metrics_train.csv", "metrics_test.csv", "evaluation.toml"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let summary: toml::Value = toml::from_str(&fs::read_to_string(out.join("evaluation.toml")).unwrap()).unwrap();
    assert_eq!(summary["ekf"]["drop_first"].as_integer(), Some(25));
    assert_eq!(summary["test"]["trajectories"].as_integer(), Some(2));
    assert!(summary["train"]["eps"].as_float().unwrap() >= 0.0);
}

#[test]
fn fit_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "lti.toml", LTI);
    let read = |dir: &str| {
        let out = tmp.path().join(dir);
        assert!(ceem(&["--out-dir", s(&out), "fit", "--config", s(&config), "--seed", "7"]).status.success());
        let params = fs::read_to_string(out.join("params.toml")).unwrap();
        let history: Vec<String> = fs::read_to_string(out.join("history.csv"))
            .unwrap()
            .lines()
            // Wall time differs between runs.
            .map(|l| l.split(',').enumerate().filter(|(i, _)| *i != 3).map(|(_, v)| v).collect::<Vec<_>>().join(","))
            .collect();
        (params, history)
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn simulated_dataset_can_be_refit() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "lti.toml", LTI);
    let out = tmp.path().join("sim");
    let sim = ceem(&["--out-dir", s(&out), "simulate", "--config", s(&config)]);
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    assert!(out.join("data/manifest.toml").exists());

    let from_data = LTI.replace("seed = 3", "seed = 3\ndataset = \"sim/data\"");
    let config = write_config(tmp.path(), "refit.toml", &from_data);
    let fit_out = tmp.path().join("fit");
    let fit = ceem(&["--out-dir", s(&fit_out), "fit", "--config", s(&config), "--algorithm", "pem"]);
    assert!(fit.status.success(), "{}", String::from_utf8_lossy(&fit.stderr));
    let params = fs::read_to_string(fit_out.join("params.toml")).unwrap();
    assert!(params.contains("pem"), "{params}");
}

#[test]
fn out_dir_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "lti.toml", LTI);
    let out = tmp.path().join("env-out");
    let status = Command::new(env!("CARGO_BIN_EXE_ceem"))
        .args(["simulate", "--config", s(&config)])
        .env("CEEM_OUT_DIR", &out)
        .env("CEEM_THREADS", "1")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("data/manifest.toml").exists());
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        ("unknown.toml", LTI.replace("[ceem]", "[ceem]\nbogus = 1")),
        ("missing.toml", LTI.replace("sigma_v = 0.1\n", "")),
        ("model.toml", LTI.replace("id = \"lti\"", "id = \"pendulum\"")),
        ("entry.toml", LTI.replace("A[0,1]", "Q[0,1]")),
    ];
    for (name, text) in cases {
        let config = write_config(tmp.path(), name, &text);
        let out = ceem(&["--out-dir", s(&tmp.path().join("x")), "fit", "--config", s(&config)]);
        assert_eq!(out.status.code(), Some(2), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!out.stderr.is_empty());
    }
    let out = ceem(&["fit", "--config", s(&tmp.path().join("absent.toml"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = ceem(&["fit", "--config", s(&tmp.path().join("unknown.toml")), "--threads", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "lti.toml", &LTI.replace("seed = 3", "seed = 3\ndataset = \"nowhere\""));
    let out = ceem(&["--out-dir", s(&tmp.path().join("x")), "fit", "--config", s(&config)]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn reproduce_table1_writes_summary_and_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("t1");
    let run = ceem(&["--out-dir", s(&out), "reproduce", "table1", "--seeds", "2", "--max-epochs", "3"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let mut reader = csv::Reader::from_path(out.join("table1_summary.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert_eq!(&headers[4], "mean");
    assert_eq!(&headers[5], "std_error");
    assert_eq!(&headers[6], "seeds");
    let rows: Vec<_> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 15);
    assert!(rows.iter().all(|r| &r[6] == "2"));
    assert!(out.join("table1_runs/row0_seed0.csv").exists());
    assert!(out.join("table1_failures.csv").exists());
}

#[test]
fn full_flag_is_only_for_fig3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ceem(&["--out-dir", s(tmp.path()), "reproduce", "table1", "--full"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bundled_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut count = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let config = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(ExperimentConfig::parse(&config.to_toml()).unwrap(), config);
        ceem_cli::setup::Setup::build(&config).unwrap();
        count += 1;
    }
    assert!(count >= 4);
}
