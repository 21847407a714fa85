//! The four subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use ceem::eval::{ekf_evaluate, EkfSettings, MetricReport};
use ceem::experiments::{
    epochs_to_reach, max_relative_error, median, run_fig2, run_fig3, run_table1, Fig2Config, Fig3Config, Summary, Table1Config,
};
use ceem::report::{read_params, write_history, write_metrics, write_params, FinalParams};
use ceem::simulate::write_dataset;
use ceem::{ceem_fit, pem_fit, FitProblem, FitReport, TrajectoryDataset, TruthEvaluator, Vector};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::setup::Setup;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Ceem,
    Pem,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Ceem => "ceem",
            Algorithm::Pem => "pem",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// ε(θ) when the truth is known, plus prediction RMSE.
    All,
    Eps,
    Rmse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Table1,
    Fig2,
    Fig3Reduced,
}

/// Overrides for `reproduce`.
#[derive(Debug, Clone, Default)]
pub struct ReproduceOptions {
    pub seeds: Option<usize>,
    pub max_epochs: Option<usize>,
    pub system_seed: Option<u64>,
    /// Six coupled attractors and four seeds for fig3.
    pub full: bool,
}

fn write_config_echo(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    fs::write(out.join("config.toml"), config.to_toml())?;
    Ok(())
}

pub fn simulate(config: &ExperimentConfig, seed: u64, out: &Path) -> Result<PathBuf, CliError> {
    let setup = Setup::build(config)?;
    let ds = setup.simulate(config, config.data.trajectories, seed)?;
    let dir = out.join("data");
    write_dataset(&ds, &dir)?;
    let m = &ds.manifest;
    println!(
        "wrote {} trajectories of model {} (n = {}, m = {}, p = {}, T = {}, dt = {}, seed = {}) to {}",
        m.num_trajectories,
        m.model_id,
        m.n,
        m.m,
        m.p,
        m.horizon,
        m.dt,
        m.seed,
        dir.display()
    );
    Ok(dir)
}

pub fn fit(config: &ExperimentConfig, algorithm: Algorithm, seed: u64, out: &Path) -> Result<FitReport, CliError> {
    let setup = Setup::build(config)?;
    let ds = setup.training_data(config, seed)?;
    let truth = setup.known_truth(config, &ds);
    let evaluator = truth.map(|t| TruthEvaluator::new(t, setup.initial.clone(), seed));
    let theta0 = setup.theta_init(config, seed);
    fs::create_dir_all(out)?;
    write_config_echo(config, out)?;
    let report = match algorithm {
        Algorithm::Ceem => {
            let cfg = config.ceem_config(setup.prior())?;
            let mut problem = FitProblem::new(setup.model.as_ref(), &setup.fit_noise, &ds.trajectories);
            if let Some(e) = &evaluator {
                problem = problem.with_truth(e);
            }
            ceem_fit(&problem, &theta0, &cfg)?
        }
        Algorithm::Pem => {
            let cfg = config.pem_config(setup.initial.clone(), seed)?;
            let mut problem = FitProblem::new(setup.model.as_ref(), &setup.data_noise, &ds.trajectories);
            if let Some(e) = &evaluator {
                problem = problem.with_truth(e);
            }
            pem_fit(&problem, &theta0, &cfg)?
        }
    };
    write_history(&report, &out.join(&config.output.history))?;
    write_params(&FinalParams::from_report(&report, setup.model_id.as_str()), &out.join(&config.output.params))?;
    let last = report.final_record();
    println!(
        "{} finished after {} epochs ({}): objective {:.6e}{}",
        algorithm.as_str(),
        report.epochs.len(),
        report.termination.as_str(),
        last.objective,
        last.dynamics_error.map(|e| format!(", eps {:.4e}", e.mean)).unwrap_or_default()
    );
    Ok(report)
}

fn ekf_report(setup: &Setup, theta: &Vector, data: &TrajectoryDataset, eps: Option<ceem::eval::McEstimate>) -> Result<MetricReport, CliError> {
    let settings = EkfSettings::identity(setup.model.state_dim(), setup.model.obs_dim());
    let rmse = data
        .trajectories
        .iter()
        .map(|tr| ekf_evaluate(setup.model.as_ref(), theta, &tr.y, &tr.u, &settings).map(|e| e.rmse))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MetricReport::new(rmse, eps))
}

/// Scores fitted parameters. Returns the train and, when possible, test reports.
pub fn evaluate(config: &ExperimentConfig, params_path: &Path, metric: Metric, seed: u64, out: &Path) -> Result<Vec<(String, MetricReport)>, CliError> {
    let setup = Setup::build(config)?;
    let params: FinalParams = read_params(params_path)?;
    if params.model_id != setup.model_id.as_str() {
        return Err(CliError::Config(format!(
            "{} holds parameters of model {:?}, config uses {:?}",
            params_path.display(),
            params.model_id,
            setup.model_id.as_str()
        )));
    }
    let theta = params.theta();
    if theta.len() != setup.truth.len() {
        return Err(CliError::Config(format!("{} has {} parameters, model expects {}", params_path.display(), theta.len(), setup.truth.len())));
    }
    let train = setup.training_data(config, seed)?;
    let truth = setup.known_truth(config, &train);
    if metric == Metric::Eps && truth.is_none() {
        return Err(CliError::Config("eps requested but the dataset manifest has no theta_true".into()));
    }
    let eps = match (&truth, metric) {
        (Some(t), Metric::All | Metric::Eps) => Some(TruthEvaluator::new(t.clone(), setup.initial.clone(), seed).evaluate(setup.model.as_ref(), &theta)?),
        _ => None,
    };
    fs::create_dir_all(out)?;
    let settings = EkfSettings::identity(setup.model.state_dim(), setup.model.obs_dim());
    println!("EKF settings: Q = I, R = I, Sigma0 = I, x0 = 0, drop_first = {}", settings.drop_first);
    if let Some(e) = eps {
        println!("eps = {:.6e} (std error {:.2e})", e.mean, e.std_error);
    }

    let mut reports = Vec::new();
    if metric == Metric::Eps {
        reports.push(("train".to_string(), MetricReport::new(Vec::new(), eps)));
    } else {
        reports.push(("train".to_string(), ekf_report(&setup, &theta, &train, eps)?));
        if truth.is_some() && config.data.test_trajectories > 0 {
            let test = setup.simulate(config, config.data.test_trajectories, config.data.test_seed)?;
            reports.push(("test".to_string(), ekf_report(&setup, &theta, &test, eps)?));
        }
    }
    let mut summary = format!(
        "[ekf]\nq = \"I\"\nr = \"I\"\nsigma0 = \"I\"\nx0 = \"0\"\ndrop_first = {}\n\n[params]\nfile = {:?}\nmodel_id = {:?}\n",
        settings.drop_first,
        params_path.display().to_string(),
        params.model_id
    );
    for (name, report) in &reports {
        let path = out.join(format!("{}_{name}.csv", config.output.metrics));
        write_metrics(report, &path)?;
        summary.push_str(&format!("\n[{name}]\ntrajectories = {}\n", report.per_trajectory_rmse.len()));
        if !report.per_trajectory_rmse.is_empty() {
            summary.push_str(&format!("mean_rmse = {:e}\nstd_rmse = {:e}\n", report.mean_rmse, report.std_rmse));
            println!("{name}: mean RMSE {:.6e} over {} trajectories", report.mean_rmse, report.per_trajectory_rmse.len());
        }
        if let Some(e) = report.dynamics_error {
            summary.push_str(&format!("eps = {:e}\neps_std_error = {:e}\n", e.mean, e.std_error));
        }
    }
    fs::write(out.join("evaluation.toml"), summary)?;
    Ok(reports)
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_failures<'a>(path: &Path, failures: impl IntoIterator<Item = (String, u64, &'a str)>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["group", "seed", "message"])?;
    for (group, seed, message) in failures {
        w.write_record([group, seed.to_string(), message.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Appends one report's records to a learning-curve writer.
fn write_curve(w: &mut csv::Writer<fs::File>, prefix: &[String], report: &FitReport, truth: &Vector) -> Result<(), CliError> {
    for r in report.records() {
        let mut row = prefix.to_vec();
        row.push(r.epoch.to_string());
        row.push(fmt(r.objective));
        row.push(r.dynamics_error.map(|e| fmt(e.mean)).unwrap_or_default());
        row.push(fmt(r.wall_seconds));
        row.push(fmt(max_relative_error(&r.theta, truth)));
        row.extend(r.theta.iter().map(|v| fmt(*v)));
        w.write_record(&row)?;
    }
    Ok(())
}

fn curve_header(prefix: &[&str], params: usize) -> Vec<String> {
    let mut h: Vec<String> = prefix.iter().map(|s| s.to_string()).collect();
    h.extend(["epoch", "J", "eps", "wall_s", "max_rel_error"].map(String::from));
    h.extend((0..params).map(|i| format!("theta_{i}")));
    h
}

const LORENZ_NAMES: [&str; 3] = ["sigma", "rho", "beta"];

pub fn reproduce(experiment: Experiment, options: &ReproduceOptions, out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    match experiment {
        Experiment::Table1 => reproduce_table1(options, out),
        Experiment::Fig2 => reproduce_fig2(options, out),
        Experiment::Fig3Reduced => reproduce_fig3(options, out),
    }
}

fn reproduce_table1(options: &ReproduceOptions, out: &Path) -> Result<(), CliError> {
    let mut config = Table1Config::default();
    if let Some(s) = options.seeds {
        config.seeds = s;
    }
    if let Some(e) = options.max_epochs {
        config.max_epochs = e;
    }
    if let Some(s) = options.system_seed {
        config.system_seed = s;
    }
    let result = run_table1(&config)?;
    let runs_dir = out.join("table1_runs");
    fs::create_dir_all(&runs_dir)?;

    let mut summary = csv::Writer::from_path(out.join("table1_summary.csv"))?;
    summary.write_record(["sigma_w", "sigma_v", "parameter", "truth", "mean", "std_error", "seeds", "failed_seeds", "z", "bias_flag"])?;
    let mut finals = csv::Writer::from_path(out.join("table1_estimates.csv"))?;
    finals.write_record(["sigma_w", "sigma_v", "seed", "epochs", "termination", "sigma", "rho", "beta"])?;
    let mut failures = Vec::new();
    for (r, row) in result.rows.iter().enumerate() {
        for (seed, report) in &row.runs {
            write_history(report, &runs_dir.join(format!("row{r}_seed{seed}.csv")))?;
            let mut rec = vec![row.sigma_w.to_string(), row.sigma_v.to_string(), seed.to_string(), report.epochs.len().to_string()];
            rec.push(report.termination.as_str().to_string());
            rec.extend(report.theta.iter().map(|v| fmt(*v)));
            finals.write_record(&rec)?;
        }
        for f in &row.failures {
            failures.push((format!("row{r}"), f.seed, f.message.as_str()));
        }
        let empty = Summary { mean: Vector::from_element(3, f64::NAN), std_error: Vector::from_element(3, f64::NAN), count: 0 };
        let s = row.summary.as_ref().unwrap_or(&empty);
        println!("table1 (sigma_w = {}, sigma_v = {}), {} seeds:", row.sigma_w, row.sigma_v, s.count);
        for (i, name) in LORENZ_NAMES.iter().enumerate() {
            let z = (s.mean[i] - result.truth[i]) / s.std_error[i];
            let flag = z.abs() > 2.0;
            summary.write_record([
                row.sigma_w.to_string(),
                row.sigma_v.to_string(),
                name.to_string(),
                fmt(result.truth[i]),
                fmt(s.mean[i]),
                fmt(s.std_error[i]),
                s.count.to_string(),
                row.failures.len().to_string(),
                fmt(z),
                flag.to_string(),
            ])?;
            println!("  {name:>5}: {:.4} ({:.4}){}", s.mean[i], s.std_error[i], if flag { "  biased at 2 SE" } else { "" });
        }
    }
    summary.flush()?;
    finals.flush()?;
    write_failures(&out.join("table1_failures.csv"), failures)?;
    Ok(())
}

fn reproduce_fig2(options: &ReproduceOptions, out: &Path) -> Result<(), CliError> {
    let mut config = Fig2Config::default();
    if let Some(s) = options.seeds {
        config.seeds = s;
    }
    if let Some(e) = options.max_epochs {
        config.ceem_epochs = e;
        config.pem_epochs = e;
    }
    if let Some(s) = options.system_seed {
        config.system_seed = s;
    }
    let result = run_fig2(&config)?;
    let truth = &result.truth;
    let runs_dir = out.join("fig2_runs");
    fs::create_dir_all(&runs_dir)?;
    let mut curves = csv::Writer::from_path(out.join("fig2_curves.csv"))?;
    curves.write_record(curve_header(&["algorithm", "seed"], truth.len()))?;
    let mut stats: Vec<(&str, Vec<Option<usize>>, Vec<f64>)> = vec![("ceem", Vec::new(), Vec::new()), ("pem", Vec::new(), Vec::new())];
    for run in &result.runs {
        for (k, report) in [Some(&run.ceem), run.pem.as_ref()].into_iter().enumerate() {
            let Some(report) = report else { continue };
            let name = stats[k].0;
            write_history(report, &runs_dir.join(format!("{name}_seed{}.csv", run.seed)))?;
            write_curve(&mut curves, &[name.to_string(), run.seed.to_string()], report, truth)?;
            stats[k].1.push(epochs_to_reach(report, truth, 0.02));
            stats[k].2.push(report.seconds_per_epoch());
        }
    }
    curves.flush()?;
    let mut summary = csv::Writer::from_path(out.join("fig2_summary.csv"))?;
    summary.write_record([
        "algorithm",
        "seeds",
        "within_2pct_by_epoch_10",
        "median_epochs_to_2pct",
        "mean_seconds_per_epoch",
        "std_error_seconds_per_epoch",
        "failed_seeds",
    ])?;
    for (name, reach, secs) in &stats {
        if reach.is_empty() {
            continue;
        }
        let fast = reach.iter().filter(|e| e.is_some_and(|v| v <= 10)).count();
        let mut epochs: Vec<f64> = reach.iter().map(|e| e.map_or(f64::INFINITY, |v| v as f64)).collect();
        let t = Summary::of(&secs.iter().map(|s| Vector::from_element(1, *s)).collect::<Vec<_>>()).expect("nonempty");
        let med = median(&mut epochs);
        summary.write_record([
            name.to_string(),
            reach.len().to_string(),
            fast.to_string(),
            fmt(med),
            fmt(t.mean[0]),
            fmt(t.std_error[0]),
            result.failures.len().to_string(),
        ])?;
        println!("fig2 {name}: {fast}/{} seeds within 2% by epoch 10, median epochs to 2% {med}, {:.3} s/epoch", reach.len(), t.mean[0]);
    }
    summary.flush()?;
    write_failures(&out.join("fig2_failures.csv"), result.failures.iter().map(|f| ("fig2".to_string(), f.seed, f.message.as_str())))?;
    Ok(())
}

fn reproduce_fig3(options: &ReproduceOptions, out: &Path) -> Result<(), CliError> {
    let mut config = if options.full { Fig3Config::full() } else { Fig3Config::default() };
    if let Some(s) = options.seeds {
        config.seeds = s;
    }
    if let Some(e) = options.max_epochs {
        config.max_epochs = e;
    }
    if let Some(s) = options.system_seed {
        config.system_seed = s;
    }
    let result = run_fig3(&config)?;
    let runs_dir = out.join("fig3_runs");
    fs::create_dir_all(&runs_dir)?;
    let mut curves = csv::Writer::from_path(out.join("fig3_curves.csv"))?;
    curves.write_record(curve_header(&["batch_size", "seed"], result.truth.len()))?;
    let mut runs: Vec<&ceem::experiments::Fig3Run> = result.runs.iter().collect();
    runs.sort_by_key(|r| (r.batch_size, r.seed));
    for run in &runs {
        write_history(&run.report, &runs_dir.join(format!("batch{}_seed{}.csv", run.batch_size, run.seed)))?;
        write_curve(&mut curves, &[run.batch_size.to_string(), run.seed.to_string()], &run.report, &result.truth)?;
    }
    curves.flush()?;
    let mut summary = csv::Writer::from_path(out.join("fig3_summary.csv"))?;
    summary.write_record(["batch_size", "seeds", "median_initial_eps", "median_final_eps", "mean_final_eps", "std_error_final_eps", "failed_seeds"])?;
    for &b in &config.batch_sizes {
        let group: Vec<_> = runs.iter().filter(|r| r.batch_size == b).collect();
        let mut initial: Vec<f64> = group.iter().map(|r| r.initial_error()).collect();
        let mut finals: Vec<f64> = group.iter().map(|r| r.final_error()).collect();
        let failed = result.failures.iter().filter(|(fb, _)| *fb == b).count();
        let s = Summary::of(&finals.iter().map(|v| Vector::from_element(1, *v)).collect::<Vec<_>>());
        let (mean, se) = s.map_or((f64::NAN, f64::NAN), |s| (s.mean[0], s.std_error[0]));
        let med_final = median(&mut finals);
        summary.write_record([
            b.to_string(),
            group.len().to_string(),
            fmt(median(&mut initial)),
            fmt(med_final),
            fmt(mean),
            fmt(se),
            failed.to_string(),
        ])?;
        println!("fig3 batch {b}: median final eps {med_final:.4e} over {} seeds", group.len());
    }
    summary.flush()?;
    write_failures(
        &out.join("fig3_failures.csv"),
        result.failures.iter().map(|(b, f)| (format!("batch{b}"), f.seed, f.message.as_str())),
    )?;
    Ok(())
}
