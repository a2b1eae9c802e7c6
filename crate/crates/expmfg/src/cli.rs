//! Experiment orchestration behind the `expmfg` binary: config loading,
//! solver dispatch, CSV/JSON outputs and a run manifest.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::json;

use crate::assumptions::{self, NormMode};
use crate::closed_form;
use crate::config_io::{self, ConfigExtras};
use crate::error::{Error, Result};
use crate::market::{sample_paths, GameConfig};
use crate::mfg::{self, CommonNoiseOpts, IndependentOpts};
use crate::nplayer::{self, DeviationInit, FbsdeSolution, SolverOpts};
use crate::verification::{self, default_perturbations, nash_deviation_test_with_threshold};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    ClosedForm,
    SolveNplayer,
    SolveMfg,
    VerifyNash,
    Converge,
    CheckAssumptions,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::ClosedForm => "closed-form",
            Command::SolveNplayer => "solve-nplayer",
            Command::SolveMfg => "solve-mfg",
            Command::VerifyNash => "verify-nash",
            Command::Converge => "converge",
            Command::CheckAssumptions => "check-assumptions",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MfgMode {
    Common,
    Independent,
    March,
}

/// Flags shared across subcommands; unset values fall back to defaults.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub config_path: PathBuf,
    pub out_dir: PathBuf,
    pub blocks: usize,
    pub copies: usize,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub tol: f64,
    pub norm_mode: NormMode,
    pub mfg_mode: MfgMode,
    pub r_bound: f64,
    pub delta: f64,
    pub player: usize,
    pub n_schedule: Option<Vec<usize>>,
    pub replications: Option<usize>,
    /// Stderr multiple for the deviation-test verdict.
    pub sigma: f64,
}

impl RunOptions {
    pub fn new(config_path: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            config_path: config_path.into(),
            out_dir: out_dir.into(),
            blocks: 256,
            copies: 64,
            paths: None,
            steps: None,
            seed: None,
            tol: 1e-6,
            norm_mode: NormMode::Analytic,
            mfg_mode: MfgMode::Common,
            r_bound: 1.0,
            delta: 0.25,
            player: 0,
            n_schedule: None,
            replications: None,
            sigma: 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub parameters: serde_json::Value,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<String>,
}

#[derive(Debug)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_text(dir: &Path, name: &str, text: &str, outputs: &mut Vec<String>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, text)?;
    outputs.push(name.to_string());
    Ok(())
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value, outputs: &mut Vec<String>) -> Result<()> {
    write_text(dir, name, &serde_json::to_string_pretty(value).expect("json"), outputs)
}

fn load(opts: &RunOptions) -> Result<(GameConfig, ConfigExtras)> {
    let (mut config, extras) = config_io::load_config(&opts.config_path)?;
    if let Some(steps) = opts.steps {
        config.n_steps = steps;
    }
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok((config, extras))
}

/// Run one subcommand end to end: parse and validate the config, dispatch the
/// solver, write the outputs and the manifest into `out_dir`.
pub fn run(command: Command, opts: &RunOptions) -> Result<RunSummary> {
    let started = now_unix();
    let (config, extras) = load(opts)?;
    let mut outputs = Vec::new();
    let parameters = match command {
        Command::ClosedForm => run_closed_form(&config, opts, &mut outputs)?,
        Command::SolveNplayer => run_solve_nplayer(&config, opts, &mut outputs)?,
        Command::SolveMfg => run_solve_mfg(&config, opts, &mut outputs)?,
        Command::VerifyNash => run_verify_nash(&config, opts, &mut outputs)?,
        Command::Converge => run_converge(&config, &extras, opts, &mut outputs)?,
        Command::CheckAssumptions => run_check_assumptions(&config, opts, &mut outputs)?,
    };

    let manifest = RunManifest {
        command: command.name().into(),
        config_hash: config_io::config_hash(&config),
        seed: config.seed,
        parameters,
        started_unix: started,
        finished_unix: now_unix(),
        outputs: outputs.clone(),
    };
    let manifest_path = opts.out_dir.join("manifest.json");
    std::fs::create_dir_all(&opts.out_dir)?;
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).expect("manifest"))?;
    Ok(RunSummary { manifest, manifest_path })
}

fn run_closed_form(config: &GameConfig, opts: &RunOptions, outputs: &mut Vec<String>) -> Result<serde_json::Value> {
    if config.is_nplayer() {
        let eq = closed_form::nplayer_closed_form(config)?;
        let discrepancy = closed_form::explicit_formula_discrepancy(config)?;
        let n = eq.n_players;
        let stride = eq.n_steps + 1;
        let mut csv = String::from("t,player,z_ii,z_ij_mean,z_i0,pi,pi0\n");
        for k in 0..=eq.n_steps {
            let t = config.grid_time(k);
            for i in 0..n {
                let zij_mean: f64 = (0..n)
                    .filter(|j| *j != i)
                    .map(|j| eq.z_ij_at(i, j, k))
                    .sum::<f64>()
                    / (n - 1) as f64;
                csv.push_str(&format!(
                    "{t},{i},{},{zij_mean},{},{},{}\n",
                    eq.z_ii[i * stride + k],
                    eq.z_i0_at(i, k),
                    eq.pi_at(i, k),
                    eq.pi0_at(i, k)
                ));
            }
        }
        write_text(&opts.out_dir, "closed_form.csv", &csv, outputs)?;
        let summary = json!({
            "mode": "nplayer",
            "residual_max": eq.residual_max,
            "explicit_formula_discrepancy": discrepancy,
            "y0": eq.y0,
            "value": eq.value,
        });
        write_json(&opts.out_dir, "closed_form.json", &summary, outputs)?;
        Ok(summary)
    } else {
        let eq = closed_form::mfg_closed_form(config)?;
        let stride = eq.n_steps + 1;
        let mut csv = String::from("t,type,z,z0,pi,pi0\n");
        for k in 0..=eq.n_steps {
            let t = config.grid_time(k);
            for label in 0..eq.n_types {
                csv.push_str(&format!(
                    "{t},{label},{},{},{},{}\n",
                    eq.z[label * stride + k],
                    eq.z0_at(label, k),
                    eq.pi_at(label, k),
                    eq.pi0_at(label, k)
                ));
            }
        }
        write_text(&opts.out_dir, "closed_form.csv", &csv, outputs)?;
        let summary = json!({
            "mode": "mfg",
            "e_theta": eq.e_theta,
            "y0": eq.y0,
            "value": eq.value,
        });
        write_json(&opts.out_dir, "closed_form.json", &summary, outputs)?;
        Ok(summary)
    }
}

fn solver_opts(opts: &RunOptions) -> SolverOpts {
    SolverOpts {
        picard: crate::bsde::PicardOpts { max_iters: 60, tol: opts.tol.max(1e-10) },
        ..SolverOpts::default()
    }
}

fn run_solve_nplayer(config: &GameConfig, opts: &RunOptions, outputs: &mut Vec<String>) -> Result<serde_json::Value> {
    let n = config.n_players();
    let blocks = opts.paths.map(|p| (p / n.max(1)).max(1)).unwrap_or(opts.blocks);
    let paths = sample_paths(config, blocks, n)?;
    let sopts = solver_opts(opts);
    let bench = nplayer::solve_benchmark(config, &paths, opts.r_bound, sopts)?;
    let dev = nplayer::solve_deviation_system(config, &paths, &bench, opts.r_bound, sopts, DeviationInit::Zero)?;
    let eq = nplayer::reconstruct_equilibrium(config, &dev, &bench, &paths)?;

    let nb = paths.n_blocks;
    let mut csv = String::from("t,player,y_mean,z_ii_mean,z_i0_mean,pi,pi0\n");
    for k in 0..paths.n_steps {
        let t = config.grid_time(k);
        for i in 0..n {
            csv.push_str(&format!(
                "{t},{i},{},{},{},{},{}\n",
                FbsdeSolution::step_mean(&eq.y[i], nb, k),
                FbsdeSolution::step_mean(&eq.z_own[i], nb, k),
                FbsdeSolution::step_mean(&eq.z_common[i], nb, k),
                FbsdeSolution::step_mean(&eq.pi[i], nb, k),
                FbsdeSolution::step_mean(&eq.pi0[i], nb, k),
            ));
        }
    }
    write_text(&opts.out_dir, "nplayer_solution.csv", &csv, outputs)?;
    let summary = json!({
        "benchmark_picard_iters": bench.picard_iters,
        "benchmark_residuals": bench.picard_residuals,
        "deviation_picard_iters": dev.picard_iters,
        "deviation_residuals": dev.picard_residuals,
        "radius": dev.radius,
        "bound_satisfied": dev.bound_satisfied,
        "residual_l2_sq": dev.residual_l2_sq,
        "outside_proven_regime": bench.outside_proven_regime,
        "y0_mean": eq.y0_mean,
        "blocks": nb,
    });
    write_json(&opts.out_dir, "nplayer_solution.json", &summary, outputs)?;
    Ok(summary)
}

fn run_solve_mfg(config: &GameConfig, opts: &RunOptions, outputs: &mut Vec<String>) -> Result<serde_json::Value> {
    let sol = match opts.mfg_mode {
        MfgMode::Common => {
            let paths = sample_paths(config, opts.blocks, opts.copies)?;
            mfg::solve_mfg_common_noise(
                config,
                &paths,
                CommonNoiseOpts { solver: solver_opts(opts), gap_tol: opts.tol.max(0.05) },
            )?
        }
        MfgMode::Independent => {
            let paths = sample_paths(config, opts.paths.unwrap_or(opts.blocks * opts.copies), 1)?;
            mfg::solve_mfg_independent(config, &paths, IndependentOpts { tol: opts.tol, ..Default::default() })?
        }
        MfgMode::March => {
            let paths = sample_paths(config, opts.paths.unwrap_or(opts.blocks * opts.copies), 1)?;
            mfg::solve_mfg_time_marching(
                config,
                &paths,
                opts.delta,
                IndependentOpts { tol: opts.tol, ..Default::default() },
            )?
        }
    };

    let np = sol.n_paths;
    let mut csv = String::from("t,type,y_mean,z_mean,z0_mean,pi,pi0\n");
    for k in 0..sol.n_steps {
        let t = config.grid_time(k);
        for label in 0..sol.n_types {
            let mean = |grid: &Vec<f64>| -> f64 {
                if grid.is_empty() {
                    0.0
                } else {
                    grid[k * np..(k + 1) * np].iter().sum::<f64>() / np as f64
                }
            };
            csv.push_str(&format!(
                "{t},{label},{},{},{},{},{}\n",
                mean(&sol.y[label]),
                mean(&sol.z[label]),
                sol.z0.get(label).map(mean).unwrap_or(0.0),
                mean(&sol.pi[label]),
                sol.pi0.get(label).map(mean).unwrap_or(0.0),
            ));
        }
    }
    write_text(&opts.out_dir, "mfg_solution.csv", &csv, outputs)?;
    let summary = json!({
        "mode": match opts.mfg_mode {
            MfgMode::Common => "common",
            MfgMode::Independent => "independent",
            MfgMode::March => "march",
        },
        "gap": sol.gap,
        "mu_star": sol.mu_star,
        "mu_trace": sol.mu_trace,
        "ratios": sol.ratios,
        "picard_iters": sol.picard_iters,
    });
    write_json(&opts.out_dir, "mfg_solution.json", &summary, outputs)?;
    Ok(summary)
}

fn run_verify_nash(config: &GameConfig, opts: &RunOptions, outputs: &mut Vec<String>) -> Result<serde_json::Value> {
    let n = config.n_players();
    let blocks = opts.paths.unwrap_or(opts.blocks * opts.copies);
    let paths = sample_paths(config, blocks, n)?;
    let eq = closed_form::nplayer_closed_form(config)?;
    let report = nash_deviation_test_with_threshold(
        config,
        &eq,
        opts.player,
        &default_perturbations(),
        &paths,
        opts.sigma,
    )?;

    let mut csv = String::from("t,mean_r,stderr,deviation_sigmas\n");
    for k in 0..report.drift.t.len() {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            report.drift.t[k], report.drift.mean_r[k], report.drift.stderr[k], report.drift.deviation_sigmas[k]
        ));
    }
    write_text(&opts.out_dir, "drift_profile.csv", &csv, outputs)?;

    let rows: Vec<serde_json::Value> = report
        .rows
        .iter()
        .map(|r| {
            json!({
                "direction": r.direction,
                "epsilon": r.epsilon,
                "j": r.j_perturbed,
                "j_stderr": r.j_stderr,
                "delta_mean": r.delta_mean,
                "delta_stderr": r.delta_stderr,
                "improves": r.improves,
                "measurably_worse": r.measurably_worse,
            })
        })
        .collect();
    let summary = json!({
        "player": report.player,
        "baseline_j": report.baseline_j,
        "baseline_stderr": report.baseline_stderr,
        "perturbations": rows,
        "max_drift_sigmas": report.drift.max_deviation_sigmas,
        "supermartingale_confirmed": report.drift.supermartingale_confirmed,
        "clamp_fraction": report.clamp_fraction,
        "sigma": opts.sigma,
        "verdict": if report.verdict { "pass" } else { "fail" },
        "note": "no profitable deviation found in the tested class",
    });
    write_json(&opts.out_dir, "nash_report.json", &summary, outputs)?;
    Ok(summary)
}

fn run_converge(
    config: &GameConfig,
    extras: &ConfigExtras,
    opts: &RunOptions,
    outputs: &mut Vec<String>,
) -> Result<serde_json::Value> {
    let schedule = opts
        .n_schedule
        .clone()
        .or_else(|| extras.n_schedule.clone())
        .unwrap_or_else(|| vec![4, 8, 16, 32]);
    let reps = opts.replications.or(extras.replications).unwrap_or(200);
    let report = verification::convergence_study(config, &schedule, reps, config.seed)?;

    let mut csv = String::from("n,strategy_gap,y0_gap,residual_l2\n");
    for i in 0..report.n_schedule.len() {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            report.n_schedule[i], report.strategy_gap[i], report.y0_gap[i], report.residual_l2[i]
        ));
    }
    write_text(&opts.out_dir, "convergence.csv", &csv, outputs)?;
    let summary = json!({
        "n_schedule": report.n_schedule,
        "strategy_gap": report.strategy_gap,
        "y0_gap": report.y0_gap,
        "residual_l2": report.residual_l2,
        "loglog_slope": report.loglog_slope,
        "replications": report.replications,
    });
    write_json(&opts.out_dir, "convergence.json", &summary, outputs)?;
    Ok(summary)
}

fn run_check_assumptions(
    config: &GameConfig,
    opts: &RunOptions,
    outputs: &mut Vec<String>,
) -> Result<serde_json::Value> {
    let mut by_id = serde_json::Map::new();
    let mut reports = Vec::new();
    if config.is_nplayer() {
        reports.push(assumptions::check_benchmark(config, opts.r_bound, opts.norm_mode)?);
        reports.push(assumptions::check_multibsde(config, opts.r_bound, None, opts.norm_mode)?);
    }
    reports.push(assumptions::check_mfg(config)?);
    reports.push(assumptions::check_characteristic_with_mode(config, opts.r_bound, opts.norm_mode)?);

    let mut all_pass = true;
    let mut delta_star = None;
    for report in &reports {
        all_pass &= report.all_pass;
        if report.delta_star.is_some() && delta_star.is_none() {
            delta_star = report.delta_star;
        }
        for c in &report.conditions {
            let entry = by_id.entry(c.id.clone()).or_insert_with(|| json!([]));
            entry.as_array_mut().unwrap().push(json!({
                "label": c.label,
                "player": c.player,
                "lhs": c.lhs,
                "rhs": c.rhs,
                "pass": c.pass,
            }));
        }
    }
    let summary = json!({
        "norm_mode": match opts.norm_mode { NormMode::Analytic => "analytic", NormMode::Empirical => "empirical" },
        "r_bound": opts.r_bound,
        "conditions": serde_json::Value::Object(by_id),
        "delta_star": delta_star,
        "all_pass": all_pass,
    });
    write_json(&opts.out_dir, "assumptions.json", &summary, outputs)?;
    Ok(summary)
}

/// Exit codes: 0 success, 2 solver non-convergence, 3 config error,
/// 64 unknown command, 66 unreadable config.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::NonConvergence { .. } | Error::FixedPointDiverged { .. } | Error::ConsistencyGap { .. } => 2,
        Error::Config(_) | Error::Parse(_) => 3,
        Error::Io(_) => 66,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_preset(dir: &Path) -> PathBuf {
        let path = dir.join("sym3.toml");
        std::fs::write(
            &path,
            r#"
horizon = 1.0
n_steps = 20
mode = "nplayer"
seed = 42

[[players]]
alpha = 1.0
theta = 0.5
x0 = 1.0

[[players]]
alpha = 1.0
theta = 0.5
x0 = 1.0

[[players]]
alpha = 1.0
theta = 0.5
x0 = 1.0

[return_model]
kind = "constant"
b = 0.2
b0 = 0.2
"#,
        )
        .unwrap();
        path
    }

    #[test]
    fn closed_form_command_writes_expected_rows() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_preset(dir.path());
        let opts = RunOptions::new(cfg, dir.path().join("out"));
        let summary = run(Command::ClosedForm, &opts).unwrap();
        assert_eq!(summary.manifest.command, "closed-form");
        let csv = std::fs::read_to_string(dir.path().join("out/closed_form.csv")).unwrap();
        let first_data_line = csv.lines().nth(1).unwrap();
        // pi0 = 0.4 in the symmetric three-player case.
        assert!(first_data_line.ends_with(",0.4"), "{first_data_line}");
        assert!(dir.path().join("out/manifest.json").exists());
        for name in &summary.manifest.outputs {
            assert!(dir.path().join("out").join(name).exists());
        }
    }

    #[test]
    fn check_assumptions_zero_preset_passes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zero.toml");
        std::fs::write(
            &path,
            r#"
horizon = 1.0
n_steps = 10
mode = "nplayer"
seed = 1

[[players]]
alpha = 1.0
theta = 0.0
x0 = 0.0

[[players]]
alpha = 1.0
theta = 0.0
x0 = 0.0

[return_model]
kind = "constant"
b = 0.0
b0 = 0.0
"#,
        )
        .unwrap();
        // R is part of the sufficient-condition choice; the contraction
        // budget needs it small for small populations.
        let mut opts = RunOptions::new(path, dir.path().join("out"));
        opts.r_bound = 1e-3;
        let summary = run(Command::CheckAssumptions, &opts).unwrap();
        assert_eq!(summary.manifest.parameters["all_pass"], json!(true));
    }

    #[test]
    fn manifest_is_reproducible_modulo_timestamps() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_preset(dir.path());
        let a = run(Command::ClosedForm, &RunOptions::new(cfg.clone(), dir.path().join("a"))).unwrap();
        let b = run(Command::ClosedForm, &RunOptions::new(cfg, dir.path().join("b"))).unwrap();
        assert_eq!(a.manifest.config_hash, b.manifest.config_hash);
        assert_eq!(a.manifest.parameters, b.manifest.parameters);
        let csv_a = std::fs::read_to_string(dir.path().join("a/closed_form.csv")).unwrap();
        let csv_b = std::fs::read_to_string(dir.path().join("b/closed_form.csv")).unwrap();
        assert_eq!(csv_a, csv_b);
    }

    #[test]
    fn unreadable_config_maps_to_io_exit_code() {
        let opts = RunOptions::new("/nonexistent/config.toml", "/tmp/expmfg-test-out");
        let err = run(Command::ClosedForm, &opts).unwrap_err();
        assert_eq!(exit_code_for(&err), 66);
    }

    #[test]
    fn exit_codes_cover_solver_and_config_failures() {
        let non_conv = Error::NonConvergence { context: "x".into(), residuals: vec![1.0] };
        assert_eq!(exit_code_for(&non_conv), 2);
        let diverged = Error::FixedPointDiverged { ratios: vec![1.2], hint: "".into() };
        assert_eq!(exit_code_for(&diverged), 2);
        assert_eq!(exit_code_for(&Error::Config("bad".into())), 3);
        assert_eq!(exit_code_for(&Error::Parse("bad".into())), 3);
    }

    #[test]
    fn verify_nash_merton_preset_passes() {
        let dir = tempfile::tempdir().unwrap();
        let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("presets/merton.toml");
        let mut opts = RunOptions::new(path, dir.path().join("out"));
        opts.paths = Some(10_000);
        let summary = run(Command::VerifyNash, &opts).unwrap();
        assert_eq!(summary.manifest.parameters["verdict"], json!("pass"));
        assert!(dir.path().join("out/drift_profile.csv").exists());
    }
}
