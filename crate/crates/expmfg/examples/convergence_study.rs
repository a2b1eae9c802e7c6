//! Population-size study: i.i.d. type draws per N, player 0's common-asset
//! strategy and value against the mean-field limit, and the decay of the
//! finite-size residual.
//!
//! ```bash
//! cargo run --release -p expmfg --example convergence_study
//! ```

use std::path::PathBuf;

use expmfg::config_io::load_config;
use expmfg::verification::convergence_study;

fn main() -> expmfg::Result<()> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("presets/convergence-suite.toml");
    let (cfg, extras) = load_config(&path)?;
    let schedule = extras.n_schedule.unwrap_or_else(|| vec![4, 8, 16, 32]);
    let reps = extras.replications.unwrap_or(200);

    let report = convergence_study(&cfg, &schedule, reps, cfg.seed)?;
    println!("{reps} type draws per population size\n");
    println!("{:>4} {:>16} {:>16} {:>16}", "N", "strategy gap", "Y0 gap", "residual L2");
    for i in 0..report.n_schedule.len() {
        println!(
            "{:>4} {:>16.6e} {:>16.6e} {:>16.6e}",
            report.n_schedule[i], report.strategy_gap[i], report.y0_gap[i], report.residual_l2[i]
        );
    }
    println!("\nlog-log slope of the strategy gap: {:.3}", report.loglog_slope);
    Ok(())
}
