//! Evaluate every sufficient smallness condition on the shipped presets with
//! analytic norm proxies.
//!
//! ```bash
//! cargo run --release -p expmfg --example assumption_checker
//! ```

use std::path::PathBuf;

use expmfg::assumptions::{check_benchmark, check_characteristic, check_mfg, check_multibsde, NormMode};
use expmfg::config_io::load_config;

fn main() -> expmfg::Result<()> {
    let r_bound = 0.05;
    for name in ["merton.toml", "sym3.toml", "hetero2.toml", "twotype-mfg.toml"] {
        let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("presets").join(name);
        let cfg = load_config(&path)?.0;
        println!("== {name} (R = {r_bound})");
        let mut reports = Vec::new();
        if cfg.is_nplayer() {
            reports.push(check_benchmark(&cfg, r_bound, NormMode::Analytic)?);
            reports.push(check_multibsde(&cfg, r_bound, None, NormMode::Analytic)?);
        }
        reports.push(check_mfg(&cfg)?);
        reports.push(check_characteristic(&cfg, r_bound)?);
        for report in reports {
            for c in &report.conditions {
                if c.player.is_none_or(|p| p == 0) {
                    println!(
                        "  [{}] {:<42} lhs {:>10.4e}  rhs {:>10.4e}  {}",
                        c.id,
                        c.label,
                        c.lhs,
                        c.rhs,
                        if c.pass { "pass" } else { "FAIL" }
                    );
                }
            }
            if let Some(d) = report.delta_star {
                println!("  largest admissible sub-interval: {d:.5}");
            }
        }
        println!();
    }
    Ok(())
}
