//! Nash verification by the martingale optimality principle and the
//! finite-population convergence study.
//!
//! The deviation test holds opponents at the candidate equilibrium, replays
//! the same Brownian increments for every evaluated strategy (common random
//! numbers) and compares utilities through per-path differences, so the
//! verdict thresholds are in units of the low-variance difference stderr.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::closed_form::{mfg_closed_form, nplayer_closed_form, EquilibriumSolution};
use crate::error::{Error, Result};
use crate::market::{exp_utility_batch, mean_and_stderr, sample_paths, GameConfig, PathBundle, EXP_CLAMP};
use crate::nplayer::{benchmark_closed_form, finite_size_residual, residual_l2_sq};

/// `-exp(-alpha (x0 - y0))`: the game value for a player entering at `x0`.
pub fn value_function(x0: f64, y0: f64, alpha: f64) -> f64 {
    let e = (-alpha * (x0 - y0)).clamp(-EXP_CLAMP, EXP_CLAMP);
    -e.exp()
}

/// Deterministic deviation directions applied to player strategies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Direction {
    /// Constant shift of the idiosyncratic-asset position.
    ShiftIdio,
    /// Constant shift of the common-asset position.
    ShiftCommon,
    /// A bump of the given height on a single grid cell (mid horizon).
    BumpIdio { height: f64 },
    BumpCommon { height: f64 },
    /// Proportional scaling of both components.
    Scale,
}

impl Direction {
    pub fn label(&self) -> String {
        match self {
            Direction::ShiftIdio => "shift-idio".into(),
            Direction::ShiftCommon => "shift-common".into(),
            Direction::BumpIdio { .. } => "bump-idio".into(),
            Direction::BumpCommon { .. } => "bump-common".into(),
            Direction::Scale => "scale".into(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Perturbation {
    pub direction: Direction,
    pub epsilon: f64,
}

/// The default sweep: each direction at eps in {±0.05, ±0.2}; single-cell
/// bumps use height 2 so their second-order utility cost clears the
/// common-random-number noise floor at the default path counts.
pub fn default_perturbations() -> Vec<Perturbation> {
    let mut out = Vec::new();
    for direction in [
        Direction::ShiftIdio,
        Direction::ShiftCommon,
        Direction::BumpIdio { height: 2.0 },
        Direction::BumpCommon { height: 2.0 },
        Direction::Scale,
    ] {
        for epsilon in [-0.2, -0.05, 0.05, 0.2] {
            out.push(Perturbation { direction, epsilon });
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct PerturbationRow {
    pub direction: String,
    pub epsilon: f64,
    pub j_perturbed: f64,
    pub j_stderr: f64,
    pub delta_mean: f64,
    pub delta_stderr: f64,
    /// The perturbation beats the candidate beyond 3 difference-stderr.
    pub improves: bool,
    /// The perturbation is worse beyond 3 difference-stderr.
    pub measurably_worse: bool,
}

#[derive(Debug, Clone)]
pub struct DriftProfile {
    pub t: Vec<f64>,
    pub mean_r: Vec<f64>,
    pub stderr: Vec<f64>,
    pub deviation_sigmas: Vec<f64>,
    pub max_deviation_sigmas: f64,
    pub r0: f64,
    pub clamp_fraction: f64,
    /// Terminal mean of the value process under a deliberately suboptimal
    /// strategy, and whether it sits below `r0` beyond noise.
    pub suboptimal_terminal_mean: f64,
    pub suboptimal_stderr: f64,
    pub supermartingale_confirmed: bool,
}

#[derive(Debug, Clone)]
pub struct NashReport {
    pub player: usize,
    pub baseline_j: f64,
    pub baseline_stderr: f64,
    pub rows: Vec<PerturbationRow>,
    pub drift: DriftProfile,
    pub clamp_fraction: f64,
    /// Pass iff no perturbation improves beyond 3 stderr and the value
    /// process drift stays within 3 stderr. A Monte-Carlo sweep can only
    /// state that no profitable deviation was found in the tested class.
    pub verdict: bool,
}

fn player_returns(config: &GameConfig, player: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = config.players()?[player];
    let b = (0..config.n_steps).map(|k| config.returns.b(config.grid_time(k), p.type_label)).collect();
    let b0 = (0..config.n_steps)
        .map(|k| config.returns.b0(config.grid_time(k), p.type_label))
        .collect();
    Ok((b, b0))
}

fn equilibrium_strategy(eq: &EquilibriumSolution, player: usize) -> (Vec<f64>, Vec<f64>) {
    let stride = eq.n_steps + 1;
    let pi = eq.pi[player * stride..player * stride + eq.n_steps].to_vec();
    let pi0 = eq.pi0[player * stride..player * stride + eq.n_steps].to_vec();
    (pi, pi0)
}

/// Euler wealth for one player under deterministic per-step strategies,
/// `(n_steps + 1) x n_blocks`.
fn simulate_player(
    config: &GameConfig,
    player: usize,
    pi: &[f64],
    pi0: &[f64],
    paths: &PathBundle,
) -> Result<Vec<f64>> {
    let players = config.players()?;
    let n = players.len();
    if paths.k_copies != n {
        return Err(Error::Shape("profile simulation needs one copy per player".into()));
    }
    let nb = paths.n_blocks;
    let ns = paths.n_steps;
    let dt = paths.dt;
    let (b, b0) = player_returns(config, player)?;
    let mut x = vec![0.0; (ns + 1) * nb];
    for blk in 0..nb {
        x[blk] = players[player].x0;
    }
    for k in 0..ns {
        for blk in 0..nb {
            let dw = paths.idio_inc(blk * n + player, k);
            let dw0 = paths.common_inc_block(blk, k);
            x[(k + 1) * nb + blk] = x[k * nb + blk]
                + pi[k] * (b[k] * dt + dw)
                + pi0[k] * (b0[k] * dt + dw0);
        }
    }
    Ok(x)
}

fn peer_terminal_average(
    config: &GameConfig,
    eq: &EquilibriumSolution,
    player: usize,
    paths: &PathBundle,
) -> Result<Vec<f64>> {
    let players = config.players()?;
    let n = players.len();
    let nb = paths.n_blocks;
    let ns = paths.n_steps;
    let mut peer = vec![0.0; nb];
    for j in 0..n {
        if j == player {
            continue;
        }
        let (pi, pi0) = equilibrium_strategy(eq, j);
        let x = simulate_player(config, j, &pi, &pi0, paths)?;
        for blk in 0..nb {
            peer[blk] += x[ns * nb + blk];
        }
    }
    for v in peer.iter_mut() {
        *v /= (n - 1) as f64;
    }
    Ok(peer)
}

fn apply_perturbation(pi: &[f64], pi0: &[f64], p: &Perturbation, n_steps: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = pi.to_vec();
    let mut b = pi0.to_vec();
    match p.direction {
        Direction::ShiftIdio => {
            for v in a.iter_mut() {
                *v += p.epsilon;
            }
        }
        Direction::ShiftCommon => {
            for v in b.iter_mut() {
                *v += p.epsilon;
            }
        }
        Direction::BumpIdio { height } => {
            a[n_steps / 2] += p.epsilon * height;
        }
        Direction::BumpCommon { height } => {
            b[n_steps / 2] += p.epsilon * height;
        }
        Direction::Scale => {
            for v in a.iter_mut() {
                *v *= 1.0 + p.epsilon;
            }
            for v in b.iter_mut() {
                *v *= 1.0 + p.epsilon;
            }
        }
    }
    (a, b)
}

/// Deviation test for one player: hold the opponents at the candidate
/// equilibrium, evaluate the utility of the candidate and of perturbed
/// strategies on shared paths, and combine with the value-process drift
/// check. Verdict thresholds sit at 3 difference-stderr.
pub fn nash_deviation_test(
    config: &GameConfig,
    eq: &EquilibriumSolution,
    player: usize,
    perturbations: &[Perturbation],
    paths: &PathBundle,
) -> Result<NashReport> {
    nash_deviation_test_with_threshold(config, eq, player, perturbations, paths, 3.0)
}

/// As [`nash_deviation_test`] with an explicit stderr multiple for both the
/// improvement flags and the drift bound.
pub fn nash_deviation_test_with_threshold(
    config: &GameConfig,
    eq: &EquilibriumSolution,
    player: usize,
    perturbations: &[Perturbation],
    paths: &PathBundle,
    sigma: f64,
) -> Result<NashReport> {
    let players = config.players()?;
    let spec = players[player];
    let nb = paths.n_blocks;
    let ns = paths.n_steps;

    let peer = peer_terminal_average(config, eq, player, paths)?;
    let (pi, pi0) = equilibrium_strategy(eq, player);
    let x_base = simulate_player(config, player, &pi, &pi0, paths)?;
    let (u_base, clamped) = exp_utility_batch(&x_base[ns * nb..], &peer, spec.alpha, spec.theta);
    let (baseline_j, baseline_stderr) = mean_and_stderr(&u_base);
    let clamp_fraction = clamped as f64 / nb as f64;

    let rows: Vec<PerturbationRow> = perturbations
        .par_iter()
        .map(|p| {
            let (pa, pb) = apply_perturbation(&pi, &pi0, p, ns);
            let x = simulate_player(config, player, &pa, &pb, paths)?;
            let (u, _) = exp_utility_batch(&x[ns * nb..], &peer, spec.alpha, spec.theta);
            let (j, j_se) = mean_and_stderr(&u);
            let deltas: Vec<f64> = u.iter().zip(&u_base).map(|(a, b)| a - b).collect();
            let (dm, dse) = mean_and_stderr(&deltas);
            Ok(PerturbationRow {
                direction: p.direction.label(),
                epsilon: p.epsilon,
                j_perturbed: j,
                j_stderr: j_se,
                delta_mean: dm,
                delta_stderr: dse,
                improves: dm > sigma * dse,
                measurably_worse: dm < -sigma * dse,
            })
        })
        .collect::<Result<_>>()?;

    // The verdict statistics are the per-path differences; if every one of
    // them is flat the test carries no information at all.
    if rows.iter().all(|r| r.delta_stderr == 0.0 && r.delta_mean == 0.0) {
        return Err(Error::DegenerateStderr("all perturbation differences".into()));
    }

    let drift = martingale_check(config, eq, player, paths)?;
    let verdict = rows.iter().all(|r| !r.improves) && drift.max_deviation_sigmas <= sigma;
    Ok(NashReport {
        player,
        baseline_j,
        baseline_stderr,
        rows,
        drift,
        clamp_fraction,
        verdict,
    })
}

/// Drift of the value process `R_t = -exp(-alpha (X_t - Y_t))` along the
/// candidate: a martingale at the optimum, so the per-time sample means must
/// stay within noise of `R_0`; a deliberately suboptimal strategy must push
/// the terminal mean strictly below `R_0`.
pub fn martingale_check(
    config: &GameConfig,
    eq: &EquilibriumSolution,
    player: usize,
    paths: &PathBundle,
) -> Result<DriftProfile> {
    let players = config.players()?;
    let n = players.len();
    let spec = players[player];
    let nb = paths.n_blocks;
    let ns = paths.n_steps;
    let dt = paths.dt;
    let stride = ns + 1;
    let (b, b0) = player_returns(config, player)?;

    // Pathwise value process from the closed-form components.
    let mut y = vec![0.0; (ns + 1) * nb];
    for blk in 0..nb {
        y[blk] = eq.y0[player];
    }
    for k in 0..ns {
        let z_own = eq.z_ii[player * stride + k];
        let z0 = eq.z_i0[player * stride + k];
        let mut cross_sq = 0.0;
        for j in 0..n {
            if j != player {
                cross_sq += eq.z_ij_at(player, j, k).powi(2);
            }
        }
        let f = z_own * b[k] + z0 * b0[k] + (b[k] * b[k] + b0[k] * b0[k]) / (2.0 * spec.alpha)
            - spec.alpha / 2.0 * cross_sq;
        for blk in 0..nb {
            let mut dy = f * dt
                + z_own * paths.idio_inc(blk * n + player, k)
                + z0 * paths.common_inc_block(blk, k);
            for j in 0..n {
                if j != player {
                    dy += eq.z_ij_at(player, j, k) * paths.idio_inc(blk * n + j, k);
                }
            }
            y[(k + 1) * nb + blk] = y[k * nb + blk] + dy;
        }
    }

    let (pi, pi0) = equilibrium_strategy(eq, player);
    let x = simulate_player(config, player, &pi, &pi0, paths)?;

    let r0 = value_function(spec.x0, eq.y0[player], spec.alpha);
    let mut mean_r = Vec::with_capacity(ns + 1);
    let mut stderr = Vec::with_capacity(ns + 1);
    let mut dev = Vec::with_capacity(ns + 1);
    let mut clamped_total = 0usize;
    for k in 0..=ns {
        let spread: Vec<f64> = (0..nb).map(|blk| x[k * nb + blk] - y[k * nb + blk]).collect();
        let (r, clamped) = exp_utility_batch(&spread, &vec![0.0; nb], spec.alpha, 0.0);
        clamped_total += clamped;
        let (m, se) = mean_and_stderr(&r);
        mean_r.push(m);
        stderr.push(se);
        dev.push(if k == 0 || se == 0.0 { 0.0 } else { (m - r0).abs() / se });
    }
    let clamp_fraction = clamped_total as f64 / ((ns + 1) * nb) as f64;
    if clamp_fraction > 0.01 {
        return Err(Error::ExcessiveClamping { percent: 100.0 * clamp_fraction });
    }
    let max_dev = dev.iter().fold(0.0f64, |m, v| m.max(*v));

    // Supermartingale direction under a constant over-investment.
    let pi_sub: Vec<f64> = pi.iter().map(|v| v + 0.5).collect();
    let x_sub = simulate_player(config, player, &pi_sub, &pi0, paths)?;
    let spread: Vec<f64> = (0..nb).map(|blk| x_sub[ns * nb + blk] - y[ns * nb + blk]).collect();
    let (r_sub, _) = exp_utility_batch(&spread, &vec![0.0; nb], spec.alpha, 0.0);
    let (sub_mean, sub_se) = mean_and_stderr(&r_sub);

    Ok(DriftProfile {
        t: (0..=ns).map(|k| config.grid_time(k)).collect(),
        mean_r,
        stderr,
        deviation_sigmas: dev,
        max_deviation_sigmas: max_dev,
        r0,
        clamp_fraction,
        suboptimal_terminal_mean: sub_mean,
        suboptimal_stderr: sub_se,
        supermartingale_confirmed: sub_mean < r0 - 3.0 * sub_se,
    })
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub n_schedule: Vec<usize>,
    /// Grid-L2 distance between the first player's common-asset strategy and
    /// the mean-field one, root-mean-squared over type draws.
    pub strategy_gap: Vec<f64>,
    pub y0_gap: Vec<f64>,
    /// Empirical `E int |finite-size residual|^2 dt` for the first player.
    pub residual_l2: Vec<f64>,
    pub loglog_slope: f64,
    pub replications: usize,
}

fn sample_labels(probs: &[f64], rng: &mut ChaCha12Rng, n: usize) -> Vec<usize> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u <= acc {
                    return i;
                }
            }
            probs.len() - 1
        })
        .collect()
}

/// Population-size study: for each N, draw i.i.d. type assignments, compare
/// the N-player equilibrium of player 0 (closed-form fast path) against the
/// mean-field one for the same type, and evaluate the finite-size residual.
pub fn convergence_study(
    base_config: &GameConfig,
    n_schedule: &[usize],
    replications: usize,
    seed: u64,
) -> Result<ConvergenceReport> {
    if n_schedule.len() < 2 || n_schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("population schedule must be strictly increasing".into()));
    }
    let mfg = mfg_closed_form(base_config)?;
    let ns = base_config.n_steps;
    let dt = base_config.dt();
    let stride = ns + 1;

    let mut strategy_gap = Vec::new();
    let mut y0_gap = Vec::new();
    let mut residual_l2 = Vec::new();
    for (ni, &n) in n_schedule.iter().enumerate() {
        let acc: Vec<(f64, f64, f64)> = (0..replications)
            .into_par_iter()
            .map(|rep| {
                let mut rng = ChaCha12Rng::seed_from_u64(
                    seed ^ (ni as u64) << 32 ^ (rep as u64).wrapping_mul(0x9e3779b97f4a7c15),
                );
                let labels = sample_labels(&base_config.types.probs, &mut rng, n);
                let cfg = GameConfig::nplayer_from_assignments(
                    base_config.types.clone(),
                    &labels,
                    base_config.returns.clone(),
                    base_config.horizon,
                    base_config.n_steps,
                    seed.wrapping_add(rep as u64),
                )?;
                let eq = nplayer_closed_form(&cfg)?;
                let tau = labels[0];
                let mut l2 = 0.0;
                for k in 0..ns {
                    l2 += (eq.pi0[k] - mfg.pi0[tau * stride + k]).powi(2) * dt;
                }
                let dy = (eq.y0[0] - mfg.y0[tau]).powi(2);

                let bundle = sample_paths(&cfg, 1, n)?;
                let bench = benchmark_closed_form(&cfg, &bundle)?;
                let res = finite_size_residual(&cfg, &bench, &bundle)?;
                let b_l2 = residual_l2_sq(&res, 1, dt)[0];
                Ok((l2, dy, b_l2))
            })
            .collect::<Result<_>>()?;
        let m = replications as f64;
        strategy_gap.push((acc.iter().map(|a| a.0).sum::<f64>() / m).sqrt());
        y0_gap.push((acc.iter().map(|a| a.1).sum::<f64>() / m).sqrt());
        residual_l2.push(acc.iter().map(|a| a.2).sum::<f64>() / m);
    }

    // Least-squares slope of ln(gap) against ln(N).
    let xs: Vec<f64> = n_schedule.iter().map(|n| (*n as f64).ln()).collect();
    let ys: Vec<f64> = strategy_gap.iter().map(|g| g.max(1e-300).ln()).collect();
    let xbar = xs.iter().sum::<f64>() / xs.len() as f64;
    let ybar = ys.iter().sum::<f64>() / ys.len() as f64;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let den: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    let loglog_slope = if den > 0.0 { num / den } else { 0.0 };

    Ok(ConvergenceReport {
        n_schedule: n_schedule.to_vec(),
        strategy_gap,
        y0_gap,
        residual_l2,
        loglog_slope,
        replications,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{ReturnModel, TypeDistribution, TypeSpec};
    use approx::assert_relative_eq;

    fn merton_config(seed: u64) -> GameConfig {
        GameConfig::nplayer_uniform(
            2,
            TypeSpec { alpha: 1.0, theta: 0.0, x0: 0.0 },
            ReturnModel::Constant { b: 0.2, b0: 0.2 },
            1.0,
            50,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn value_function_basics() {
        assert_relative_eq!(value_function(1.0, 1.0, 3.0), -1.0);
        assert_relative_eq!(value_function(1.0, 0.0, 1.0), -(-1.0f64).exp());
    }

    #[test]
    fn value_matches_simulated_utility_without_competition() {
        let cfg = merton_config(91);
        let eq = nplayer_closed_form(&cfg).unwrap();
        let paths = sample_paths(&cfg, 20_000, 2).unwrap();
        let (pi, pi0) = equilibrium_strategy(&eq, 0);
        let x = simulate_player(&cfg, 0, &pi, &pi0, &paths).unwrap();
        let nb = paths.n_blocks;
        let (u, _) = exp_utility_batch(&x[50 * nb..], &vec![0.0; nb], 1.0, 0.0);
        let (mean, se) = mean_and_stderr(&u);
        let v = value_function(0.0, eq.y0[0], 1.0);
        assert!((mean - v).abs() <= 3.0 * se + 2e-3, "mean {mean} vs value {v} (se {se})");
    }

    #[test]
    fn merton_deviations_do_not_improve() {
        let cfg = merton_config(93);
        let eq = nplayer_closed_form(&cfg).unwrap();
        let paths = sample_paths(&cfg, 10_000, 2).unwrap();
        let report = nash_deviation_test(&cfg, &eq, 0, &default_perturbations(), &paths).unwrap();
        assert!(report.verdict, "max drift {}", report.drift.max_deviation_sigmas);
        // The large constant shifts are measurably worse already at this size.
        for row in &report.rows {
            if row.direction.starts_with("shift") && row.epsilon.abs() > 0.1 {
                assert!(row.measurably_worse, "{row:?}");
            }
        }
        assert!(report.drift.supermartingale_confirmed);
    }

    #[test]
    fn zero_return_market_prefers_zero_investment() {
        let cfg = GameConfig::nplayer_uniform(
            2,
            TypeSpec { alpha: 1.0, theta: 0.0, x0: 0.0 },
            ReturnModel::Constant { b: 0.0, b0: 0.0 },
            1.0,
            50,
            95,
        )
        .unwrap();
        let eq = nplayer_closed_form(&cfg).unwrap();
        let paths = sample_paths(&cfg, 10_000, 2).unwrap();
        let report = nash_deviation_test(&cfg, &eq, 0, &default_perturbations(), &paths).unwrap();
        assert!(report.verdict);
        for row in &report.rows {
            if row.epsilon.abs() > 0.1 && row.direction.starts_with("shift") {
                assert!(row.measurably_worse, "{row:?}");
            }
        }
    }

    #[test]
    fn martingale_check_baseline_and_suboptimal() {
        let cfg = merton_config(97);
        let eq = nplayer_closed_form(&cfg).unwrap();
        let paths = sample_paths(&cfg, 10_000, 2).unwrap();
        let drift = martingale_check(&cfg, &eq, 0, &paths).unwrap();
        assert_eq!(drift.deviation_sigmas[0], 0.0);
        assert!(drift.max_deviation_sigmas <= 3.0, "drift {}", drift.max_deviation_sigmas);
        assert!(drift.supermartingale_confirmed, "sub mean {}", drift.suboptimal_terminal_mean);
        assert!(drift.clamp_fraction < 0.01);
    }

    #[test]
    fn excessive_clamping_invalidates_the_drift_check() {
        // An initial wealth far beyond the exponent guard saturates every
        // sample of the value process.
        let cfg = GameConfig::nplayer_uniform(
            2,
            TypeSpec { alpha: 1.0, theta: 0.0, x0: 800.0 },
            ReturnModel::Constant { b: 0.2, b0: 0.2 },
            1.0,
            10,
            98,
        )
        .unwrap();
        let eq = nplayer_closed_form(&cfg).unwrap();
        let paths = sample_paths(&cfg, 200, 2).unwrap();
        let err = martingale_check(&cfg, &eq, 0, &paths);
        assert!(matches!(err, Err(Error::ExcessiveClamping { .. })), "{err:?}");
    }

    #[test]
    fn risk_aversion_lowers_the_optimum_value() {
        // Doubling alpha lowers J(pi*) when the optimal spread x0 - Y_0 is
        // negative; at x0 = 0 the alpha dependence cancels exactly.
        let x0 = -0.5;
        let mut values = Vec::new();
        for alpha in [1.0, 2.0] {
            let cfg = GameConfig::nplayer_uniform(
                2,
                TypeSpec { alpha, theta: 0.0, x0 },
                ReturnModel::Constant { b: 0.2, b0: 0.2 },
                1.0,
                50,
                99,
            )
            .unwrap();
            let eq = nplayer_closed_form(&cfg).unwrap();
            values.push(value_function(x0, eq.y0[0], alpha));
        }
        assert!(values[1] < values[0], "{values:?}");
    }

    #[test]
    fn convergence_vanishes_for_homogeneous_populations() {
        let base = GameConfig::mfg(
            TypeDistribution::single(TypeSpec { alpha: 1.0, theta: 0.5, x0: 1.0 }),
            ReturnModel::Constant { b: 0.2, b0: 0.2 },
            1.0,
            20,
            101,
        )
        .unwrap();
        let report = convergence_study(&base, &[2, 4, 8], 3, 7).unwrap();
        for g in &report.strategy_gap {
            assert!(*g < 1e-12, "gap {g}");
        }
    }

    #[test]
    fn convergence_schedule_must_increase() {
        let base = GameConfig::mfg(
            TypeDistribution::single(TypeSpec { alpha: 1.0, theta: 0.2, x0: 0.0 }),
            ReturnModel::Constant { b: 0.1, b0: 0.1 },
            1.0,
            10,
            1,
        )
        .unwrap();
        assert!(convergence_study(&base, &[4, 4], 2, 1).is_err());
        assert!(convergence_study(&base, &[8, 4], 2, 1).is_err());
    }

    #[test]
    fn convergence_zero_theta_gaps_vanish() {
        let base = GameConfig::mfg(
            TypeDistribution::uniform(vec![
                TypeSpec { alpha: 1.0, theta: 0.0, x0: 0.0 },
                TypeSpec { alpha: 2.0, theta: 0.0, x0: 1.0 },
            ]),
            ReturnModel::Constant { b: 0.2, b0: 0.3 },
            1.0,
            10,
            103,
        )
        .unwrap();
        let report = convergence_study(&base, &[4, 8], 4, 11).unwrap();
        for (g, b) in report.strategy_gap.iter().zip(&report.residual_l2) {
            assert!(*g < 1e-13 && *b < 1e-26, "gap {g} residual {b}");
        }
    }
}
