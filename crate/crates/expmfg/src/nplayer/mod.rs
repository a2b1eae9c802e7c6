//! Constructive solver for the N-player game.
//!
//! Pipeline: solve the per-type benchmark conditional mean-field BSDEs, run
//! the deviation fixed point for the difference between the N-player system
//! and the benchmarks, then invert the coordinate changes to recover the
//! equilibrium (X, Y, Z) and the candidate strategies.
//!
//! Simulation layout: one common-noise block hosts `K = N` idiosyncratic
//! copies and player `i` owns copy `i`, so opponent sums couple players within
//! a block while conditional expectations given the common noise average over
//! all copies of all blocks.

pub(crate) mod law;
pub mod transforms;

pub use transforms::ZTransform;

use rayon::prelude::*;

use crate::assumptions::{self, NormMode};
use crate::bsde::{
    backward_sweep, bmo_norm_estimate, conditional_mean_common, BsdeGrid, BsdeProblem, PicardOpts,
    RegressionBasis,
};
use crate::closed_form;
use crate::error::{Error, Result};
use crate::market::{GameConfig, PathBundle};
use law::type_coeffs;

/// Options shared by the benchmark and deviation solvers.
#[derive(Debug, Clone, Copy)]
pub struct SolverOpts {
    pub degree: usize,
    pub ridge: f64,
    pub picard: PicardOpts,
}

impl Default for SolverOpts {
    fn default() -> Self {
        SolverOpts { degree: 2, ridge: 1e-8, picard: PicardOpts { max_iters: 40, tol: 1e-8 } }
    }
}

/// Empirical norm bound of one player's benchmark solution against `R^2`.
#[derive(Debug, Clone)]
pub struct PlayerBound {
    pub player: usize,
    pub sup_y: f64,
    pub bmo_z: f64,
    pub bmo_z0: f64,
    pub lhs: f64,
    pub r_squared: f64,
    pub within: bool,
}

/// Per-type solution of the benchmark conditional mean-field BSDEs on the
/// full (block x copy) grid, terminal value 0. Player-level values are the
/// type grids shifted by `theta_i * peer_avg_x0(i)`.
#[derive(Debug, Clone)]
pub struct BenchmarkSolution {
    pub n_types: usize,
    pub n_blocks: usize,
    pub k_copies: usize,
    pub n_steps: usize,
    pub dt: f64,
    /// `[type][step * n_paths + path]`, step in `0..=n_steps`.
    pub y: Vec<Vec<f64>>,
    /// `[type][step * n_paths + path]`, step in `0..n_steps`.
    pub z: Vec<Vec<f64>>,
    pub z0: Vec<Vec<f64>>,
    pub picard_iters: usize,
    pub picard_residuals: Vec<f64>,
    pub converged: bool,
    /// Per-player empirical bound report (N-player configs only).
    pub bounds: Vec<PlayerBound>,
    /// True when the sufficient smallness conditions fail and the solution is
    /// outside the proven regime.
    pub outside_proven_regime: bool,
}

impl BenchmarkSolution {
    fn n_paths(&self) -> usize {
        self.n_blocks * self.k_copies
    }

    /// Benchmark idiosyncratic Z of player `j` on its own copy, `[step * n_blocks + block]`.
    pub fn player_z_grid(&self, config: &GameConfig, j: usize) -> Result<Vec<f64>> {
        self.player_grid(config, j, false)
    }

    /// Benchmark common Z of player `j` on its own copy.
    pub fn player_z0_grid(&self, config: &GameConfig, j: usize) -> Result<Vec<f64>> {
        self.player_grid(config, j, true)
    }

    fn player_grid(&self, config: &GameConfig, j: usize, common: bool) -> Result<Vec<f64>> {
        let label = config.players()?[j].type_label;
        let np = self.n_paths();
        let src = if common { &self.z0[label] } else { &self.z[label] };
        let mut out = vec![0.0; self.n_steps * self.n_blocks];
        for k in 0..self.n_steps {
            for b in 0..self.n_blocks {
                out[k * self.n_blocks + b] = src[k * np + b * self.k_copies + j];
            }
        }
        Ok(out)
    }
}

/// Conditional means given the common noise, mixed exactly over the type law:
/// `cm[k * n_blocks + b] = sum_tau p_tau * mean_copies(weight_tau(k) * grid_tau)`.
fn law_mixed_cm(
    grids: &[Vec<f64>],
    weights: &dyn Fn(usize, usize) -> f64,
    probs: &[f64],
    n_blocks: usize,
    k_copies: usize,
    n_steps: usize,
) -> Result<Vec<f64>> {
    let np = n_blocks * k_copies;
    let mut cm = vec![0.0; n_steps * n_blocks];
    for (label, grid) in grids.iter().enumerate() {
        for k in 0..n_steps {
            let means = conditional_mean_common(&grid[k * np..(k + 1) * np], n_blocks, k_copies)?;
            let w = probs[label];
            for b in 0..n_blocks {
                cm[k * n_blocks + b] += w * weights(label, k) * means[b];
            }
        }
    }
    Ok(cm)
}

pub(crate) struct LawSystem {
    pub y: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub z0: Vec<Vec<f64>>,
    pub iters: usize,
    pub residuals: Vec<f64>,
    pub converged: bool,
}

/// Core solver for the conditional mean-field system shared by the N-player
/// benchmark (terminal 0) and the common-noise mean-field game (terminal
/// `theta_tau * E[X_0]`). The driver of type `tau` reads its own current Z
/// components and the law-mixed conditional means frozen at the previous
/// Picard iterate.
pub(crate) fn solve_law_system(
    config: &GameConfig,
    paths: &PathBundle,
    terminal_of_type: &dyn Fn(usize) -> f64,
    opts: SolverOpts,
) -> Result<LawSystem> {
    let coeffs = type_coeffs(config);
    let e_theta = coeffs.e_theta;
    if e_theta >= 1.0 {
        return Err(Error::Config(format!("mean competition weight must be below 1, got {e_theta}")));
    }
    let nt = coeffs.n_types;
    let ns = paths.n_steps;
    let np = paths.n_paths();
    let dt = paths.dt;
    if ns != config.n_steps {
        return Err(Error::Shape("path bundle grid differs from config grid".into()));
    }

    let w = paths.idio_states();
    let w0 = paths.common_states_per_path();
    let inc = paths.idio_inc_grid();
    let inc0 = paths.common_inc_grid_per_path();
    let basis = RegressionBasis::two_vars(opts.degree);

    let mut z_grids: Vec<Vec<f64>> = vec![vec![0.0; ns * np]; nt];
    let mut z0_grids: Vec<Vec<f64>> = vec![vec![0.0; ns * np]; nt];
    let mut y_grids: Vec<Vec<f64>> = vec![vec![0.0; (ns + 1) * np]; nt];
    let mut residuals = Vec::new();
    let dummy_prev = BsdeGrid::zeros(np, ns, 2);

    for iter in 0..opts.picard.max_iters {
        let cm_z0 = law_mixed_cm(&z0_grids, &|_, _| 1.0, &coeffs.probs, paths.n_blocks, paths.k_copies, ns)?;
        let cm_bz = law_mixed_cm(
            &z_grids,
            &|label, k| coeffs.b[label][k],
            &coeffs.probs,
            paths.n_blocks,
            paths.k_copies,
            ns,
        )?;
        let cm_b0z0 = law_mixed_cm(
            &z0_grids,
            &|label, k| coeffs.b0[label][k],
            &coeffs.probs,
            paths.n_blocks,
            paths.k_copies,
            ns,
        )?;

        let mut sup_change: f64 = 0.0;
        for label in 0..nt {
            let terminal = vec![terminal_of_type(label); np];
            let problem = BsdeProblem {
                dt,
                n_steps: ns,
                n_paths: np,
                terminal: &terminal,
                increments: vec![&inc, &inc0],
                basis,
                w: &w,
                w0: Some(&w0),
                ridge: opts.ridge,
            };
            let theta = coeffs.theta[label];
            let alpha = coeffs.alpha[label];
            let c1 = theta / (1.0 - e_theta);
            let k_copies = paths.k_copies;
            let (grid, _, _) = backward_sweep(
                &problem,
                |ctx| {
                    let k = ctx.step;
                    let b = coeffs.b[label][k];
                    let b0 = coeffs.b0[label][k];
                    let bbar_sq = b * b + b0 * b0;
                    let row = k * paths.n_blocks;
                    (0..np)
                        .map(|p| {
                            let blk = p / k_copies;
                            let agg0 = cm_z0[row + blk] + coeffs.e_merton0[k];
                            let drift = b * ctx.z[0][p]
                                + bbar_sq / (2.0 * alpha)
                                + b0 * (ctx.z[1][p] + c1 * agg0)
                                - theta
                                    * (coeffs.e_bbar_sq_over_alpha[k] + cm_bz[row + blk] + cm_b0z0[row + blk])
                                - c1 * coeffs.e_theta_b0[k] * agg0;
                            -drift
                        })
                        .collect()
                },
                &dummy_prev,
            )?;
            for k in 0..ns {
                for p in 0..np {
                    let idx = k * np + p;
                    sup_change = sup_change.max((grid.z[0][idx] - z_grids[label][idx]).abs());
                    sup_change = sup_change.max((grid.z[1][idx] - z0_grids[label][idx]).abs());
                }
            }
            z_grids[label].copy_from_slice(&grid.z[0]);
            z0_grids[label].copy_from_slice(&grid.z[1]);
            y_grids[label].copy_from_slice(&grid.y);
        }
        residuals.push(sup_change);
        if sup_change <= opts.picard.tol {
            return Ok(LawSystem {
                y: y_grids,
                z: z_grids,
                z0: z0_grids,
                iters: iter + 1,
                residuals,
                converged: true,
            });
        }
    }
    Err(Error::NonConvergence { context: "benchmark system Picard".into(), residuals })
}

/// Solve the benchmark conditional mean-field BSDEs for an N-player config.
/// Smallness failures downgrade to a warning flag; the empirical bound of
/// each player's solution is reported against `r_bound^2`.
pub fn solve_benchmark(
    config: &GameConfig,
    paths: &PathBundle,
    r_bound: f64,
    opts: SolverOpts,
) -> Result<BenchmarkSolution> {
    let players = config.players()?;
    let system = solve_law_system(config, paths, &|_| 0.0, opts)?;
    let smallness = assumptions::check_benchmark(config, r_bound, NormMode::Analytic)?;

    let np = paths.n_paths();
    let mut bounds = Vec::with_capacity(players.len());
    for (i, p) in players.iter().enumerate() {
        let shift = p.theta * config.peer_avg_x0(i)?;
        let label = p.type_label;
        let sup_y = system.y[label].iter().map(|v| (v + shift).abs()).fold(0.0, f64::max);
        let bmo_z = bmo_norm_estimate(&system.z[label], np, paths.dt);
        let bmo_z0 = bmo_norm_estimate(&system.z0[label], np, paths.dt);
        let lhs = sup_y * sup_y + bmo_z * bmo_z + bmo_z0 * bmo_z0;
        bounds.push(PlayerBound {
            player: i,
            sup_y,
            bmo_z,
            bmo_z0,
            lhs,
            r_squared: r_bound * r_bound,
            within: lhs <= r_bound * r_bound,
        });
    }

    Ok(BenchmarkSolution {
        n_types: config.types.n_types(),
        n_blocks: paths.n_blocks,
        k_copies: paths.k_copies,
        n_steps: paths.n_steps,
        dt: paths.dt,
        y: system.y,
        z: system.z,
        z0: system.z0,
        picard_iters: system.iters,
        picard_residuals: system.residuals,
        converged: system.converged,
        bounds,
        outside_proven_regime: !smallness.all_pass,
    })
}

/// Deterministic fast path for deterministic-in-(t, type) returns: the
/// benchmark Z components vanish and Y is a plain time integral.
pub fn benchmark_closed_form(config: &GameConfig, paths: &PathBundle) -> Result<BenchmarkSolution> {
    let coeffs = type_coeffs(config);
    let e_theta = coeffs.e_theta;
    if e_theta >= 1.0 {
        return Err(Error::Config("mean competition weight must be below 1".into()));
    }
    let nt = coeffs.n_types;
    let ns = paths.n_steps;
    let np = paths.n_paths();
    let dt = paths.dt;

    let mut y = vec![vec![0.0; (ns + 1) * np]; nt];
    for label in 0..nt {
        let theta = coeffs.theta[label];
        let alpha = coeffs.alpha[label];
        let c1 = theta / (1.0 - e_theta);
        let mut acc = 0.0;
        let mut per_step = vec![0.0; ns + 1];
        for k in (0..ns).rev() {
            let b = coeffs.b[label][k];
            let b0 = coeffs.b0[label][k];
            let drift = (b * b + b0 * b0) / (2.0 * alpha) + b0 * c1 * coeffs.e_merton0[k]
                - theta * coeffs.e_bbar_sq_over_alpha[k]
                - c1 * coeffs.e_theta_b0[k] * coeffs.e_merton0[k];
            acc -= drift * dt;
            per_step[k] = acc;
        }
        for k in 0..=ns {
            for p in 0..np {
                y[label][k * np + p] = per_step[k];
            }
        }
    }

    let bounds = if config.is_nplayer() {
        let players = config.players()?;
        players
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let shift = p.theta * config.peer_avg_x0(i).unwrap_or(0.0);
                let sup_y = y[p.type_label].iter().map(|v| (v + shift).abs()).fold(0.0, f64::max);
                PlayerBound {
                    player: i,
                    sup_y,
                    bmo_z: 0.0,
                    bmo_z0: 0.0,
                    lhs: sup_y * sup_y,
                    r_squared: f64::INFINITY,
                    within: true,
                }
            })
            .collect()
    } else {
        Vec::new()
    };

    Ok(BenchmarkSolution {
        n_types: nt,
        n_blocks: paths.n_blocks,
        k_copies: paths.k_copies,
        n_steps: ns,
        dt,
        y,
        z: vec![vec![0.0; ns * np]; nt],
        z0: vec![vec![0.0; ns * np]; nt],
        picard_iters: 0,
        picard_residuals: Vec::new(),
        converged: true,
        bounds,
        outside_proven_regime: false,
    })
}

/// Literal term-by-term evaluation of the finite-population residual that
/// separates the N-player system from N copies of the benchmark. Returns one
/// grid per player, layout `[step * n_blocks + block]`. Conditional
/// expectations given the common noise use law-mixed copy averages; type-law
/// moments of the deterministic coefficients are exact sums.
pub fn finite_size_residual(
    config: &GameConfig,
    benchmark: &BenchmarkSolution,
    paths: &PathBundle,
) -> Result<Vec<Vec<f64>>> {
    let players = config.players()?;
    let n = players.len();
    if paths.k_copies != n {
        return Err(Error::Shape(format!(
            "finite-size residual needs one copy per player (k_copies {} vs N {})",
            paths.k_copies, n
        )));
    }
    let coeffs = type_coeffs(config);
    let e_theta = coeffs.e_theta;
    let ns = paths.n_steps;
    let nb = paths.n_blocks;
    let nm1 = (n - 1) as f64;

    // Realised benchmark Z components of each player on its own copy.
    let zb: Vec<Vec<f64>> = (0..n).map(|j| benchmark.player_z_grid(config, j)).collect::<Result<_>>()?;
    let z0b: Vec<Vec<f64>> = (0..n).map(|j| benchmark.player_z0_grid(config, j)).collect::<Result<_>>()?;

    // Law-level conditional means of the benchmark solution.
    let cm_z0 = law_mixed_cm(&benchmark.z0, &|_, _| 1.0, &coeffs.probs, nb, paths.k_copies, ns)?;
    let cm_bz = law_mixed_cm(&benchmark.z, &|l, k| coeffs.b[l][k], &coeffs.probs, nb, paths.k_copies, ns)?;
    let cm_b0z0 =
        law_mixed_cm(&benchmark.z0, &|l, k| coeffs.b0[l][k], &coeffs.probs, nb, paths.k_copies, ns)?;

    let theta_i: Vec<f64> = players.iter().map(|p| p.theta).collect();
    let q: Vec<f64> = theta_i.iter().map(|t| 1.0 + t / nm1).collect();
    let denom = 1.0 - theta_i.iter().map(|t| t / (nm1 + t)).sum::<f64>();
    if denom <= 0.0 {
        return Err(Error::NonpositiveDenominator(denom));
    }

    let b_of = |j: usize, k: usize| coeffs.b[players[j].type_label][k];
    let b0_of = |j: usize, k: usize| coeffs.b0[players[j].type_label][k];
    let alpha_of = |j: usize| players[j].alpha;

    let mut out = vec![vec![0.0; ns * nb]; n];
    for k in 0..ns {
        let s_m0: f64 = (0..n).map(|j| b0_of(j, k) / alpha_of(j) / q[j]).sum();
        for b in 0..nb {
            let idx = k * nb + b;
            let s_z0: f64 = (0..n).map(|j| z0b[j][idx] / q[j]).sum();
            for i in 0..n {
                let th = theta_i[i];
                if th == 0.0 {
                    continue;
                }
                let w = th / nm1;
                let b0_i = b0_of(i, k);
                let c1 = th / (1.0 - e_theta);

                let mut g1 = th * cm_bz[idx];
                let mut g4 = th * cm_b0z0[idx];
                let mut g5 = c1 * coeffs.e_theta_b0[k] * cm_z0[idx];
                let mut g6 = c1 * coeffs.e_theta_b0[k] * coeffs.e_merton0[k];
                let mut g7_sum = 0.0;
                let mut g8_sum = 0.0;
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    g1 -= w * b_of(j, k) * zb[j][idx];
                    g4 -= w * b0_of(j, k) * z0b[j][idx] / q[j];
                    g5 -= w * b0_of(j, k) * (theta_i[j] / nm1) * (s_z0 / denom) / q[j];
                    g6 -= w * b0_of(j, k) * (theta_i[j] / nm1) * (s_m0 / denom) / q[j];
                    g7_sum += (b_of(j, k).powi(2) + b0_of(j, k).powi(2)) / alpha_of(j);
                    g8_sum += theta_i[j] * b0_of(j, k).powi(2) / (alpha_of(j) * q[j]);
                }
                let g2 = b0_i * w * (s_z0 / denom) / q[i] - c1 * b0_i * cm_z0[idx];
                let g3 = b0_i * w * (s_m0 / denom) / q[i] - c1 * b0_i * coeffs.e_merton0[k];
                let g7 = th * (coeffs.e_bbar_sq_over_alpha[k] - g7_sum / nm1);
                let g8 = -th / (nm1 * q[i]) * b0_i * b0_i / alpha_of(i) + th / (nm1 * nm1) * g8_sum;
                let g9 = -th / (nm1 + th) * b0_i * z0b[i][idx];
                out[i][idx] = g1 + g2 + g3 + g4 + g5 + g6 + g7 + g8 + g9;
            }
        }
    }
    Ok(out)
}

/// `sqrt(|residual|)` BMO proxies squared, one per player.
pub fn residual_bmo_sq(residual: &[Vec<f64>], n_blocks: usize, dt: f64) -> Vec<f64> {
    residual
        .iter()
        .map(|grid| {
            let root: Vec<f64> = grid.iter().map(|v| v.abs().sqrt()).collect();
            bmo_norm_estimate(&root, n_blocks, dt).powi(2)
        })
        .collect()
}

/// Empirical `E int |residual|^2 dt` per player.
pub fn residual_l2_sq(residual: &[Vec<f64>], n_blocks: usize, dt: f64) -> Vec<f64> {
    residual
        .iter()
        .map(|grid| grid.iter().map(|v| v * v * dt).sum::<f64>() / n_blocks as f64)
        .collect()
}

/// A-priori radius of the deviation fixed point per player:
/// `sqrt(2 (20 r_bmo_sq + 640 alpha^2 theta^4 R^4 / (N-1)^2
///        + 80 alpha^2 theta^4 (avg_{j != i} |b_j/alpha_j|^2)^2 / (N-1)^2))`.
pub fn deviation_radius(
    config: &GameConfig,
    residual_bmo_sq: &[f64],
    r_bound: f64,
    mode: NormMode,
) -> Result<Vec<f64>> {
    let players = config.players()?;
    let n = players.len();
    if residual_bmo_sq.len() != n {
        return Err(Error::Shape("one residual norm per player required".into()));
    }
    let nm1 = (n - 1) as f64;
    let merton_sq: Vec<f64> = (0..n)
        .map(|j| {
            let label = players[j].type_label;
            assumptions::process_bmo_sq(config, mode, &|t| {
                config.returns.b(t, label) / players[j].alpha
            })
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let avg: f64 =
                (0..n).filter(|j| *j != i).map(|j| merton_sq[j]).sum::<f64>() / nm1;
            let a2 = players[i].alpha.powi(2);
            let t4 = players[i].theta.powi(4);
            (2.0 * (20.0 * residual_bmo_sq[i]
                + 640.0 * a2 * t4 * r_bound.powi(4) / (nm1 * nm1)
                + 80.0 * a2 * t4 * avg * avg / (nm1 * nm1)))
                .sqrt()
        })
        .collect())
}

/// Analytic upper estimate of the `sqrt(|residual|)` BMO norm per player,
/// evaluated from the configured norm proxies alone.
pub fn residual_bmo_bound(config: &GameConfig, r_bound: f64, mode: NormMode) -> Result<Vec<f64>> {
    let players = config.players()?;
    let n = players.len();
    let nm1 = (n - 1) as f64;
    let e_theta = config.types.e_theta();
    let r = r_bound;

    let norm_b: Vec<f64> = (0..n)
        .map(|j| assumptions::process_bmo(config, mode, &|t| config.returns.b(t, players[j].type_label)))
        .collect();
    let norm_b0: Vec<f64> = (0..n)
        .map(|j| assumptions::process_bmo(config, mode, &|t| config.returns.b0(t, players[j].type_label)))
        .collect();
    let norm_m0: Vec<f64> = (0..n)
        .map(|j| {
            assumptions::process_bmo(config, mode, &|t| {
                config.returns.b0(t, players[j].type_label) / players[j].alpha
            })
        })
        .collect();
    let norm_bbar_sq: Vec<f64> = (0..n)
        .map(|j| {
            let label = players[j].type_label;
            assumptions::process_bmo_sq(config, mode, &|t| {
                let (b, b0) = (config.returns.b(t, label), config.returns.b0(t, label));
                (b * b + b0 * b0).sqrt() / players[j].alpha.sqrt()
            })
        })
        .collect();
    let norm_b0_sqrt_alpha_sq: Vec<f64> = (0..n)
        .map(|j| {
            let label = players[j].type_label;
            assumptions::process_bmo_sq(config, mode, &|t| {
                config.returns.b0(t, label) / players[j].alpha.sqrt()
            })
        })
        .collect();

    let thetas: Vec<f64> = players.iter().map(|p| p.theta).collect();
    let denom_bar = 1.0 - thetas.iter().map(|t| t / (nm1 + t)).sum::<f64>();
    if denom_bar <= 0.0 {
        return Err(Error::NonpositiveDenominator(denom_bar));
    }

    let avg_excl = |vals: &dyn Fn(usize) -> f64, i: usize| -> f64 {
        (0..n).filter(|j| *j != i).map(vals).sum::<f64>() / nm1
    };
    let avg_all = |vals: &dyn Fn(usize) -> f64| -> f64 { (0..n).map(vals).sum::<f64>() / n as f64 };

    Ok((0..n)
        .map(|i| {
            let th = thetas[i];
            let c1 = th / (1.0 - e_theta);
            th * r * avg_excl(&|j| norm_b[j], i)
                + th * norm_b[i] * r
                + 2.0 * th * norm_b0[i] * r / denom_bar
                + c1 * norm_b0[i] * r
                + 2.0 * th * norm_b0[i] / denom_bar * avg_all(&|j| norm_m0[j])
                + c1 * norm_b0[i] * norm_m0[i]
                + th * r * avg_excl(&|j| norm_b0[j], i)
                + th * norm_b0[i] * r
                + 2.0 * th / denom_bar * avg_excl(&|j| thetas[j] * norm_b0[j], i) * r
                + th * c1 * norm_b0[i] * r
                + 2.0 * th / denom_bar
                    * avg_excl(&|j| thetas[j] * norm_b0[j], i)
                    * avg_all(&|j| norm_m0[j])
                + th * c1 * norm_b0[i] * norm_m0[i]
                + th * avg_excl(&|j| norm_bbar_sq[j], i)
                + th * norm_bbar_sq[i]
                + th / nm1 * norm_b0_sqrt_alpha_sq[i]
                + th / (nm1 * nm1)
                    * (0..n)
                        .filter(|j| *j != i)
                        .map(|j| thetas[j] * norm_b0_sqrt_alpha_sq[j])
                        .sum::<f64>()
                + th / nm1 * norm_b0[i] * r
        })
        .collect())
}

fn cross_slot(i: usize, j: usize) -> usize {
    if j < i {
        j
    } else {
        j - 1
    }
}

/// Initialisation of the deviation fixed point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviationInit {
    Zero,
    /// Start from the closed-form equilibrium mapped through the transforms.
    WarmStart,
}

/// Solution of the deviation system: per-player grids on the block paths.
#[derive(Debug, Clone)]
pub struct DeviationSolution {
    pub n_players: usize,
    pub n_blocks: usize,
    pub n_steps: usize,
    pub dt: f64,
    /// `[player][step * n_blocks + block]`, y has `n_steps + 1` rows.
    pub y: Vec<Vec<f64>>,
    pub z_own: Vec<Vec<f64>>,
    pub z_common: Vec<Vec<f64>>,
    /// `[player][slot][step * n_blocks + block]` with slot `j - (j > i)`.
    pub z_cross: Vec<Vec<Vec<f64>>>,
    pub picard_iters: usize,
    pub picard_residuals: Vec<f64>,
    pub converged: bool,
    /// Fixed-point radii per player and whether the empirical norms sit
    /// inside them.
    pub radius: Vec<f64>,
    pub bound_satisfied: Vec<bool>,
    /// Empirical `E int |residual|^2 dt` per player.
    pub residual_l2_sq: Vec<f64>,
}

struct DeviationState {
    z_own: Vec<Vec<f64>>,
    z_common: Vec<Vec<f64>>,
    z_cross: Vec<Vec<Vec<f64>>>,
}

impl DeviationState {
    fn zeros(n: usize, cells: usize) -> Self {
        DeviationState {
            z_own: vec![vec![0.0; cells]; n],
            z_common: vec![vec![0.0; cells]; n],
            z_cross: vec![vec![vec![0.0; cells]; n - 1]; n],
        }
    }

    fn sup_diff(&self, other: &DeviationState) -> f64 {
        let mut m: f64 = 0.0;
        let cmp = |a: &[f64], b: &[f64], m: &mut f64| {
            for (x, y) in a.iter().zip(b) {
                *m = (*m).max((x - y).abs());
            }
        };
        for i in 0..self.z_own.len() {
            cmp(&self.z_own[i], &other.z_own[i], &mut m);
            cmp(&self.z_common[i], &other.z_common[i], &mut m);
            for s in 0..self.z_cross[i].len() {
                cmp(&self.z_cross[i][s], &other.z_cross[i][s], &mut m);
            }
        }
        m
    }
}

/// Fully-frozen fixed point for the deviation system: every Z argument of
/// the driver is frozen at the previous sweep, so each sweep solves N
/// decoupled linear-in-y equations by backward induction.
pub fn solve_deviation_system(
    config: &GameConfig,
    paths: &PathBundle,
    benchmark: &BenchmarkSolution,
    r_bound: f64,
    opts: SolverOpts,
    init: DeviationInit,
) -> Result<DeviationSolution> {
    let players = config.players()?;
    let n = players.len();
    if paths.k_copies != n {
        return Err(Error::Shape(format!(
            "deviation system needs one copy per player (k_copies {} vs N {})",
            paths.k_copies, n
        )));
    }
    let ns = paths.n_steps;
    let nb = paths.n_blocks;
    let dt = paths.dt;
    let nm1 = (n - 1) as f64;
    let cells = ns * nb;
    let coeffs = type_coeffs(config);

    let residual = finite_size_residual(config, benchmark, paths)?;
    let res_l2 = residual_l2_sq(&residual, nb, dt);
    let res_bmo = residual_bmo_sq(&residual, nb, dt);
    let radius = deviation_radius(config, &res_bmo, r_bound, NormMode::Empirical)?;

    let zb: Vec<Vec<f64>> = (0..n).map(|j| benchmark.player_z_grid(config, j)).collect::<Result<_>>()?;
    let z0b: Vec<Vec<f64>> = (0..n).map(|j| benchmark.player_z0_grid(config, j)).collect::<Result<_>>()?;

    let thetas: Vec<f64> = players.iter().map(|p| p.theta).collect();
    let q: Vec<f64> = thetas.iter().map(|t| 1.0 + t / nm1).collect();
    let denom = 1.0 - thetas.iter().map(|t| t / (nm1 + t)).sum::<f64>();
    if denom <= 0.0 {
        return Err(Error::NonpositiveDenominator(denom));
    }
    let b_of = |j: usize, k: usize| coeffs.b[players[j].type_label][k];
    let b0_of = |j: usize, k: usize| coeffs.b0[players[j].type_label][k];

    // Per-player regression inputs: player i observes (W^i, W^0) and carries
    // one Z component per Brownian driver (own, common, each opponent).
    let w0_block = {
        let mut w = vec![0.0; (ns + 1) * nb];
        for b in 0..nb {
            let mut acc = 0.0;
            for k in 0..ns {
                acc += paths.common_inc_block(b, k);
                w[(k + 1) * nb + b] = acc;
            }
        }
        w
    };
    let inc0_block = paths.common_inc_grid();
    let w_own: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut w = vec![0.0; (ns + 1) * nb];
            for b in 0..nb {
                let mut acc = 0.0;
                for k in 0..ns {
                    acc += paths.idio_inc(b * n + i, k);
                    w[(k + 1) * nb + b] = acc;
                }
            }
            w
        })
        .collect();
    let inc_copy: Vec<Vec<f64>> = (0..n).map(|i| paths.idio_inc_grid_for_copy(i)).collect();
    let basis = RegressionBasis::two_vars(opts.degree);

    let mut state = DeviationState::zeros(n, cells);
    if init == DeviationInit::WarmStart {
        let eq = closed_form::nplayer_closed_form(config)?;
        let tr = ZTransform::new(thetas.clone())?;
        for k in 0..ns {
            let t = config.grid_time(k);
            let m0: Vec<f64> = (0..n).map(|j| b0_of(j, k) / players[j].alpha).collect();
            let raw_z0: Vec<f64> = (0..n).map(|j| eq.z_i0_at(j, k)).collect();
            let reduced = tr.reduced_common(&raw_z0, &m0);
            for i in 0..n {
                for b in 0..nb {
                    let idx = k * nb + b;
                    state.z_own[i][idx] = eq.z_ii[i * (ns + 1) + k] - zb[i][idx];
                    state.z_common[i][idx] = reduced[i] - z0b[i][idx];
                    for j in 0..n {
                        if j != i {
                            let m_j = config.returns.b(t, players[j].type_label) / players[j].alpha;
                            state.z_cross[i][cross_slot(i, j)][idx] =
                                tr.reduced_cross(i, eq.z_ij_at(i, j, k), eq.z_ii[j * (ns + 1) + k], m_j);
                        }
                    }
                }
            }
        }
    }

    let mut y_grids = vec![vec![0.0; (ns + 1) * nb]; n];
    let mut residuals_trace = Vec::new();
    let terminal = vec![0.0; nb];
    let dummy_prev = BsdeGrid::zeros(nb, ns, 1);
    let mut converged = false;
    let mut iters = 0;

    for sweep in 0..opts.picard.max_iters {
        iters = sweep + 1;
        // Frozen driver grids for every player.
        let drivers: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let th = thetas[i];
                let mut g = vec![0.0; cells];
                for k in 0..ns {
                    for b in 0..nb {
                        let idx = k * nb + b;
                        let s_hat0: f64 = (0..n).map(|j| state.z_common[j][idx] / q[j]).sum();
                        let agg = s_hat0 / denom;
                        let mut drift = b_of(i, k) * state.z_own[i][idx]
                            + b0_of(i, k) * state.z_common[i][idx] / q[i]
                            + th * b0_of(i, k) / q[i] * agg / nm1
                            + residual[i][idx];
                        for j in 0..n {
                            if j == i {
                                continue;
                            }
                            let quad = state.z_cross[i][cross_slot(i, j)][idx]
                                + th * (state.z_own[j][idx]
                                    + zb[j][idx]
                                    + b_of(j, k) / players[j].alpha)
                                    / nm1;
                            drift += -players[i].alpha / 2.0 * quad * quad
                                - th / nm1 * b_of(j, k) * state.z_own[j][idx]
                                - th / nm1 * b0_of(j, k) * state.z_common[j][idx] / q[j]
                                - th / nm1 * b0_of(j, k) * (thetas[j] / nm1) * agg / q[j];
                        }
                        g[idx] = -drift;
                    }
                }
                g
            })
            .collect();

        let sweeps: Vec<(usize, BsdeGrid)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut increments: Vec<&[f64]> = Vec::with_capacity(n + 1);
                increments.push(&inc_copy[i]);
                increments.push(&inc0_block);
                for j in 0..n {
                    if j != i {
                        increments.push(&inc_copy[j]);
                    }
                }
                let problem = BsdeProblem {
                    dt,
                    n_steps: ns,
                    n_paths: nb,
                    terminal: &terminal,
                    increments,
                    basis,
                    w: &w_own[i],
                    w0: Some(&w0_block),
                    ridge: opts.ridge,
                };
                let g = &drivers[i];
                backward_sweep(
                    &problem,
                    |ctx| g[ctx.step * nb..(ctx.step + 1) * nb].to_vec(),
                    &dummy_prev,
                )
                .map(|(grid, _, _)| (i, grid))
            })
            .collect::<Result<_>>()?;

        let mut next = DeviationState::zeros(n, cells);
        for (i, grid) in sweeps {
            next.z_own[i].copy_from_slice(&grid.z[0]);
            next.z_common[i].copy_from_slice(&grid.z[1]);
            for j in 0..n {
                if j != i {
                    let slot = cross_slot(i, j);
                    next.z_cross[i][slot].copy_from_slice(&grid.z[2 + slot]);
                }
            }
            y_grids[i].copy_from_slice(&grid.y);
        }
        let change = next.sup_diff(&state);
        residuals_trace.push(change);
        state = next;
        if change <= opts.picard.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            context: "deviation system Picard".into(),
            residuals: residuals_trace,
        });
    }

    let max_radius_sq = radius.iter().fold(0.0f64, |m, a| m.max(a * a));
    let bound_satisfied: Vec<bool> = (0..n)
        .map(|i| {
            let sup_y = y_grids[i].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut lhs = 0.5 * sup_y * sup_y;
            lhs += bmo_norm_estimate(&state.z_own[i], nb, dt).powi(2);
            lhs += bmo_norm_estimate(&state.z_common[i], nb, dt).powi(2);
            for s in 0..n - 1 {
                lhs += bmo_norm_estimate(&state.z_cross[i][s], nb, dt).powi(2);
            }
            lhs <= max_radius_sq
        })
        .collect();

    Ok(DeviationSolution {
        n_players: n,
        n_blocks: nb,
        n_steps: ns,
        dt,
        y: y_grids,
        z_own: state.z_own,
        z_common: state.z_common,
        z_cross: state.z_cross,
        picard_iters: iters,
        picard_residuals: residuals_trace,
        converged,
        radius,
        bound_satisfied,
        residual_l2_sq: res_l2,
    })
}

/// The reconstructed equilibrium: forward wealth, value process and raw Z
/// components of every player on the block paths, plus the candidate
/// strategies.
#[derive(Debug, Clone)]
pub struct FbsdeSolution {
    pub n_players: usize,
    pub n_blocks: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub z_own: Vec<Vec<f64>>,
    pub z_common: Vec<Vec<f64>>,
    pub z_cross: Vec<Vec<Vec<f64>>>,
    pub pi: Vec<Vec<f64>>,
    pub pi0: Vec<Vec<f64>>,
    pub y0_mean: Vec<f64>,
}

impl FbsdeSolution {
    pub fn cross_at(&self, i: usize, j: usize, idx: usize) -> f64 {
        self.z_cross[i][cross_slot(i, j)][idx]
    }

    /// Mean of a per-player grid over blocks at one step.
    pub fn step_mean(grid: &[f64], n_blocks: usize, step: usize) -> f64 {
        grid[step * n_blocks..(step + 1) * n_blocks].iter().sum::<f64>() / n_blocks as f64
    }
}

/// Invert the coordinate changes: deviation + benchmark -> reduced -> raw Z,
/// then rebuild Y by re-adding the absorbed opponent integrals and X by the
/// forward Euler recursion under the candidate strategies.
pub fn reconstruct_equilibrium(
    config: &GameConfig,
    deviation: &DeviationSolution,
    benchmark: &BenchmarkSolution,
    paths: &PathBundle,
) -> Result<FbsdeSolution> {
    let players = config.players()?;
    let n = players.len();
    let ns = paths.n_steps;
    let nb = paths.n_blocks;
    let dt = paths.dt;
    let nm1 = (n - 1) as f64;
    let cells = ns * nb;
    let coeffs = type_coeffs(config);
    let np_bench = benchmark.n_paths();

    let zb: Vec<Vec<f64>> = (0..n).map(|j| benchmark.player_z_grid(config, j)).collect::<Result<_>>()?;
    let z0b: Vec<Vec<f64>> = (0..n).map(|j| benchmark.player_z0_grid(config, j)).collect::<Result<_>>()?;
    let thetas: Vec<f64> = players.iter().map(|p| p.theta).collect();
    let tr = ZTransform::new(thetas.clone())?;
    let b_of = |j: usize, k: usize| coeffs.b[players[j].type_label][k];
    let b0_of = |j: usize, k: usize| coeffs.b0[players[j].type_label][k];

    let mut z_own = vec![vec![0.0; cells]; n];
    let mut z_common = vec![vec![0.0; cells]; n];
    let mut z_cross = vec![vec![vec![0.0; cells]; n - 1]; n];

    for k in 0..ns {
        let m0: Vec<f64> = (0..n).map(|j| b0_of(j, k) / players[j].alpha).collect();
        for b in 0..nb {
            let idx = k * nb + b;
            // Reduced components: deviation plus benchmark.
            let raw_own: Vec<f64> = (0..n).map(|j| deviation.z_own[j][idx] + zb[j][idx]).collect();
            let reduced0: Vec<f64> = (0..n).map(|j| deviation.z_common[j][idx] + z0b[j][idx]).collect();
            let raw0 = tr.raw_common(&reduced0, &m0);
            for i in 0..n {
                z_own[i][idx] = raw_own[i];
                z_common[i][idx] = raw0[i];
                for j in 0..n {
                    if j != i {
                        let m_j = b_of(j, k) / players[j].alpha;
                        z_cross[i][cross_slot(i, j)][idx] = tr.raw_cross(
                            i,
                            deviation.z_cross[i][cross_slot(i, j)][idx],
                            raw_own[j],
                            m_j,
                        );
                    }
                }
            }
        }
    }

    // Strategies and forward wealth.
    let mut pi = vec![vec![0.0; cells]; n];
    let mut pi0 = vec![vec![0.0; cells]; n];
    let mut x = vec![vec![0.0; (ns + 1) * nb]; n];
    for i in 0..n {
        for b in 0..nb {
            x[i][b] = players[i].x0;
        }
        for k in 0..ns {
            for b in 0..nb {
                let idx = k * nb + b;
                pi[i][idx] = z_own[i][idx] + b_of(i, k) / players[i].alpha;
                pi0[i][idx] = z_common[i][idx] + b0_of(i, k) / players[i].alpha;
                let dw = paths.idio_inc(b * n + i, k);
                let dw0 = paths.common_inc_block(b, k);
                x[i][(k + 1) * nb + b] = x[i][k * nb + b]
                    + pi[i][idx] * (b_of(i, k) * dt + dw)
                    + pi0[i][idx] * (b0_of(i, k) * dt + dw0);
            }
        }
    }

    // Y: reduced value plus the absorbed opponent integrals.
    let mut y = vec![vec![0.0; (ns + 1) * nb]; n];
    let mut y0_mean = vec![0.0; n];
    for i in 0..n {
        let th = thetas[i];
        let shift = th * config.peer_avg_x0(i)?;
        let label = players[i].type_label;
        for b in 0..nb {
            let mut acc = 0.0;
            for k in 0..=ns {
                let bench_path = b * n + i;
                let reduced_y = deviation.y[i][k * nb + b]
                    + benchmark.y[label][k * np_bench + bench_path]
                    + shift;
                y[i][k * nb + b] = reduced_y + th / nm1 * acc;
                if k < ns {
                    let idx = k * nb + b;
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let mj = b_of(j, k) / players[j].alpha;
                        let mj0 = b0_of(j, k) / players[j].alpha;
                        let drift = z_own[j][idx] * b_of(j, k)
                            + z_common[j][idx] * b0_of(j, k)
                            + (b_of(j, k).powi(2) + b0_of(j, k).powi(2)) / players[j].alpha;
                        acc += drift * dt
                            + (z_own[j][idx] + mj) * paths.idio_inc(b * n + j, k)
                            + (z_common[j][idx] + mj0) * paths.common_inc_block(b, k);
                    }
                }
            }
        }
        y0_mean[i] = y[i][..nb].iter().sum::<f64>() / nb as f64;
    }

    Ok(FbsdeSolution {
        n_players: n,
        n_blocks: nb,
        n_steps: ns,
        dt,
        x,
        y,
        z_own,
        z_common,
        z_cross,
        pi,
        pi0,
        y0_mean,
    })
}

/// Per-player own, common and cross Z grids in deviation coordinates.
pub type DeviationZGrids = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>);

/// Forward map raw -> deviation coordinates on the Z grids; inverse of the
/// reconstruction. Exposed for round-trip validation.
pub fn deviation_from_raw(
    config: &GameConfig,
    raw: &FbsdeSolution,
    benchmark: &BenchmarkSolution,
) -> Result<DeviationZGrids> {
    let players = config.players()?;
    let n = players.len();
    let ns = raw.n_steps;
    let nb = raw.n_blocks;
    let cells = ns * nb;
    let coeffs = type_coeffs(config);
    let zb: Vec<Vec<f64>> = (0..n).map(|j| benchmark.player_z_grid(config, j)).collect::<Result<_>>()?;
    let z0b: Vec<Vec<f64>> = (0..n).map(|j| benchmark.player_z0_grid(config, j)).collect::<Result<_>>()?;
    let tr = ZTransform::new(players.iter().map(|p| p.theta).collect())?;
    let b_of = |j: usize, k: usize| coeffs.b[players[j].type_label][k];
    let b0_of = |j: usize, k: usize| coeffs.b0[players[j].type_label][k];

    let mut dev_own = vec![vec![0.0; cells]; n];
    let mut dev_common = vec![vec![0.0; cells]; n];
    let mut dev_cross = vec![vec![vec![0.0; cells]; n - 1]; n];
    for k in 0..ns {
        let m0: Vec<f64> = (0..n).map(|j| b0_of(j, k) / players[j].alpha).collect();
        for b in 0..nb {
            let idx = k * nb + b;
            let raw0: Vec<f64> = (0..n).map(|j| raw.z_common[j][idx]).collect();
            let reduced0 = tr.reduced_common(&raw0, &m0);
            for i in 0..n {
                dev_own[i][idx] = raw.z_own[i][idx] - zb[i][idx];
                dev_common[i][idx] = reduced0[i] - z0b[i][idx];
                for j in 0..n {
                    if j != i {
                        let m_j = b_of(j, k) / players[j].alpha;
                        dev_cross[i][cross_slot(i, j)][idx] = tr.reduced_cross(
                            i,
                            raw.cross_at(i, j, idx),
                            raw.z_own[j][idx],
                            m_j,
                        );
                    }
                }
            }
        }
    }
    Ok((dev_own, dev_common, dev_cross))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{sample_paths, ReturnModel, TypeDistribution, TypeSpec};
    use approx::assert_relative_eq;

    fn sym3(n_steps: usize, seed: u64) -> GameConfig {
        GameConfig::nplayer_uniform(
            3,
            TypeSpec { alpha: 1.0, theta: 0.5, x0: 1.0 },
            ReturnModel::Constant { b: 0.2, b0: 0.2 },
            1.0,
            n_steps,
            seed,
        )
        .unwrap()
    }

    fn zero_theta(n_steps: usize, seed: u64) -> GameConfig {
        GameConfig::nplayer_uniform(
            3,
            TypeSpec { alpha: 1.0, theta: 0.0, x0: 0.0 },
            ReturnModel::Constant { b: 0.2, b0: 0.2 },
            1.0,
            n_steps,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn benchmark_zero_theta_matches_deterministic_integral() {
        // theta = 0 decouples the system: y(t) = (t - T) |bbar|^2 / (2 alpha),
        // z = z0 = 0.
        let cfg = zero_theta(25, 31);
        let paths = sample_paths(&cfg, 400, 3).unwrap();
        let sol = solve_benchmark(&cfg, &paths, 1.0, SolverOpts::default()).unwrap();
        assert!(sol.converged);
        let np = paths.n_paths();
        let bbar_sq = 0.2f64 * 0.2 + 0.2 * 0.2;
        for k in [0usize, 12, 25] {
            let t = cfg.grid_time(k);
            let expect = (t - 1.0) * bbar_sq / 2.0;
            for p in (0..np).step_by(241) {
                assert!((sol.y[0][k * np + p] - expect).abs() < 1e-6, "k {k}");
            }
        }
        let worst_z = sol.z[0].iter().chain(&sol.z0[0]).fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst_z < 1e-8, "z sup {worst_z}");
    }

    #[test]
    fn benchmark_matches_ode_oracle_in_symmetric_case() {
        // Deterministic coefficients: all z vanish and y solves an ODE;
        // integrate it with fine fourth-order Runge-Kutta as the oracle.
        let cfg = sym3(50, 33);
        let paths = sample_paths(&cfg, 300, 3).unwrap();
        let sol = solve_benchmark(&cfg, &paths, 2.0, SolverOpts::default()).unwrap();

        // drift(t) for the single type; independent scalar route.
        let drift = |_t: f64| {
            let (b, b0, alpha, theta) = (0.2f64, 0.2f64, 1.0f64, 0.5f64);
            let e_theta = 0.5;
            let c1 = theta / (1.0 - e_theta);
            let e_m0 = b0 / alpha;
            let e_bb = (b * b + b0 * b0) / alpha;
            let e_th_b0 = theta * b0;
            (b * b + b0 * b0) / (2.0 * alpha) + b0 * c1 * e_m0 - theta * e_bb - c1 * e_th_b0 * e_m0
        };
        // dy/dt = drift (y_T = 0), integrated backwards by RK4.
        let mut y_oracle = 0.0;
        let h = 1.0 / 5000.0;
        for s in 0..5000 {
            let t = 1.0 - s as f64 * h;
            let k1 = drift(t);
            let k2 = drift(t - h / 2.0);
            let k4 = drift(t - h);
            y_oracle -= h / 6.0 * (k1 + 4.0 * k2 + k4);
        }
        let np = paths.n_paths();
        // Euler quadrature bias is O(dt); allow for it.
        assert!((sol.y[0][0] - y_oracle).abs() < 2e-3, "{} vs {y_oracle}", sol.y[0][0]);
        assert_eq!(sol.y[0][50 * np], 0.0);
        assert!(sol.picard_iters <= 10);
    }

    #[test]
    fn benchmark_two_type_ode_oracle() {
        // Heterogeneous types with sinusoidal rates: the per-type value still
        // solves an ODE whose coupling runs through the exact law moments.
        let dist = TypeDistribution::uniform(vec![
            TypeSpec { alpha: 1.0, theta: 0.2, x0: 0.0 },
            TypeSpec { alpha: 2.0, theta: 0.4, x0: 1.0 },
        ]);
        let labels = [0usize, 1, 0, 1];
        let returns =
            ReturnModel::Sinusoidal { b_base: 0.1, b_amp: 0.05, b0_base: 0.2, b0_amp: 0.1, freq: 1.0 };
        let cfg = GameConfig::nplayer_from_assignments(dist, &labels, returns, 1.0, 50, 59).unwrap();
        let paths = sample_paths(&cfg, 200, 4).unwrap();
        let sol = solve_benchmark(&cfg, &paths, 2.0, SolverOpts::default()).unwrap();

        // Independent scalar route: backward RK4 on dy/dt = drift(t).
        let e_theta = 0.3;
        let alphas = [1.0, 2.0];
        let thetas = [0.2, 0.4];
        let b = |t: f64| 0.1 + 0.05 * (2.0 * std::f64::consts::PI * t).sin();
        let b0 = |t: f64| 0.2 + 0.1 * (2.0 * std::f64::consts::PI * t).sin();
        let e_m0 = |t: f64| 0.5 * (b0(t) / 1.0 + b0(t) / 2.0);
        let e_bb2a = |t: f64| {
            0.5 * ((b(t).powi(2) + b0(t).powi(2)) / 1.0 + (b(t).powi(2) + b0(t).powi(2)) / 2.0)
        };
        let e_th_b0 = |t: f64| 0.5 * (0.2 * b0(t) + 0.4 * b0(t));
        for tau in 0..2 {
            let c1 = thetas[tau] / (1.0 - e_theta);
            let drift = |t: f64| {
                (b(t).powi(2) + b0(t).powi(2)) / (2.0 * alphas[tau]) + b0(t) * c1 * e_m0(t)
                    - thetas[tau] * e_bb2a(t)
                    - c1 * e_th_b0(t) * e_m0(t)
            };
            let mut y_oracle = 0.0;
            let h = 1.0 / 4000.0;
            for s in 0..4000 {
                let t = 1.0 - s as f64 * h;
                let k1 = drift(t);
                let k2 = drift(t - h / 2.0);
                let k4 = drift(t - h);
                y_oracle -= h / 6.0 * (k1 + 4.0 * k2 + k4);
            }
            // Left-Riemann quadrature bias of the scheme is O(dt).
            assert!(
                (sol.y[tau][0] - y_oracle).abs() < 3e-3,
                "type {tau}: {} vs {y_oracle}",
                sol.y[tau][0]
            );
        }
    }

    #[test]
    fn closed_form_benchmark_agrees_with_solver() {
        let cfg = sym3(20, 35);
        let paths = sample_paths(&cfg, 200, 3).unwrap();
        let fast = benchmark_closed_form(&cfg, &paths).unwrap();
        let slow = solve_benchmark(&cfg, &paths, 2.0, SolverOpts::default()).unwrap();
        let np = paths.n_paths();
        for k in [0usize, 10, 19] {
            assert!((fast.y[0][k * np] - slow.y[0][k * np]).abs() < 1e-6);
        }
    }

    #[test]
    fn residual_vanishes_without_competition() {
        let cfg = zero_theta(10, 37);
        let paths = sample_paths(&cfg, 50, 3).unwrap();
        let bench = benchmark_closed_form(&cfg, &paths).unwrap();
        let res = finite_size_residual(&cfg, &bench, &paths).unwrap();
        for grid in res {
            assert!(grid.iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn residual_single_group_hand_check() {
        // z-bench = 0 and b = 0: only the common-asset constant groups and
        // the |bbar|^2 group survive. Hand evaluation at one grid point.
        let theta = 0.4f64;
        let b0 = 0.3f64;
        let alpha = 2.0f64;
        let cfg = GameConfig::nplayer_uniform(
            3,
            TypeSpec { alpha, theta, x0: 0.0 },
            ReturnModel::Constant { b: 0.0, b0 },
            1.0,
            4,
            39,
        )
        .unwrap();
        let paths = sample_paths(&cfg, 5, 3).unwrap();
        let bench = benchmark_closed_form(&cfg, &paths).unwrap();
        let res = finite_size_residual(&cfg, &bench, &paths).unwrap();

        let n = 3.0f64;
        let nm1 = n - 1.0;
        let q = 1.0 + theta / nm1;
        let denom = 1.0 - n * theta / (nm1 + theta);
        let m0 = b0 / alpha;
        let s_m0 = n * m0 / q;
        let c1 = theta / (1.0 - theta);
        let g3 = b0 * (theta / nm1) * (s_m0 / denom) / q - c1 * b0 * m0;
        let g6 = c1 * theta * b0 * m0 - (theta / nm1) * nm1 * b0 * (theta / nm1) * (s_m0 / denom) / q;
        let g7 = theta * (b0 * b0 / alpha - b0 * b0 / alpha);
        let g8 = -theta / (nm1 * q) * b0 * b0 / alpha + theta / (nm1 * nm1) * nm1 * theta * b0 * b0 / (alpha * q);
        let expect = g3 + g6 + g7 + g8;
        assert_relative_eq!(res[0][0], expect, epsilon = 1e-12);
    }

    #[test]
    fn residual_l2_decreases_with_population_size() {
        // Heterogeneous two-type population: the empirical mismatch between
        // the per-population averages and the law means shrinks with N.
        let dist = TypeDistribution::uniform(vec![
            TypeSpec { alpha: 1.0, theta: 0.2, x0: 0.0 },
            TypeSpec { alpha: 2.0, theta: 0.4, x0: 0.5 },
        ]);
        let mut norms = Vec::new();
        for &n in &[4usize, 8, 16] {
            let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let cfg = GameConfig::nplayer_from_assignments(
                dist.clone(),
                &labels,
                ReturnModel::Constant { b: 0.1, b0: 0.3 },
                1.0,
                8,
                41,
            )
            .unwrap();
            let paths = sample_paths(&cfg, 4, n).unwrap();
            let bench = benchmark_closed_form(&cfg, &paths).unwrap();
            let res = finite_size_residual(&cfg, &bench, &paths).unwrap();
            norms.push(residual_l2_sq(&res, 4, paths.dt)[0]);
        }
        assert!(norms[1] < norms[0], "{norms:?}");
        assert!(norms[2] < norms[1], "{norms:?}");
    }

    #[test]
    fn deviation_radius_hand_arithmetic() {
        let cfg = GameConfig::nplayer_uniform(
            11,
            TypeSpec { alpha: 1.0, theta: 0.1, x0: 0.0 },
            ReturnModel::Constant { b: 0.2, b0: 0.2 },
            1.0,
            4,
            43,
        )
        .unwrap();
        let a = deviation_radius(&cfg, &[0.01; 11], 1.0, NormMode::Analytic).unwrap();
        let avg = 0.2f64 * 0.2; // |b/alpha|^2 analytic over T = 1
        let expect = (2.0
            * (20.0 * 0.01 + 640.0 * 0.1f64.powi(4) / 100.0 + 80.0 * 0.1f64.powi(4) * avg * avg / 100.0))
            .sqrt();
        assert_relative_eq!(a[0], expect, epsilon = 1e-14);

        // Zero inputs give zero radius.
        let zero = GameConfig::nplayer_uniform(
            4,
            TypeSpec { alpha: 1.0, theta: 0.0, x0: 0.0 },
            ReturnModel::Constant { b: 0.5, b0: 0.5 },
            1.0,
            4,
            43,
        )
        .unwrap();
        let a = deviation_radius(&zero, &[0.0; 4], 1.0, NormMode::Analytic).unwrap();
        assert!(a.iter().all(|v| *v == 0.0));

        // Monotone in each argument.
        let a_base = deviation_radius(&cfg, &[0.01; 11], 1.0, NormMode::Analytic).unwrap()[0];
        let a_bigger_b = deviation_radius(&cfg, &[0.02; 11], 1.0, NormMode::Analytic).unwrap()[0];
        let a_bigger_r = deviation_radius(&cfg, &[0.01; 11], 2.0, NormMode::Analytic).unwrap()[0];
        assert!(a_bigger_b > a_base && a_bigger_r > a_base);
    }

    #[test]
    fn deviation_zero_fixed_point_without_competition() {
        let cfg = zero_theta(20, 45);
        let paths = sample_paths(&cfg, 200, 3).unwrap();
        let bench = solve_benchmark(&cfg, &paths, 1.0, SolverOpts::default()).unwrap();
        let dev = solve_deviation_system(&cfg, &paths, &bench, 1.0, SolverOpts::default(), DeviationInit::Zero)
            .unwrap();
        assert!(dev.converged);
        let sup_y = dev.y.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        // The benchmark z's are noise-level, the residual carries theta = 0.
        assert!(sup_y < 1e-6, "sup y {sup_y}");

        // Full pipeline collapses to the Merton strategies.
        let eq = reconstruct_equilibrium(&cfg, &dev, &bench, &paths).unwrap();
        let nb = paths.n_blocks;
        for k in [0usize, 10, 19] {
            for i in 0..3 {
                let pi = FbsdeSolution::step_mean(&eq.pi[i], nb, k);
                let pi0 = FbsdeSolution::step_mean(&eq.pi0[i], nb, k);
                assert!((pi - 0.2).abs() < 1e-4, "pi {pi}");
                assert!((pi0 - 0.2).abs() < 1e-4, "pi0 {pi0}");
            }
        }
    }

    #[test]
    fn pipeline_recovers_closed_form_in_symmetric_case() {
        let cfg = sym3(50, 47);
        let paths = sample_paths(&cfg, 1200, 3).unwrap();
        let opts = SolverOpts::default();
        let bench = solve_benchmark(&cfg, &paths, 2.0, opts).unwrap();
        let dev =
            solve_deviation_system(&cfg, &paths, &bench, 2.0, opts, DeviationInit::Zero).unwrap();
        assert!(dev.picard_iters <= 10, "sweeps {}", dev.picard_iters);
        let eq = reconstruct_equilibrium(&cfg, &dev, &bench, &paths).unwrap();
        let nb = paths.n_blocks;
        for k in [5usize, 25, 45] {
            for i in 0..3 {
                let m = FbsdeSolution::step_mean(&eq.z_common[i], nb, k);
                assert!((m - 0.2).abs() / 0.2 < 5e-2, "player {i} step {k}: {m}");
                let mc = FbsdeSolution::step_mean(&eq.z_cross[i][0], nb, k);
                assert!((mc - 0.5 / 2.0 * 0.2).abs() < 2e-2, "cross {mc}");
            }
        }
        let closed = closed_form::nplayer_closed_form(&cfg).unwrap();
        for i in 0..3 {
            assert!((eq.y0_mean[i] - closed.y0[i]).abs() < 2e-2, "{} vs {}", eq.y0_mean[i], closed.y0[i]);
        }
    }

    #[test]
    fn pipeline_handles_time_varying_returns() {
        // Sinusoidal rates keep the equilibrium deterministic but
        // time-dependent; the aggregation identity pins z(t) = theta/(1 -
        // theta) * m0(t) in the symmetric case.
        let spec = TypeSpec { alpha: 1.0, theta: 0.3, x0: 0.5 };
        let cfg = GameConfig::nplayer_uniform(
            3,
            spec,
            ReturnModel::Sinusoidal { b_base: 0.1, b_amp: 0.05, b0_base: 0.2, b0_amp: 0.1, freq: 1.0 },
            1.0,
            40,
            57,
        )
        .unwrap();
        let paths = sample_paths(&cfg, 600, 3).unwrap();
        let opts = SolverOpts::default();
        let bench = solve_benchmark(&cfg, &paths, 2.0, opts).unwrap();
        let dev = solve_deviation_system(&cfg, &paths, &bench, 2.0, opts, DeviationInit::Zero).unwrap();
        let eq = reconstruct_equilibrium(&cfg, &dev, &bench, &paths).unwrap();
        let closed = closed_form::nplayer_closed_form(&cfg).unwrap();
        let nb = paths.n_blocks;
        for k in [3usize, 17, 33] {
            let t = cfg.grid_time(k);
            let m0 = cfg.returns.b0(t, 0);
            assert_relative_eq!(closed.z_i0_at(0, k), 0.3 / 0.7 * m0, epsilon = 1e-12);
            for i in 0..3 {
                let z0 = FbsdeSolution::step_mean(&eq.z_common[i], nb, k);
                assert!((z0 - closed.z_i0_at(i, k)).abs() < 2e-2, "step {k}: {z0} vs {}", closed.z_i0_at(i, k));
                let zc = FbsdeSolution::step_mean(&eq.z_cross[i][0], nb, k);
                let expect = 0.3 / 2.0 * cfg.returns.b(t, 0);
                assert!((zc - expect).abs() < 1e-2, "cross {zc} vs {expect}");
            }
        }
    }

    #[test]
    fn warm_start_agrees_with_zero_start() {
        let cfg = sym3(20, 49);
        let paths = sample_paths(&cfg, 400, 3).unwrap();
        let opts = SolverOpts { picard: PicardOpts { max_iters: 60, tol: 1e-9 }, ..SolverOpts::default() };
        let bench = solve_benchmark(&cfg, &paths, 2.0, opts).unwrap();
        let a = solve_deviation_system(&cfg, &paths, &bench, 2.0, opts, DeviationInit::Zero).unwrap();
        let b = solve_deviation_system(&cfg, &paths, &bench, 2.0, opts, DeviationInit::WarmStart).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for (x, y) in a.z_common[i].iter().zip(&b.z_common[i]) {
                worst = worst.max((x - y).abs());
            }
        }
        assert!(worst <= 2.0 * opts.picard.tol * 10.0, "gap {worst}");
    }

    #[test]
    fn transform_round_trip_on_solver_output() {
        let cfg = sym3(10, 51);
        let paths = sample_paths(&cfg, 100, 3).unwrap();
        let bench = benchmark_closed_form(&cfg, &paths).unwrap();
        // Random deviation state in place of a solved one.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let cells = 10 * 100;
        let dev = DeviationSolution {
            n_players: 3,
            n_blocks: 100,
            n_steps: 10,
            dt: paths.dt,
            y: vec![vec![0.0; 11 * 100]; 3],
            z_own: (0..3).map(|_| (0..cells).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
            z_common: (0..3).map(|_| (0..cells).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
            z_cross: (0..3)
                .map(|_| (0..2).map(|_| (0..cells).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect())
                .collect(),
            picard_iters: 1,
            picard_residuals: vec![0.0],
            converged: true,
            radius: vec![1.0; 3],
            bound_satisfied: vec![true; 3],
            residual_l2_sq: vec![0.0; 3],
        };
        let raw = reconstruct_equilibrium(&cfg, &dev, &bench, &paths).unwrap();
        let (own, common, cross) = deviation_from_raw(&cfg, &raw, &bench).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for idx in 0..cells {
                worst = worst.max((own[i][idx] - dev.z_own[i][idx]).abs());
                worst = worst.max((common[i][idx] - dev.z_common[i][idx]).abs());
                for s in 0..2 {
                    worst = worst.max((cross[i][s][idx] - dev.z_cross[i][s][idx]).abs());
                }
            }
        }
        assert!(worst <= 1e-12, "round trip error {worst}");
    }

    #[test]
    fn zero_theta_transforms_are_the_identity() {
        // Z = Z~ = Z^ + Z-bench without competition.
        let cfg = zero_theta(5, 52);
        let paths = sample_paths(&cfg, 20, 3).unwrap();
        let bench = benchmark_closed_form(&cfg, &paths).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let cells = 5 * 20;
        let dev = DeviationSolution {
            n_players: 3,
            n_blocks: 20,
            n_steps: 5,
            dt: paths.dt,
            y: vec![vec![0.0; 6 * 20]; 3],
            z_own: (0..3).map(|_| (0..cells).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
            z_common: (0..3).map(|_| (0..cells).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
            z_cross: (0..3)
                .map(|_| (0..2).map(|_| (0..cells).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect())
                .collect(),
            picard_iters: 1,
            picard_residuals: vec![0.0],
            converged: true,
            radius: vec![1.0; 3],
            bound_satisfied: vec![true; 3],
            residual_l2_sq: vec![0.0; 3],
        };
        let raw = reconstruct_equilibrium(&cfg, &dev, &bench, &paths).unwrap();
        for i in 0..3 {
            for idx in 0..cells {
                // bench z grids are zero here, so raw must equal the deviation.
                assert_relative_eq!(raw.z_own[i][idx], dev.z_own[i][idx], epsilon = 1e-14);
                assert_relative_eq!(raw.z_common[i][idx], dev.z_common[i][idx], epsilon = 1e-14);
                for s in 0..2 {
                    assert_relative_eq!(
                        raw.z_cross[i][s][idx],
                        dev.z_cross[i][s][idx],
                        epsilon = 1e-14
                    );
                }
            }
        }
    }

    #[test]
    fn reconstructed_terminal_matches_peer_average_ledger() {
        let cfg = sym3(50, 53);
        let paths = sample_paths(&cfg, 800, 3).unwrap();
        let opts = SolverOpts::default();
        let bench = solve_benchmark(&cfg, &paths, 2.0, opts).unwrap();
        let dev = solve_deviation_system(&cfg, &paths, &bench, 2.0, opts, DeviationInit::Zero).unwrap();
        let eq = reconstruct_equilibrium(&cfg, &dev, &bench, &paths).unwrap();
        let nb = paths.n_blocks;
        let ns = paths.n_steps;
        let mut errs = Vec::new();
        for b in 0..nb {
            for i in 0..3 {
                let peers: f64 = (0..3).filter(|j| *j != i).map(|j| eq.x[j][ns * nb + b]).sum::<f64>() / 2.0;
                errs.push(eq.y[i][ns * nb + b] - 0.5 * peers);
            }
        }
        let (mean, se) = crate::market::mean_and_stderr(&errs);
        // O(dt) discretisation bias plus Monte-Carlo noise.
        assert!(mean.abs() <= 3.0 * se + 0.05, "ledger mean {mean} se {se}");
    }
}
