//! Exact equilibria for deterministic-in-(t, type) return rates.
//!
//! The common-asset Z components solve, at every grid time, the linear system
//! `Z_i0 = theta_i / (N-1) * sum_{j != i} (Z_j0 + b_j0 / alpha_j)`, which is
//! the authoritative definition here. The displayed closed form
//! (`explicit_zi0_formula`) is evaluated literally as a cross-check and any
//! disagreement with the linear solve is reported, not repaired.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::market::{GameConfig, TypeDistribution};

/// Per-player equilibrium data on the time grid (points `0..=n_steps`).
#[derive(Debug, Clone)]
pub struct EquilibriumSolution {
    pub n_players: usize,
    pub n_steps: usize,
    pub dt: f64,
    /// `[player * (n_steps + 1) + step]`
    pub z_ii: Vec<f64>,
    /// `[(player_i * n_players + player_j) * (n_steps + 1) + step]`, zero on the diagonal.
    pub z_ij: Vec<f64>,
    pub z_i0: Vec<f64>,
    pub pi: Vec<f64>,
    pub pi0: Vec<f64>,
    pub y0: Vec<f64>,
    pub value: Vec<f64>,
    /// Max residual of the linear system over all grid times.
    pub residual_max: f64,
}

impl EquilibriumSolution {
    pub fn z_i0_at(&self, player: usize, step: usize) -> f64 {
        self.z_i0[player * (self.n_steps + 1) + step]
    }

    pub fn pi_at(&self, player: usize, step: usize) -> f64 {
        self.pi[player * (self.n_steps + 1) + step]
    }

    pub fn pi0_at(&self, player: usize, step: usize) -> f64 {
        self.pi0[player * (self.n_steps + 1) + step]
    }

    pub fn z_ij_at(&self, i: usize, j: usize, step: usize) -> f64 {
        self.z_ij[(i * self.n_players + j) * (self.n_steps + 1) + step]
    }
}

/// Representative-player equilibrium per type.
#[derive(Debug, Clone)]
pub struct MfgEquilibrium {
    pub n_types: usize,
    pub n_steps: usize,
    pub dt: f64,
    /// `[type * (n_steps + 1) + step]`; identically zero here.
    pub z: Vec<f64>,
    pub z0: Vec<f64>,
    pub pi: Vec<f64>,
    pub pi0: Vec<f64>,
    pub y0: Vec<f64>,
    pub value: Vec<f64>,
    pub e_theta: f64,
}

impl MfgEquilibrium {
    pub fn z0_at(&self, type_label: usize, step: usize) -> f64 {
        self.z0[type_label * (self.n_steps + 1) + step]
    }

    pub fn pi_at(&self, type_label: usize, step: usize) -> f64 {
        self.pi[type_label * (self.n_steps + 1) + step]
    }

    pub fn pi0_at(&self, type_label: usize, step: usize) -> f64 {
        self.pi0[type_label * (self.n_steps + 1) + step]
    }
}

/// Merton ratio of the common asset for player `j` at time `t`.
fn merton0(config: &GameConfig, j: usize, t: f64) -> Result<f64> {
    let p = config.players()?[j];
    Ok(config.returns.b0(t, p.type_label) / p.alpha)
}

/// Solve the coupling system for the common-asset Z components at one grid time.
pub fn solve_zi0_linear_system(config: &GameConfig, step: usize) -> Result<Vec<f64>> {
    let players = config.players()?;
    let n = players.len();
    let t = config.grid_time(step);
    let scale = 1.0 / (n - 1) as f64;

    let mut mat = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    for i in 0..n {
        let w = players[i].theta * scale;
        for j in 0..n {
            mat[(i, j)] = if i == j { 1.0 } else { -w };
        }
        let mut acc = 0.0;
        for j in 0..n {
            if j != i {
                acc += merton0(config, j, t)?;
            }
        }
        rhs[i] = w * acc;
    }

    let lu = mat.clone().lu();
    let det = lu.determinant();
    if det.abs() < 1e-10 {
        return Err(Error::SingularSystem {
            det,
            thetas: players.iter().map(|p| p.theta).collect(),
        });
    }
    let sol = lu
        .solve(&rhs)
        .ok_or_else(|| Error::SingularSystem { det, thetas: players.iter().map(|p| p.theta).collect() })?;

    let residual = (&mat * &sol - &rhs).amax();
    if residual > 1e-12 {
        return Err(Error::SingularSystem {
            det,
            thetas: players.iter().map(|p| p.theta).collect(),
        });
    }
    Ok(sol.iter().copied().collect())
}

/// Residual of plugging `z` into the coupling system at `step`, in max norm.
pub fn zi0_system_residual(config: &GameConfig, step: usize, z: &[f64]) -> Result<f64> {
    let players = config.players()?;
    let n = players.len();
    let t = config.grid_time(step);
    let scale = 1.0 / (n - 1) as f64;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            if j != i {
                acc += z[j] + merton0(config, j, t)?;
            }
        }
        worst = worst.max((players[i].theta * scale * acc - z[i]).abs());
    }
    Ok(worst)
}

/// The displayed aggregate closed form for the common-asset Z components,
/// evaluated literally. Cross-check it against `solve_zi0_linear_system`; the
/// two disagree on heterogeneous profiles (see `explicit_formula_discrepancy`).
pub fn explicit_zi0_formula(config: &GameConfig, step: usize) -> Result<Vec<f64>> {
    let players = config.players()?;
    let n = players.len();
    let t = config.grid_time(step);
    let nm1 = (n - 1) as f64;

    let denom = 1.0 - players.iter().map(|p| p.theta / (nm1 + p.theta)).sum::<f64>();
    if denom <= 0.0 {
        return Err(Error::NonpositiveDenominator(denom));
    }
    let sum_theta_frac: f64 = players.iter().map(|p| p.theta / (nm1 + p.theta)).sum();
    let sum_merton: f64 = (0..n).map(|j| merton0(config, j, t)).collect::<Result<Vec<_>>>()?.iter().sum();

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let own = players[i].theta / (nm1 + players[i].theta);
        let b_i0 = config.returns.b0(t, players[i].type_label);
        // Inner sum written with the i-indexed numerator, as displayed.
        let mixed: f64 = players
            .iter()
            .map(|pj| players[i].theta * b_i0 / ((nm1 + pj.theta) * pj.alpha))
            .sum();
        let mut peers = 0.0;
        for j in 0..n {
            if j != i {
                peers += merton0(config, j, t)?;
            }
        }
        out.push(own * (sum_theta_frac * sum_merton - mixed) / denom + own * peers);
    }
    Ok(out)
}

/// Max over players and grid times of |explicit formula - linear solve|.
pub fn explicit_formula_discrepancy(config: &GameConfig) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for k in 0..=config.n_steps {
        let lin = solve_zi0_linear_system(config, k)?;
        let exp = explicit_zi0_formula(config, k)?;
        for (a, b) in lin.iter().zip(&exp) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Full N-player equilibrium for deterministic-in-(t, type) returns.
pub fn nplayer_closed_form(config: &GameConfig) -> Result<EquilibriumSolution> {
    let players = config.players()?;
    let n = players.len();
    let ns = config.n_steps;
    let dt = config.dt();
    let nm1 = (n - 1) as f64;
    let stride = ns + 1;

    let mut sol = EquilibriumSolution {
        n_players: n,
        n_steps: ns,
        dt,
        z_ii: vec![0.0; n * stride],
        z_ij: vec![0.0; n * n * stride],
        z_i0: vec![0.0; n * stride],
        pi: vec![0.0; n * stride],
        pi0: vec![0.0; n * stride],
        y0: vec![0.0; n],
        value: vec![0.0; n],
        residual_max: 0.0,
    };

    for k in 0..=ns {
        let t = config.grid_time(k);
        let z0 = solve_zi0_linear_system(config, k)?;
        sol.residual_max = sol.residual_max.max(zi0_system_residual(config, k, &z0)?);
        for i in 0..n {
            let p = players[i];
            let b_i = config.returns.b(t, p.type_label);
            sol.z_i0[i * stride + k] = z0[i];
            sol.pi[i * stride + k] = b_i / p.alpha;
            sol.pi0[i * stride + k] = z0[i] + merton0(config, i, t)?;
            for j in 0..n {
                if j != i {
                    let b_j_over_aj = config.returns.b(t, players[j].type_label) / players[j].alpha;
                    sol.z_ij[(i * n + j) * stride + k] = p.theta / nm1 * b_j_over_aj;
                }
            }
        }
    }

    // Y_0 by left-Riemann quadrature of the deterministic integrands.
    for i in 0..n {
        let p = players[i];
        let mut peer_term = 0.0;
        let mut own_term = 0.0;
        for k in 0..ns {
            let t = config.grid_time(k);
            for j in 0..n {
                if j != i {
                    let pj = players[j];
                    let (bj, bj0) = (config.returns.b(t, pj.type_label), config.returns.b0(t, pj.type_label));
                    let zj0 = sol.z_i0[j * stride + k];
                    peer_term += (zj0 * bj0 + (bj * bj + bj0 * bj0) / pj.alpha) * dt;
                }
            }
            let (bi, bi0) = (config.returns.b(t, p.type_label), config.returns.b0(t, p.type_label));
            let zi0 = sol.z_i0[i * stride + k];
            let mut cross = 0.0;
            for j in 0..n {
                if j != i {
                    cross += sol.z_ij[(i * n + j) * stride + k].powi(2);
                }
            }
            own_term += (zi0 * bi0 + (bi * bi + bi0 * bi0) / (2.0 * p.alpha) - p.alpha / 2.0 * cross) * dt;
        }
        let y0 = p.theta * config.peer_avg_x0(i)? + p.theta / nm1 * peer_term - own_term;
        sol.y0[i] = y0;
        sol.value[i] = crate::verification::value_function(p.x0, y0, p.alpha);
    }
    Ok(sol)
}

/// Expectations over the type law for the mean-field formulas.
pub(crate) struct TypeLawMoments<'a> {
    pub dist: &'a TypeDistribution,
}

impl TypeLawMoments<'_> {
    pub fn e_merton0(&self, config: &GameConfig, t: f64) -> f64 {
        self.dist
            .types
            .iter()
            .zip(&self.dist.probs)
            .enumerate()
            .map(|(label, (spec, p))| p * config.returns.b0(t, label) / spec.alpha)
            .sum()
    }

    pub fn e_theta_b0(&self, config: &GameConfig, t: f64) -> f64 {
        self.dist
            .types
            .iter()
            .zip(&self.dist.probs)
            .enumerate()
            .map(|(label, (spec, p))| p * spec.theta * config.returns.b0(t, label))
            .sum()
    }

    pub fn e_bsq_over_alpha(&self, config: &GameConfig, t: f64) -> f64 {
        self.dist
            .types
            .iter()
            .zip(&self.dist.probs)
            .enumerate()
            .map(|(label, (spec, p))| {
                let b = config.returns.b(t, label);
                p * b * b / spec.alpha
            })
            .sum()
    }

    pub fn e_b0sq_over_alpha(&self, config: &GameConfig, t: f64) -> f64 {
        self.dist
            .types
            .iter()
            .zip(&self.dist.probs)
            .enumerate()
            .map(|(label, (spec, p))| {
                let b0 = config.returns.b0(t, label);
                p * b0 * b0 / spec.alpha
            })
            .sum()
    }
}

/// Closed-form mean-field equilibrium: `pi = b / alpha` and
/// `pi0 = theta / (1 - E[theta]) * E[b0 / alpha] + b0 / alpha`, which solves
/// the aggregation identity `pi0 = theta E[pi0] + b0 / alpha` exactly.
pub fn mfg_closed_form(config: &GameConfig) -> Result<MfgEquilibrium> {
    let dist = &config.types;
    let e_theta = dist.e_theta();
    if e_theta >= 1.0 {
        return Err(Error::Config(format!("mean competition weight must be below 1, got {e_theta}")));
    }
    let moments = TypeLawMoments { dist };
    let nt = dist.n_types();
    let ns = config.n_steps;
    let dt = config.dt();
    let stride = ns + 1;

    let mut eq = MfgEquilibrium {
        n_types: nt,
        n_steps: ns,
        dt,
        z: vec![0.0; nt * stride],
        z0: vec![0.0; nt * stride],
        pi: vec![0.0; nt * stride],
        pi0: vec![0.0; nt * stride],
        y0: vec![0.0; nt],
        value: vec![0.0; nt],
        e_theta,
    };

    for k in 0..=ns {
        let t = config.grid_time(k);
        let e_m0 = moments.e_merton0(config, t);
        for (label, spec) in dist.types.iter().enumerate() {
            let z0 = spec.theta / (1.0 - e_theta) * e_m0;
            eq.z0[label * stride + k] = z0;
            eq.pi[label * stride + k] = config.returns.b(t, label) / spec.alpha;
            eq.pi0[label * stride + k] = z0 + config.returns.b0(t, label) / spec.alpha;
        }
    }

    let e_x0 = dist.e_x0();
    for (label, spec) in dist.types.iter().enumerate() {
        let mut population = 0.0;
        let mut own = 0.0;
        for k in 0..ns {
            let t = config.grid_time(k);
            population += (moments.e_bsq_over_alpha(config, t)
                + moments.e_theta_b0(config, t) / (1.0 - e_theta) * moments.e_merton0(config, t)
                + moments.e_b0sq_over_alpha(config, t))
                * dt;
            let (b, b0) = (config.returns.b(t, label), config.returns.b0(t, label));
            own += (eq.z0[label * stride + k] * b0 + (b * b + b0 * b0) / (2.0 * spec.alpha)) * dt;
        }
        let y0 = spec.theta * e_x0 + spec.theta * population - own;
        eq.y0[label] = y0;
        eq.value[label] = crate::verification::value_function(spec.x0, y0, spec.alpha);
    }
    Ok(eq)
}
