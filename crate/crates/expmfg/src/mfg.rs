//! Mean-field solvers.
//!
//! Two regimes: with a common asset, the equilibrium comes from a conditional
//! mean-field BSDE whose transformation removes the population terminal term
//! (no outer fixed point needed); with independent assets the population mean
//! `mu = E[X_T]` is found by damped successive substitution, optionally
//! stabilised by marching over sub-intervals with an affine decoupling
//! representation `u(t, m) = a(t) + c(t) m` whose slope comes from the
//! characteristic equation.

use crate::bsde::{backward_sweep, bmo_norm_estimate, BsdeGrid, BsdeProblem, RegressionBasis};
use crate::error::{Error, Result};
use crate::market::{GameConfig, PathBundle};
use crate::nplayer::{self, law::type_coeffs, SolverOpts};

/// Mean-field equilibrium on the sample grid, one set of grids per type.
#[derive(Debug, Clone)]
pub struct MfgSolution {
    pub n_types: usize,
    pub n_paths: usize,
    pub n_steps: usize,
    pub dt: f64,
    /// `[type][step * n_paths + path]`, y has `n_steps + 1` rows.
    pub y: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    /// Common-asset component; empty in independent mode.
    pub z0: Vec<Vec<f64>>,
    pub pi: Vec<Vec<f64>>,
    /// Empty in independent mode.
    pub pi0: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
    /// Consistency gap: conditional version over common blocks, or
    /// `|mu - E[X_T]|` in independent mode.
    pub gap: f64,
    pub mu_star: Option<f64>,
    pub mu_trace: Vec<f64>,
    pub ratios: Vec<f64>,
    pub picard_iters: usize,
    pub picard_residuals: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct CommonNoiseOpts {
    pub solver: SolverOpts,
    pub gap_tol: f64,
}

impl Default for CommonNoiseOpts {
    fn default() -> Self {
        CommonNoiseOpts { solver: SolverOpts::default(), gap_tol: 0.1 }
    }
}

/// Solve the common-noise mean-field game. The transformed conditional
/// mean-field BSDE has deterministic terminal `theta * E[X_0]`; the original
/// common component is recovered through
/// `Z0 = Z~0 + theta (E[Z~0 | common] + E[b0/alpha]) / (1 - E[theta])` and the
/// forward simulation closes the loop, reporting the gap between the implied
/// conditional mean and the simulated `E[X_T | common]`.
pub fn solve_mfg_common_noise(
    config: &GameConfig,
    paths: &PathBundle,
    opts: CommonNoiseOpts,
) -> Result<MfgSolution> {
    let coeffs = type_coeffs(config);
    let e_theta = coeffs.e_theta;
    if e_theta >= 1.0 {
        return Err(Error::Config("mean competition weight must be below 1".into()));
    }
    let nt = coeffs.n_types;
    let ns = paths.n_steps;
    let np = paths.n_paths();
    let nb = paths.n_blocks;
    let kc = paths.k_copies;
    let dt = paths.dt;
    let e_x0 = config.types.e_x0();

    let system = nplayer::solve_law_system(
        config,
        paths,
        &|label| coeffs.theta[label] * e_x0,
        opts.solver,
    )?;

    // Recover the original common component.
    let cm_tilde_z0 = law_cm(&system.z0, &coeffs.probs, nb, kc, ns, |_, _| 1.0)?;
    let mut z0 = vec![vec![0.0; ns * np]; nt];
    for label in 0..nt {
        let c = coeffs.theta[label] / (1.0 - e_theta);
        for k in 0..ns {
            for p in 0..np {
                let blk = p / kc;
                z0[label][k * np + p] = system.z0[label][k * np + p]
                    + c * (cm_tilde_z0[k * nb + blk] + coeffs.e_merton0[k]);
            }
        }
    }
    let z = system.z;

    // Strategies and the forward wealth per type.
    let mut pi = vec![vec![0.0; ns * np]; nt];
    let mut pi0 = vec![vec![0.0; ns * np]; nt];
    let mut x = vec![vec![0.0; (ns + 1) * np]; nt];
    for label in 0..nt {
        let alpha = coeffs.alpha[label];
        for p in 0..np {
            x[label][p] = config.types.types[label].x0;
        }
        for k in 0..ns {
            let (b, b0) = (coeffs.b[label][k], coeffs.b0[label][k]);
            for p in 0..np {
                let idx = k * np + p;
                pi[label][idx] = z[label][idx] + b / alpha;
                pi0[label][idx] = z0[label][idx] + b0 / alpha;
                x[label][(k + 1) * np + p] = x[label][k * np + p]
                    + pi[label][idx] * (b * dt + paths.idio_inc(p, k))
                    + pi0[label][idx] * (b0 * dt + paths.common_inc(p, k));
            }
        }
    }

    // Conditional means of the equilibrium drift and volatility aggregates.
    let cm_drift = {
        let mut out = law_cm(&z, &coeffs.probs, nb, kc, ns, |l, k| coeffs.b[l][k])?;
        let part2 = law_cm(&z0, &coeffs.probs, nb, kc, ns, |l, k| coeffs.b0[l][k])?;
        for (a, b) in out.iter_mut().zip(part2) {
            *a += b;
        }
        for k in 0..ns {
            for blk in 0..nb {
                out[k * nb + blk] += coeffs.e_bbar_sq_over_alpha[k];
            }
        }
        out
    };
    let cm_vol = {
        let mut out = law_cm(&z0, &coeffs.probs, nb, kc, ns, |_, _| 1.0)?;
        for k in 0..ns {
            for blk in 0..nb {
                out[k * nb + blk] += coeffs.e_merton0[k];
            }
        }
        out
    };

    // Implied conditional population mean versus the simulated one.
    let mut gap_sq = 0.0;
    let mut mu_trace = Vec::with_capacity(nb.min(16));
    for blk in 0..nb {
        let mut mu_hat = e_x0;
        for k in 0..ns {
            mu_hat += cm_drift[k * nb + blk] * dt + cm_vol[k * nb + blk] * paths.common_inc_block(blk, k);
        }
        let mut sim = 0.0;
        for (label, prob) in coeffs.probs.iter().enumerate() {
            let mut mean = 0.0;
            for c in 0..kc {
                mean += x[label][ns * np + blk * kc + c];
            }
            sim += prob * mean / kc as f64;
        }
        gap_sq += (mu_hat - sim).powi(2);
        if mu_trace.len() < 16 {
            mu_trace.push(mu_hat);
        }
    }
    let gap = (gap_sq / nb as f64).sqrt();
    if gap > opts.gap_tol {
        return Err(Error::ConsistencyGap { gap, tol: opts.gap_tol });
    }

    // Rebuild Y from the transformed value by re-adding the absorbed
    // conditional integrals.
    let mut y = vec![vec![0.0; (ns + 1) * np]; nt];
    for label in 0..nt {
        let theta = coeffs.theta[label];
        for blk in 0..nb {
            let mut acc = 0.0;
            for k in 0..=ns {
                for c in 0..kc {
                    let p = blk * kc + c;
                    y[label][k * np + p] = system.y[label][k * np + p] + theta * acc;
                }
                if k < ns {
                    acc += cm_drift[k * nb + blk] * dt + cm_vol[k * nb + blk] * paths.common_inc_block(blk, k);
                }
            }
        }
    }

    Ok(MfgSolution {
        n_types: nt,
        n_paths: np,
        n_steps: ns,
        dt,
        y,
        z,
        z0,
        pi,
        pi0,
        x,
        gap,
        mu_star: None,
        mu_trace,
        ratios: Vec::new(),
        picard_iters: system.iters,
        picard_residuals: system.residuals,
    })
}

fn law_cm(
    grids: &[Vec<f64>],
    probs: &[f64],
    n_blocks: usize,
    k_copies: usize,
    n_steps: usize,
    weight: impl Fn(usize, usize) -> f64,
) -> Result<Vec<f64>> {
    let np = n_blocks * k_copies;
    let mut out = vec![0.0; n_steps * n_blocks];
    for (label, grid) in grids.iter().enumerate() {
        for k in 0..n_steps {
            let w = probs[label];
            let row = &grid[k * np..(k + 1) * np];
            for blk in 0..n_blocks {
                let mean: f64 =
                    row[blk * k_copies..(blk + 1) * k_copies].iter().sum::<f64>() / k_copies as f64;
                out[k * n_blocks + blk] += w * weight(label, k) * mean;
            }
        }
    }
    Ok(out)
}

/// Options for the independent-asset population fixed point.
#[derive(Debug, Clone, Copy)]
pub struct IndependentOpts {
    pub mu0: f64,
    pub damping: f64,
    pub tol: f64,
    pub max_iters: usize,
    /// Terminal-measurable competition: `theta(type, W_T) = theta_type +
    /// amp * sin(W_T)`, validated to stay in [0, 1).
    pub theta_wt_amp: f64,
    pub degree: usize,
    pub ridge: f64,
}

impl Default for IndependentOpts {
    fn default() -> Self {
        IndependentOpts { mu0: 0.0, damping: 1.0, tol: 1e-6, max_iters: 60, theta_wt_amp: 0.0, degree: 2, ridge: 1e-8 }
    }
}

fn validate_theta_amp(config: &GameConfig, amp: f64) -> Result<()> {
    for t in &config.types.types {
        if t.theta - amp.abs() < 0.0 || t.theta + amp.abs() >= 1.0 {
            return Err(Error::Config(format!(
                "terminal-measurable competition leaves [0, 1): theta {} amp {}",
                t.theta, amp
            )));
        }
    }
    Ok(())
}

struct RangeInputs {
    k_lo: usize,
    len: usize,
    w: Vec<f64>,
    inc: Vec<f64>,
}

impl RangeInputs {
    fn slice(paths: &PathBundle, k_lo: usize, k_hi: usize) -> Self {
        let np = paths.n_paths();
        let w_full = paths.idio_states();
        let len = k_hi - k_lo;
        let mut w = vec![0.0; (len + 1) * np];
        for k in 0..=len {
            w[k * np..(k + 1) * np].copy_from_slice(&w_full[(k_lo + k) * np..(k_lo + k + 1) * np]);
        }
        let mut inc = vec![0.0; len * np];
        for k in 0..len {
            for p in 0..np {
                inc[k * np + p] = paths.idio_inc(p, k_lo + k);
            }
        }
        RangeInputs { k_lo, len, w, inc }
    }
}

struct RangeSolve {
    /// `[type][local_step * n_paths + path]`.
    y: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    x: Vec<Vec<f64>>,
    e_xt: f64,
}

/// Backward solve of the quadratic-generator equation per type on a step
/// range, then the forward wealth from `x_start` under `pi = Z + b/alpha`.
fn solve_range(
    config: &GameConfig,
    paths: &PathBundle,
    range: &RangeInputs,
    terminal: &dyn Fn(usize, usize) -> f64,
    x_start: &dyn Fn(usize, usize) -> f64,
    opts: IndependentOpts,
) -> Result<RangeSolve> {
    let coeffs = type_coeffs(config);
    let nt = coeffs.n_types;
    let np = paths.n_paths();
    let dt = paths.dt;
    let len = range.len;
    let basis = RegressionBasis::one_var(opts.degree);
    let dummy = BsdeGrid::zeros(np, len, 1);

    let mut y = Vec::with_capacity(nt);
    let mut z = Vec::with_capacity(nt);
    let mut x = Vec::with_capacity(nt);
    let mut e_xt = 0.0;
    for label in 0..nt {
        let terminal_vals: Vec<f64> = (0..np).map(|p| terminal(label, p)).collect();
        let problem = BsdeProblem {
            dt,
            n_steps: len,
            n_paths: np,
            terminal: &terminal_vals,
            increments: vec![&range.inc],
            basis,
            w: &range.w,
            w0: None,
            ridge: opts.ridge,
        };
        let alpha = coeffs.alpha[label];
        let k_lo = range.k_lo;
        let (grid, _, _) = backward_sweep(
            &problem,
            |ctx| {
                let b = coeffs.b[label][k_lo + ctx.step];
                ctx.z[0].iter().map(|zv| -(b * zv + b * b / (2.0 * alpha))).collect()
            },
            &dummy,
        )?;

        let mut xg = vec![0.0; (len + 1) * np];
        for p in 0..np {
            xg[p] = x_start(label, p);
        }
        for k in 0..len {
            let b = coeffs.b[label][k_lo + k];
            for p in 0..np {
                let idx = k * np + p;
                let strat = grid.z[0][idx] + b / alpha;
                xg[(k + 1) * np + p] =
                    xg[k * np + p] + strat * (b * dt + range.inc[idx]);
            }
        }
        let mean_xt: f64 = xg[len * np..].iter().sum::<f64>() / np as f64;
        e_xt += coeffs.probs[label] * mean_xt;
        y.push(grid.y);
        z.push(grid.z.into_iter().next().unwrap());
        x.push(xg);
    }
    Ok(RangeSolve { y, z, x, e_xt })
}

struct MuIteration {
    mu: f64,
    solve: RangeSolve,
    trace: Vec<f64>,
    ratios: Vec<f64>,
}

fn fixed_point_mu(
    config: &GameConfig,
    paths: &PathBundle,
    range: &RangeInputs,
    terminal_of_mu: &dyn Fn(usize, usize, f64) -> f64,
    x_start: &dyn Fn(usize, usize) -> f64,
    opts: IndependentOpts,
) -> Result<MuIteration> {
    let mut mu = opts.mu0;
    let mut damping = opts.damping;
    let mut trace = vec![mu];
    let mut ratios = Vec::new();
    let mut last_delta: Option<f64> = None;
    let mut flips = 0usize;
    let mut diverging = 0usize;

    for _ in 0..opts.max_iters {
        let solve = solve_range(config, paths, range, &|l, p| terminal_of_mu(l, p, mu), x_start, opts)?;
        let target = solve.e_xt;
        let next = (1.0 - damping) * mu + damping * target;
        let delta = next - mu;
        trace.push(next);
        if let Some(prev) = last_delta {
            if prev.abs() > 1e-15 {
                let ratio = delta.abs() / prev.abs();
                ratios.push(ratio);
                if ratio >= 1.0 {
                    diverging += 1;
                    if diverging >= 5 {
                        return Err(Error::FixedPointDiverged {
                            ratios,
                            hint: "try time marching with sub-intervals".into(),
                        });
                    }
                } else {
                    diverging = 0;
                }
            }
            if prev * delta < 0.0 {
                flips += 1;
                if flips >= 2 {
                    damping *= 0.5;
                    flips = 0;
                }
            } else {
                flips = 0;
            }
        }
        last_delta = Some(delta);
        mu = next;
        if delta.abs() <= opts.tol {
            return Ok(MuIteration { mu, solve, trace, ratios });
        }
    }
    Err(Error::NonConvergence {
        context: "population fixed point".into(),
        residuals: trace.windows(2).map(|w| (w[1] - w[0]).abs()).collect(),
    })
}

/// `E[X_T(mu)] - mu` for the independent-asset game: the residual whose root
/// is the equilibrium population mean. Exposed for bracketing oracles.
pub fn population_residual(
    config: &GameConfig,
    paths: &PathBundle,
    mu: f64,
    opts: IndependentOpts,
) -> Result<f64> {
    validate_theta_amp(config, opts.theta_wt_amp)?;
    let range = RangeInputs::slice(paths, 0, paths.n_steps);
    let np = paths.n_paths();
    let w_t: Vec<f64> = range.w[range.len * np..].to_vec();
    let coeffs = type_coeffs(config);
    let amp = opts.theta_wt_amp;
    let theta = move |l: usize, p: usize| coeffs.theta[l] + amp * w_t[p].sin();
    let x0 = |l: usize, _: usize| config.types.types[l].x0;
    let solve = solve_range(config, paths, &range, &|l, p| theta(l, p) * mu, &x0, opts)?;
    Ok(solve.e_xt - mu)
}

/// Damped successive substitution on `mu = E[X_T(mu)]` for the
/// independent-asset mean-field game.
pub fn solve_mfg_independent(
    config: &GameConfig,
    paths: &PathBundle,
    opts: IndependentOpts,
) -> Result<MfgSolution> {
    validate_theta_amp(config, opts.theta_wt_amp)?;
    let ns = paths.n_steps;
    let np = paths.n_paths();
    let coeffs = type_coeffs(config);
    let range = RangeInputs::slice(paths, 0, ns);
    let w_t: Vec<f64> = range.w[ns * np..].to_vec();
    let amp = opts.theta_wt_amp;
    let thetas = coeffs.theta.clone();
    let theta = move |l: usize, p: usize| thetas[l] + amp * w_t[p].sin();
    let x0 = |l: usize, _: usize| config.types.types[l].x0;

    let it = fixed_point_mu(
        config,
        paths,
        &range,
        &|l, p, mu| theta(l, p) * mu,
        &x0,
        opts,
    )?;
    let gap = (it.solve.e_xt - it.mu).abs();
    build_independent_solution(config, paths, it, gap)
}

fn build_independent_solution(
    config: &GameConfig,
    paths: &PathBundle,
    it: MuIteration,
    gap: f64,
) -> Result<MfgSolution> {
    let coeffs = type_coeffs(config);
    let nt = coeffs.n_types;
    let ns = paths.n_steps;
    let np = paths.n_paths();
    let mut pi = vec![vec![0.0; ns * np]; nt];
    for label in 0..nt {
        let alpha = coeffs.alpha[label];
        for k in 0..ns {
            let b = coeffs.b[label][k];
            for p in 0..np {
                pi[label][k * np + p] = it.solve.z[label][k * np + p] + b / alpha;
            }
        }
    }
    let iters = it.trace.len() - 1;
    Ok(MfgSolution {
        n_types: nt,
        n_paths: np,
        n_steps: ns,
        dt: paths.dt,
        y: it.solve.y,
        z: it.solve.z,
        z0: Vec::new(),
        pi,
        pi0: Vec::new(),
        x: it.solve.x,
        gap,
        mu_star: Some(it.mu),
        mu_trace: it.trace,
        ratios: it.ratios,
        picard_iters: iters,
        picard_residuals: Vec::new(),
    })
}

/// Slope equation of the decoupling field.
#[derive(Debug, Clone)]
pub struct CharacteristicSolution {
    pub n_types: usize,
    pub n_paths: usize,
    pub n_steps: usize,
    pub dt: f64,
    /// `[type][step * n_paths + path]`.
    pub y_hat: Vec<Vec<f64>>,
    pub z_hat: Vec<Vec<f64>>,
    /// `m(t_k) = E[b Z^]` per step.
    pub m: Vec<f64>,
    /// `E[grad X](t_k) = exp(sum_{l<k} m_l dt)`, slope of the population mean
    /// with respect to the initial mean.
    pub slope: Vec<f64>,
    pub iters: usize,
    pub residuals: Vec<f64>,
    pub converged: bool,
}

impl CharacteristicSolution {
    pub fn terminal_slope(&self) -> f64 {
        *self.slope.last().unwrap()
    }
}

/// Iterate `z -> Z^`: freeze `m(s) = E[b z_s]` (plain Monte-Carlo mean over
/// the type law and paths), solve the linear equation with terminal `theta`,
/// and stop when the BMO proxy of the z-change drops below `tol`.
pub fn solve_characteristic_bsde(
    config: &GameConfig,
    paths: &PathBundle,
    _r_bound: f64,
    tol: f64,
    opts: IndependentOpts,
) -> Result<CharacteristicSolution> {
    validate_theta_amp(config, opts.theta_wt_amp)?;
    let coeffs = type_coeffs(config);
    let nt = coeffs.n_types;
    let ns = paths.n_steps;
    let np = paths.n_paths();
    let dt = paths.dt;
    let range = RangeInputs::slice(paths, 0, ns);
    let w_t: Vec<f64> = range.w[ns * np..].to_vec();
    let basis = RegressionBasis::one_var(opts.degree);
    let dummy = BsdeGrid::zeros(np, ns, 1);

    let mut z_hat: Vec<Vec<f64>> = vec![vec![0.0; ns * np]; nt];
    let mut y_hat: Vec<Vec<f64>> = vec![vec![0.0; (ns + 1) * np]; nt];
    let mut residuals = Vec::new();
    let mut converged = false;
    let mut iters = 0;

    for it in 0..opts.max_iters {
        iters = it + 1;
        // Frozen mean drift coupling.
        let mut m = vec![0.0; ns];
        for k in 0..ns {
            for label in 0..nt {
                let mean: f64 =
                    z_hat[label][k * np..(k + 1) * np].iter().sum::<f64>() / np as f64;
                m[k] += coeffs.probs[label] * coeffs.b[label][k] * mean;
            }
        }
        let mut change: f64 = 0.0;
        let mut next_z = Vec::with_capacity(nt);
        for label in 0..nt {
            let terminal: Vec<f64> =
                (0..np).map(|p| coeffs.theta[label] + opts.theta_wt_amp * w_t[p].sin()).collect();
            let problem = BsdeProblem {
                dt,
                n_steps: ns,
                n_paths: np,
                terminal: &terminal,
                increments: vec![&range.inc],
                basis,
                w: &range.w,
                w0: None,
                ridge: opts.ridge,
            };
            let m_ref = &m;
            let (grid, _, _) = backward_sweep(
                &problem,
                |ctx| {
                    let b = coeffs.b[label][ctx.step];
                    let mk = m_ref[ctx.step];
                    (0..np)
                        .map(|p| -(b * ctx.z[0][p] - ctx.y_next_fitted[p] * mk))
                        .collect()
                },
                &dummy,
            )?;
            let diff: Vec<f64> = grid.z[0]
                .iter()
                .zip(&z_hat[label])
                .map(|(a, b)| a - b)
                .collect();
            change = change.max(bmo_norm_estimate(&diff, np, dt));
            y_hat[label].copy_from_slice(&grid.y);
            next_z.push(grid.z.into_iter().next().unwrap());
        }
        z_hat = next_z;
        residuals.push(change);
        if change <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence { context: "characteristic equation".into(), residuals });
    }

    let mut m = vec![0.0; ns];
    for k in 0..ns {
        for label in 0..nt {
            let mean: f64 = z_hat[label][k * np..(k + 1) * np].iter().sum::<f64>() / np as f64;
            m[k] += coeffs.probs[label] * coeffs.b[label][k] * mean;
        }
    }
    let mut slope = vec![1.0; ns + 1];
    let mut acc = 0.0;
    for k in 0..ns {
        acc += m[k] * dt;
        slope[k + 1] = acc.exp();
    }

    Ok(CharacteristicSolution {
        n_types: nt,
        n_paths: np,
        n_steps: ns,
        dt,
        y_hat,
        z_hat,
        m,
        slope,
        iters,
        residuals,
        converged,
    })
}

/// Importance-weighted cross-check of the characteristic initial value:
/// under the drift-removed measure, `Y^_0 = E[w theta exp(int m)]` with
/// `w = exp(-int b dW - 1/2 int b^2 ds)`. Returns (direct Monte-Carlo mean,
/// weighted estimate, variance of the weights).
pub fn characteristic_girsanov_check(
    config: &GameConfig,
    paths: &PathBundle,
    sol: &CharacteristicSolution,
    label: usize,
    theta_wt_amp: f64,
) -> (f64, f64, f64) {
    let coeffs = type_coeffs(config);
    let ns = paths.n_steps;
    let np = paths.n_paths();
    let dt = paths.dt;
    let direct: f64 = sol.y_hat[label][..np].iter().sum::<f64>() / np as f64;

    let growth: f64 = sol.m.iter().map(|mk| mk * dt).sum::<f64>().exp();
    let mut weighted = 0.0;
    let mut weights = Vec::with_capacity(np);
    for p in 0..np {
        let mut log_w = 0.0;
        let mut w_t = 0.0;
        for k in 0..ns {
            let b = coeffs.b[label][k];
            let dw = paths.idio_inc(p, k);
            log_w += -b * dw - 0.5 * b * b * dt;
            w_t += dw;
        }
        let w = log_w.exp();
        let theta = coeffs.theta[label] + theta_wt_amp * w_t.sin();
        weighted += w * theta * growth;
        weights.push(w);
    }
    weighted /= np as f64;
    let mean_w: f64 = weights.iter().sum::<f64>() / np as f64;
    let var_w: f64 =
        weights.iter().map(|w| (w - mean_w).powi(2)).sum::<f64>() / (np as f64 - 1.0);
    (direct, weighted, var_w)
}

fn tag_interval(e: Error, interval: usize, pass: &str) -> Error {
    match e {
        Error::NonConvergence { context, residuals } => Error::NonConvergence {
            context: format!("sub-interval {interval} ({pass}): {context}"),
            residuals,
        },
        Error::FixedPointDiverged { ratios, hint } => Error::FixedPointDiverged {
            ratios,
            hint: format!("sub-interval {interval} ({pass}); {hint}"),
        },
        other => other,
    }
}

/// Marching over sub-intervals of length `delta`: a backward pass builds the
/// per-path affine terminal data `(a, c)` at every boundary (c from the
/// characteristic slope equation, a from reference runs at population mean
/// zero), then a forward pass stitches the equilibrium interval by interval.
/// With `delta >= T` this is literally the direct solver.
pub fn solve_mfg_time_marching(
    config: &GameConfig,
    paths: &PathBundle,
    delta: f64,
    opts: IndependentOpts,
) -> Result<MfgSolution> {
    if delta <= 0.0 {
        return Err(Error::Config("marching interval must be positive".into()));
    }
    if delta >= config.horizon {
        return solve_mfg_independent(config, paths, opts);
    }
    validate_theta_amp(config, opts.theta_wt_amp)?;
    let coeffs = type_coeffs(config);
    let nt = coeffs.n_types;
    let ns = paths.n_steps;
    let np = paths.n_paths();
    let n_int = (config.horizon / delta).ceil() as usize;
    if n_int > ns {
        return Err(Error::Config(format!(
            "marching needs at least one grid step per sub-interval ({n_int} intervals vs {ns} steps)"
        )));
    }
    let bounds: Vec<usize> = (0..=n_int).map(|l| l * ns / n_int).collect();

    let characteristic = solve_characteristic_bsde(config, paths, 0.25, opts.tol.max(1e-8), opts)?;

    let full = RangeInputs::slice(paths, 0, ns);
    let w_t: Vec<f64> = full.w[ns * np..].to_vec();

    // Backward pass: affine terminal data at each boundary.
    let mut a_bound: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_int + 1];
    let mut c_bound: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_int + 1];
    a_bound[n_int] = vec![vec![0.0; np]; nt];
    c_bound[n_int] = (0..nt)
        .map(|l| (0..np).map(|p| coeffs.theta[l] + opts.theta_wt_amp * w_t[p].sin()).collect())
        .collect();
    for l in (0..n_int).rev() {
        let range = RangeInputs::slice(paths, bounds[l], bounds[l + 1]);
        let a_r = a_bound[l + 1].clone();
        let c_r = c_bound[l + 1].clone();
        let it = fixed_point_mu(
            config,
            paths,
            &range,
            &|lab, p, mu| a_r[lab][p] + c_r[lab][p] * mu,
            &|_, _| 0.0,
            IndependentOpts { mu0: 0.0, ..opts },
        )
        .map_err(|e| tag_interval(e, l, "backward pass"))?
        .solve;
        a_bound[l] = (0..nt).map(|lab| it.y[lab][..np].to_vec()).collect();
        c_bound[l] = (0..nt)
            .map(|lab| characteristic.y_hat[lab][bounds[l] * np..(bounds[l] + 1) * np].to_vec())
            .collect();
    }

    // Forward pass: stitch interval solves from the actual initial wealth.
    let mut y = vec![vec![0.0; (ns + 1) * np]; nt];
    let mut z = vec![vec![0.0; ns * np]; nt];
    let mut x = vec![vec![0.0; (ns + 1) * np]; nt];
    let mut x_carry: Vec<Vec<f64>> =
        (0..nt).map(|l| vec![config.types.types[l].x0; np]).collect();
    let mut mu_trace = Vec::new();
    let mut ratios = Vec::new();
    let mut gap: f64 = 0.0;
    let mut mu_star = 0.0;
    let mut sweeps = 0;

    for l in 0..n_int {
        let range = RangeInputs::slice(paths, bounds[l], bounds[l + 1]);
        let a_r = a_bound[l + 1].clone();
        let c_r = c_bound[l + 1].clone();
        let x_carry_ref = &x_carry;
        let mu_seed = if l == 0 {
            config.types.e_x0()
        } else {
            mu_star
        };
        let it = fixed_point_mu(
            config,
            paths,
            &range,
            &|lab, p, mu| a_r[lab][p] + c_r[lab][p] * mu,
            &|lab, p| x_carry_ref[lab][p],
            IndependentOpts { mu0: mu_seed, ..opts },
        )
        .map_err(|e| tag_interval(e, l, "forward pass"))?;
        gap = gap.max((it.solve.e_xt - it.mu).abs());
        mu_star = it.mu;
        mu_trace.extend_from_slice(&it.trace);
        ratios.extend_from_slice(&it.ratios);
        sweeps += it.trace.len() - 1;

        let len = range.len;
        for lab in 0..nt {
            for k in 0..len {
                let g = bounds[l] + k;
                y[lab][g * np..(g + 1) * np]
                    .copy_from_slice(&it.solve.y[lab][k * np..(k + 1) * np]);
                z[lab][g * np..(g + 1) * np]
                    .copy_from_slice(&it.solve.z[lab][k * np..(k + 1) * np]);
                x[lab][g * np..(g + 1) * np]
                    .copy_from_slice(&it.solve.x[lab][k * np..(k + 1) * np]);
            }
            if l == n_int - 1 {
                y[lab][ns * np..].copy_from_slice(&it.solve.y[lab][len * np..]);
                x[lab][ns * np..].copy_from_slice(&it.solve.x[lab][len * np..]);
            }
            x_carry[lab] = it.solve.x[lab][len * np..].to_vec();
        }
    }

    let mut pi = vec![vec![0.0; ns * np]; nt];
    for lab in 0..nt {
        let alpha = coeffs.alpha[lab];
        for k in 0..ns {
            let b = coeffs.b[lab][k];
            for p in 0..np {
                pi[lab][k * np + p] = z[lab][k * np + p] + b / alpha;
            }
        }
    }

    Ok(MfgSolution {
        n_types: nt,
        n_paths: np,
        n_steps: ns,
        dt: paths.dt,
        y,
        z,
        z0: Vec::new(),
        pi,
        pi0: Vec::new(),
        x,
        gap,
        mu_star: Some(mu_star),
        mu_trace,
        ratios,
        picard_iters: sweeps,
        picard_residuals: Vec::new(),
    })
}
