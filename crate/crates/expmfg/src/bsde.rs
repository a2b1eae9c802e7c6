//! Regression-based backward induction for (mean-field) BSDEs.
//!
//! Equations are handled in the standard form
//! `Y_t = xi + int_t^T g(s, Y, Z) ds - int_t^T Z dW`, i.e. the discrete
//! recursion is `y_k = E[y_{k+1} | F_k] + g(t_k, .) * dt` with the conditional
//! expectation fitted by least squares on a polynomial basis of the current
//! Brownian states. Z components are extracted from the martingale-increment
//! identity with the fitted conditional mean removed as a control variate:
//! `z_k ~ E[(y_{k+1} - E[y_{k+1}|F_k]) dW_k | F_k] / dt`.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::market::mean_and_stderr;

/// Polynomial regression basis in one or two Brownian states, always
/// including the constant function.
#[derive(Debug, Clone, Copy)]
pub struct RegressionBasis {
    pub degree: usize,
    pub two_vars: bool,
}

impl RegressionBasis {
    pub fn two_vars(degree: usize) -> Self {
        RegressionBasis { degree, two_vars: true }
    }

    pub fn one_var(degree: usize) -> Self {
        RegressionBasis { degree, two_vars: false }
    }

    pub fn n_features(&self) -> usize {
        if self.two_vars {
            (self.degree + 1) * (self.degree + 2) / 2
        } else {
            self.degree + 1
        }
    }

    /// Monomials of total degree <= `degree` in (w, w0), constant first.
    pub fn fill(&self, w: f64, w0: f64, out: &mut [f64]) {
        let mut idx = 0;
        if self.two_vars {
            for d in 0..=self.degree {
                for i in 0..=d {
                    out[idx] = w.powi((d - i) as i32) * w0.powi(i as i32);
                    idx += 1;
                }
            }
        } else {
            let mut v = 1.0;
            for _ in 0..=self.degree {
                out[idx] = v;
                idx += 1;
                v *= w;
            }
        }
        debug_assert_eq!(idx, self.n_features());
    }
}

impl Default for RegressionBasis {
    fn default() -> Self {
        RegressionBasis::two_vars(2)
    }
}

/// Ridge-regularised least squares of `values` on `design`, returning the
/// coefficients and fitted values. Deterministic: the normal equations are
/// accumulated in fixed chunk order.
pub fn regress_conditional(
    values: &[f64],
    design: &DMatrix<f64>,
    ridge: f64,
) -> Result<(DVector<f64>, Vec<f64>)> {
    let n = design.nrows();
    let m = design.ncols();
    if values.len() != n {
        return Err(Error::Shape(format!("{} values vs {} design rows", values.len(), n)));
    }
    if n <= m {
        return Err(Error::Shape(format!("need more samples ({n}) than features ({m})")));
    }

    const CHUNK: usize = 4096;
    let parts: Vec<(DMatrix<f64>, DVector<f64>)> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|rows| {
            let mut xtx = DMatrix::zeros(m, m);
            let mut xty = DVector::zeros(m);
            for &r in rows {
                let row = design.row(r);
                for i in 0..m {
                    let xi = row[i];
                    xty[i] += xi * values[r];
                    for j in i..m {
                        xtx[(i, j)] += xi * row[j];
                    }
                }
            }
            (xtx, xty)
        })
        .collect();
    let mut xtx = DMatrix::zeros(m, m);
    let mut xty = DVector::zeros(m);
    for (a, b) in parts {
        xtx += a;
        xty += b;
    }
    for i in 0..m {
        for j in 0..i {
            xtx[(i, j)] = xtx[(j, i)];
        }
        xtx[(i, i)] += ridge;
    }

    let chol = match Cholesky::new(xtx) {
        Some(c) => c,
        None => return Err(Error::RankDeficient),
    };
    if ridge == 0.0 {
        // Cholesky can slip past an exactly singular matrix on rounding noise;
        // a collapsed pivot is the reliable signal.
        let l = chol.l_dirty();
        let mut min_d = f64::INFINITY;
        let mut max_d = 0.0f64;
        for i in 0..m {
            min_d = min_d.min(l[(i, i)].abs());
            max_d = max_d.max(l[(i, i)].abs());
        }
        if min_d <= 1e-10 * max_d {
            return Err(Error::RankDeficient);
        }
    }
    let coef = chol.solve(&xty);
    let fitted: Vec<f64> = (0..n).map(|r| design.row(r).transpose().dot(&coef)).collect();
    Ok((coef, fitted))
}

/// Per-common-block average over the idiosyncratic copies: the estimator of
/// a conditional expectation given the common noise at a fixed time.
/// Unbiased with variance O(1/K).
pub fn conditional_mean_common(values: &[f64], n_blocks: usize, k_copies: usize) -> Result<Vec<f64>> {
    if k_copies == 0 {
        return Err(Error::Shape("conditional mean needs at least one copy".into()));
    }
    if values.len() != n_blocks * k_copies {
        return Err(Error::Shape(format!(
            "{} values vs {} blocks x {} copies",
            values.len(),
            n_blocks,
            k_copies
        )));
    }
    Ok((0..n_blocks)
        .map(|b| values[b * k_copies..(b + 1) * k_copies].iter().sum::<f64>() / k_copies as f64)
        .collect())
}

/// State of a backward pass at one time step, handed to the driver.
pub struct DriverCtx<'a> {
    pub step: usize,
    pub t: f64,
    /// Fitted `E[y_{k+1} | F_k]` per path.
    pub y_next_fitted: &'a [f64],
    /// Freshly regressed Z components at this step, one slice per Brownian driver.
    pub z: &'a [Vec<f64>],
    /// Full grids of the previous Picard iterate (zeros on the first sweep).
    pub prev: &'a BsdeGrid,
}

/// Solution grids of one backward pass.
#[derive(Debug, Clone)]
pub struct BsdeGrid {
    pub n_paths: usize,
    pub n_steps: usize,
    /// `(n_steps + 1) x n_paths`, layout `[step * n_paths + path]`.
    pub y: Vec<f64>,
    /// Per Brownian driver: `n_steps x n_paths`.
    pub z: Vec<Vec<f64>>,
}

impl BsdeGrid {
    pub fn zeros(n_paths: usize, n_steps: usize, n_drivers: usize) -> Self {
        BsdeGrid {
            n_paths,
            n_steps,
            y: vec![0.0; (n_steps + 1) * n_paths],
            z: vec![vec![0.0; n_steps * n_paths]; n_drivers],
        }
    }

    pub fn y_at(&self, step: usize) -> &[f64] {
        &self.y[step * self.n_paths..(step + 1) * self.n_paths]
    }

    pub fn z_at(&self, driver: usize, step: usize) -> &[f64] {
        &self.z[driver][step * self.n_paths..(step + 1) * self.n_paths]
    }

    fn sup_z_diff(&self, other: &BsdeGrid) -> f64 {
        let mut m: f64 = 0.0;
        for (a, b) in self.z.iter().zip(&other.z) {
            for (x, y) in a.iter().zip(b) {
                m = m.max((x - y).abs());
            }
        }
        m
    }
}

/// `backward_solve` output: grids plus Picard metadata.
#[derive(Debug, Clone)]
pub struct BsdeGridSolution {
    pub grid: BsdeGrid,
    pub picard_iters: usize,
    /// Sup-difference of the Z grids between consecutive sweeps.
    pub picard_residuals: Vec<f64>,
    pub converged: bool,
    pub y0_mean: f64,
    pub y0_stderr: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PicardOpts {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for PicardOpts {
    fn default() -> Self {
        PicardOpts { max_iters: 50, tol: 1e-9 }
    }
}

/// Inputs shared by every sweep of one equation.
pub struct BsdeProblem<'a> {
    pub dt: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    /// Terminal values per path; copied bitwise into the last y row.
    pub terminal: &'a [f64],
    /// Brownian increments per driver, layout `[step * n_paths + path]`.
    pub increments: Vec<&'a [f64]>,
    pub basis: RegressionBasis,
    /// Idiosyncratic Brownian states, `(n_steps + 1) x n_paths`.
    pub w: &'a [f64],
    /// Common Brownian states, same layout; required iff the basis is 2-var.
    pub w0: Option<&'a [f64]>,
    pub ridge: f64,
}

impl BsdeProblem<'_> {
    fn validate(&self) -> Result<()> {
        let (np, ns) = (self.n_paths, self.n_steps);
        if self.terminal.len() != np {
            return Err(Error::Shape("terminal length != n_paths".into()));
        }
        if self.terminal.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("terminal values must be finite".into()));
        }
        for inc in &self.increments {
            if inc.len() != np * ns {
                return Err(Error::Shape("increment grid size mismatch".into()));
            }
        }
        if self.w.len() != (ns + 1) * np {
            return Err(Error::Shape("state grid size mismatch".into()));
        }
        if self.basis.two_vars && self.w0.is_none() {
            return Err(Error::Shape("two-variable basis needs common states".into()));
        }
        Ok(())
    }

    fn design(&self, step: usize) -> DMatrix<f64> {
        let np = self.n_paths;
        let m = self.basis.n_features();
        let mut x = DMatrix::zeros(np, m);
        let mut row = vec![0.0; m];
        for p in 0..np {
            let w = self.w[step * np + p];
            let w0 = self.w0.map_or(0.0, |s| s[step * np + p]);
            self.basis.fill(w, w0, &mut row);
            for j in 0..m {
                x[(p, j)] = row[j];
            }
        }
        x
    }
}

/// One explicit backward pass. The driver sees the previous Picard iterate in
/// `ctx.prev`; pass a zero grid when there is none.
pub fn backward_sweep<F>(problem: &BsdeProblem, driver: F, prev: &BsdeGrid) -> Result<(BsdeGrid, f64, f64)>
where
    F: Fn(&DriverCtx) -> Vec<f64>,
{
    problem.validate()?;
    let np = problem.n_paths;
    let ns = problem.n_steps;
    let dt = problem.dt;
    let n_drivers = problem.increments.len();

    let mut grid = BsdeGrid::zeros(np, ns, n_drivers);
    grid.y[ns * np..].copy_from_slice(problem.terminal);

    let mut y0_mean = 0.0;
    let mut y0_stderr = 0.0;

    for k in (0..ns).rev() {
        let design = problem.design(k);
        let y_next = grid.y[(k + 1) * np..(k + 2) * np].to_vec();
        let (_, pilot_y) = regress_conditional(&y_next, &design, problem.ridge)?;

        // Pilot Z fits from pilot-centred martingale-increment targets.
        let mut pilot_z: Vec<Vec<f64>> = Vec::with_capacity(n_drivers);
        for d in 0..n_drivers {
            let inc = &problem.increments[d][k * np..(k + 1) * np];
            let targets: Vec<f64> = (0..np).map(|p| (y_next[p] - pilot_y[p]) * inc[p] / dt).collect();
            let (_, zfit) = regress_conditional(&targets, &design, problem.ridge)?;
            pilot_z.push(zfit);
        }

        // Second stage: regress the fully centred residual times each
        // increment and add the pilot back. Unbiased for any adapted pilot,
        // and the target variance collapses to the representation error.
        let mut residual: Vec<f64> = (0..np).map(|p| y_next[p] - pilot_y[p]).collect();
        for (d, zfit) in pilot_z.iter().enumerate() {
            let inc = &problem.increments[d][k * np..(k + 1) * np];
            for p in 0..np {
                residual[p] -= zfit[p] * inc[p];
            }
        }
        let mut z_here: Vec<Vec<f64>> = Vec::with_capacity(n_drivers);
        for d in 0..n_drivers {
            let inc = &problem.increments[d][k * np..(k + 1) * np];
            let targets: Vec<f64> = (0..np).map(|p| residual[p] * inc[p] / dt).collect();
            let (_, correction) = regress_conditional(&targets, &design, problem.ridge)?;
            z_here.push(
                correction.iter().zip(&pilot_z[d]).map(|(c, z)| c + z).collect(),
            );
        }

        // Conditional mean of y_{k+1} with the represented martingale part
        // removed as a control variate; same estimand, far lower variance.
        let mut centred = y_next.clone();
        for (d, zfit) in z_here.iter().enumerate() {
            let inc = &problem.increments[d][k * np..(k + 1) * np];
            for p in 0..np {
                centred[p] -= zfit[p] * inc[p];
            }
        }
        let (_, fitted) = regress_conditional(&centred, &design, problem.ridge)?;

        let ctx = DriverCtx {
            step: k,
            t: k as f64 * dt,
            y_next_fitted: &fitted,
            z: &z_here,
            prev,
        };
        let g = driver(&ctx);
        if g.len() != np {
            return Err(Error::Shape("driver must return one value per path".into()));
        }

        for (d, zfit) in z_here.into_iter().enumerate() {
            grid.z[d][k * np..(k + 1) * np].copy_from_slice(&zfit);
        }
        let mut bad = false;
        for p in 0..np {
            let v = fitted[p] + g[p] * dt;
            if !v.is_finite() {
                bad = true;
            }
            grid.y[k * np + p] = v;
        }
        if bad {
            return Err(Error::NanEncountered { step: k, context: "backward sweep".into() });
        }
        if k == 0 {
            let targets: Vec<f64> = (0..np).map(|p| centred[p] + g[p] * dt).collect();
            let (m, se) = mean_and_stderr(&targets);
            y0_mean = m;
            y0_stderr = se;
        }
    }
    Ok((grid, y0_mean, y0_stderr))
}

/// Picard iteration over `backward_sweep`: drivers that reference z values of
/// other equations or nonlocal functionals read them from `ctx.prev`, which is
/// frozen at the previous sweep. Stops when the sup-change of the Z grids
/// drops below `picard.tol`.
pub fn backward_solve<F>(problem: &BsdeProblem, driver: F, picard: PicardOpts) -> Result<BsdeGridSolution>
where
    F: Fn(&DriverCtx) -> Vec<f64>,
{
    let mut prev = BsdeGrid::zeros(problem.n_paths, problem.n_steps, problem.increments.len());
    let mut residuals = Vec::new();
    for it in 0..picard.max_iters {
        let (grid, y0_mean, y0_stderr) = backward_sweep(problem, &driver, &prev)?;
        let res = grid.sup_z_diff(&prev);
        residuals.push(res);
        prev = grid;
        if res <= picard.tol && it > 0 {
            return Ok(BsdeGridSolution {
                grid: prev,
                picard_iters: it + 1,
                picard_residuals: residuals,
                converged: true,
                y0_mean,
                y0_stderr,
            });
        }
        if it + 1 == picard.max_iters && res <= picard.tol {
            return Ok(BsdeGridSolution {
                grid: prev,
                picard_iters: it + 1,
                picard_residuals: residuals,
                converged: true,
                y0_mean,
                y0_stderr,
            });
        }
    }
    Err(Error::NonConvergence { context: "backward_solve Picard".into(), residuals })
}

/// Empirical BMO proxy: `max_k sqrt( mean_paths sum_{s >= k} z_s^2 dt )`.
/// A lower proxy for the essential-sup BMO norm (path means instead of
/// conditional sups).
pub fn bmo_norm_estimate(z: &[f64], n_paths: usize, dt: f64) -> f64 {
    if z.is_empty() {
        return 0.0;
    }
    let n_steps = z.len() / n_paths;
    let mut tail = vec![0.0; n_paths];
    let mut best: f64 = 0.0;
    for k in (0..n_steps).rev() {
        for p in 0..n_paths {
            let v = z[k * n_paths + p];
            tail[p] += v * v * dt;
        }
        let mean = tail.iter().sum::<f64>() / n_paths as f64;
        best = best.max(mean);
    }
    best.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{sample_paths, GameConfig, ReturnModel, TypeSpec};
    use approx::assert_relative_eq;

    fn unit_config(n_steps: usize, seed: u64) -> GameConfig {
        GameConfig::nplayer_uniform(
            2,
            TypeSpec { alpha: 1.0, theta: 0.0, x0: 0.0 },
            ReturnModel::Constant { b: 0.0, b0: 0.0 },
            1.0,
            n_steps,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn constant_values_regress_to_constant() {
        let design =
            DMatrix::from_fn(50, 3, |r, c| [1.0, r as f64, (r as f64).powi(2)][c] / 10.0 + if c == 0 { 0.9 } else { 0.0 });
        let values = vec![3.5; 50];
        let (_, fitted) = regress_conditional(&values, &design, 1e-10).unwrap();
        for f in fitted {
            assert_relative_eq!(f, 3.5, max_relative = 1e-8);
        }
    }

    #[test]
    fn exactly_representable_values_recover_coefficients() {
        let n = 200;
        let design = DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { (r as f64 - 100.0) / 25.0 });
        let values: Vec<f64> = (0..n).map(|r| (r as f64 - 100.0) / 25.0).collect();
        let (coef, _) = regress_conditional(&values, &design, 0.0).unwrap();
        assert_relative_eq!(coef[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(coef[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn quadratic_recovery_has_negligible_mse() {
        // values = W^2 on basis (1, W, W^2): exact representation.
        let cfg = unit_config(1, 5);
        let paths = sample_paths(&cfg, 10_000, 1).unwrap();
        let w: Vec<f64> = (0..10_000).map(|p| paths.idio_inc(p, 0)).collect();
        let design = DMatrix::from_fn(10_000, 3, |r, c| w[r].powi(c as i32));
        let values: Vec<f64> = w.iter().map(|v| v * v).collect();
        let (_, fitted) = regress_conditional(&values, &design, 0.0).unwrap();
        let scale: f64 = values.iter().map(|v| v * v).sum();
        let mse: f64 = values.iter().zip(&fitted).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(mse / scale < 1e-20, "relative mse {}", mse / scale);
    }

    #[test]
    fn rank_deficiency_without_ridge_errors() {
        // Two identical columns.
        let design = DMatrix::from_fn(10, 2, |r, _| 1.0 + r as f64);
        let values = vec![1.0; 10];
        assert!(matches!(regress_conditional(&values, &design, 0.0), Err(Error::RankDeficient)));
        assert!(regress_conditional(&values, &design, 1e-8).is_ok());
    }

    #[test]
    fn conditional_mean_constant_and_measurable_inputs() {
        let vals = vec![2.0; 12];
        let m = conditional_mean_common(&vals, 3, 4).unwrap();
        assert_eq!(m, vec![2.0; 3]);
        // F0-measurable input: value depends only on the block.
        let vals: Vec<f64> = (0..12).map(|i| (i / 4) as f64).collect();
        let m = conditional_mean_common(&vals, 3, 4).unwrap();
        assert_eq!(m, vec![0.0, 1.0, 2.0]);
        assert!(conditional_mean_common(&vals, 3, 0).is_err());
    }

    #[test]
    fn conditional_mean_clt_oracle() {
        let cfg = unit_config(1, 9);
        let k = 10_000;
        let paths = sample_paths(&cfg, 4, k).unwrap();
        let vals: Vec<f64> = (0..4 * k).map(|p| paths.idio_inc(p, 0) / paths.dt.sqrt()).collect();
        let m = conditional_mean_common(&vals, 4, k).unwrap();
        for v in m {
            assert!(v.abs() < 3.0 / (k as f64).sqrt(), "block mean {v}");
        }
    }

    fn problem_inputs(
        n_blocks: usize,
        n_steps: usize,
        seed: u64,
    ) -> (crate::market::PathBundle, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut cfg = unit_config(n_steps, seed);
        cfg.n_steps = n_steps;
        let paths = sample_paths(&cfg, n_blocks, 1).unwrap();
        let w = paths.idio_states();
        let w0 = paths.common_states_per_path();
        let inc = paths.idio_inc_grid();
        let inc0 = paths.common_inc_grid_per_path();
        (paths, w, w0, inc, inc0)
    }

    #[test]
    fn zero_driver_constant_terminal() {
        let (paths, w, w0, inc, inc0) = problem_inputs(500, 10, 21);
        let np = paths.n_paths();
        let terminal = vec![4.25; np];
        let problem = BsdeProblem {
            dt: paths.dt,
            n_steps: 10,
            n_paths: np,
            terminal: &terminal,
            increments: vec![&inc, &inc0],
            basis: RegressionBasis::two_vars(2),
            w: &w,
            w0: Some(&w0),
            ridge: 1e-8,
        };
        let sol = backward_solve(&problem, |ctx| vec![0.0; ctx.y_next_fitted.len()], PicardOpts::default()).unwrap();
        assert!(sol.converged);
        // Terminal exactness is bitwise.
        assert_eq!(sol.grid.y_at(10), &terminal[..]);
        // Conditioning of the small-time design matrices bounds the accuracy.
        for k in 0..10 {
            for p in 0..np {
                assert_relative_eq!(sol.grid.y_at(k)[p], 4.25, max_relative = 1e-8);
                assert!(sol.grid.z_at(0, k)[p].abs() < 1e-6);
                assert!(sol.grid.z_at(1, k)[p].abs() < 1e-6);
            }
        }
    }

    #[test]
    fn deterministic_integrand_oracle() {
        // g = -|b|^2 / (2 alpha) with b = (0.2, 0): y_0 = -0.02 exactly in the limit.
        let (paths, w, w0, inc, inc0) = problem_inputs(2000, 50, 23);
        let np = paths.n_paths();
        let terminal = vec![0.0; np];
        let problem = BsdeProblem {
            dt: paths.dt,
            n_steps: 50,
            n_paths: np,
            terminal: &terminal,
            increments: vec![&inc, &inc0],
            basis: RegressionBasis::two_vars(2),
            w: &w,
            w0: Some(&w0),
            ridge: 1e-8,
        };
        let g = -0.2f64 * 0.2 / 2.0;
        let sol = backward_solve(&problem, |ctx| vec![g; ctx.y_next_fitted.len()], PicardOpts::default()).unwrap();
        assert!((sol.y0_mean + 0.02).abs() <= (3.0 * sol.y0_stderr).max(1e-10));
        assert!((sol.y0_mean + 0.02).abs() <= 5e-3);
    }

    #[test]
    fn linear_driver_matches_drift_shifted_solution() {
        // g = b z, terminal W_T: y_t = W_t + b (T - t), z = 1.
        let b = 0.3;
        let (paths, w, w0, inc, inc0) = problem_inputs(4000, 50, 25);
        let np = paths.n_paths();
        let terminal: Vec<f64> = (0..np).map(|p| w[50 * np + p]).collect();
        let problem = BsdeProblem {
            dt: paths.dt,
            n_steps: 50,
            n_paths: np,
            terminal: &terminal,
            increments: vec![&inc, &inc0],
            basis: RegressionBasis::two_vars(2),
            w: &w,
            w0: Some(&w0),
            ridge: 1e-8,
        };
        let sol = backward_solve(
            &problem,
            |ctx: &DriverCtx| ctx.z[0].iter().map(|z| b * z).collect(),
            PicardOpts::default(),
        )
        .unwrap();
        assert!((sol.y0_mean - b).abs() <= (3.0 * sol.y0_stderr).max(5e-3), "y0 {}", sol.y0_mean);
        // z estimates track the martingale-representation integrand; the
        // coefficient noise of the two-stage estimator is O(n_feat / sqrt(n)).
        for k in [0, 24, 49] {
            let (zm, _) = mean_and_stderr(sol.grid.z_at(0, k));
            assert!((zm - 1.0).abs() <= 2e-2, "z mean {zm} at {k}");
        }
        // Pathwise agreement with the analytic solution at mid-horizon.
        let k = 25;
        for p in (0..np).step_by(997) {
            let expect = w[k * np + p] + b * (1.0 - k as f64 * paths.dt);
            assert!((sol.grid.y_at(k)[p] - expect).abs() < 5e-2);
        }
    }

    #[test]
    fn grid_refinement_shrinks_time_discretisation_error() {
        // g = b(t) z with b(t) = 0.2 + 0.1 t and terminal W_T:
        // y_0 = int_0^T b = 0.25, and the scheme commits the left-Riemann error.
        let mut errs = Vec::new();
        for &n_steps in &[25usize, 50, 100] {
            let (paths, w, w0, inc, inc0) = problem_inputs(2000, n_steps, 27);
            let np = paths.n_paths();
            let terminal: Vec<f64> = (0..np).map(|p| w[n_steps * np + p]).collect();
            let problem = BsdeProblem {
                dt: paths.dt,
                n_steps,
                n_paths: np,
                terminal: &terminal,
                increments: vec![&inc, &inc0],
                basis: RegressionBasis::two_vars(2),
                w: &w,
                w0: Some(&w0),
                ridge: 1e-8,
            };
            let sol = backward_solve(
                &problem,
                |ctx: &DriverCtx| {
                    let b = 0.2 + 0.1 * ctx.t;
                    ctx.z[0].iter().map(|z| b * z).collect()
                },
                PicardOpts::default(),
            )
            .unwrap();
            errs.push((sol.y0_mean - 0.25).abs());
        }
        assert!(errs[1] < errs[0], "refinement 25 -> 50: {errs:?}");
        assert!(errs[2] < errs[1], "refinement 50 -> 100: {errs:?}");
    }

    #[test]
    fn nan_in_driver_aborts_with_step_index() {
        let (paths, w, w0, inc, inc0) = problem_inputs(100, 6, 28);
        let np = paths.n_paths();
        let terminal = vec![0.0; np];
        let problem = BsdeProblem {
            dt: paths.dt,
            n_steps: 6,
            n_paths: np,
            terminal: &terminal,
            increments: vec![&inc, &inc0],
            basis: RegressionBasis::two_vars(2),
            w: &w,
            w0: Some(&w0),
            ridge: 1e-8,
        };
        let err = backward_solve(
            &problem,
            |ctx| {
                let v = if ctx.step == 3 { f64::NAN } else { 0.0 };
                vec![v; ctx.y_next_fitted.len()]
            },
            PicardOpts::default(),
        );
        match err {
            Err(Error::NanEncountered { step, .. }) => assert_eq!(step, 3),
            other => panic!("expected NaN abort, got {other:?}"),
        }
    }

    #[test]
    fn picard_residuals_are_reported_and_nonconvergence_errors() {
        let (paths, w, w0, inc, inc0) = problem_inputs(200, 5, 29);
        let np = paths.n_paths();
        let terminal = vec![1.0; np];
        let problem = BsdeProblem {
            dt: paths.dt,
            n_steps: 5,
            n_paths: np,
            terminal: &terminal,
            increments: vec![&inc, &inc0],
            basis: RegressionBasis::two_vars(2),
            w: &w,
            w0: Some(&w0),
            ridge: 1e-8,
        };
        // A driver whose prev-dependence never settles: g = prev_y0_mean + 1.
        let diverging = |ctx: &DriverCtx| {
            let shift = ctx.prev.y[0] + 1.0;
            vec![shift; ctx.y_next_fitted.len()]
        };
        let err = backward_solve(&problem, diverging, PicardOpts { max_iters: 3, tol: 1e-12 });
        match err {
            Err(Error::NonConvergence { residuals, .. }) => assert_eq!(residuals.len(), 3),
            other => panic!("expected NonConvergence, got {other:?}"),
        }
    }

    #[test]
    fn bmo_proxy_closed_forms() {
        let n_paths = 4;
        let dt = 0.01;
        let z = vec![0.0; n_paths * 100];
        assert_eq!(bmo_norm_estimate(&z, n_paths, dt), 0.0);
        let z = vec![2.0; n_paths * 100];
        assert_relative_eq!(bmo_norm_estimate(&z, n_paths, dt), 2.0, max_relative = 1e-12);
        // indicator of the first half of [0, 1]
        let mut z = vec![0.0; n_paths * 100];
        for k in 0..50 {
            for p in 0..n_paths {
                z[k * n_paths + p] = 1.0;
            }
        }
        assert_relative_eq!(bmo_norm_estimate(&z, n_paths, dt), 0.5f64.sqrt(), max_relative = 1e-12);
    }
}
