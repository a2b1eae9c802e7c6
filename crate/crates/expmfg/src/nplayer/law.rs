//! Per-type coefficient tables and exact type-law expectations on the grid.

use crate::market::GameConfig;

/// Precomputed return-rate values and type-law moments on the time grid.
/// Everything here is an exact finite sum over the declared type law.
pub(crate) struct TypeCoeffs {
    pub n_types: usize,
    pub alpha: Vec<f64>,
    pub theta: Vec<f64>,
    pub probs: Vec<f64>,
    /// `[type][step]`, step in `0..=n_steps`.
    pub b: Vec<Vec<f64>>,
    pub b0: Vec<Vec<f64>>,
    /// E[b0/alpha] per step.
    pub e_merton0: Vec<f64>,
    /// E[(b^2 + b0^2)/alpha] per step.
    pub e_bbar_sq_over_alpha: Vec<f64>,
    /// E[theta b0] per step.
    pub e_theta_b0: Vec<f64>,
    pub e_theta: f64,
}

pub(crate) fn type_coeffs(config: &GameConfig) -> TypeCoeffs {
    let dist = &config.types;
    let nt = dist.n_types();
    let ns = config.n_steps;
    let mut b = vec![vec![0.0; ns + 1]; nt];
    let mut b0 = vec![vec![0.0; ns + 1]; nt];
    for label in 0..nt {
        for k in 0..=ns {
            let t = config.grid_time(k);
            b[label][k] = config.returns.b(t, label);
            b0[label][k] = config.returns.b0(t, label);
        }
    }
    let mut e_merton0 = vec![0.0; ns + 1];
    let mut e_bbar = vec![0.0; ns + 1];
    let mut e_theta_b0 = vec![0.0; ns + 1];
    for k in 0..=ns {
        for (label, (spec, p)) in dist.types.iter().zip(&dist.probs).enumerate() {
            e_merton0[k] += p * b0[label][k] / spec.alpha;
            e_bbar[k] += p * (b[label][k].powi(2) + b0[label][k].powi(2)) / spec.alpha;
            e_theta_b0[k] += p * spec.theta * b0[label][k];
        }
    }
    TypeCoeffs {
        n_types: nt,
        alpha: dist.types.iter().map(|t| t.alpha).collect(),
        theta: dist.types.iter().map(|t| t.theta).collect(),
        probs: dist.probs.clone(),
        b,
        b0,
        e_merton0,
        e_bbar_sq_over_alpha: e_bbar,
        e_theta_b0,
        e_theta: dist.e_theta(),
    }
}
