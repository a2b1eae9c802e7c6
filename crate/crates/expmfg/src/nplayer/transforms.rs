//! Invertible coordinate changes between the raw equilibrium Z components and
//! the reduced coordinates used by the constructive solver.
//!
//! Reduced ("absorbed") coordinates remove the opponents' stochastic
//! integrals: `z~_ii = z_ii`, `z~_ij = z_ij - theta_i / (N-1) (z_jj + m_j)`,
//! `z~_i0 = z_i0 - theta_i / (N-1) sum_{j != i} (z_j0 + m0_j)` with
//! `m_j = b_j / alpha_j`, `m0_j = b_j0 / alpha_j`. The common-asset map is
//! inverted by a rational aggregation formula whose denominator
//! `1 - sum_j theta_j / (N - 1 + theta_j)` must stay positive.

use crate::error::{Error, Result};

/// Per-player competition weights plus the aggregation denominator.
#[derive(Debug, Clone)]
pub struct ZTransform {
    pub thetas: Vec<f64>,
    denom: f64,
}

impl ZTransform {
    pub fn new(thetas: Vec<f64>) -> Result<Self> {
        let n = thetas.len();
        if n < 2 {
            return Err(Error::Config("transform needs at least two players".into()));
        }
        let nm1 = (n - 1) as f64;
        let denom = 1.0 - thetas.iter().map(|t| t / (nm1 + t)).sum::<f64>();
        if denom <= 0.0 {
            return Err(Error::NonpositiveDenominator(denom));
        }
        Ok(ZTransform { thetas, denom })
    }

    pub fn n_players(&self) -> usize {
        self.thetas.len()
    }

    pub fn denom(&self) -> f64 {
        self.denom
    }

    fn nm1(&self) -> f64 {
        (self.n_players() - 1) as f64
    }

    /// `z~_ij` from the raw components; `z_jj` and `m_j = b_j / alpha_j`
    /// belong to player `j`.
    pub fn reduced_cross(&self, i: usize, z_ij: f64, z_jj: f64, m_j: f64) -> f64 {
        z_ij - self.thetas[i] / self.nm1() * (z_jj + m_j)
    }

    /// Inverse of `reduced_cross`.
    pub fn raw_cross(&self, i: usize, z_tilde_ij: f64, z_jj: f64, m_j: f64) -> f64 {
        z_tilde_ij + self.thetas[i] / self.nm1() * (z_jj + m_j)
    }

    /// Reduced common components for all players at one (path, time) point.
    /// `m0[j] = b_j0 / alpha_j`.
    pub fn reduced_common(&self, raw_z0: &[f64], m0: &[f64]) -> Vec<f64> {
        let n = self.n_players();
        let nm1 = self.nm1();
        let total: f64 = raw_z0.iter().zip(m0).map(|(z, m)| z + m).sum();
        (0..n)
            .map(|i| raw_z0[i] - self.thetas[i] / nm1 * (total - raw_z0[i] - m0[i]))
            .collect()
    }

    /// Raw common components from the reduced ones (the aggregation inverse).
    pub fn raw_common(&self, reduced_z0: &[f64], m0: &[f64]) -> Vec<f64> {
        let n = self.n_players();
        let nm1 = self.nm1();
        let weight = |j: usize| 1.0 / (1.0 + self.thetas[j] / nm1);
        let s_reduced: f64 = (0..n).map(|j| reduced_z0[j] * weight(j)).sum();
        let s_merton: f64 = (0..n).map(|j| m0[j] * weight(j)).sum();
        (0..n)
            .map(|i| {
                let lever = self.thetas[i] / nm1;
                (reduced_z0[i] + lever * (s_reduced + s_merton) / self.denom - lever * m0[i])
                    * weight(i)
            })
            .collect()
    }
}
