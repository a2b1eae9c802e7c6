//! Model configuration, layered Brownian path simulation, wealth dynamics and
//! exponential utility.
//!
//! Every player trades two assets with unit volatility: one driven by an
//! idiosyncratic Brownian motion, one by a Brownian motion common to all
//! players. Randomness of the player characteristics (risk aversion `alpha`,
//! competition weight `theta`, initial wealth `x0`) is restricted to a finite
//! type distribution with explicit probabilities, so expectations over the
//! type law are exact finite sums.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest exponent magnitude fed to `exp` in utility evaluation. Clamping
/// events are counted by the batch evaluator and surfaced by the verification
/// reports.
pub const EXP_CLAMP: f64 = 700.0;

/// One atom of the type distribution: (risk aversion, competition weight,
/// initial wealth).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeSpec {
    pub alpha: f64,
    pub theta: f64,
    pub x0: f64,
}

impl TypeSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.theta) {
            return Err(Error::Config(format!("theta must lie in [0, 1), got {}", self.theta)));
        }
        if !self.x0.is_finite() {
            return Err(Error::Config(format!("x0 must be finite, got {}", self.x0)));
        }
        Ok(())
    }
}

/// A concrete player of the N-player game. `type_label` indexes into the
/// config's type distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlayerSpec {
    pub alpha: f64,
    pub theta: f64,
    pub x0: f64,
    pub type_label: usize,
}

impl PlayerSpec {
    pub fn from_type(label: usize, t: TypeSpec) -> Self {
        PlayerSpec { alpha: t.alpha, theta: t.theta, x0: t.x0, type_label: label }
    }
}

/// Finite type law for the G-measurable characteristics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeDistribution {
    pub types: Vec<TypeSpec>,
    pub probs: Vec<f64>,
}

impl TypeDistribution {
    pub fn single(t: TypeSpec) -> Self {
        TypeDistribution { types: vec![t], probs: vec![1.0] }
    }

    pub fn uniform(types: Vec<TypeSpec>) -> Self {
        let p = 1.0 / types.len() as f64;
        let probs = vec![p; types.len()];
        TypeDistribution { types, probs }
    }

    pub fn n_types(&self) -> usize {
        self.types.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.types.is_empty() {
            return Err(Error::Config("type distribution must contain at least one type".into()));
        }
        if self.types.len() != self.probs.len() {
            return Err(Error::Config("types and probs must have equal length".into()));
        }
        for t in &self.types {
            t.validate()?;
        }
        if self.probs.iter().any(|p| *p < 0.0) {
            return Err(Error::Config("type probabilities must be nonnegative".into()));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("type probabilities must sum to 1, got {total}")));
        }
        Ok(())
    }

    /// Exact expectation of `f` over the type law.
    pub fn mean<F: Fn(&TypeSpec) -> f64>(&self, f: F) -> f64 {
        self.types.iter().zip(&self.probs).map(|(t, p)| p * f(t)).sum()
    }

    /// Essential supremum of `|f|` over the support of the law.
    pub fn sup<F: Fn(&TypeSpec) -> f64>(&self, f: F) -> f64 {
        self.types
            .iter()
            .zip(&self.probs)
            .filter(|(_, p)| **p > 0.0)
            .map(|(t, _)| f(t).abs())
            .fold(0.0, f64::max)
    }

    pub fn e_theta(&self) -> f64 {
        self.mean(|t| t.theta)
    }

    pub fn e_x0(&self) -> f64 {
        self.mean(|t| t.x0)
    }

    pub fn sup_theta(&self) -> f64 {
        self.sup(|t| t.theta)
    }

    pub fn sup_alpha(&self) -> f64 {
        self.sup(|t| t.alpha)
    }
}

/// Deterministic-in-(t, type) return rates with declared bounds. Volatilities
/// are identically 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReturnModel {
    Constant { b: f64, b0: f64 },
    Sinusoidal { b_base: f64, b_amp: f64, b0_base: f64, b0_amp: f64, freq: f64 },
    TypeDependent { b: Vec<f64>, b0: Vec<f64> },
}

impl ReturnModel {
    /// Idiosyncratic-asset return rate at time `t` for a given type.
    pub fn b(&self, t: f64, type_label: usize) -> f64 {
        match self {
            ReturnModel::Constant { b, .. } => *b,
            ReturnModel::Sinusoidal { b_base, b_amp, freq, .. } => {
                b_base + b_amp * (2.0 * std::f64::consts::PI * freq * t).sin()
            }
            ReturnModel::TypeDependent { b, .. } => b[type_label],
        }
    }

    /// Common-asset return rate at time `t` for a given type.
    pub fn b0(&self, t: f64, type_label: usize) -> f64 {
        match self {
            ReturnModel::Constant { b0, .. } => *b0,
            ReturnModel::Sinusoidal { b0_base, b0_amp, freq, .. } => {
                b0_base + b0_amp * (2.0 * std::f64::consts::PI * freq * t).sin()
            }
            ReturnModel::TypeDependent { b0, .. } => b0[type_label],
        }
    }

    /// Declared essential sup bound on |b|.
    pub fn bound_b(&self) -> f64 {
        match self {
            ReturnModel::Constant { b, .. } => b.abs(),
            ReturnModel::Sinusoidal { b_base, b_amp, .. } => b_base.abs() + b_amp.abs(),
            ReturnModel::TypeDependent { b, .. } => b.iter().fold(0.0, |m, v| m.max(v.abs())),
        }
    }

    /// Declared essential sup bound on |b0|.
    pub fn bound_b0(&self) -> f64 {
        match self {
            ReturnModel::Constant { b0, .. } => b0.abs(),
            ReturnModel::Sinusoidal { b0_base, b0_amp, .. } => b0_base.abs() + b0_amp.abs(),
            ReturnModel::TypeDependent { b0, .. } => b0.iter().fold(0.0, |m, v| m.max(v.abs())),
        }
    }

    fn n_labels(&self) -> Option<usize> {
        match self {
            ReturnModel::TypeDependent { b, b0 } => Some(b.len().min(b0.len())),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GameMode {
    NPlayer(Vec<PlayerSpec>),
    MeanField,
}

/// The single source of model truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameConfig {
    pub horizon: f64,
    pub n_steps: usize,
    pub mode: GameMode,
    pub types: TypeDistribution,
    pub returns: ReturnModel,
    pub seed: u64,
}

impl GameConfig {
    /// N players all sharing one type.
    pub fn nplayer_uniform(
        n: usize,
        spec: TypeSpec,
        returns: ReturnModel,
        horizon: f64,
        n_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        let players = (0..n).map(|_| PlayerSpec::from_type(0, spec)).collect();
        let cfg = GameConfig {
            horizon,
            n_steps,
            mode: GameMode::NPlayer(players),
            types: TypeDistribution::single(spec),
            returns,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// N players assigned types from an explicit law.
    pub fn nplayer_from_assignments(
        types: TypeDistribution,
        labels: &[usize],
        returns: ReturnModel,
        horizon: f64,
        n_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        let players = labels
            .iter()
            .map(|&l| {
                types
                    .types
                    .get(l)
                    .map(|t| PlayerSpec::from_type(l, *t))
                    .ok_or_else(|| Error::Config(format!("type label {l} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = GameConfig {
            horizon,
            n_steps,
            mode: GameMode::NPlayer(players),
            types,
            returns,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mfg(
        types: TypeDistribution,
        returns: ReturnModel,
        horizon: f64,
        n_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        let cfg = GameConfig {
            horizon,
            n_steps,
            mode: GameMode::MeanField,
            types,
            returns,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn grid_time(&self, step: usize) -> f64 {
        self.horizon * step as f64 / self.n_steps as f64
    }

    pub fn is_nplayer(&self) -> bool {
        matches!(self.mode, GameMode::NPlayer(_))
    }

    pub fn players(&self) -> Result<&[PlayerSpec]> {
        match &self.mode {
            GameMode::NPlayer(p) => Ok(p),
            GameMode::MeanField => Err(Error::Config("operation requires an N-player config".into())),
        }
    }

    pub fn n_players(&self) -> usize {
        match &self.mode {
            GameMode::NPlayer(p) => p.len(),
            GameMode::MeanField => 0,
        }
    }

    /// Mean initial wealth of player `i`'s opponents.
    pub fn peer_avg_x0(&self, i: usize) -> Result<f64> {
        let players = self.players()?;
        let n = players.len();
        let total: f64 = players.iter().map(|p| p.x0).sum();
        Ok((total - players[i].x0) / (n - 1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.horizon.is_finite() || self.horizon <= 0.0 {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        self.types.validate()?;
        if let Some(n) = self.returns.n_labels() {
            if n < self.types.n_types() {
                return Err(Error::Config(
                    "type_dependent return model must cover every type label".into(),
                ));
            }
        }
        match &self.mode {
            GameMode::NPlayer(players) => {
                if players.len() < 2 {
                    return Err(Error::Config("N-player mode needs at least 2 players".into()));
                }
                for p in players {
                    TypeSpec { alpha: p.alpha, theta: p.theta, x0: p.x0 }.validate()?;
                    if p.type_label >= self.types.n_types() {
                        return Err(Error::Config(format!(
                            "player type label {} out of range",
                            p.type_label
                        )));
                    }
                }
            }
            GameMode::MeanField => {}
        }
        // Spot-check the declared bounds on the grid.
        let (bb, bb0) = (self.returns.bound_b(), self.returns.bound_b0());
        for k in 0..=self.n_steps {
            let t = self.grid_time(k);
            for label in 0..self.types.n_types() {
                if self.returns.b(t, label).abs() > bb + 1e-12 {
                    return Err(Error::Config(format!("b exceeds its declared bound at t={t}")));
                }
                if self.returns.b0(t, label).abs() > bb0 + 1e-12 {
                    return Err(Error::Config(format!("b0 exceeds its declared bound at t={t}")));
                }
            }
        }
        Ok(())
    }
}

/// Layered Brownian increments: one common path per block, `k_copies`
/// independent idiosyncratic paths per block. Indexing is counter-based so a
/// given (seed, block, copy) always reproduces the same draws regardless of
/// generation order or thread scheduling.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub n_blocks: usize,
    pub k_copies: usize,
    pub n_steps: usize,
    pub dt: f64,
    common: Vec<f64>,
    idio: Vec<f64>,
}

fn stream_rng(seed: u64, kind: u8, block: u64, copy: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8] = kind;
    key[9..17].copy_from_slice(&block.to_le_bytes());
    key[17..25].copy_from_slice(&copy.to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

fn fill_increments(rng: &mut ChaCha12Rng, sqrt_dt: f64, out: &mut [f64]) {
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = z * sqrt_dt;
    }
}

/// Draw a layered path bundle for `config`. Deterministic given
/// `(config.seed, n_blocks, k_copies)`.
pub fn sample_paths(config: &GameConfig, n_blocks: usize, k_copies: usize) -> Result<PathBundle> {
    if config.n_steps == 0 || config.horizon <= 0.0 {
        return Err(Error::Config("paths need n_steps >= 1 and horizon > 0".into()));
    }
    if n_blocks == 0 || k_copies == 0 {
        return Err(Error::Config("n_blocks and k_copies must be at least 1".into()));
    }
    let n_steps = config.n_steps;
    let dt = config.dt();
    let sqrt_dt = dt.sqrt();
    let seed = config.seed;

    let mut common = vec![0.0; n_blocks * n_steps];
    common
        .par_chunks_mut(n_steps)
        .enumerate()
        .for_each(|(b, chunk)| {
            let mut rng = stream_rng(seed, 0, b as u64, 0);
            fill_increments(&mut rng, sqrt_dt, chunk);
        });

    let mut idio = vec![0.0; n_blocks * k_copies * n_steps];
    idio.par_chunks_mut(n_steps).enumerate().for_each(|(i, chunk)| {
        let (b, c) = (i / k_copies, i % k_copies);
        let mut rng = stream_rng(seed, 1, b as u64, c as u64);
        fill_increments(&mut rng, sqrt_dt, chunk);
    });

    Ok(PathBundle { n_blocks, k_copies, n_steps, dt, common, idio })
}

impl PathBundle {
    pub fn n_paths(&self) -> usize {
        self.n_blocks * self.k_copies
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn block_of(&self, path: usize) -> usize {
        path / self.k_copies
    }

    /// Idiosyncratic increment of `path = block * k_copies + copy` over step `step`.
    pub fn idio_inc(&self, path: usize, step: usize) -> f64 {
        self.idio[path * self.n_steps + step]
    }

    /// Common increment seen by `path` over step `step`.
    pub fn common_inc(&self, path: usize, step: usize) -> f64 {
        self.common[self.block_of(path) * self.n_steps + step]
    }

    pub fn common_inc_block(&self, block: usize, step: usize) -> f64 {
        self.common[block * self.n_steps + step]
    }

    /// Idiosyncratic Brownian states, `(n_steps + 1) x n_paths`, laid out
    /// `[step * n_paths + path]` with W_0 = 0.
    pub fn idio_states(&self) -> Vec<f64> {
        let np = self.n_paths();
        let mut w = vec![0.0; (self.n_steps + 1) * np];
        for p in 0..np {
            let mut acc = 0.0;
            for k in 0..self.n_steps {
                acc += self.idio_inc(p, k);
                w[(k + 1) * np + p] = acc;
            }
        }
        w
    }

    /// Common Brownian states broadcast per path, same layout as `idio_states`.
    pub fn common_states_per_path(&self) -> Vec<f64> {
        let np = self.n_paths();
        let mut w = vec![0.0; (self.n_steps + 1) * np];
        for b in 0..self.n_blocks {
            let mut acc = 0.0;
            for k in 0..self.n_steps {
                acc += self.common_inc_block(b, k);
                for c in 0..self.k_copies {
                    w[(k + 1) * np + b * self.k_copies + c] = acc;
                }
            }
        }
        w
    }

    /// Flattened per-step increments for one idiosyncratic copy index viewed
    /// across blocks: path index runs over blocks. Layout `[step * n_blocks + block]`.
    pub fn idio_inc_grid_for_copy(&self, copy: usize) -> Vec<f64> {
        let mut g = vec![0.0; self.n_steps * self.n_blocks];
        for b in 0..self.n_blocks {
            for k in 0..self.n_steps {
                g[k * self.n_blocks + b] = self.idio[(b * self.k_copies + copy) * self.n_steps + k];
            }
        }
        g
    }

    /// Common increments per block, layout `[step * n_blocks + block]`.
    pub fn common_inc_grid(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.n_steps * self.n_blocks];
        for b in 0..self.n_blocks {
            for k in 0..self.n_steps {
                g[k * self.n_blocks + b] = self.common_inc_block(b, k);
            }
        }
        g
    }

    /// Idiosyncratic increments over all paths, layout `[step * n_paths + path]`.
    pub fn idio_inc_grid(&self) -> Vec<f64> {
        let np = self.n_paths();
        let mut g = vec![0.0; self.n_steps * np];
        for p in 0..np {
            for k in 0..self.n_steps {
                g[k * np + p] = self.idio_inc(p, k);
            }
        }
        g
    }

    /// Common increments broadcast over all paths, layout `[step * n_paths + path]`.
    pub fn common_inc_grid_per_path(&self) -> Vec<f64> {
        let np = self.n_paths();
        let mut g = vec![0.0; self.n_steps * np];
        for p in 0..np {
            for k in 0..self.n_steps {
                g[k * np + p] = self.common_inc(p, k);
            }
        }
        g
    }
}

/// Per-(path, step) strategy pair, layout `[step * n_paths + path]`.
#[derive(Debug, Clone)]
pub struct StrategyGrid {
    pub n_paths: usize,
    pub n_steps: usize,
    pub pi: Vec<f64>,
    pub pi0: Vec<f64>,
}

impl StrategyGrid {
    pub fn zeros(n_paths: usize, n_steps: usize) -> Self {
        StrategyGrid { n_paths, n_steps, pi: vec![0.0; n_paths * n_steps], pi0: vec![0.0; n_paths * n_steps] }
    }

    /// Broadcast deterministic per-step values over all paths.
    pub fn from_deterministic(pi: &[f64], pi0: &[f64], n_paths: usize) -> Self {
        let n_steps = pi.len();
        assert_eq!(pi0.len(), n_steps);
        let mut g = StrategyGrid::zeros(n_paths, n_steps);
        for k in 0..n_steps {
            for p in 0..n_paths {
                g.pi[k * n_paths + p] = pi[k];
                g.pi0[k * n_paths + p] = pi0[k];
            }
        }
        g
    }

    pub fn at(&self, step: usize, path: usize) -> (f64, f64) {
        (self.pi[step * self.n_paths + path], self.pi0[step * self.n_paths + path])
    }
}

/// Return-rate values on the simulation grid, layout `[step * n_paths + path]`.
#[derive(Debug, Clone)]
pub struct ReturnGrid {
    pub n_paths: usize,
    pub n_steps: usize,
    pub b: Vec<f64>,
    pub b0: Vec<f64>,
}

impl ReturnGrid {
    /// All paths share one type.
    pub fn for_type(config: &GameConfig, type_label: usize, n_paths: usize) -> Self {
        let n_steps = config.n_steps;
        let mut b = vec![0.0; n_steps * n_paths];
        let mut b0 = vec![0.0; n_steps * n_paths];
        for k in 0..n_steps {
            let t = config.grid_time(k);
            let (vb, vb0) = (config.returns.b(t, type_label), config.returns.b0(t, type_label));
            for p in 0..n_paths {
                b[k * n_paths + p] = vb;
                b0[k * n_paths + p] = vb0;
            }
        }
        ReturnGrid { n_paths, n_steps, b, b0 }
    }
}

/// Euler-simulated wealth with the associated strategy grids.
#[derive(Debug, Clone)]
pub struct WealthPaths {
    pub n_paths: usize,
    pub n_steps: usize,
    /// `(n_steps + 1) x n_paths`, layout `[step * n_paths + path]`.
    pub values: Vec<f64>,
    pub pi: Vec<f64>,
    pub pi0: Vec<f64>,
}

impl WealthPaths {
    pub fn at(&self, step: usize, path: usize) -> f64 {
        self.values[step * self.n_paths + path]
    }

    pub fn terminal(&self) -> &[f64] {
        &self.values[self.n_steps * self.n_paths..]
    }
}

/// Euler recursion `X_{k+1} = X_k + pi_k b dt + pi0_k b0 dt + pi_k dW + pi0_k dW0`
/// started at `x0` on every path.
pub fn simulate_wealth(
    paths: &PathBundle,
    strategy: &StrategyGrid,
    returns: &ReturnGrid,
    x0: f64,
) -> Result<WealthPaths> {
    let np = paths.n_paths();
    let ns = paths.n_steps;
    if strategy.n_paths != np || strategy.n_steps != ns {
        return Err(Error::Shape(format!(
            "strategy grid is {}x{}, paths need {}x{}",
            strategy.n_steps, strategy.n_paths, ns, np
        )));
    }
    if returns.n_paths != np || returns.n_steps != ns {
        return Err(Error::Shape(format!(
            "return grid is {}x{}, paths need {}x{}",
            returns.n_steps, returns.n_paths, ns, np
        )));
    }
    let dt = paths.dt;
    let mut values = vec![0.0; (ns + 1) * np];
    for p in 0..np {
        values[p] = x0;
    }
    for k in 0..ns {
        let row = k * np;
        for p in 0..np {
            let (pi, pi0) = (strategy.pi[row + p], strategy.pi0[row + p]);
            let (b, b0) = (returns.b[row + p], returns.b0[row + p]);
            let x = values[row + p];
            values[row + np + p] =
                x + pi * b * dt + pi0 * b0 * dt + pi * paths.idio_inc(p, k) + pi0 * paths.common_inc(p, k);
        }
    }
    Ok(WealthPaths { n_paths: np, n_steps: ns, values, pi: strategy.pi.clone(), pi0: strategy.pi0.clone() })
}

/// `-exp(-alpha (x_T - theta * peer_avg))` with the exponent clamped at
/// +-`EXP_CLAMP`.
pub fn exp_utility(x_terminal: f64, peer_avg: f64, alpha: f64, theta: f64) -> f64 {
    let e = (-alpha * (x_terminal - theta * peer_avg)).clamp(-EXP_CLAMP, EXP_CLAMP);
    -e.exp()
}

/// Batch utility evaluation; returns per-path utilities and the number of
/// clamped exponents.
pub fn exp_utility_batch(
    x_terminal: &[f64],
    peer_avg: &[f64],
    alpha: f64,
    theta: f64,
) -> (Vec<f64>, usize) {
    let mut clamped = 0usize;
    let out = x_terminal
        .iter()
        .zip(peer_avg)
        .map(|(&x, &m)| {
            let e = -alpha * (x - theta * m);
            if e.abs() > EXP_CLAMP {
                clamped += 1;
            }
            -(e.clamp(-EXP_CLAMP, EXP_CLAMP)).exp()
        })
        .collect();
    (out, clamped)
}

pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn test_config(n_steps: usize, horizon: f64, seed: u64) -> GameConfig {
        GameConfig::nplayer_uniform(
            2,
            TypeSpec { alpha: 1.0, theta: 0.0, x0: 0.0 },
            ReturnModel::Constant { b: 0.0, b0: 0.0 },
            horizon,
            n_steps,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn seeded_paths_are_reproducible() {
        let cfg = test_config(1, 1.0, 1);
        let a = sample_paths(&cfg, 1, 1).unwrap();
        let b = sample_paths(&cfg, 1, 1).unwrap();
        assert_eq!(a.common, b.common);
        assert_eq!(a.idio, b.idio);
        assert_eq!(a.common.len(), 1);
        assert_eq!(a.idio.len(), 1);
    }

    #[test]
    fn pooled_increment_variance_matches_dt() {
        // Sample-variance oracle: Var(dW) = dt with stderr ~ dt*sqrt(2/(n-1)).
        let cfg = test_config(50, 1.0, 7);
        let paths = sample_paths(&cfg, 1000, 2).unwrap();
        let dt = paths.dt;
        let all: Vec<f64> = paths
            .idio
            .iter()
            .chain(paths.common.iter())
            .copied()
            .collect();
        let n = all.len() as f64;
        assert!(n >= 1e5);
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let stderr = dt * (2.0 / (n - 1.0)).sqrt();
        assert!((var - dt).abs() <= 3.0 * stderr, "var {var} vs dt {dt} (3se {})", 3.0 * stderr);
        assert!(mean.abs() <= 3.0 * (dt / n).sqrt());
    }

    #[test]
    fn block_draws_do_not_depend_on_block_count() {
        let cfg = test_config(10, 1.0, 3);
        let small = sample_paths(&cfg, 2, 3).unwrap();
        let large = sample_paths(&cfg, 5, 3).unwrap();
        for b in 0..2 {
            for k in 0..10 {
                assert_eq!(small.common_inc_block(b, k), large.common_inc_block(b, k));
                for c in 0..3 {
                    assert_eq!(
                        small.idio_inc(b * 3 + c, k),
                        large.idio_inc(b * 3 + c, k)
                    );
                }
            }
        }
    }

    #[test]
    fn rejects_degenerate_grids() {
        let mut cfg = test_config(10, 1.0, 3);
        cfg.n_steps = 0;
        assert!(sample_paths(&cfg, 1, 1).is_err());
        let mut cfg = test_config(10, 1.0, 3);
        cfg.horizon = -1.0;
        assert!(sample_paths(&cfg, 1, 1).is_err());
        let cfg = test_config(10, 1.0, 3);
        assert!(sample_paths(&cfg, 0, 1).is_err());
    }

    #[test]
    fn zero_strategy_keeps_wealth_constant() {
        let cfg = test_config(20, 1.0, 11);
        let paths = sample_paths(&cfg, 10, 2).unwrap();
        let strat = StrategyGrid::zeros(paths.n_paths(), paths.n_steps);
        let rets = ReturnGrid::for_type(&cfg, 0, paths.n_paths());
        let w = simulate_wealth(&paths, &strat, &rets, 1.5).unwrap();
        assert!(w.values.iter().all(|&v| v == 1.5));
    }

    #[test]
    fn unit_strategy_zero_drift_reproduces_brownian_sum() {
        let cfg = test_config(20, 1.0, 13);
        let paths = sample_paths(&cfg, 10, 2).unwrap();
        let np = paths.n_paths();
        let strat = StrategyGrid::from_deterministic(&[1.0; 20], &[0.0; 20], np);
        let rets = ReturnGrid::for_type(&cfg, 0, np);
        let w = simulate_wealth(&paths, &strat, &rets, 0.0).unwrap();
        for p in 0..np {
            let total: f64 = (0..20).map(|k| paths.idio_inc(p, k)).sum();
            assert_relative_eq!(w.at(20, p), total, max_relative = 1e-14);
        }
    }

    #[test]
    fn euler_recursion_matches_hand_rolled_scalar() {
        // Constant b = 0.2, alpha = 1, pi = b / alpha on one path.
        let cfg = GameConfig::nplayer_uniform(
            2,
            TypeSpec { alpha: 1.0, theta: 0.0, x0: 0.0 },
            ReturnModel::Constant { b: 0.2, b0: 0.0 },
            1.0,
            50,
            17,
        )
        .unwrap();
        let paths = sample_paths(&cfg, 1, 1).unwrap();
        let strat = StrategyGrid::from_deterministic(&vec![0.2; 50], &vec![0.0; 50], 1);
        let rets = ReturnGrid::for_type(&cfg, 0, 1);
        let w = simulate_wealth(&paths, &strat, &rets, 0.0).unwrap();
        let dt = paths.dt;
        let mut x = 0.0;
        for k in 0..50 {
            x += 0.2 * 0.2 * dt + 0.2 * paths.idio_inc(0, k);
            assert_relative_eq!(w.at(k + 1, 0), x, max_relative = 1e-14);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = test_config(20, 1.0, 13);
        let paths = sample_paths(&cfg, 4, 1).unwrap();
        let strat = StrategyGrid::zeros(3, 20);
        let rets = ReturnGrid::for_type(&cfg, 0, paths.n_paths());
        assert!(simulate_wealth(&paths, &strat, &rets, 0.0).is_err());
    }

    #[test]
    fn driftless_wealth_mean_stays_at_x0() {
        // Martingale property under b = b0 = 0 for a bounded strategy.
        let cfg = test_config(25, 1.0, 29);
        let paths = sample_paths(&cfg, 2000, 2).unwrap();
        let np = paths.n_paths();
        let pi: Vec<f64> = (0..25).map(|k| (k as f64 * 0.3).sin()).collect();
        let pi0: Vec<f64> = (0..25).map(|k| 0.5 + 0.1 * k as f64 / 25.0).collect();
        let strat = StrategyGrid::from_deterministic(&pi, &pi0, np);
        let rets = ReturnGrid::for_type(&cfg, 0, np);
        let w = simulate_wealth(&paths, &strat, &rets, 2.0).unwrap();
        for k in 1..=25 {
            let row = &w.values[k * np..(k + 1) * np];
            let (mean, se) = mean_and_stderr(row);
            assert!((mean - 2.0).abs() <= 3.0 * se, "step {k}: mean {mean} se {se}");
        }
    }

    #[test]
    fn utility_values() {
        assert_relative_eq!(exp_utility(0.0, 0.0, 1.0, 0.5), -1.0);
        assert_relative_eq!(exp_utility(1.0, 0.0, 1.0, 0.0), -(-1.0f64).exp());
        assert_relative_eq!(exp_utility(1.0, 2.0, 2.0, 0.5), -1.0);
    }

    #[test]
    fn utility_monotone_in_wealth_and_peer() {
        let u1 = exp_utility(1.0, 1.0, 2.0, 0.5);
        let u2 = exp_utility(1.1, 1.0, 2.0, 0.5);
        let u3 = exp_utility(1.0, 1.2, 2.0, 0.5);
        assert!(u2 > u1);
        assert!(u3 < u1);
    }

    #[test]
    fn utility_clamp_is_counted() {
        let (vals, clamped) = exp_utility_batch(&[-1000.0, 0.0], &[0.0, 0.0], 1.0, 0.0);
        assert_eq!(clamped, 1);
        assert!(vals[0].is_finite());
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        assert!(GameConfig::nplayer_uniform(
            1,
            TypeSpec { alpha: 1.0, theta: 0.0, x0: 0.0 },
            ReturnModel::Constant { b: 0.0, b0: 0.0 },
            1.0,
            10,
            0
        )
        .is_err());
        assert!(TypeSpec { alpha: 0.0, theta: 0.0, x0: 0.0 }.validate().is_err());
        assert!(TypeSpec { alpha: 1.0, theta: 1.0, x0: 0.0 }.validate().is_err());
        assert!(TypeSpec { alpha: 1.0, theta: 0.5, x0: f64::NAN }.validate().is_err());
        let bad = TypeDistribution {
            types: vec![TypeSpec { alpha: 1.0, theta: 0.1, x0: 0.0 }],
            probs: vec![0.7],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn type_distribution_moments_are_exact() {
        let dist = TypeDistribution {
            types: vec![
                TypeSpec { alpha: 1.0, theta: 0.2, x0: 0.0 },
                TypeSpec { alpha: 2.0, theta: 0.4, x0: 1.0 },
            ],
            probs: vec![0.5, 0.5],
        };
        assert_relative_eq!(dist.e_theta(), 0.3);
        assert_relative_eq!(dist.sup_theta(), 0.4);
        assert_relative_eq!(dist.mean(|t| t.x0 / t.alpha), 0.25);
    }
}
