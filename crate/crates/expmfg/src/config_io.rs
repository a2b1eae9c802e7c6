//! TOML game configs.
//!
//! ```toml
//! horizon = 1.0
//! n_steps = 50
//! mode = "nplayer"          # or "mfg"
//! seed = 42
//!
//! [[players]]               # nplayer mode; type_label optional
//! alpha = 1.0
//! theta = 0.5
//! x0 = 1.0
//!
//! [types]                   # mfg mode, or the explicit law in nplayer mode
//! alpha = [1.0, 1.0]
//! theta = [0.2, 0.4]
//! x0 = [0.0, 0.0]
//! probs = [0.5, 0.5]
//!
//! [return_model]
//! kind = "constant"         # constant | sinusoidal | type_dependent
//! b = 0.2
//! b0 = 0.2
//! ```
//!
//! When players are listed without an explicit `[types]` table, the type law
//! defaults to the empirical distribution of the distinct player specs.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::market::{GameConfig, GameMode, PlayerSpec, ReturnModel, TypeDistribution, TypeSpec};

#[derive(Debug, Deserialize)]
struct RawPlayer {
    alpha: f64,
    theta: f64,
    x0: f64,
    type_label: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct RawTypes {
    alpha: Vec<f64>,
    theta: Vec<f64>,
    x0: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct RawConfig {
    horizon: f64,
    n_steps: usize,
    mode: String,
    seed: u64,
    players: Option<Vec<RawPlayer>>,
    types: Option<RawTypes>,
    return_model: ReturnModel,
    convergence: Option<RawConvergence>,
}

#[derive(Debug, Clone, Deserialize)]
struct RawConvergence {
    n_schedule: Vec<usize>,
    replications: Option<usize>,
}

/// Extra, command-specific settings carried by a config file.
#[derive(Debug, Clone, Default)]
pub struct ConfigExtras {
    pub n_schedule: Option<Vec<usize>>,
    pub replications: Option<usize>,
}

fn build_types(raw: &RawTypes) -> Result<TypeDistribution> {
    let n = raw.alpha.len();
    if raw.theta.len() != n || raw.x0.len() != n || raw.probs.len() != n {
        return Err(Error::Parse("types arrays must share one length".into()));
    }
    let types = (0..n)
        .map(|i| TypeSpec { alpha: raw.alpha[i], theta: raw.theta[i], x0: raw.x0[i] })
        .collect();
    Ok(TypeDistribution { types, probs: raw.probs.clone() })
}

pub fn parse_config_str(text: &str) -> Result<(GameConfig, ConfigExtras)> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let extras = ConfigExtras {
        n_schedule: raw.convergence.as_ref().map(|c| c.n_schedule.clone()),
        replications: raw.convergence.as_ref().and_then(|c| c.replications),
    };

    let config = match raw.mode.as_str() {
        "nplayer" => {
            let players_raw = raw
                .players
                .as_ref()
                .ok_or_else(|| Error::Parse("nplayer mode needs a players list".into()))?;
            let (types, players) = if let Some(t) = &raw.types {
                let dist = build_types(t)?;
                let players = players_raw
                    .iter()
                    .map(|p| {
                        let label = p.type_label.ok_or_else(|| {
                            Error::Parse("players must carry type_label when [types] is given".into())
                        })?;
                        Ok(PlayerSpec { alpha: p.alpha, theta: p.theta, x0: p.x0, type_label: label })
                    })
                    .collect::<Result<Vec<_>>>()?;
                (dist, players)
            } else {
                // Empirical law over the distinct player specs.
                let mut types: Vec<TypeSpec> = Vec::new();
                let mut counts: Vec<usize> = Vec::new();
                let mut players = Vec::new();
                for p in players_raw {
                    let spec = TypeSpec { alpha: p.alpha, theta: p.theta, x0: p.x0 };
                    let label = match types.iter().position(|t| *t == spec) {
                        Some(i) => {
                            counts[i] += 1;
                            i
                        }
                        None => {
                            types.push(spec);
                            counts.push(1);
                            types.len() - 1
                        }
                    };
                    players.push(PlayerSpec { alpha: p.alpha, theta: p.theta, x0: p.x0, type_label: label });
                }
                let total: usize = counts.iter().sum();
                let probs = counts.iter().map(|c| *c as f64 / total as f64).collect();
                (TypeDistribution { types, probs }, players)
            };
            GameConfig {
                horizon: raw.horizon,
                n_steps: raw.n_steps,
                mode: GameMode::NPlayer(players),
                types,
                returns: raw.return_model,
                seed: raw.seed,
            }
        }
        "mfg" => {
            let t = raw
                .types
                .as_ref()
                .ok_or_else(|| Error::Parse("mfg mode needs a [types] table".into()))?;
            GameConfig {
                horizon: raw.horizon,
                n_steps: raw.n_steps,
                mode: GameMode::MeanField,
                types: build_types(t)?,
                returns: raw.return_model,
                seed: raw.seed,
            }
        }
        other => return Err(Error::Parse(format!("unknown mode {other:?}"))),
    };
    config.validate()?;
    Ok((config, extras))
}

pub fn load_config(path: &Path) -> Result<(GameConfig, ConfigExtras)> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

/// Hash of the validated config; stable under key reordering of the source
/// text because it is taken over the canonical serialized form.
pub fn config_hash(config: &GameConfig) -> String {
    use sha2::{Digest, Sha256};
    let canon = serde_json::to_string(config).expect("config serialises");
    let mut hasher = Sha256::new();
    hasher.update(canon.as_bytes());
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}
