//! Continuous-control environments and the episode runner.

mod cartpole;
mod pointmass;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cartpole::CartPoleContinuous;
pub use pointmass::PointMass2D;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub id: String,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub act_low: Vec<f64>,
    pub act_high: Vec<f64>,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_obs: Vec<f64>,
    pub reward: f64,
    /// Terminal state reached.
    pub done: bool,
    /// Horizon reached.
    pub truncated: bool,
}

pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;

    /// Starts a new episode with initial state drawn from `seed`.
    fn reset(&mut self, seed: u64) -> Vec<f64>;

    /// Advances one step. Actions are clipped to the action box.
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;
}

/// Environments selectable by id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    Cartpole,
    Pointmass,
}

impl EnvId {
    pub fn make(self) -> Box<dyn Env> {
        match self {
            EnvId::Cartpole => Box::new(CartPoleContinuous::new()),
            EnvId::Pointmass => Box::new(PointMass2D::new()),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::Cartpole => "cartpole",
            EnvId::Pointmass => "pointmass",
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cartpole" => Ok(EnvId::Cartpole),
            "pointmass" => Ok(EnvId::Pointmass),
            other => Err(Error::Config(format!(
                "unknown environment {other:?} (expected \"cartpole\" or \"pointmass\")"
            ))),
        }
    }
}

/// Something that maps observations to actions.
pub trait Actor {
    /// `deterministic` selects the distribution mean instead of a sample.
    fn act(&self, obs: &[f64], deterministic: bool, rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;
}

/// Wraps a plain function as an [`Actor`] that ignores the sampling flag.
pub struct FnActor<F>(pub F);

impl<F> Actor for FnActor<F>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    fn act(&self, obs: &[f64], _deterministic: bool, _rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok((self.0)(obs))
    }
}

/// Action-sampling stream for episode `seed`, independent of the env's reset stream.
pub fn action_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Runs one episode to termination or truncation; returns the undiscounted
/// return and the episode length.
pub fn rollout_episode(
    env: &mut dyn Env,
    actor: &dyn Actor,
    seed: u64,
    deterministic: bool,
) -> Result<(f64, usize)> {
    let mut rng = action_rng(seed);
    let mut obs = env.reset(seed);
    let mut total = 0.0;
    let mut length = 0;
    loop {
        let action = actor.act(&obs, deterministic, &mut rng)?;
        let step = env.step(&action)?;
        total += step.reward;
        length += 1;
        if step.done || step.truncated {
            return Ok((total, length));
        }
        obs = step.next_obs;
    }
}

pub(crate) fn clip_action(action: &[f64], spec: &EnvSpec) -> Result<Vec<f64>> {
    if action.len() != spec.act_dim {
        return Err(Error::LengthMismatch {
            op: "env step action",
            expected: spec.act_dim,
            actual: action.len(),
        });
    }
    if let Some(index) = action.iter().position(|a| !a.is_finite()) {
        return Err(Error::NonFinite {
            context: "env step action",
            index,
        });
    }
    Ok(action
        .iter()
        .zip(spec.act_low.iter().zip(&spec.act_high))
        .map(|(&a, (&lo, &hi))| a.clamp(lo, hi))
        .collect())
}
