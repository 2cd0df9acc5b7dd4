use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{clip_action, Env, EnvSpec, StepResult};
use crate::error::{Error, Result};

pub const HORIZON: usize = 100;
const VELOCITY_DECAY: f64 = 0.95;
const ACCEL_GAIN: f64 = 0.05;
const POSITION_GAIN: f64 = 0.05;
const ACTION_COST: f64 = 0.01;

/// Damped point mass in the plane, rewarded for staying near the origin.
/// Observation is `(px, py, vx, vy)`; action is a 2-D acceleration in `[-1, 1]^2`.
#[derive(Debug, Clone)]
pub struct PointMass2D {
    spec: EnvSpec,
    position: [f64; 2],
    velocity: [f64; 2],
    pinned_start: Option<[f64; 2]>,
    t: usize,
    finished: bool,
}

impl Default for PointMass2D {
    fn default() -> Self {
        Self::new()
    }
}

impl PointMass2D {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                id: "pointmass".into(),
                obs_dim: 4,
                act_dim: 2,
                act_low: vec![-1.0, -1.0],
                act_high: vec![1.0, 1.0],
                horizon: HORIZON,
            },
            position: [0.0; 2],
            velocity: [0.0; 2],
            pinned_start: None,
            t: 0,
            finished: true,
        }
    }

    /// Every reset starts at `position` with zero velocity.
    pub fn pinned(position: [f64; 2]) -> Self {
        Self {
            pinned_start: Some(position),
            ..Self::new()
        }
    }

    fn observation(&self) -> Vec<f64> {
        vec![
            self.position[0],
            self.position[1],
            self.velocity[0],
            self.velocity[1],
        ]
    }
}

impl Env for PointMass2D {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.position = match self.pinned_start {
            Some(p) => p,
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]
            }
        };
        self.velocity = [0.0; 2];
        self.t = 0;
        self.finished = false;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.finished {
            return Err(Error::EpisodeFinished);
        }
        let a = clip_action(action, &self.spec)?;
        for i in 0..2 {
            self.velocity[i] = VELOCITY_DECAY * self.velocity[i] + ACCEL_GAIN * a[i];
            self.position[i] += POSITION_GAIN * self.velocity[i];
        }
        let dist = self.position[0].hypot(self.position[1]);
        let effort = a[0] * a[0] + a[1] * a[1];
        self.t += 1;
        let truncated = self.t >= self.spec.horizon;
        self.finished = truncated;
        Ok(StepResult {
            next_obs: self.observation(),
            reward: -dist - ACTION_COST * effort,
            done: false,
            truncated,
        })
    }
}
