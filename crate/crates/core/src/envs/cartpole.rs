use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{clip_action, Env, EnvSpec, StepResult};
use crate::error::{Error, Result};

pub const GRAVITY: f64 = 9.8;
pub const CART_MASS: f64 = 1.0;
pub const POLE_MASS: f64 = 0.1;
pub const TOTAL_MASS: f64 = CART_MASS + POLE_MASS;
/// Half the pole length.
pub const POLE_HALF_LENGTH: f64 = 0.5;
pub const FORCE_SCALE: f64 = 3.0;
pub const DT: f64 = 0.02;
pub const ANGLE_LIMIT: f64 = 0.2;
pub const POSITION_LIMIT: f64 = 2.4;
pub const HORIZON: usize = 500;

/// Cart-pole with a continuous force in `[-1, 1] * FORCE_SCALE`, +1 reward per
/// step alive. State is `(x, x_dot, theta, theta_dot)` and is observed directly.
#[derive(Debug, Clone)]
pub struct CartPoleContinuous {
    spec: EnvSpec,
    state: [f64; 4],
    t: usize,
    finished: bool,
}

impl Default for CartPoleContinuous {
    fn default() -> Self {
        Self::new()
    }
}

impl CartPoleContinuous {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                id: "cartpole".into(),
                obs_dim: 4,
                act_dim: 1,
                act_low: vec![-1.0],
                act_high: vec![1.0],
                horizon: HORIZON,
            },
            state: [0.0; 4],
            t: 0,
            finished: true,
        }
    }

    pub fn state(&self) -> [f64; 4] {
        self.state
    }

    /// Starts an episode from an explicit state.
    pub fn reset_to(&mut self, state: [f64; 4]) -> Vec<f64> {
        self.state = state;
        self.t = 0;
        self.finished = false;
        state.to_vec()
    }

    /// One explicit Euler step of the frictionless cart-pole under `force`.
    pub fn integrate(state: [f64; 4], force: f64) -> [f64; 4] {
        let [x, x_dot, theta, theta_dot] = state;
        let (sin, cos) = theta.sin_cos();
        let pole_ml = POLE_MASS * POLE_HALF_LENGTH;
        let temp = (force + pole_ml * theta_dot * theta_dot * sin) / TOTAL_MASS;
        let theta_acc = (GRAVITY * sin - cos * temp)
            / (POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / TOTAL_MASS));
        let x_acc = (force + pole_ml * (theta_dot * theta_dot * sin - theta_acc * cos)) / TOTAL_MASS;
        [
            x + DT * x_dot,
            x_dot + DT * x_acc,
            theta + DT * theta_dot,
            theta_dot + DT * theta_acc,
        ]
    }

    /// Kinetic plus potential energy of cart and uniform pole.
    pub fn mechanical_energy(state: [f64; 4]) -> f64 {
        let [_, x_dot, theta, theta_dot] = state;
        let l = POLE_HALF_LENGTH;
        let kinetic = 0.5 * TOTAL_MASS * x_dot * x_dot
            + POLE_MASS * l * x_dot * theta_dot * theta.cos()
            + 0.5 * (4.0 / 3.0) * POLE_MASS * l * l * theta_dot * theta_dot;
        kinetic + POLE_MASS * GRAVITY * l * theta.cos()
    }

    pub fn is_terminal(state: [f64; 4]) -> bool {
        state[2].abs() > ANGLE_LIMIT || state[0].abs() > POSITION_LIMIT
    }
}

impl Env for CartPoleContinuous {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = [0.0; 4];
        for s in state.iter_mut() {
            *s = rng.random_range(-0.01..=0.01);
        }
        self.reset_to(state)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.finished {
            return Err(Error::EpisodeFinished);
        }
        let action = clip_action(action, &self.spec)?;
        self.state = Self::integrate(self.state, FORCE_SCALE * action[0]);
        self.t += 1;
        let done = Self::is_terminal(self.state);
        let truncated = self.t >= self.spec.horizon;
        self.finished = done || truncated;
        Ok(StepResult {
            next_obs: self.state.to_vec(),
            reward: 1.0,
            done,
            truncated,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_start() {
        let mut a = CartPoleContinuous::new();
        let mut b = CartPoleContinuous::new();
        assert_eq!(a.reset(42), b.reset(42));
        assert_ne!(a.reset(42), a.reset(43));
    }

    #[test]
    fn reset_components_are_small() {
        let mut env = CartPoleContinuous::new();
        for seed in 0..200 {
            assert!(env.reset(seed).iter().all(|x| x.abs() <= 0.01));
        }
    }

    #[test]
    fn reset_mean_is_centered() {
        // Uniform(-0.01, 0.01) has std 0.01/sqrt(3); the mean of n draws has std that / sqrt(n).
        let n = 10_000;
        let mut env = CartPoleContinuous::new();
        let mut sums = [0.0; 4];
        for seed in 0..n {
            for (s, x) in sums.iter_mut().zip(env.reset(seed as u64)) {
                *s += x;
            }
        }
        let bound = 3.0 * (0.01 / 3f64.sqrt()) / (n as f64).sqrt();
        for s in sums {
            assert!((s / n as f64).abs() < bound);
        }
    }

    #[test]
    fn upright_equilibrium_is_fixed() {
        let mut env = CartPoleContinuous::new();
        env.reset_to([0.0; 4]);
        let step = env.step(&[0.0]).unwrap();
        assert_eq!(step.next_obs, vec![0.0; 4]);
        assert_eq!(step.reward, 1.0);
        assert!(!step.done && !step.truncated);
    }

    #[test]
    fn tilted_pole_matches_reference_values() {
        // Frozen from an independent evaluation of the equations of motion.
        let next = CartPoleContinuous::integrate([0.0, 0.0, 0.01, 0.0], 0.0);
        let expected = [0.0, -0.0001434040240991882, 0.01, 0.0031550462811816018];
        for (a, b) in next.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{next:?}");
        }
    }

    #[test]
    fn large_angle_terminates() {
        let mut env = CartPoleContinuous::new();
        env.reset_to([0.0, 0.0, 0.3, 0.0]);
        assert!(env.step(&[0.0]).unwrap().done);
    }

    #[test]
    fn stepping_a_finished_episode_errors() {
        let mut env = CartPoleContinuous::new();
        env.reset_to([0.0, 0.0, 0.3, 0.0]);
        env.step(&[0.0]).unwrap();
        assert!(matches!(env.step(&[0.0]), Err(Error::EpisodeFinished)));
    }

    #[test]
    fn truncates_at_horizon() {
        let mut env = CartPoleContinuous::new();
        env.reset_to([0.0; 4]);
        for t in 1..=HORIZON {
            let s = env.step(&[0.0]).unwrap();
            assert_eq!(s.truncated, t == HORIZON);
        }
    }

    #[test]
    fn energy_drift_is_small_without_force() {
        for start in [[0.0, 0.0, 0.002, 0.0], [0.0, 0.001, -0.001, 0.002]] {
            let mut state = start;
            let mut energy = CartPoleContinuous::mechanical_energy(state);
            for _ in 0..50 {
                state = CartPoleContinuous::integrate(state, 0.0);
                assert!(!CartPoleContinuous::is_terminal(state));
                let next = CartPoleContinuous::mechanical_energy(state);
                assert!((next - energy).abs() / energy.abs() < 0.01);
                energy = next;
            }
        }
    }

    #[test]
    fn identical_actions_give_identical_steps() {
        let run = || {
            let mut env = CartPoleContinuous::new();
            env.reset(9);
            let mut steps = Vec::new();
            for i in 0..40 {
                let s = env.step(&[((i as f64) * 0.37).sin()]).unwrap();
                let over = s.done || s.truncated;
                steps.push(s);
                if over {
                    break;
                }
            }
            steps
        };
        assert_eq!(run(), run());
    }
}
