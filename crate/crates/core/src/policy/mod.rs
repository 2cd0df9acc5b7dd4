//! Gaussian MLP policies and their flat weight vectors.

mod mlp;
mod normalizer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use mlp::{mlp_layout, Dense, Mlp, TapeParams};
pub use normalizer::{ObsNormStats, ObsNormalizer};
pub(crate) use normalizer::RewardScaler;

use crate::envs::{rollout_episode, Actor, Env};
use crate::error::{Error, Result};
use crate::numcore::Layout;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HIDDEN_GAIN: f64 = std::f64::consts::SQRT_2;
const MEAN_HEAD_GAIN: f64 = 0.01;

/// Network shape of a tanh MLP policy with a state-independent Gaussian head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyArch {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: Vec<usize>,
}

impl PolicyArch {
    pub fn new(obs_dim: usize, act_dim: usize, hidden: Vec<usize>) -> Result<Self> {
        let arch = Self {
            obs_dim,
            act_dim,
            hidden,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "policy hidden widths must be non-empty and positive, got {:?}",
                self.hidden
            )));
        }
        if self.obs_dim == 0 || self.act_dim == 0 {
            return Err(Error::Config("policy obs_dim and act_dim must be positive".into()));
        }
        Ok(())
    }

    /// Tensor order: hidden layers, mean head, then `log_std`.
    pub fn layout(&self) -> Layout {
        let mut tensors = mlp_layout(self.obs_dim, &self.hidden, self.act_dim, "mean");
        tensors.push(("log_std".to_string(), vec![self.act_dim]));
        Layout::contiguous(tensors)
    }

    pub fn param_count(&self) -> usize {
        self.layout().total()
    }

    /// Recovers the architecture a layout was generated from.
    pub fn from_layout(layout: &Layout) -> Result<Self> {
        let mut hidden = Vec::new();
        let mut obs_dim = None;
        while let Some(slot) = layout.find(&format!("hidden.{}.weight", hidden.len())) {
            let [rows, cols] = slot.shape[..] else {
                return Err(Error::Layout(format!("{} is not a matrix", slot.name)));
            };
            obs_dim.get_or_insert(rows);
            hidden.push(cols);
        }
        let mean = layout
            .find("mean.weight")
            .ok_or_else(|| Error::Layout("missing tensor mean.weight".into()))?;
        let act_dim = *mean
            .shape
            .get(1)
            .ok_or_else(|| Error::Layout("mean.weight is not a matrix".into()))?;
        let arch = Self {
            obs_dim: obs_dim.ok_or_else(|| Error::Layout("missing tensor hidden.0.weight".into()))?,
            act_dim,
            hidden,
        };
        arch.validate()?;
        layout.ensure_matches(&arch.layout())?;
        Ok(arch)
    }
}

/// Flattened policy parameters with the layout that maps them back to tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub values: Vec<f64>,
    pub layout: Layout,
}

impl WeightVector {
    pub fn new(values: Vec<f64>, layout: Layout) -> Result<Self> {
        layout.validate()?;
        if layout.total() != values.len() {
            return Err(Error::LengthMismatch {
                op: "WeightVector",
                expected: layout.total(),
                actual: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "WeightVector",
                index,
            });
        }
        Ok(Self { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Network tensors of a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub arch: PolicyArch,
    pub body: Mlp,
    pub log_std: Vec<f64>,
}

/// Orthogonal weights (gain sqrt 2 on hidden layers, 0.01 on the mean head),
/// zero biases and zero `log_std`.
pub fn init_policy(arch: &PolicyArch, seed: u64) -> Result<WeightVector> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body = Mlp::orthogonal(arch.obs_dim, &arch.hidden, arch.act_dim, HIDDEN_GAIN, MEAN_HEAD_GAIN, &mut rng);
    pack(
        &PolicyParams {
            arch: arch.clone(),
            body,
            log_std: vec![0.0; arch.act_dim],
        },
        &arch.layout(),
    )
}

pub fn unpack(w: &WeightVector) -> Result<PolicyParams> {
    let arch = PolicyArch::from_layout(&w.layout)?;
    if w.values.len() != w.layout.total() {
        return Err(Error::LengthMismatch {
            op: "unpack",
            expected: w.layout.total(),
            actual: w.values.len(),
        });
    }
    let body = Mlp::from_flat(&w.layout, &w.values, arch.hidden.len(), "mean")?;
    let slot = w.layout.find("log_std").expect("checked by from_layout");
    let log_std = w.layout.slice(&w.values, slot).to_vec();
    Ok(PolicyParams { arch, body, log_std })
}

pub fn pack(params: &PolicyParams, layout: &Layout) -> Result<WeightVector> {
    layout.ensure_matches(&params.arch.layout())?;
    let mut values = Vec::with_capacity(layout.total());
    params.body.write_flat(&mut values);
    values.extend_from_slice(&params.log_std);
    if values.len() != layout.total() {
        return Err(Error::Layout(format!(
            "tensors hold {} values but the layout expects {}",
            values.len(),
            layout.total()
        )));
    }
    Ok(WeightVector {
        values,
        layout: layout.clone(),
    })
}

pub fn clamp_log_std(log_std: f64) -> f64 {
    log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)
}

/// Diagonal Gaussian log density.
pub fn log_prob(mean: &[f64], log_std: &[f64], x: &[f64]) -> f64 {
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    mean.iter()
        .zip(log_std)
        .zip(x)
        .map(|((&mu, &ls), &xi)| {
            let ls = clamp_log_std(ls);
            let z = (xi - mu) / ls.exp();
            -0.5 * z * z - ls - half_ln_2pi
        })
        .sum()
}

pub fn entropy(log_std: &[f64]) -> f64 {
    let per_dim = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    log_std.iter().map(|&ls| per_dim + clamp_log_std(ls)).sum()
}

/// A policy ready to act: unpacked tensors plus optional observation normalization.
#[derive(Debug, Clone)]
pub struct GaussianPolicy {
    pub params: PolicyParams,
    pub obs_norm: Option<ObsNormStats>,
}

impl GaussianPolicy {
    pub fn new(w: &WeightVector, obs_norm: Option<ObsNormStats>) -> Result<Self> {
        let params = unpack(w)?;
        if let Some(stats) = &obs_norm {
            if stats.mean.len() != params.arch.obs_dim {
                return Err(Error::LengthMismatch {
                    op: "observation normalizer",
                    expected: params.arch.obs_dim,
                    actual: stats.mean.len(),
                });
            }
        }
        Ok(Self { params, obs_norm })
    }

    /// Mean and standard deviation of the action distribution at `obs`.
    pub fn action_dist(&self, obs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if obs.len() != self.params.arch.obs_dim {
            return Err(Error::LengthMismatch {
                op: "action_dist",
                expected: self.params.arch.obs_dim,
                actual: obs.len(),
            });
        }
        if let Some(index) = obs.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "observation",
                index,
            });
        }
        let mean = match &self.obs_norm {
            Some(stats) => self.params.body.forward(&stats.normalize(obs)),
            None => self.params.body.forward(obs),
        };
        let std = self
            .params
            .log_std
            .iter()
            .map(|&ls| clamp_log_std(ls).exp())
            .collect();
        Ok((mean, std))
    }

    pub fn sample(&self, obs: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let (mean, std) = self.action_dist(obs)?;
        Ok(mean
            .iter()
            .zip(&std)
            .map(|(&m, &s)| {
                let z: f64 = StandardNormal.sample(rng);
                m + s * z
            })
            .collect())
    }

    pub fn log_prob(&self, obs: &[f64], action: &[f64]) -> Result<f64> {
        let (mean, _) = self.action_dist(obs)?;
        Ok(log_prob(&mean, &self.params.log_std, action))
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.params.log_std)
    }
}

impl Actor for GaussianPolicy {
    fn act(&self, obs: &[f64], deterministic: bool, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        if deterministic {
            Ok(self.action_dist(obs)?.0)
        } else {
            self.sample(obs, rng)
        }
    }
}

/// Episode-return evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReturnEval {
    pub episodes: usize,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for ReturnEval {
    fn default() -> Self {
        Self {
            episodes: 20,
            seed: 0,
            deterministic: true,
        }
    }
}

/// Mean undiscounted return over episodes seeded `seed, seed + 1, ...`.
///
/// Episodes run in parallel, each on its own environment; the sum is taken
/// in episode order.
pub fn evaluate_return(
    actor: &(dyn Actor + Sync),
    make_env: &(dyn Fn() -> Box<dyn Env> + Sync),
    eval: ReturnEval,
) -> Result<f64> {
    if eval.episodes == 0 {
        return Err(Error::Config("evaluate_return needs at least one episode".into()));
    }
    let returns: Vec<f64> = (0..eval.episodes as u64)
        .into_par_iter()
        .map(|i| {
            let mut env = make_env();
            rollout_episode(env.as_mut(), actor, eval.seed.wrapping_add(i), eval.deterministic)
                .map(|(ret, _)| ret)
        })
        .collect::<Result<_>>()?;
    Ok(returns.iter().sum::<f64>() / eval.episodes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvSpec, StepResult};
    use rand::Rng;

    fn arch() -> PolicyArch {
        PolicyArch::new(4, 1, vec![8, 8]).unwrap()
    }

    #[test]
    fn parameter_count() {
        let w = init_policy(&arch(), 0).unwrap();
        assert_eq!(w.len(), 4 * 8 + 8 + 8 * 8 + 8 + 8 + 1 + 1);
        assert_eq!(w.len(), 122);
    }

    #[test]
    fn biases_and_log_std_start_at_zero() {
        let w = init_policy(&arch(), 3).unwrap();
        for slot in &w.layout.slots {
            if slot.name.ends_with(".bias") || slot.name == "log_std" {
                assert!(w.layout.slice(&w.values, slot).iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(init_policy(&arch(), 5).unwrap(), init_policy(&arch(), 5).unwrap());
        assert_ne!(init_policy(&arch(), 5).unwrap(), init_policy(&arch(), 6).unwrap());
    }

    #[test]
    fn hidden_weights_are_scaled_orthogonal() {
        let w = init_policy(&arch(), 1).unwrap();
        let params = unpack(&w).unwrap();
        // 8x8 square layer: W^T W = 2 I.
        let layer = &params.body.layers[1].weight;
        assert!(layer.scale(1.0 / HIDDEN_GAIN).orthonormality_error() < 1e-12);
    }

    #[test]
    fn pack_unpack_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layout = arch().layout();
        for _ in 0..1000 {
            let values: Vec<f64> = (0..layout.total()).map(|_| rng.random_range(-3.0..3.0)).collect();
            let w = WeightVector::new(values, layout.clone()).unwrap();
            let back = pack(&unpack(&w).unwrap(), &layout).unwrap();
            assert_eq!(back.values, w.values);
        }
    }

    #[test]
    fn zero_vector_unpacks_to_zero_tensors() {
        let layout = arch().layout();
        let w = WeightVector::new(vec![0.0; layout.total()], layout).unwrap();
        let p = unpack(&w).unwrap();
        assert!(p.body.layers.iter().all(|l| l.weight.max_abs() == 0.0 && l.bias.iter().all(|&b| b == 0.0)));
        assert!(p.log_std.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn permuted_layout_is_rejected() {
        let w = init_policy(&arch(), 0).unwrap();
        let mut permuted = w.clone();
        permuted.layout.slots.swap(0, 1);
        assert!(unpack(&permuted).is_err());
        let params = unpack(&w).unwrap();
        assert!(pack(&params, &permuted.layout).is_err());
    }

    #[test]
    fn degenerate_std_samples_the_mean() {
        let mut w = init_policy(&arch(), 2).unwrap();
        let slot = w.layout.find("log_std").unwrap().clone();
        w.values[slot.offset] = -20.0;
        let policy = GaussianPolicy::new(&w, None).unwrap();
        let obs = [0.1, -0.2, 0.3, 0.05];
        let (mean, _) = policy.action_dist(&obs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let a = policy.sample(&obs, &mut rng).unwrap();
            assert!((a[0] - mean[0]).abs() < 1e-8);
        }
    }

    #[test]
    fn gaussian_formulas() {
        let lp = log_prob(&[0.3], &[0.0], &[0.3]);
        assert!((lp - (-0.918_938_533_204_672_7)).abs() < 1e-12);
        assert!((entropy(&[0.0]) - 1.418_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn log_prob_factorizes_over_dimensions() {
        let mean = [0.2, -1.0, 0.5];
        let log_std = [0.1, -0.3, 0.7];
        let x = [0.0, -0.4, 1.9];
        let joint = log_prob(&mean, &log_std, &x).exp();
        let product: f64 = (0..3)
            .map(|i| {
                let s = log_std[i].exp();
                let z = (x[i] - mean[i]) / s;
                (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
            })
            .product();
        assert!((joint - product).abs() < 1e-12);
    }

    #[test]
    fn non_finite_observation_rejected() {
        let policy = GaussianPolicy::new(&init_policy(&arch(), 0).unwrap(), None).unwrap();
        assert!(matches!(
            policy.action_dist(&[0.0, f64::NAN, 0.0, 0.0]),
            Err(Error::NonFinite { index: 1, .. })
        ));
    }

    /// Fixed-length episodes paying `reward` per step.
    struct Flat {
        spec: EnvSpec,
        reward: f64,
        t: usize,
    }

    impl Env for Flat {
        fn spec(&self) -> &EnvSpec {
            &self.spec
        }
        fn reset(&mut self, _: u64) -> Vec<f64> {
            self.t = 0;
            vec![0.0; 4]
        }
        fn step(&mut self, _: &[f64]) -> Result<StepResult> {
            self.t += 1;
            Ok(StepResult {
                next_obs: vec![0.0; 4],
                reward: self.reward,
                done: false,
                truncated: self.t >= self.spec.horizon,
            })
        }
    }

    fn flat(reward: f64) -> impl Fn() -> Box<dyn Env> + Sync {
        move || {
            Box::new(Flat {
                spec: EnvSpec {
                    id: "flat".into(),
                    obs_dim: 4,
                    act_dim: 1,
                    act_low: vec![-1.0],
                    act_high: vec![1.0],
                    horizon: 25,
                },
                reward,
                t: 0,
            })
        }
    }

    #[test]
    fn constant_reward_evaluates_to_horizon_and_shifts_exactly() {
        let policy = GaussianPolicy::new(&init_policy(&arch(), 0).unwrap(), None).unwrap();
        let eval = ReturnEval::default();
        assert_eq!(evaluate_return(&policy, &flat(1.0), eval).unwrap(), 25.0);
        let base = evaluate_return(&policy, &flat(0.25), eval).unwrap();
        let shifted = evaluate_return(&policy, &flat(0.25 + 2.0), eval).unwrap();
        assert_eq!(shifted, base + 2.0 * 25.0);
    }

    #[test]
    fn evaluation_is_repeatable() {
        let policy = GaussianPolicy::new(&init_policy(&arch(), 4).unwrap(), None).unwrap();
        let make = || Box::new(crate::envs::CartPoleContinuous::new()) as Box<dyn Env>;
        for deterministic in [true, false] {
            let eval = ReturnEval {
                episodes: 5,
                seed: 11,
                deterministic,
            };
            assert_eq!(
                evaluate_return(&policy, &make, eval).unwrap(),
                evaluate_return(&policy, &make, eval).unwrap()
            );
        }
    }
}
