//! PPO-clip trainer that records the policy weight trajectory.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::EnvId;
use crate::error::{Error, Result};
use crate::numcore::{adam_step, clip_grad_norm, Layout};
use crate::policy::{
    evaluate_return, init_policy, log_prob, mlp_layout, GaussianPolicy, Mlp, ObsNormalizer,
    PolicyArch, RewardScaler, ReturnEval, TapeParams, WeightVector, LOG_STD_MAX, LOG_STD_MIN,
};
use crate::trajectory::{EvalPoint, TrajectoryMeta, WeightTrajectory, ALGORITHM_PPO};
use crate::{AdamState, Matrix, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoHyper {
    pub lr: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub rollout_steps: usize,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub max_grad_norm: f64,
    pub adam_eps: f64,
    pub anneal_lr: bool,
    pub norm_adv: bool,
    pub clip_vloss: bool,
    pub norm_obs: bool,
    pub norm_reward: bool,
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            epochs: 10,
            minibatches: 32,
            rollout_steps: 2048,
            vf_coef: 0.5,
            ent_coef: 0.0,
            max_grad_norm: 0.5,
            adam_eps: 1e-5,
            anneal_lr: true,
            norm_adv: true,
            clip_vloss: true,
            norm_obs: true,
            norm_reward: true,
        }
    }
}

impl PpoHyper {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.gamma) || !unit.contains(&self.gae_lambda) {
            return Err(Error::Config("gamma and gae_lambda must lie in [0, 1]".into()));
        }
        if self.clip_eps <= 0.0 {
            return Err(Error::Config("clip_eps must be positive".into()));
        }
        if self.minibatches == 0 || !self.rollout_steps.is_multiple_of(self.minibatches) {
            return Err(Error::Config(format!(
                "rollout_steps {} must be divisible by minibatches {}",
                self.rollout_steps, self.minibatches
            )));
        }
        if self.epochs == 0 || self.lr <= 0.0 {
            return Err(Error::Config("epochs and lr must be positive".into()));
        }
        Ok(())
    }

    /// Short content hash of the hyperparameters.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("hyperparameters serialize");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// GAE advantages and value targets. `dones[t]` marks that the episode ended
/// after step `t`; `bootstrap` is the value of the state after the last step.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::LengthMismatch {
            op: "compute_gae",
            expected: n,
            actual: if values.len() != n { values.len() } else { dones.len() },
        });
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * live * next_value - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// One rollout of experience. Observations are stored as the policy saw them.
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub log_probs_old: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub bootstrap_value: f64,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        for (name, len) in [
            ("obs", self.obs.len()),
            ("actions", self.actions.len()),
            ("log_probs_old", self.log_probs_old.len()),
            ("values", self.values.len()),
            ("dones", self.dones.len()),
        ] {
            if len != n {
                return Err(Error::Config(format!("rollout field {name} has {len} entries, expected {n}")));
            }
        }
        if let Some(index) = self.log_probs_old.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "rollout log_probs_old",
                index,
            });
        }
        Ok(())
    }
}

/// Samples for one gradient step.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub obs: Matrix,
    pub actions: Matrix,
    pub log_probs_old: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub values_old: Vec<f64>,
}

/// Loss nodes of one minibatch.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub policy: crate::numcore::Var,
    pub value: crate::numcore::Var,
    pub entropy: crate::numcore::Var,
    pub total: crate::numcore::Var,
    pub log_prob: crate::numcore::Var,
}

/// `(x - mean) / (std + 1e-8)` with the unbiased sample std.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    adv.iter().map(|a| (a - mean) / (var.sqrt() + 1e-8)).collect()
}

fn column(values: &[f64]) -> Matrix {
    Matrix::from_fn(values.len(), 1, |r, _| values[r])
}

/// Builds the clipped-surrogate objective (to be minimized) on `tape`.
pub fn minibatch_loss(
    tape: &mut Tape,
    policy: &TapeParams,
    value: &TapeParams,
    arch: &PolicyArch,
    mb: &Minibatch,
    hyper: &PpoHyper,
) -> Result<LossTerms> {
    let n_hidden = arch.hidden.len();
    let act = arch.act_dim as f64;
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let adv = if hyper.norm_adv {
        normalize_advantages(&mb.advantages)
    } else {
        mb.advantages.clone()
    };

    let obs = tape.constant(mb.obs.clone());
    let mean = policy.mlp(tape, obs, n_hidden, "mean")?;
    let log_std = tape.clamp(policy.var("log_std"), LOG_STD_MIN, LOG_STD_MAX)?;

    let actions = tape.constant(mb.actions.clone());
    let diff = tape.sub(actions, mean)?;
    let neg_log_std = tape.neg(log_std)?;
    let inv_std = tape.exp(neg_log_std)?;
    let z = tape.mul_row(diff, inv_std)?;
    let z2 = tape.square(z)?;
    let quad = tape.row_sum(z2)?;
    let quad = tape.scale(quad, -0.5)?;
    let log_std_sum = tape.row_sum(log_std)?;
    let neg_log_std_sum = tape.neg(log_std_sum)?;
    let log_prob = tape.add_row(quad, neg_log_std_sum)?;
    let log_prob = tape.offset(log_prob, -act * half_ln_2pi)?;

    let old = tape.constant(column(&mb.log_probs_old));
    let log_ratio = tape.sub(log_prob, old)?;
    let ratio = tape.exp(log_ratio)?;
    let neg_adv = tape.constant(column(&adv).scale(-1.0));
    let pg1 = tape.mul(ratio, neg_adv)?;
    let clipped = tape.clamp(ratio, 1.0 - hyper.clip_eps, 1.0 + hyper.clip_eps)?;
    let pg2 = tape.mul(clipped, neg_adv)?;
    let pg = tape.maximum(pg1, pg2)?;
    let policy_loss = tape.mean(pg)?;

    let v = value.mlp(tape, obs, n_hidden, "value")?;
    let returns = tape.constant(column(&mb.returns));
    let err = tape.sub(v, returns)?;
    let unclipped = tape.square(err)?;
    let per_sample = if hyper.clip_vloss {
        let old_v = tape.constant(column(&mb.values_old));
        let dv = tape.sub(v, old_v)?;
        let dv = tape.clamp(dv, -hyper.clip_eps, hyper.clip_eps)?;
        let v_clipped = tape.add(old_v, dv)?;
        let err_c = tape.sub(v_clipped, returns)?;
        let clipped_sq = tape.square(err_c)?;
        tape.maximum(unclipped, clipped_sq)?
    } else {
        unclipped
    };
    let value_loss = tape.mean(per_sample)?;
    let value_loss = tape.scale(value_loss, 0.5)?;

    let ent_per_dim = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    let entropy = tape.offset(log_std_sum, act * ent_per_dim)?;

    let ent_term = tape.scale(entropy, -hyper.ent_coef)?;
    let v_term = tape.scale(value_loss, hyper.vf_coef)?;
    let total = tape.add(policy_loss, ent_term)?;
    let total = tape.add(total, v_term)?;
    Ok(LossTerms {
        policy: policy_loss,
        value: value_loss,
        entropy,
        total,
        log_prob,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
}

/// Policy and value parameters plus the shared Adam state.
#[derive(Debug, Clone)]
pub struct PpoLearner {
    pub arch: PolicyArch,
    pub policy: WeightVector,
    pub value: Vec<f64>,
    pub value_layout: Layout,
    pub adam: AdamState,
    pub hyper: PpoHyper,
}

impl PpoLearner {
    /// Fresh learner: policy from [`init_policy`], value net with orthogonal
    /// init (gain sqrt 2 hidden, 1.0 head).
    pub fn new(arch: PolicyArch, hyper: PpoHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let policy = init_policy(&arch, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let value_net = Mlp::orthogonal(arch.obs_dim, &arch.hidden, 1, std::f64::consts::SQRT_2, 1.0, &mut rng);
        let value_layout = Layout::contiguous(mlp_layout(arch.obs_dim, &arch.hidden, 1, "value"));
        let mut value = Vec::with_capacity(value_layout.total());
        value_net.write_flat(&mut value);
        let adam = AdamState::new(policy.len() + value.len(), hyper.lr).with_eps(hyper.adam_eps);
        Ok(Self {
            arch,
            policy,
            value,
            value_layout,
            adam,
            hyper,
        })
    }

    pub fn value_net(&self) -> Mlp {
        Mlp::from_flat(&self.value_layout, &self.value, self.arch.hidden.len(), "value")
            .expect("value layout is consistent")
    }

    /// One gradient step on a minibatch.
    pub fn step(&mut self, mb: &Minibatch) -> Result<UpdateStats> {
        let mut tape = Tape::new();
        let pp = TapeParams::new(&mut tape, &self.policy.layout, &self.policy.values);
        let vp = TapeParams::new(&mut tape, &self.value_layout, &self.value);
        let loss = minibatch_loss(&mut tape, &pp, &vp, &self.arch, mb, &self.hyper)?;
        let total = tape.value(loss.total)[(0, 0)];
        if !total.is_finite() {
            return Err(Error::Diverged(format!("non-finite PPO loss {total}")));
        }
        let grads = tape.backward(loss.total)?;
        let mut flat = pp.flat_grads(&grads);
        flat.extend(vp.flat_grads(&grads));
        let grad_norm = clip_grad_norm(&mut flat, self.hyper.max_grad_norm);

        let np = self.policy.len();
        let mut params = Vec::with_capacity(np + self.value.len());
        params.extend_from_slice(&self.policy.values);
        params.extend_from_slice(&self.value);
        adam_step(&mut params, &flat, &mut self.adam)?;
        if let Some(index) = params.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "PPO parameters",
                index,
            });
        }
        self.policy.values.copy_from_slice(&params[..np]);
        self.value.copy_from_slice(&params[np..]);
        Ok(UpdateStats {
            policy_loss: tape.value(loss.policy)[(0, 0)],
            value_loss: tape.value(loss.value)[(0, 0)],
            entropy: tape.value(loss.entropy)[(0, 0)],
            grad_norm,
        })
    }

    /// `epochs` passes over shuffled minibatches of `batch`. `on_epoch` sees the
    /// policy after each epoch.
    pub fn update(
        &mut self,
        batch: &RolloutBatch,
        lr: f64,
        rng: &mut ChaCha8Rng,
        mut on_epoch: impl FnMut(&WeightVector),
    ) -> Result<UpdateStats> {
        batch.validate()?;
        let (adv, returns) = compute_gae(
            &batch.rewards,
            &batch.values,
            &batch.dones,
            batch.bootstrap_value,
            self.hyper.gamma,
            self.hyper.gae_lambda,
        )?;
        self.adam.lr = lr;
        let n = batch.len();
        let mb_size = n / self.hyper.minibatches;
        let mut order: Vec<usize> = (0..n).collect();
        let mut last = UpdateStats::default();
        for _ in 0..self.hyper.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(mb_size) {
                let mb = Minibatch {
                    obs: Matrix::from_fn(chunk.len(), self.arch.obs_dim, |r, c| batch.obs[chunk[r]][c]),
                    actions: Matrix::from_fn(chunk.len(), self.arch.act_dim, |r, c| batch.actions[chunk[r]][c]),
                    log_probs_old: chunk.iter().map(|&i| batch.log_probs_old[i]).collect(),
                    advantages: chunk.iter().map(|&i| adv[i]).collect(),
                    returns: chunk.iter().map(|&i| returns[i]).collect(),
                    values_old: chunk.iter().map(|&i| batch.values[i]).collect(),
                };
                last = self.step(&mb)?;
            }
            on_epoch(&self.policy);
        }
        Ok(last)
    }
}

/// Settings for one PPO training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrialConfig {
    pub env: EnvId,
    pub hidden: Vec<usize>,
    pub total_steps: usize,
    /// Optimizer epochs between snapshots.
    pub snapshot_every: usize,
    pub hyper: PpoHyper,
    /// Evaluate the policy every this many iterations (0 disables).
    pub eval_every: usize,
    pub eval: ReturnEval,
    /// Evaluate and store the return of every snapshot after training.
    pub eval_snapshots: bool,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            env: EnvId::Cartpole,
            hidden: vec![8, 8],
            total_steps: 150_000,
            snapshot_every: 1,
            hyper: PpoHyper::default(),
            eval_every: 0,
            eval: ReturnEval::default(),
            eval_snapshots: false,
        }
    }
}

impl TrialConfig {
    pub fn arch(&self) -> Result<PolicyArch> {
        let env = self.env.make();
        PolicyArch::new(env.spec().obs_dim, env.spec().act_dim, self.hidden.clone())
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.total_steps < self.hyper.rollout_steps {
            return Err(Error::Config(format!(
                "total_steps {} is below one rollout of {} steps",
                self.total_steps, self.hyper.rollout_steps
            )));
        }
        if self.snapshot_every == 0 {
            return Err(Error::Config("snapshot_every must be at least 1".into()));
        }
        self.arch().map(|_| ())
    }
}

/// Trains one PPO agent from `seed` and records its policy weight trajectory.
///
/// Snapshot 0 is the initialization; later snapshots follow every
/// `snapshot_every` optimizer epochs. A numerical blow-up ends the run early
/// with `truncated_nonfinite` set.
pub fn run_trial(config: &TrialConfig, seed: u64) -> Result<WeightTrajectory> {
    config.validate()?;
    let arch = config.arch()?;
    let hyper = config.hyper.clone();
    let mut learner = PpoLearner::new(arch.clone(), hyper.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = config.env.make();
    let mut obs_norm = ObsNormalizer::new(arch.obs_dim);
    let mut reward_scaler = RewardScaler::new(hyper.gamma);

    let mut rows: Vec<Vec<f64>> = vec![learner.policy.values.clone()];
    let mut timestamps = vec![0u64];
    let mut eval_history = Vec::new();
    let mut epoch_counter = 0u64;
    let mut truncated_nonfinite = false;

    let prepare = |raw: &[f64], norm: &mut ObsNormalizer| -> Vec<f64> {
        if hyper.norm_obs {
            norm.update(raw);
            norm.normalize(raw)
        } else {
            raw.to_vec()
        }
    };
    let mut obs = prepare(&env.reset(rng.random()), &mut obs_norm);
    let iterations = config.total_steps / hyper.rollout_steps;

    'training: for iteration in 1..=iterations {
        let lr = if hyper.anneal_lr {
            (1.0 - (iteration - 1) as f64 / iterations as f64) * hyper.lr
        } else {
            hyper.lr
        };
        let policy = GaussianPolicy::new(&learner.policy, None)?;
        let value_net = learner.value_net();
        let mut batch = RolloutBatch::default();
        for _ in 0..hyper.rollout_steps {
            let (mean, std) = policy.action_dist(&obs)?;
            let action: Vec<f64> = mean
                .iter()
                .zip(&std)
                .map(|(&m, &s)| m + s * crate::numcore::standard_normal::<f64, _>(&mut rng))
                .collect();
            let lp = log_prob(&mean, &policy.params.log_std, &action);
            let v = value_net.forward(&obs)[0];
            let step = env.step(&action)?;
            let over = step.done || step.truncated;
            let reward = if hyper.norm_reward {
                reward_scaler.scale(step.reward, over)
            } else {
                step.reward
            };
            batch.obs.push(std::mem::take(&mut obs));
            batch.actions.push(action);
            batch.log_probs_old.push(lp);
            batch.values.push(v);
            batch.rewards.push(reward);
            batch.dones.push(over);
            let raw = if over { env.reset(rng.random()) } else { step.next_obs };
            obs = prepare(&raw, &mut obs_norm);
        }
        batch.bootstrap_value = value_net.forward(&obs)[0];

        let snapshot_every = config.snapshot_every as u64;
        let result = learner.update(&batch, lr, &mut rng, |w| {
            epoch_counter += 1;
            if epoch_counter.is_multiple_of(snapshot_every) {
                rows.push(w.values.clone());
                timestamps.push(epoch_counter);
            }
        });
        match result {
            Ok(_) => {}
            Err(Error::Diverged(_) | Error::NonFinite { .. }) => {
                truncated_nonfinite = true;
                break 'training;
            }
            Err(e) => return Err(e),
        }

        if config.eval_every > 0 && iteration % config.eval_every == 0 {
            let frozen = hyper.norm_obs.then(|| obs_norm.stats().clone());
            let actor = GaussianPolicy::new(&learner.policy, frozen)?;
            let env_id = config.env;
            let mean_return = evaluate_return(&actor, &move || env_id.make(), config.eval)?;
            eval_history.push(EvalPoint {
                env_steps: (iteration * hyper.rollout_steps) as u64,
                mean_return,
            });
        }
    }

    // Drop any trailing rows with non-finite entries.
    while rows.last().is_some_and(|r| r.iter().any(|x| !x.is_finite())) {
        rows.pop();
        timestamps.pop();
        truncated_nonfinite = true;
    }

    let frozen = hyper.norm_obs.then(|| obs_norm.stats().clone());
    let returns = if config.eval_snapshots {
        let env_id = config.env;
        let make = move || env_id.make();
        let mut out = Vec::with_capacity(rows.len());
        for row in &rows {
            let w = WeightVector {
                values: row.clone(),
                layout: learner.policy.layout.clone(),
            };
            let actor = GaussianPolicy::new(&w, frozen.clone())?;
            out.push(evaluate_return(&actor, &make, config.eval)?);
        }
        Some(out)
    } else {
        None
    };

    let snapshots = Matrix::from_rows(&rows)?;
    WeightTrajectory::new(
        TrajectoryMeta {
            env: config.env.to_string(),
            seed,
            algorithm: ALGORITHM_PPO.to_string(),
            snapshot_every: config.snapshot_every,
            hyper_hash: hyper.hash(),
            layout: learner.policy.layout.clone(),
            timestamps,
            arch: Some(arch),
            obs_norm: frozen,
            returns,
            eval_history,
            truncated_nonfinite,
        },
        snapshots,
    )
}
