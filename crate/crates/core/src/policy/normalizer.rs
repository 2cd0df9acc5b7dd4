use serde::{Deserialize, Serialize};

const EPS: f64 = 1e-8;
const CLIP: f64 = 10.0;

/// Frozen running statistics used to standardize observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
}

impl ObsNormStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 1e-4,
        }
    }

    /// `(obs - mean) / sqrt(var + 1e-8)`, clipped to `[-10, 10]`.
    pub fn normalize(&self, obs: &[f64]) -> Vec<f64> {
        obs.iter()
            .zip(self.mean.iter().zip(&self.var))
            .map(|(&x, (&m, &v))| ((x - m) / (v + EPS).sqrt()).clamp(-CLIP, CLIP))
            .collect()
    }
}

/// Running mean and variance (parallel-update form, one sample per update).
#[derive(Debug, Clone, PartialEq)]
pub struct ObsNormalizer {
    stats: ObsNormStats,
}

impl ObsNormalizer {
    pub fn new(dim: usize) -> Self {
        Self {
            stats: ObsNormStats::identity(dim),
        }
    }

    pub fn update(&mut self, obs: &[f64]) {
        let s = &mut self.stats;
        let total = s.count + 1.0;
        for ((m, v), &x) in s.mean.iter_mut().zip(s.var.iter_mut()).zip(obs) {
            let delta = x - *m;
            let new_mean = *m + delta / total;
            let m2 = *v * s.count + delta * delta * s.count / total;
            *m = new_mean;
            *v = m2 / total;
        }
        s.count = total;
    }

    pub fn normalize(&self, obs: &[f64]) -> Vec<f64> {
        self.stats.normalize(obs)
    }

    pub fn stats(&self) -> &ObsNormStats {
        &self.stats
    }
}

/// Scales rewards by the running std of the discounted return.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RewardScaler {
    gamma: f64,
    ret: f64,
    mean: f64,
    var: f64,
    count: f64,
}

impl RewardScaler {
    pub(crate) fn new(gamma: f64) -> Self {
        Self {
            gamma,
            ret: 0.0,
            mean: 0.0,
            var: 1.0,
            count: 1e-4,
        }
    }

    pub(crate) fn scale(&mut self, reward: f64, episode_over: bool) -> f64 {
        self.ret = self.ret * self.gamma + reward;
        let total = self.count + 1.0;
        let delta = self.ret - self.mean;
        self.mean += delta / total;
        self.var = (self.var * self.count + delta * delta * self.count / total) / total;
        self.count = total;
        let scaled = (reward / (self.var + EPS).sqrt()).clamp(-CLIP, CLIP);
        if episode_over {
            self.ret = 0.0;
        }
        scaled
    }
}
