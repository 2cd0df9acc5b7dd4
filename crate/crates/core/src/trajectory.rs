use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Layout;
use crate::policy::{ObsNormStats, PolicyArch, WeightVector};
use crate::Matrix;

pub const ALGORITHM_PPO: &str = "ppo";
pub const ALGORITHM_QUADRATIC: &str = "quadratic-gd";

/// Mean deterministic return measured during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub env_steps: u64,
    pub mean_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    /// Environment id, or `"quadratic"` for synthetic trajectories.
    pub env: String,
    pub seed: u64,
    pub algorithm: String,
    /// Optimizer epochs between consecutive snapshots.
    pub snapshot_every: usize,
    pub hyper_hash: String,
    pub layout: Layout,
    /// Optimizer-epoch index of each snapshot; strictly increasing, starting at 0.
    pub timestamps: Vec<u64>,
    #[serde(default)]
    pub arch: Option<PolicyArch>,
    /// Observation statistics frozen at the end of training.
    #[serde(default)]
    pub obs_norm: Option<ObsNormStats>,
    #[serde(default)]
    pub returns: Option<Vec<f64>>,
    #[serde(default)]
    pub eval_history: Vec<EvalPoint>,
    /// Set when training produced non-finite values and the trajectory was cut short.
    #[serde(default)]
    pub truncated_nonfinite: bool,
}

/// Ordered weight snapshots `phi_0, phi_1, ...` from one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTrajectory {
    pub meta: TrajectoryMeta,
    /// One snapshot per row.
    pub snapshots: Matrix,
}

impl WeightTrajectory {
    pub fn new(meta: TrajectoryMeta, snapshots: Matrix) -> Result<Self> {
        let t = Self { meta, snapshots };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.layout.validate()?;
        if self.meta.layout.total() != self.snapshots.cols() {
            return Err(Error::LengthMismatch {
                op: "trajectory layout",
                expected: self.meta.layout.total(),
                actual: self.snapshots.cols(),
            });
        }
        if self.meta.timestamps.len() != self.snapshots.rows() {
            return Err(Error::LengthMismatch {
                op: "trajectory timestamps",
                expected: self.snapshots.rows(),
                actual: self.meta.timestamps.len(),
            });
        }
        if self.meta.timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("trajectory timestamps must be strictly increasing".into()));
        }
        if let Some(r) = &self.meta.returns {
            if r.len() != self.snapshots.rows() {
                return Err(Error::LengthMismatch {
                    op: "trajectory returns",
                    expected: self.snapshots.rows(),
                    actual: r.len(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.snapshots.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.snapshots.cols()
    }

    pub fn snapshot(&self, i: usize) -> WeightVector {
        WeightVector {
            values: self.snapshots.row(i).to_vec(),
            layout: self.meta.layout.clone(),
        }
    }
}
