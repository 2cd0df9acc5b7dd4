//! Policy weight trajectories as a sequence-modeling target.
//!
//! The pipeline trains small Gaussian MLP policies with PPO and records the
//! flattened policy weights after every optimizer epoch. Snapshots are mapped
//! to low-dimensional codes with a temporal SVD basis, a causal transformer is
//! fit to predict the next code from the code history, and predicted weights
//! are scored both in weight space and by running them as policies.

pub mod error;
pub mod evalkit;
pub mod envs;
pub mod formats;
pub mod numcore;
pub mod oracle;
pub mod pipeline;
pub mod policy;
pub mod ppo;
pub mod svdcodec;
pub mod tipl;
pub mod trajectory;

pub use error::{Error, Result};

pub type Matrix = numcore::Matrix<f64>;
pub type Tape = numcore::Tape<f64>;
pub type AdamState = numcore::AdamState<f64>;
pub type ThinSvd = numcore::ThinSvd<f64>;
pub type SvdBasis = svdcodec::SvdBasis<f64>;
