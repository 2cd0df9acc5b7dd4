use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{build_forward, fit_offset_scale, Dropout, Frame};
use super::{TiplConfig, TiplModel, TokenAnchor};
use crate::error::{Error, Result};
use crate::numcore::{adam_step, clip_grad_norm, Var};
use crate::policy::TapeParams;
use crate::{AdamState, Matrix, Tape};

/// `batch` segments of `seq` tokens, stacked row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentBatch {
    pub inputs: Matrix,
    /// `targets` row `r` is the token following `inputs` row `r`.
    pub targets: Matrix,
    /// True for left padding; such rows carry zeros and no loss.
    pub pad: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl SegmentBatch {
    pub fn valid_rows(&self) -> usize {
        self.pad.iter().filter(|&&p| !p).count()
    }
}

/// Draws segments uniformly over trajectories, then uniformly over start
/// offsets. Trajectories shorter than `K + 1` are used whole and left-padded.
pub fn sample_batch(data: &[Matrix], config: &TiplConfig, rng: &mut ChaCha8Rng) -> Result<SegmentBatch> {
    let (k, d, b) = (config.context_len, config.d_token, config.batch_size);
    let mut inputs = Matrix::zeros(b * k, d);
    let mut targets = Matrix::zeros(b * k, d);
    let mut pad = vec![false; b * k];
    for s in 0..b {
        let traj = &data[rng.random_range(0..data.len())];
        let len = traj.rows();
        let (start, tokens) = if len > k {
            (rng.random_range(0..=len - k - 1), k)
        } else {
            (0, len - 1)
        };
        let lead = k - tokens;
        for t in 0..k {
            let row = s * k + t;
            if t < lead {
                pad[row] = true;
                continue;
            }
            let src = start + t - lead;
            inputs.row_mut(row).copy_from_slice(traj.row(src));
            targets.row_mut(row).copy_from_slice(traj.row(src + 1));
        }
    }
    Ok(SegmentBatch {
        inputs,
        targets,
        pad,
        batch: b,
        seq: k,
    })
}

/// Mean squared error over unpadded positions, built on `tape`.
pub(crate) fn batch_loss(
    tape: &mut Tape,
    params: &TapeParams,
    config: &TiplConfig,
    batch: &SegmentBatch,
    dropout: Option<Dropout<'_>>,
) -> Result<Var> {
    let frame = Frame::of(config, &batch.inputs, batch.batch, batch.seq, Some(&batch.pad))?;
    let (inputs, targets) = match &frame {
        Some(f) => (f.enter(&batch.inputs), f.enter(&batch.targets)),
        None => (batch.inputs.clone(), batch.targets.clone()),
    };
    let x = tape.constant(inputs);
    let pad = batch.pad.iter().any(|&p| p).then(|| batch.pad.clone());
    let preds = build_forward(tape, params, config, x, batch.batch, batch.seq, pad, dropout)?;
    let y = tape.constant(targets);
    let diff = tape.sub(preds, y)?;
    let sq = tape.square(diff)?;
    let sq = if batch.valid_rows() < batch.pad.len() {
        let mask = Matrix::from_fn(batch.inputs.rows(), config.d_token, |r, _| if batch.pad[r] { 0.0 } else { 1.0 });
        let m = tape.constant(mask);
        tape.mul(sq, m)?
    } else {
        sq
    };
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / (batch.valid_rows() * config.d_token) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each iteration.
    pub loss_history: Vec<f64>,
    pub steps: usize,
}

fn batch_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step as u64)
}

/// Minimizes next-token MSE with AdamW, linear warmup and gradient clipping.
/// Every trajectory in `data` is a `T x d_token` matrix of tokens with `T >= 2`.
/// Anchored models without an offset scale get one fitted from `data`.
pub fn train(model: &mut TiplModel, data: &[Matrix], seed: u64) -> Result<TrainReport> {
    model.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training needs at least one trajectory".into()));
    }
    for (i, t) in data.iter().enumerate() {
        if t.rows() < 2 || t.cols() != model.config.d_token {
            return Err(Error::Config(format!(
                "trajectory {i} is {}x{}; need at least 2 tokens of width {}",
                t.rows(),
                t.cols(),
                model.config.d_token
            )));
        }
    }
    if model.config.anchor == TokenAnchor::Window && model.config.offset_scale.is_empty() {
        model.config.offset_scale = fit_offset_scale(data, model.config.context_len, model.config.d_token);
    }
    let config = model.config.clone();
    let mut adam = AdamState::new(model.params.len(), config.lr).with_weight_decay(config.weight_decay);
    let mut history = Vec::with_capacity(config.iters);
    let mut step = 0;
    for iter in 0..config.iters {
        let mut sum = 0.0;
        for _ in 0..config.batches_per_iter {
            let bseed = batch_seed(seed, step);
            let mut rng = ChaCha8Rng::seed_from_u64(bseed);
            let batch = sample_batch(data, &config, &mut rng)?;
            let mut tape = Tape::new();
            let p = TapeParams::new(&mut tape, &model.layout, &model.params);
            let dropout = (config.dropout > 0.0).then_some(Dropout {
                rate: config.dropout,
                rng: &mut rng,
            });
            let loss = batch_loss(&mut tape, &p, &config, &batch, dropout)?;
            let value = tape.value(loss)[(0, 0)];
            if !value.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss {value} at iteration {iter}, step {step}, batch seed {bseed}"
                )));
            }
            let grads = tape.backward(loss)?;
            let mut flat = p.flat_grads(&grads);
            clip_grad_norm(&mut flat, config.grad_clip);
            adam.lr = config.lr_at(step);
            adam_step(&mut model.params, &flat, &mut adam)?;
            sum += value;
            step += 1;
        }
        history.push(sum / config.batches_per_iter.max(1) as f64);
    }
    Ok(TrainReport {
        loss_history: history,
        steps: step,
    })
}

/// Evaluation-mode loss on one batch.
pub fn eval_loss(model: &TiplModel, batch: &SegmentBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let p = TapeParams::new(&mut tape, &model.layout, &model.params);
    let loss = batch_loss(&mut tape, &p, &model.config, batch, None)?;
    Ok(tape.value(loss)[(0, 0)])
}
