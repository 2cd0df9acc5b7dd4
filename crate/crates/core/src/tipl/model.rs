use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{TiplConfig, TokenAnchor};
use crate::error::{Error, Result};
use crate::numcore::{standard_normal, Layout, Var};
use crate::policy::{TapeParams, WeightVector};
use crate::svdcodec::SvdBasis;
use crate::{Matrix, Tape};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Transformer parameters as one flat vector with a named layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TiplModel {
    pub config: TiplConfig,
    pub layout: Layout,
    pub params: Vec<f64>,
}

fn block_prefix(l: usize) -> String {
    format!("blocks.{l}")
}

/// Tensor names and shapes in storage order.
pub fn parameter_layout(c: &TiplConfig) -> Layout {
    let (d, e, k) = (c.d_token, c.embed_dim, c.context_len);
    let mut t: Vec<(String, Vec<usize>)> = vec![
        ("embed.weight".into(), vec![d, e]),
        ("embed.bias".into(), vec![e]),
        ("pos".into(), vec![k, e]),
    ];
    for l in 0..c.layers {
        let p = block_prefix(l);
        t.push((format!("{p}.ln1.gain"), vec![e]));
        t.push((format!("{p}.ln1.bias"), vec![e]));
        for m in ["q", "k", "v", "o"] {
            t.push((format!("{p}.attn.{m}.weight"), vec![e, e]));
            t.push((format!("{p}.attn.{m}.bias"), vec![e]));
        }
        t.push((format!("{p}.ln2.gain"), vec![e]));
        t.push((format!("{p}.ln2.bias"), vec![e]));
        t.push((format!("{p}.mlp.fc.weight"), vec![e, 4 * e]));
        t.push((format!("{p}.mlp.fc.bias"), vec![4 * e]));
        t.push((format!("{p}.mlp.proj.weight"), vec![4 * e, e]));
        t.push((format!("{p}.mlp.proj.bias"), vec![e]));
    }
    t.push(("head.weight".into(), vec![e, d]));
    t.push(("head.bias".into(), vec![d]));
    Layout::contiguous(t)
}

/// Window anchoring of one batch: each sequence is shifted by its first real
/// token and divided by the configured offset scale.
pub(crate) struct Frame {
    anchors: Vec<Vec<f64>>,
    scale: Vec<f64>,
    seq: usize,
}

impl Frame {
    /// `None` for absolute tokens.
    pub(crate) fn of(c: &TiplConfig, inputs: &Matrix, batch: usize, seq: usize, pad: Option<&[bool]>) -> Result<Option<Self>> {
        if c.anchor == TokenAnchor::Absolute {
            return Ok(None);
        }
        if c.offset_scale.len() != c.d_token {
            return Err(Error::Config("anchored tokens need a fitted offset_scale".into()));
        }
        let anchors = (0..batch)
            .map(|b| {
                let first = (0..seq).find(|&t| !pad.is_some_and(|p| p[b * seq + t])).unwrap_or(0);
                inputs.row(b * seq + first).to_vec()
            })
            .collect();
        Ok(Some(Self {
            anchors,
            scale: c.offset_scale.clone(),
            seq,
        }))
    }

    pub(crate) fn enter(&self, m: &Matrix) -> Matrix {
        Matrix::from_fn(m.rows(), m.cols(), |r, j| (m[(r, j)] - self.anchors[r / self.seq][j]) / self.scale[j])
    }

    pub(crate) fn leave(&self, m: &Matrix) -> Matrix {
        Matrix::from_fn(m.rows(), m.cols(), |r, j| self.anchors[r / self.seq][j] + m[(r, j)] * self.scale[j])
    }
}

/// Per-coordinate RMS of `u_{t+o} - u_t` over all offsets `1 <= o < K`, the
/// spread of anchored tokens. Constant coordinates get scale 1.
pub(crate) fn fit_offset_scale(data: &[Matrix], context_len: usize, d: usize) -> Vec<f64> {
    let mut sum = vec![0.0; d];
    let mut count = 0usize;
    for traj in data {
        for t in 0..traj.rows() {
            for o in 1..context_len.min(traj.rows() - t) {
                let (a, b) = (traj.row(t), traj.row(t + o));
                for j in 0..d {
                    sum[j] += (b[j] - a[j]).powi(2);
                }
                count += 1;
            }
        }
    }
    sum.iter()
        .map(|&s| {
            let rms = (s / count.max(1) as f64).sqrt();
            if rms > 1e-12 { rms } else { 1.0 }
        })
        .collect()
}

/// Normal(0, 0.02) weights and embeddings, zero biases, unit layer-norm gains.
pub fn init_model(config: &TiplConfig, seed: u64) -> Result<TiplModel> {
    config.validate()?;
    let layout = parameter_layout(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(layout.total());
    for slot in &layout.slots {
        let n = slot.size();
        if slot.name.ends_with(".gain") {
            params.extend(std::iter::repeat_n(1.0, n));
        } else if slot.name.ends_with(".bias") {
            params.extend(std::iter::repeat_n(0.0, n));
        } else {
            params.extend((0..n).map(|_| INIT_STD * standard_normal::<f64, _>(&mut rng)));
        }
    }
    Ok(TiplModel {
        config: config.clone(),
        layout,
        params,
    })
}

/// Dropout masks drawn from `rng`; absent in evaluation mode.
pub(crate) struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (r, c) = tape.value(x).shape();
        let keep = 1.0 - self.rate;
        let rng = &mut *self.rng;
        let mask = Matrix::from_fn(r, c, |_, _| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let m = tape.constant(mask);
        tape.mul(x, m)
    }
}

fn maybe_dropout(tape: &mut Tape, x: Var, dropout: &mut Option<Dropout<'_>>) -> Result<Var> {
    match dropout {
        Some(d) if d.rate > 0.0 => d.apply(tape, x),
        _ => Ok(x),
    }
}

fn norm_affine(tape: &mut Tape, p: &TapeParams, x: Var, name: &str) -> Result<Var> {
    let n = tape.layer_norm(x, LN_EPS)?;
    let g = tape.mul_row(n, p.var(&format!("{name}.gain")))?;
    tape.add_row(g, p.var(&format!("{name}.bias")))
}

fn linear(tape: &mut Tape, p: &TapeParams, x: Var, name: &str) -> Result<Var> {
    let y = tape.matmul(x, p.var(&format!("{name}.weight")))?;
    tape.add_row(y, p.var(&format!("{name}.bias")))
}

/// Builds the forward pass for `batch` segments of `seq` tokens stacked as
/// rows of `inputs`. Returns the `batch*seq x d_token` predictions.
pub(crate) fn build_forward(
    tape: &mut Tape,
    p: &TapeParams,
    c: &TiplConfig,
    inputs: Var,
    batch: usize,
    seq: usize,
    pad: Option<Vec<bool>>,
    mut dropout: Option<Dropout<'_>>,
) -> Result<Var> {
    let mut h = linear(tape, p, inputs, "embed")?;
    h = tape.add_positions(h, p.var("pos"), seq)?;
    h = maybe_dropout(tape, h, &mut dropout)?;
    for l in 0..c.layers {
        let pre = block_prefix(l);
        let a = norm_affine(tape, p, h, &format!("{pre}.ln1"))?;
        let q = linear(tape, p, a, &format!("{pre}.attn.q"))?;
        let k = linear(tape, p, a, &format!("{pre}.attn.k"))?;
        let v = linear(tape, p, a, &format!("{pre}.attn.v"))?;
        let att = tape.causal_attention(q, k, v, batch, seq, c.heads, pad.clone())?;
        let o = linear(tape, p, att, &format!("{pre}.attn.o"))?;
        let o = maybe_dropout(tape, o, &mut dropout)?;
        h = tape.add(h, o)?;

        let m = norm_affine(tape, p, h, &format!("{pre}.ln2"))?;
        let f = linear(tape, p, m, &format!("{pre}.mlp.fc"))?;
        let f = tape.gelu(f)?;
        let f = linear(tape, p, f, &format!("{pre}.mlp.proj"))?;
        let f = maybe_dropout(tape, f, &mut dropout)?;
        h = tape.add(h, f)?;
    }
    linear(tape, p, h, "head")
}

impl TiplModel {
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.layout.ensure_matches(&parameter_layout(&self.config))?;
        if self.params.len() != self.layout.total() {
            return Err(Error::LengthMismatch {
                op: "model parameters",
                expected: self.layout.total(),
                actual: self.params.len(),
            });
        }
        if let Some(index) = self.params.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "model parameters",
                index,
            });
        }
        Ok(())
    }

    fn check_segment(&self, segment: &Matrix) -> Result<()> {
        if segment.cols() != self.config.d_token {
            return Err(Error::DimensionMismatch {
                op: "tipl forward",
                left: (segment.rows(), segment.cols()),
                right: (self.config.context_len, self.config.d_token),
            });
        }
        if segment.rows() == 0 || segment.rows() > self.config.context_len {
            return Err(Error::Config(format!(
                "segment of {} tokens does not fit context length {}",
                segment.rows(),
                self.config.context_len
            )));
        }
        Ok(())
    }

    /// Next-token predictions for every position of `segment` (`K' x d_token`).
    /// Dropout is active only when `dropout_rng` is given.
    pub fn forward(&self, segment: &Matrix, dropout_rng: Option<&mut ChaCha8Rng>) -> Result<Matrix> {
        self.check_segment(segment)?;
        let frame = Frame::of(&self.config, segment, 1, segment.rows(), None)?;
        let mut tape = Tape::new();
        let p = TapeParams::new(&mut tape, &self.layout, &self.params);
        let x = tape.constant(frame.as_ref().map_or_else(|| segment.clone(), |f| f.enter(segment)));
        let dropout = dropout_rng.map(|rng| Dropout {
            rate: self.config.dropout,
            rng,
        });
        let out = build_forward(&mut tape, &p, &self.config, x, 1, segment.rows(), None, dropout)?;
        let out = tape.value(out);
        Ok(frame.map_or_else(|| out.clone(), |f| f.leave(out)))
    }

    /// Evaluation-mode forward pass.
    pub fn predict(&self, segment: &Matrix) -> Result<Matrix> {
        self.forward(segment, None)
    }

    /// Autoregressive continuation of `prefix` (token space) by `k` steps with
    /// a sliding window of the last `K` tokens.
    pub fn rollout_tokens(&self, prefix: &[Vec<f64>], k: usize) -> Result<Vec<Vec<f64>>> {
        if prefix.is_empty() {
            return Err(Error::Config("rollout needs a non-empty prefix".into()));
        }
        let ctx = self.config.context_len;
        let mut window: Vec<Vec<f64>> = prefix[prefix.len().saturating_sub(ctx)..].to_vec();
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let seg = Matrix::from_rows(&window)?;
            let pred = self.predict(&seg)?;
            let next = pred.row(pred.rows() - 1).to_vec();
            if window.len() == ctx {
                window.remove(0);
            }
            window.push(next.clone());
            out.push(next);
        }
        Ok(out)
    }

    /// Predicts the `k` weight vectors following `prefix`.
    pub fn rollout(&self, basis: &SvdBasis<f64>, prefix: &[WeightVector], k: usize) -> Result<Vec<WeightVector>> {
        if basis.d() != self.config.d_token {
            return Err(Error::LengthMismatch {
                op: "rollout basis rank",
                expected: self.config.d_token,
                actual: basis.d(),
            });
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let tokens = prefix
            .iter()
            .map(|w| basis.encode(w).map(|u| basis.standardize(&u)))
            .collect::<Result<Vec<_>>>()?;
        self.rollout_tokens(&tokens, k)?
            .into_iter()
            .map(|z| basis.decode(&basis.destandardize(&z)))
            .collect()
    }
}
