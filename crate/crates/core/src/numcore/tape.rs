//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Every node stores its forward value. Nodes are appended in evaluation
//! order, so the node list is always topologically sorted and a reverse walk
//! from the output visits consumers before their inputs.

use super::{Matrix, Real};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op<T> {
    /// Differentiable input.
    Leaf,
    /// Input excluded from differentiation.
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x + row` with a `1 x cols` row broadcast over rows.
    AddRow(Var, Var),
    /// `x * row` elementwise with a `1 x cols` row broadcast over rows.
    MulRow(Var, Var),
    /// Adds rows `0..seq` of a position table to each length-`seq` block of rows.
    AddPositions { x: Var, table: Var, seq: usize },
    Scale(Var, T),
    Offset(Var, T),
    Tanh(Var),
    Exp(Var),
    /// tanh-approximated GELU.
    Gelu(Var),
    Square(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Clamp(Var, T, T),
    /// Sum of all entries, `1 x 1`.
    Sum(Var),
    /// Mean of all entries, `1 x 1`.
    Mean(Var),
    /// Per-row sum, `rows x 1`.
    RowSum(Var),
    /// Per-row standardization without affine parameters.
    LayerNorm { x: Var, eps: T },
    /// Scaled dot-product attention with a causal mask over `batch` blocks of
    /// `seq` rows. Keys flagged in `pad` are hidden from every other query.
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        pad: Option<Vec<bool>>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Matrix<T>,
    /// Op-specific forward cache (layer-norm inverse std, attention probabilities).
    aux: Vec<T>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar output with respect to every node on the tape.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Matrix<T>> {
        self.grads[var.0].as_ref()
    }

    /// Gradient for `var`, zero-filled when the output does not depend on it.
    pub fn wrt(&self, var: Var) -> Matrix<T> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn mismatch(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::DimensionMismatch {
        op,
        left: a,
        right: b,
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Matrix<T> {
        &self.nodes[var.0].value
    }

    pub fn op(&self, var: Var) -> &Op<T> {
        &self.nodes[var.0].op
    }

    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push_raw(Op::Leaf, value, Vec::new(), true)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push_raw(Op::Constant, value, Vec::new(), false)
    }

    fn push_raw(&mut self, op: Op<T>, value: Matrix<T>, aux: Vec<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            aux,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>) -> Result<Var> {
        let (value, aux) = {
            let values: Vec<&Matrix<T>> = self.nodes.iter().map(|n| &n.value).collect();
            evaluate(&op, &values)?
        };
        let requires_grad = inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(op, value, aux, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(x, row))
    }
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.push(Op::MulRow(x, row))
    }
    pub fn add_positions(&mut self, x: Var, table: Var, seq: usize) -> Result<Var> {
        self.push(Op::AddPositions { x, table, seq })
    }
    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.push(Op::Scale(x, s))
    }
    pub fn offset(&mut self, x: Var, c: T) -> Result<Var> {
        self.push(Op::Offset(x, c))
    }
    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Scale(x, -T::one()))
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Tanh(x))
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Exp(x))
    }
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Gelu(x))
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Square(x))
    }
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Maximum(a, b))
    }
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Minimum(a, b))
    }
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.push(Op::Clamp(x, lo, hi))
    }
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Mean(x))
    }
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::RowSum(x))
    }
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        self.push(Op::LayerNorm { x, eps })
    }
    #[allow(clippy::too_many_arguments)]
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        pad: Option<Vec<bool>>,
    ) -> Result<Var> {
        self.push(Op::CausalAttention {
            q,
            k,
            v,
            batch,
            seq,
            heads,
            pad,
        })
    }

    /// Recomputes every node from the leaf values, in tape order.
    pub fn replay(&self) -> Result<Vec<Matrix<T>>> {
        let mut values: Vec<Matrix<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf | Op::Constant => node.value.clone(),
                ref op => {
                    let refs: Vec<&Matrix<T>> = values.iter().collect();
                    evaluate(op, &refs)?.0
                }
            };
            values.push(value);
        }
        Ok(values)
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[output.0].value;
        if out.shape() != (1, 1) {
            return Err(Error::NotScalar {
                rows: out.rows(),
                cols: out.cols(),
            });
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::scalar(T::one()));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            for (var, contrib) in self.local_grads(idx, &g) {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                accumulate(&mut grads[var.0], contrib);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, idx: usize, g: &Matrix<T>) -> Vec<(Var, Matrix<T>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => Vec::new(),
            &Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.needs(a) {
                    out.push((a, g.matmul_nt(val(b))));
                }
                if self.needs(b) {
                    out.push((b, val(a).matmul_tn(g)));
                }
                out
            }
            &Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            &Op::Sub(a, b) => vec![(a, g.clone()), (b, g.scale(-T::one()))],
            &Op::Mul(a, b) => vec![
                (a, g.zip_map_unchecked(val(b), |g, b| g * b)),
                (b, g.zip_map_unchecked(val(a), |g, a| g * a)),
            ],
            &Op::AddRow(x, row) => vec![(x, g.clone()), (row, g.column_sums())],
            &Op::MulRow(x, row) => {
                let r = val(row).as_slice();
                let dx = g.scale_columns(r);
                let dr = g.zip_map_unchecked(val(x), |g, x| g * x).column_sums();
                vec![(x, dx), (row, dr)]
            }
            &Op::AddPositions { x, table, seq } => {
                let t = val(table);
                let cols = t.cols();
                let mut dt = Matrix::zeros(t.rows(), cols);
                for r in 0..g.rows() {
                    let p = r % seq;
                    for (d, &gv) in dt.row_mut(p).iter_mut().zip(g.row(r)) {
                        *d = *d + gv;
                    }
                }
                vec![(x, g.clone()), (table, dt)]
            }
            &Op::Scale(x, s) => vec![(x, g.scale(s))],
            &Op::Offset(x, _) => vec![(x, g.clone())],
            &Op::Tanh(x) => vec![(x, g.zip_map_unchecked(y, |g, y| g * (T::one() - y * y)))],
            &Op::Exp(x) => vec![(x, g.zip_map_unchecked(y, |g, y| g * y))],
            &Op::Gelu(x) => vec![(x, g.zip_map_unchecked(val(x), |g, x| g * gelu_grad(x)))],
            &Op::Square(x) => {
                let two = T::of(2.0);
                vec![(x, g.zip_map_unchecked(val(x), |g, x| g * two * x))]
            }
            &Op::Maximum(a, b) => {
                let (va, vb) = (val(a).as_slice(), val(b).as_slice());
                let mut da = Matrix::zeros(g.rows(), g.cols());
                let mut db = Matrix::zeros(g.rows(), g.cols());
                for (i, &gv) in g.as_slice().iter().enumerate() {
                    if va[i] >= vb[i] {
                        da.as_mut_slice()[i] = gv;
                    } else {
                        db.as_mut_slice()[i] = gv;
                    }
                }
                vec![(a, da), (b, db)]
            }
            &Op::Minimum(a, b) => {
                let (va, vb) = (val(a).as_slice(), val(b).as_slice());
                let mut da = Matrix::zeros(g.rows(), g.cols());
                let mut db = Matrix::zeros(g.rows(), g.cols());
                for (i, &gv) in g.as_slice().iter().enumerate() {
                    if va[i] <= vb[i] {
                        da.as_mut_slice()[i] = gv;
                    } else {
                        db.as_mut_slice()[i] = gv;
                    }
                }
                vec![(a, da), (b, db)]
            }
            &Op::Clamp(x, lo, hi) => vec![(
                x,
                g.zip_map_unchecked(val(x), |g, x| {
                    if x >= lo && x <= hi {
                        g
                    } else {
                        T::zero()
                    }
                }),
            )],
            &Op::Sum(x) => {
                let (r, c) = val(x).shape();
                vec![(x, Matrix::filled(r, c, g[(0, 0)]))]
            }
            &Op::Mean(x) => {
                let (r, c) = val(x).shape();
                let n = T::of_usize((r * c).max(1));
                vec![(x, Matrix::filled(r, c, g[(0, 0)] / n))]
            }
            &Op::RowSum(x) => {
                let (r, c) = val(x).shape();
                vec![(x, Matrix::from_fn(r, c, |i, _| g[(i, 0)]))]
            }
            &Op::LayerNorm { x, .. } => {
                let (rows, cols) = y.shape();
                let n = T::of_usize(cols);
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let mean_g = gr.iter().fold(T::zero(), |a, &v| a + v) / n;
                    let mean_gy = gr
                        .iter()
                        .zip(yr)
                        .fold(T::zero(), |a, (&gv, &yv)| a + gv * yv)
                        / n;
                    let rstd = node.aux[r];
                    for ((d, &gv), &yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d = rstd * (gv - mean_g - yv * mean_gy);
                    }
                }
                vec![(x, dx)]
            }
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                pad,
            } => {
                let (dq, dk, dv) = attention_backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    g,
                    &node.aux,
                    (*batch, *seq, *heads),
                    pad.as_deref(),
                );
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Matrix<T>>, contrib: Matrix<T>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.as_mut_slice().iter_mut().zip(contrib.as_slice()) {
                *e = *e + *c;
            }
        }
        None => *slot = Some(contrib),
    }
}

fn inputs<T>(op: &Op<T>) -> Vec<Var> {
    match *op {
        Op::Leaf | Op::Constant => Vec::new(),
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b)
        | Op::MulRow(a, b)
        | Op::Maximum(a, b)
        | Op::Minimum(a, b) => vec![a, b],
        Op::AddPositions { x, table, .. } => vec![x, table],
        Op::Scale(x, _)
        | Op::Offset(x, _)
        | Op::Tanh(x)
        | Op::Exp(x)
        | Op::Gelu(x)
        | Op::Square(x)
        | Op::Clamp(x, _, _)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::RowSum(x)
        | Op::LayerNorm { x, .. } => vec![x],
        Op::CausalAttention { q, k, v, .. } => vec![q, k, v],
    }
}

const GELU_C: f64 = 0.044715;

fn gelu<T: Real>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    half * x * (T::one() + (k * (x + T::of(GELU_C) * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    let c = T::of(GELU_C);
    let th = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * k * (T::one() + T::of(3.0) * c * x * x)
}

fn same_shape<T: Real>(op: &'static str, a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn row_broadcast<T: Real>(op: &'static str, x: &Matrix<T>, row: &Matrix<T>) -> Result<()> {
    if row.rows() != 1 || row.cols() != x.cols() {
        return Err(mismatch(op, x.shape(), row.shape()));
    }
    Ok(())
}

/// Forward rule for a non-leaf op given the values of all earlier nodes.
fn evaluate<T: Real>(op: &Op<T>, values: &[&Matrix<T>]) -> Result<(Matrix<T>, Vec<T>)> {
    let val = |v: Var| values[v.0];
    let plain = |m: Matrix<T>| Ok((m, Vec::new()));
    match op {
        Op::Leaf | Op::Constant => unreachable!("leaves are not re-evaluated"),
        &Op::MatMul(a, b) => plain(val(a).matmul(val(b))?),
        &Op::Add(a, b) => plain(val(a).add(val(b))?),
        &Op::Sub(a, b) => plain(val(a).sub(val(b))?),
        &Op::Mul(a, b) => plain(val(a).zip_map(val(b), "mul", |x, y| x * y)?),
        &Op::AddRow(x, row) => {
            let (x, row) = (val(x), val(row));
            row_broadcast("add_row", x, row)?;
            let mut out = x.clone();
            for r in 0..out.rows() {
                for (o, &b) in out.row_mut(r).iter_mut().zip(row.as_slice()) {
                    *o = *o + b;
                }
            }
            plain(out)
        }
        &Op::MulRow(x, row) => {
            let (x, row) = (val(x), val(row));
            row_broadcast("mul_row", x, row)?;
            plain(x.scale_columns(row.as_slice()))
        }
        &Op::AddPositions { x, table, seq } => {
            let (x, table) = (val(x), val(table));
            if seq == 0 || x.rows() % seq != 0 || seq > table.rows() || x.cols() != table.cols() {
                return Err(mismatch("add_positions", x.shape(), table.shape()));
            }
            let mut out = x.clone();
            for r in 0..out.rows() {
                for (o, &p) in out.row_mut(r).iter_mut().zip(table.row(r % seq)) {
                    *o = *o + p;
                }
            }
            plain(out)
        }
        &Op::Scale(x, s) => plain(val(x).scale(s)),
        &Op::Offset(x, c) => plain(val(x).map(|v| v + c)),
        &Op::Tanh(x) => plain(val(x).map(|v| v.tanh())),
        &Op::Exp(x) => plain(val(x).map(|v| v.exp())),
        &Op::Gelu(x) => plain(val(x).map(gelu)),
        &Op::Square(x) => plain(val(x).map(|v| v * v)),
        &Op::Maximum(a, b) => {
            same_shape("maximum", val(a), val(b))?;
            plain(val(a).zip_map_unchecked(val(b), |x, y| if x >= y { x } else { y }))
        }
        &Op::Minimum(a, b) => {
            same_shape("minimum", val(a), val(b))?;
            plain(val(a).zip_map_unchecked(val(b), |x, y| if x <= y { x } else { y }))
        }
        &Op::Clamp(x, lo, hi) => plain(val(x).map(|v| v.max(lo).min(hi))),
        &Op::Sum(x) => plain(Matrix::scalar(val(x).sum())),
        &Op::Mean(x) => {
            let m = val(x);
            plain(Matrix::scalar(m.sum() / T::of_usize(m.len().max(1))))
        }
        &Op::RowSum(x) => {
            let m = val(x);
            plain(Matrix::from_fn(m.rows(), 1, |r, _| {
                m.row(r).iter().fold(T::zero(), |a, &v| a + v)
            }))
        }
        &Op::LayerNorm { x, eps } => {
            let m = val(x);
            let n = T::of_usize(m.cols());
            let mut out = Matrix::zeros(m.rows(), m.cols());
            let mut rstds = Vec::with_capacity(m.rows());
            for r in 0..m.rows() {
                let row = m.row(r);
                let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
                let var = row
                    .iter()
                    .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                    / n;
                let rstd = T::one() / (var + eps).sqrt();
                for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
                    *o = (v - mean) * rstd;
                }
                rstds.push(rstd);
            }
            Ok((out, rstds))
        }
        Op::CausalAttention {
            q,
            k,
            v,
            batch,
            seq,
            heads,
            pad,
        } => attention_forward(
            val(*q),
            val(*k),
            val(*v),
            (*batch, *seq, *heads),
            pad.as_deref(),
        ),
    }
}

fn attention_visible(pad: Option<&[bool]>, base: usize, t: usize, j: usize) -> bool {
    j <= t && (j == t || pad.is_none_or(|p| !p[base + j]))
}

fn attention_forward<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    (batch, seq, heads): (usize, usize, usize),
    pad: Option<&[bool]>,
) -> Result<(Matrix<T>, Vec<T>)> {
    same_shape("attention", q, k)?;
    same_shape("attention", q, v)?;
    let width = q.cols();
    if heads == 0 || !width.is_multiple_of(heads) || q.rows() != batch * seq {
        return Err(mismatch("attention", q.shape(), (batch * seq, heads)));
    }
    if pad.is_some_and(|p| p.len() != batch * seq) {
        return Err(Error::LengthMismatch {
            op: "attention pad mask",
            expected: batch * seq,
            actual: pad.map_or(0, <[bool]>::len),
        });
    }
    let dh = width / heads;
    let scale = T::one() / T::of_usize(dh).sqrt();
    let mut out = Matrix::zeros(q.rows(), width);
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    let mut scores = vec![T::zero(); seq];
    for b in 0..batch {
        let base = b * seq;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for t in 0..seq {
                let qt = &q.row(base + t)[cols.clone()];
                let mut max = T::neg_infinity();
                for j in 0..=t {
                    if !attention_visible(pad, base, t, j) {
                        continue;
                    }
                    let kj = &k.row(base + j)[cols.clone()];
                    let s = qt.iter().zip(kj).fold(T::zero(), |a, (&x, &y)| a + x * y) * scale;
                    scores[j] = s;
                    if s > max {
                        max = s;
                    }
                }
                let p = &mut probs[((b * heads + h) * seq + t) * seq..][..seq];
                let mut z = T::zero();
                for j in 0..=t {
                    if attention_visible(pad, base, t, j) {
                        let e = (scores[j] - max).exp();
                        p[j] = e;
                        z = z + e;
                    }
                }
                let out_row = &mut out.row_mut(base + t)[cols.clone()];
                for j in 0..=t {
                    if !attention_visible(pad, base, t, j) {
                        continue;
                    }
                    p[j] = p[j] / z;
                    let vj = &v.row(base + j)[cols.clone()];
                    for (o, &x) in out_row.iter_mut().zip(vj) {
                        *o = *o + p[j] * x;
                    }
                }
            }
        }
    }
    Ok((out, probs))
}

fn attention_backward<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    g: &Matrix<T>,
    probs: &[T],
    (batch, seq, heads): (usize, usize, usize),
    pad: Option<&[bool]>,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let width = q.cols();
    let dh = width / heads;
    let scale = T::one() / T::of_usize(dh).sqrt();
    let mut dq = Matrix::zeros(q.rows(), width);
    let mut dk = Matrix::zeros(q.rows(), width);
    let mut dv = Matrix::zeros(q.rows(), width);
    let mut dp = vec![T::zero(); seq];
    for b in 0..batch {
        let base = b * seq;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for t in 0..seq {
                let p = &probs[((b * heads + h) * seq + t) * seq..][..seq];
                let gt = &g.row(base + t)[cols.clone()];
                let mut weighted = T::zero();
                for j in 0..=t {
                    if !attention_visible(pad, base, t, j) {
                        continue;
                    }
                    let vj = &v.row(base + j)[cols.clone()];
                    dp[j] = gt.iter().zip(vj).fold(T::zero(), |a, (&x, &y)| a + x * y);
                    weighted = weighted + p[j] * dp[j];
                    for (d, &gv) in dv.row_mut(base + j)[cols.clone()].iter_mut().zip(gt) {
                        *d = *d + p[j] * gv;
                    }
                }
                let qt: Vec<T> = q.row(base + t)[cols.clone()].to_vec();
                for j in 0..=t {
                    if !attention_visible(pad, base, t, j) {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = &k.row(base + j)[cols.clone()];
                    for (d, &x) in dq.row_mut(base + t)[cols.clone()].iter_mut().zip(kj) {
                        *d = *d + ds * x;
                    }
                    for (d, &x) in dk.row_mut(base + j)[cols.clone()].iter_mut().zip(&qt) {
                        *d = *d + ds * x;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(loss)/d(leaf) for a graph built by `build`.
    fn check_grad(
        leaves: Vec<Matrix<f64>>,
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        let h = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.wrt(vars[li]);
            for i in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = leaves
                        .iter()
                        .enumerate()
                        .map(|(j, m)| {
                            let mut m = m.clone();
                            if j == li {
                                m.as_mut_slice()[i] += delta;
                            }
                            t.leaf(m)
                        })
                        .collect();
                    let o = build(&mut t, &vs);
                    t.value(o)[(0, 0)]
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.as_slice()[i];
                let err = (a - numeric).abs() / (1e-6_f64).max(a.abs().max(numeric.abs()));
                assert!(err < tol, "leaf {li} entry {i}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn identity_gradient_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::scalar(3.5));
        let g = tape.backward(x).unwrap();
        assert_eq!(g.wrt(x).as_slice(), &[1.0]);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::from_fn(3, 4, |r, c| (r + c) as f64));
        let s = tape.sum(a).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(a), Matrix::filled(3, 4, 1.0));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Matrix::zeros(2, 2));
        assert!(matches!(
            tape.backward(a),
            Err(Error::NotScalar { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::filled(2, 2, 1.0));
        let b = tape.leaf(Matrix::filled(2, 2, 2.0));
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.wrt(b), Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let leaves = vec![random(&mut rng, 3, 4), random(&mut rng, 3, 4), random(&mut rng, 1, 4)];
        check_grad(
            leaves,
            |t, v| {
                let a = t.tanh(v[0]).unwrap();
                let b = t.exp(v[1]).unwrap();
                let c = t.mul(a, b).unwrap();
                let d = t.gelu(c).unwrap();
                let e = t.mul_row(d, v[2]).unwrap();
                let f = t.add_row(e, v[2]).unwrap();
                let sq = t.square(f).unwrap();
                let rs = t.row_sum(sq).unwrap();
                let sc = t.scale(rs, 0.7).unwrap();
                let off = t.offset(sc, 2.0).unwrap();
                t.mean(off).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn piecewise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let leaves = vec![random(&mut rng, 4, 3), random(&mut rng, 4, 3)];
        check_grad(
            leaves,
            |t, v| {
                let a = t.maximum(v[0], v[1]).unwrap();
                let b = t.minimum(v[0], v[1]).unwrap();
                let c = t.clamp(v[0], -0.3, 0.4).unwrap();
                let ab = t.sub(a, b).unwrap();
                let s = t.add(ab, c).unwrap();
                let s = t.square(s).unwrap();
                t.sum(s).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn layer_norm_and_positions_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![random(&mut rng, 6, 5), random(&mut rng, 4, 5), random(&mut rng, 6, 5)];
        check_grad(
            leaves,
            |t, v| {
                let p = t.add_positions(v[0], v[1], 3).unwrap();
                let n = t.layer_norm(p, 1e-5).unwrap();
                let w = t.mul(n, v[2]).unwrap();
                t.sum(w).unwrap()
            },
            1e-5,
        );
    }

    #[test]
    fn attention_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (batch, seq, width) = (2, 4, 6);
        let leaves = vec![
            random(&mut rng, batch * seq, width),
            random(&mut rng, batch * seq, width),
            random(&mut rng, batch * seq, width),
            random(&mut rng, batch * seq, width),
        ];
        let pad = vec![true, false, false, false, false, false, false, false];
        for mask in [None, Some(pad)] {
            check_grad(
                leaves.clone(),
                |t, v| {
                    let a = t
                        .causal_attention(v[0], v[1], v[2], batch, seq, 2, mask.clone())
                        .unwrap();
                    let w = t.mul(a, v[3]).unwrap();
                    t.sum(w).unwrap()
                },
                1e-5,
            );
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.constant(random(&mut rng, 5, 3));
        let w = tape.leaf(random(&mut rng, 3, 4));
        let b = tape.leaf(random(&mut rng, 1, 4));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.add_row(h, b).unwrap();
        let h = tape.tanh(h).unwrap();
        let h = tape.layer_norm(h, 1e-5).unwrap();
        let _ = tape.sum(h).unwrap();
        let replayed = tape.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v, tape.value(Var(i)));
        }
    }
}
