use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{orthogonal, Gradients, Layout, Var};
use crate::{Matrix, Tape};

/// Fully connected layer computing `x W + b`, with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// tanh MLP with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Tensor names and shapes for an MLP whose output layer is called `head`.
pub fn mlp_layout(input: usize, hidden: &[usize], output: usize, head: &str) -> Vec<(String, Vec<usize>)> {
    let mut tensors = Vec::new();
    let mut width = input;
    for (i, &h) in hidden.iter().enumerate() {
        tensors.push((format!("hidden.{i}.weight"), vec![width, h]));
        tensors.push((format!("hidden.{i}.bias"), vec![h]));
        width = h;
    }
    tensors.push((format!("{head}.weight"), vec![width, output]));
    tensors.push((format!("{head}.bias"), vec![output]));
    tensors
}

fn layer_names(n_hidden: usize, head: &str) -> Vec<(String, String)> {
    (0..n_hidden)
        .map(|i| (format!("hidden.{i}.weight"), format!("hidden.{i}.bias")))
        .chain(std::iter::once((format!("{head}.weight"), format!("{head}.bias"))))
        .collect()
}

impl Mlp {
    /// Orthogonal weights with `hidden_gain` on hidden layers and `head_gain` on the output layer; zero biases.
    pub fn orthogonal<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_gain: f64,
        head_gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = input;
        for &h in hidden {
            layers.push(Dense {
                weight: orthogonal(width, h, hidden_gain, rng),
                bias: vec![0.0; h],
            });
            width = h;
        }
        layers.push(Dense {
            weight: orthogonal(width, output, head_gain, rng),
            bias: vec![0.0; output],
        });
        Self { layers }
    }

    pub fn from_flat(layout: &Layout, values: &[f64], n_hidden: usize, head: &str) -> Result<Self> {
        let mut layers = Vec::with_capacity(n_hidden + 1);
        for (w_name, b_name) in layer_names(n_hidden, head) {
            let w = layout
                .find(&w_name)
                .ok_or_else(|| Error::Layout(format!("missing tensor {w_name}")))?;
            let b = layout
                .find(&b_name)
                .ok_or_else(|| Error::Layout(format!("missing tensor {b_name}")))?;
            if w.offset + w.size() > values.len() || b.offset + b.size() > values.len() {
                return Err(Error::Layout(format!("{w_name} or {b_name} lies outside the vector")));
            }
            layers.push(Dense {
                weight: layout.matrix(values, w),
                bias: layout.slice(values, b).to_vec(),
            });
        }
        Ok(Self { layers })
    }

    /// Appends weights and biases in layout order.
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.as_slice());
            out.extend_from_slice(&layer.bias);
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let out_dim = layer.weight.cols();
            let mut next = layer.bias.clone();
            for (r, &xi) in h.iter().enumerate() {
                let row = layer.weight.row(r);
                for (n, &w) in next.iter_mut().zip(row) {
                    *n += xi * w;
                }
            }
            debug_assert_eq!(next.len(), out_dim);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = next;
        }
        h
    }
}

/// Every tensor of a flat parameter vector as a differentiable leaf.
#[derive(Debug, Clone)]
pub struct TapeParams {
    layout: Layout,
    vars: Vec<Var>,
    by_name: HashMap<String, usize>,
}

impl TapeParams {
    pub fn new(tape: &mut Tape, layout: &Layout, values: &[f64]) -> Self {
        let vars = layout
            .slots
            .iter()
            .map(|slot| tape.leaf(layout.matrix(values, slot)))
            .collect();
        let by_name = layout
            .slots
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        Self {
            layout: layout.clone(),
            vars,
            by_name,
        }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[self.by_name[name]]
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Gradient of every tensor, flattened in layout order.
    pub fn flat_grads(&self, grads: &Gradients<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout.total());
        for &v in &self.vars {
            out.extend_from_slice(grads.wrt(v).as_slice());
        }
        out
    }

    /// Builds the MLP forward pass on `input` (`batch x in`).
    pub fn mlp(&self, tape: &mut Tape, input: Var, n_hidden: usize, head: &str) -> Result<Var> {
        let mut h = input;
        let names = layer_names(n_hidden, head);
        let last = names.len() - 1;
        for (i, (w, b)) in names.iter().enumerate() {
            h = tape.matmul(h, self.var(w))?;
            h = tape.add_row(h, self.var(b))?;
            if i < last {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tape_forward_matches_direct_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::orthogonal(3, &[5, 4], 2, 1.3, 0.7, &mut rng);
        let layout = Layout::contiguous(mlp_layout(3, &[5, 4], 2, "out"));
        let mut flat = Vec::new();
        mlp.write_flat(&mut flat);
        let mut tape = Tape::new();
        let params = TapeParams::new(&mut tape, &layout, &flat);
        let x = [0.3, -0.7, 1.1];
        let input = tape.constant(Matrix::row_vector(&x));
        let out = params.mlp(&mut tape, input, 2, "out").unwrap();
        let direct = mlp.forward(&x);
        for (a, b) in tape.value(out).as_slice().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
