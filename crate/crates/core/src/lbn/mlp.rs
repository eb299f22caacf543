use serde::{Deserialize, Serialize};

use crate::rng::RngStream;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer widths of a block network: `hidden.len()` blocks of
/// Linear → LayerNorm → ELU, then a linear output layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl MlpShape {
    pub fn new(input: usize, hidden: Vec<usize>, output: usize) -> Self {
        Self { input, hidden, output }
    }

    /// Length of the flat parameter vector.
    ///
    /// Per block: weights (out × in, row-major), bias, norm gain, norm offset.
    /// Output layer: weights and bias.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut width = self.input;
        for &h in &self.hidden {
            n += h * width + 3 * h;
            width = h;
        }
        n + self.output * width + self.output
    }

    /// Uniform(±1/√fan_in) weights and biases, unit gains, zero offsets.
    pub fn init(&self, rng: &mut RngStream) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        let mut width = self.input;
        for &h in &self.hidden {
            let bound = 1.0 / (width as f64).sqrt();
            p.extend((0..h * width + h).map(|_| bound * (2.0 * rng.uniform() - 1.0)));
            p.extend(std::iter::repeat(1.0).take(h));
            p.extend(std::iter::repeat(0.0).take(h));
            width = h;
        }
        let bound = 1.0 / (width as f64).sqrt();
        p.extend((0..self.output * width + self.output).map(|_| bound * (2.0 * rng.uniform() - 1.0)));
        p
    }

    /// Output for one input.
    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut tape = Tape::default();
        self.forward_tape(params, x, &mut tape);
        tape.output
    }

    /// Forward pass recording what [`MlpShape::backward`] needs.
    pub fn forward_tape(&self, params: &[f64], x: &[f64], tape: &mut Tape) {
        debug_assert_eq!(params.len(), self.param_count());
        debug_assert_eq!(x.len(), self.input);
        tape.blocks.resize_with(self.hidden.len(), Block::default);
        tape.input.clear();
        tape.input.extend_from_slice(x);
        let mut off = 0;
        let mut width = self.input;
        for (l, &h) in self.hidden.iter().enumerate() {
            let (w, rest) = params[off..].split_at(h * width);
            let (b, rest) = rest.split_at(h);
            let (gain, rest) = rest.split_at(h);
            let shift = &rest[..h];
            let (prev, cur) = tape.blocks.split_at_mut(l);
            let input: &[f64] = if l == 0 { x } else { &prev[l - 1].act };
            let block = &mut cur[0];
            block.input.clear();
            block.input.extend_from_slice(input);
            linear(w, b, input, &mut block.norm);
            let mean = block.norm.iter().sum::<f64>() / h as f64;
            let var = block.norm.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / h as f64;
            block.inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            block.act.clear();
            for (i, v) in block.norm.iter_mut().enumerate() {
                *v = (*v - mean) * block.inv_std;
                block.act.push(elu(gain[i] * *v + shift[i]));
            }
            off += h * width + 3 * h;
            width = h;
        }
        let (w, b) = params[off..].split_at(self.output * width);
        let input = match self.hidden.len() {
            0 => x,
            n => &tape.blocks[n - 1].act,
        };
        let mut out = std::mem::take(&mut tape.output);
        linear(w, &b[..self.output], input, &mut out);
        tape.output = out;
    }

    /// Adds ∂L/∂θ to `grad` given ∂L/∂output at the taped input.
    pub fn backward(&self, params: &[f64], tape: &Tape, grad_out: &[f64], grad: &mut [f64]) {
        let n_blocks = self.hidden.len();
        let mut offsets = Vec::with_capacity(n_blocks + 1);
        let mut off = 0;
        let mut width = self.input;
        for &h in &self.hidden {
            offsets.push(off);
            off += h * width + 3 * h;
            width = h;
        }
        let mut upstream = vec![0.0; width];
        {
            let input: &[f64] = match n_blocks {
                0 => &tape.input,
                n => &tape.blocks[n - 1].act,
            };
            let (w, _) = params[off..].split_at(self.output * width);
            let (gw, gb) = grad[off..].split_at_mut(self.output * width);
            for o in 0..self.output {
                let g = grad_out[o];
                gb[o] += g;
                let row = o * width;
                for i in 0..width {
                    gw[row + i] += g * input[i];
                    upstream[i] += w[row + i] * g;
                }
            }
        }
        for l in (0..n_blocks).rev() {
            let h = self.hidden[l];
            let fan_in = if l == 0 { self.input } else { self.hidden[l - 1] };
            let block = &tape.blocks[l];
            let base = offsets[l];
            let gain = &params[base + h * fan_in + h..base + h * fan_in + 2 * h];
            // ELU then affine of the normalized values.
            let mut d_norm = vec![0.0; h];
            for i in 0..h {
                let a = block.act[i];
                let d_pre = upstream[i] * if a > 0.0 { 1.0 } else { a + 1.0 };
                grad[base + h * fan_in + h + i] += d_pre * block.norm[i];
                grad[base + h * fan_in + 2 * h + i] += d_pre;
                d_norm[i] = d_pre * gain[i];
            }
            let mean_d = d_norm.iter().sum::<f64>() / h as f64;
            let mean_dn = d_norm.iter().zip(&block.norm).map(|(a, b)| a * b).sum::<f64>() / h as f64;
            let d_lin: Vec<f64> =
                (0..h).map(|i| block.inv_std * (d_norm[i] - mean_d - block.norm[i] * mean_dn)).collect();
            let w = &params[base..base + h * fan_in];
            let mut next = vec![0.0; fan_in];
            let (gw, rest) = grad[base..].split_at_mut(h * fan_in);
            for o in 0..h {
                let g = d_lin[o];
                rest[o] += g;
                let row = o * fan_in;
                for i in 0..fan_in {
                    gw[row + i] += g * block.input[i];
                    next[i] += w[row + i] * g;
                }
            }
            upstream = next;
        }
    }
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    blocks: Vec<Block>,
    output: Vec<f64>,
    input: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

#[derive(Clone, Debug, Default)]
struct Block {
    input: Vec<f64>,
    /// Normalized pre-activations.
    norm: Vec<f64>,
    inv_std: f64,
    act: Vec<f64>,
}

fn linear(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    let n_in = x.len();
    out.clear();
    out.extend(b.iter().enumerate().map(|(o, bo)| {
        let row = &w[o * n_in..(o + 1) * n_in];
        bo + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }));
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// A shape together with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub shape: MlpShape,
    #[serde(with = "super::params_base64")]
    pub params: Vec<f64>,
}

impl Mlp {
    pub fn new(shape: MlpShape, rng: &mut RngStream) -> Self {
        let params = shape.init(rng);
        Self { shape, params }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.shape.forward(&self.params, x)
    }
}
