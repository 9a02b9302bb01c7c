//! Dense layers with a recorded forward pass and a hand-written reverse pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// `y = act(W x + b)` with `W` stored row-major, `outputs × inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Layer {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` for weights and biases.
    pub fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut l = Layer::zeros(inputs, outputs, activation);
        l.weight.iter_mut().for_each(|w| *w = rng.gen_range(-bound..bound));
        l.bias.iter_mut().for_each(|b| *b = rng.gen_range(-bound..bound));
        l
    }

    #[inline]
    fn affine(&self, x: &[f64], out: &mut [f64]) {
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            *out_v = self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

/// A chain of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Per-layer inputs and pre-activations from one forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTape {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl MlpTape {
    /// Which ReLU units were active, for kink detection in gradient checks.
    pub fn relu_pattern(&self) -> impl Iterator<Item = bool> + '_ {
        self.pre.iter().flat_map(|p| p.iter().map(|&v| v > 0.0))
    }
}

impl Mlp {
    /// Layers with widths `dims[0] -> dims[1] -> ...`; every layer uses
    /// `hidden` except the last, which uses `last`.
    pub fn init(dims: &[usize], hidden: Activation, last: Activation, rng: &mut impl Rng) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| Layer::init(dims[i], dims[i + 1], if i + 1 == n { last } else { hidden }, rng))
            .collect();
        Mlp { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs, l.activation))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    /// Checks that consecutive layer widths chain and values are finite.
    pub fn validate(&self) -> Result<()> {
        for w in self.layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(invalid("mlp layer widths do not chain"));
            }
        }
        for l in &self.layers {
            if l.weight.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(invalid("mlp layer storage does not match its widths"));
            }
            if l.weight.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(invalid("mlp parameters must be finite"));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpTape)> {
        if x.len() != self.input_dim() {
            return Err(invalid(format!(
                "mlp expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let mut tape = MlpTape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut cur = x.to_vec();
        for l in &self.layers {
            let mut pre = vec![0.0; l.outputs];
            l.affine(&cur, &mut pre);
            let out = match l.activation {
                Activation::Relu => pre.iter().map(|&v| v.max(0.0)).collect(),
                Activation::Identity => pre.clone(),
            };
            tape.inputs.push(std::mem::replace(&mut cur, out));
            tape.pre.push(pre);
        }
        Ok((cur, tape))
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    pub fn backward(&self, tape: &MlpTape, grad_out: &[f64], grads: &mut Mlp) -> Vec<f64> {
        let mut g = grad_out.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            if l.activation == Activation::Relu {
                for (gv, &p) in g.iter_mut().zip(&tape.pre[li]) {
                    if p <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let x = &tape.inputs[li];
            let gl = &mut grads.layers[li];
            let mut gx = vec![0.0; l.inputs];
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                gl.bias[o] += go;
                let row = o * l.inputs;
                let wrow = &l.weight[row..row + l.inputs];
                let grow = &mut gl.weight[row..row + l.inputs];
                for i in 0..l.inputs {
                    grow[i] += go * x[i];
                    gx[i] += go * wrow[i];
                }
            }
            g = gx;
        }
        g
    }

    pub fn add_assign(&mut self, other: &Mlp) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid("matrix data length does not match its shape"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}
