//! Dense tensors and the layers the encoders are built from, each with a
//! forward pass that records what its backward pass needs.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
    }

    pub fn fill_uniform<R: Rng>(&mut self, rng: &mut R, limit: f64) {
        for v in &mut self.data {
            *v = rng.gen_range(-limit..limit);
        }
    }

    /// Glorot-uniform over a `[fan_in, fan_out]` matrix.
    pub fn fill_glorot<R: Rng>(&mut self, rng: &mut R) {
        let (fan_in, fan_out) = (self.shape[0], self.shape[1]);
        self.fill_uniform(rng, (6.0 / (fan_in + fan_out) as f64).sqrt());
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.shape[1];
        &mut self.data[r * cols..(r + 1) * cols]
    }
}

pub(crate) fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}

pub(crate) fn add_scaled_into(acc: &mut [f64], x: &[f64], scale: f64) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += scale * v;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `y = xW + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut y = self.bias.data.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                add_scaled_into(&mut y, self.weight.row(i), xi);
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense) -> Vec<f64> {
        add_into(&mut grad.bias.data, dy);
        let mut dx = vec![0.0; x.len()];
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                add_scaled_into(grad.weight.row_mut(i), dy, xi);
            }
            dx[i] = dot(self.weight.row(i), dy);
        }
        dx
    }
}

/// Stack of dense layers: ReLU after every layer but the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl MlpCache {
    /// Appends the sign of every hidden pre-activation.
    pub fn relu_pattern(&self, out: &mut Vec<bool>) {
        let hidden = self.pre.len().saturating_sub(1);
        for z in &self.pre[..hidden] {
            out.extend(z.iter().map(|&v| v > 0.0));
        }
    }
}

impl Mlp {
    pub fn zeros(input: usize, dims: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(dims.len());
        let mut prev = input;
        for &d in dims {
            layers.push(Dense::zeros(prev, d));
            prev = d;
        }
        Mlp { layers }
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            let next = if l == last {
                z.clone()
            } else {
                z.iter().map(|&v| v.max(0.0)).collect()
            };
            cache.inputs.push(std::mem::replace(&mut h, next));
            cache.pre.push(z);
        }
        (h, cache)
    }

    pub fn backward(&self, cache: &MlpCache, dy: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let mut d = dy.to_vec();
        let last = self.layers.len() - 1;
        for l in (0..self.layers.len()).rev() {
            if l != last {
                for (g, &z) in d.iter_mut().zip(&cache.pre[l]) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            d = self.layers[l].backward(&cache.inputs[l], &d, &mut grad.layers[l]);
        }
        d
    }
}

/// LSTM weights. Gate blocks along the `4h` axis are ordered
/// input, forget, output, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub w_input: Tensor,
    pub w_hidden: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct LstmStep {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates `[i, f, o, g]`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

impl Lstm {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Lstm {
            w_input: Tensor::zeros(&[input, 4 * hidden]),
            w_hidden: Tensor::zeros(&[hidden, 4 * hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_input.shape[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hidden.shape[0]
    }

    fn step_inner(&self, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>, LstmStep) {
        let hd = self.hidden_dim();
        let mut z = self.bias.data.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                add_scaled_into(&mut z, self.w_input.row(i), xi);
            }
        }
        for (i, &hi) in h.iter().enumerate() {
            if hi != 0.0 {
                add_scaled_into(&mut z, self.w_hidden.row(i), hi);
            }
        }
        let mut gates = z;
        for (k, g) in gates.iter_mut().enumerate() {
            *g = if k < 3 * hd { sigmoid(*g) } else { g.tanh() };
        }
        let mut c_new = vec![0.0; hd];
        let mut h_new = vec![0.0; hd];
        let mut tanh_c = vec![0.0; hd];
        for j in 0..hd {
            let (i, f, o, g) = (gates[j], gates[hd + j], gates[2 * hd + j], gates[3 * hd + j]);
            c_new[j] = f * c[j] + i * g;
            tanh_c[j] = c_new[j].tanh();
            h_new[j] = o * tanh_c[j];
        }
        let step = LstmStep {
            x: x.to_vec(),
            h_prev: h.to_vec(),
            c_prev: c.to_vec(),
            gates,
            tanh_c,
        };
        (h_new, c_new, step)
    }

    /// One cell update `(x, h, c) -> (h', c')`.
    pub fn step(&self, x: &[f64], h: &[f64], c: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let check = |found: usize, expected: usize, what: &str| {
            if found == expected {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    expected,
                    found,
                    context: format!("lstm {what}"),
                })
            }
        };
        check(x.len(), self.input_dim(), "input")?;
        check(h.len(), self.hidden_dim(), "hidden state")?;
        check(c.len(), self.hidden_dim(), "cell state")?;
        let (h, c, _) = self.step_inner(x, h, c);
        Ok((h, c))
    }

    /// Runs the cell from a zero state and returns the final hidden state.
    pub fn run<'a, I>(&self, inputs: I) -> (Vec<f64>, Vec<LstmStep>)
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let hd = self.hidden_dim();
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        let mut steps = Vec::new();
        for x in inputs {
            let (h2, c2, step) = self.step_inner(x, &h, &c);
            h = h2;
            c = c2;
            steps.push(step);
        }
        (h, steps)
    }

    /// Backpropagates `dL/dh_final` through time; returns `dL/dx` per step.
    pub fn backward(&self, steps: &[LstmStep], dh_final: &[f64], grad: &mut Lstm) -> Vec<Vec<f64>> {
        let hd = self.hidden_dim();
        let mut dh = dh_final.to_vec();
        let mut dc = vec![0.0; hd];
        let mut dxs = vec![Vec::new(); steps.len()];
        let mut dz = vec![0.0; 4 * hd];
        for (t, s) in steps.iter().enumerate().rev() {
            for j in 0..hd {
                let (i, f, o, g) = (s.gates[j], s.gates[hd + j], s.gates[2 * hd + j], s.gates[3 * hd + j]);
                let tc = s.tanh_c[j];
                let dcj = dc[j] + dh[j] * o * (1.0 - tc * tc);
                dz[j] = dcj * g * i * (1.0 - i);
                dz[hd + j] = dcj * s.c_prev[j] * f * (1.0 - f);
                dz[2 * hd + j] = dh[j] * tc * o * (1.0 - o);
                dz[3 * hd + j] = dcj * i * (1.0 - g * g);
                dc[j] = dcj * f;
            }
            add_into(&mut grad.bias.data, &dz);
            let mut dx = vec![0.0; s.x.len()];
            for (r, &xr) in s.x.iter().enumerate() {
                if xr != 0.0 {
                    add_scaled_into(grad.w_input.row_mut(r), &dz, xr);
                }
                dx[r] = dot(self.w_input.row(r), &dz);
            }
            for (r, &hr) in s.h_prev.iter().enumerate() {
                if hr != 0.0 {
                    add_scaled_into(grad.w_hidden.row_mut(r), &dz, hr);
                }
                dh[r] = dot(self.w_hidden.row(r), &dz);
            }
            dxs[t] = dx;
        }
        dxs
    }
}

/// `x / ‖x‖`, failing on the zero vector.
pub fn l2_normalize(x: &[f64]) -> Option<(Vec<f64>, f64)> {
    let norm = dot(x, x).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some((x.iter().map(|v| v / norm).collect(), norm))
}

/// Gradient through `y = x / ‖x‖` given `y`, `‖x‖` and `dL/dy`.
pub fn l2_normalize_backward(y: &[f64], norm: f64, dy: &[f64]) -> Vec<f64> {
    let proj = dot(y, dy);
    y.iter().zip(dy).map(|(yi, gi)| (gi - yi * proj) / norm).collect()
}
