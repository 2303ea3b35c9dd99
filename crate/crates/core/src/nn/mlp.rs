use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensors::{Checkpointable, Tensor, TensorMap};
use crate::error::{check_dims, invalid, Result};
use crate::math::float;
use crate::rng;

/// Number of sinusoid frequencies in the timestep embedding.
pub const TIME_FREQS: usize = 16;
/// Width of the timestep embedding (sine and cosine per frequency).
pub const TIME_EMBED_DIM: usize = 2 * TIME_FREQS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Silu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinalActivation {
    None,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Silu => z * float::sigmoid(z),
            Activation::Tanh => float::tanh(z),
        }
    }

    #[inline]
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = float::sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub final_activation: FinalActivation,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: &[usize],
        output_dim: usize,
        activation: Activation,
        final_activation: FinalActivation,
    ) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            activation,
            final_activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(invalid("every MLP dimension must be at least 1"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each dense layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Weight initialisation scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Orthogonal weights, zero biases; `final_gain` applies to the output layer.
    Orthogonal { hidden_gain: f64, final_gain: f64 },
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.
    ScaledUniform,
    Zeros,
}

/// Dense feed-forward network with parameters stored in one flat vector.
///
/// Layer `l` occupies a row-major `fan_out x fan_in` weight block followed by
/// its `fan_out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    shapes: Vec<(usize, usize)>,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward_tape`] for a later backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `acts[0]` is the input, `acts[l + 1]` the activated output of layer `l`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape has an output")
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Rows of a `rows x cols` matrix with orthonormal rows (or columns when
/// `rows > cols`), scaled by `gain`.
fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (n_vec, len) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n_vec);
    while basis.len() < n_vec {
        let mut v = rng::normal_vec(rng, len);
        for b in &basis {
            let p = dot(&v, b);
            axpy(-p, b, &mut v);
        }
        let norm = float::sqrt(dot(&v, &v));
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut w = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            w[r * cols + c] = gain * if rows <= cols { basis[r][c] } else { basis[c][r] };
        }
    }
    w
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, init: Init, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        let mut params = Vec::with_capacity(spec.param_count());
        let last = shapes.len() - 1;
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            match init {
                Init::Orthogonal { hidden_gain, final_gain } => {
                    let gain = if l == last { final_gain } else { hidden_gain };
                    params.extend(orthogonal(fan_out, fan_in, gain, rng));
                    params.extend(core::iter::repeat_n(0.0, fan_out));
                }
                Init::ScaledUniform => {
                    let bound = 1.0 / float::sqrt(fan_in as f64);
                    for _ in 0..fan_out * fan_in + fan_out {
                        params.push(rng::uniform(rng, -bound, bound));
                    }
                }
                Init::Zeros => params.extend(core::iter::repeat_n(0.0, fan_out * fan_in + fan_out)),
            }
        }
        Ok(Self { spec, shapes, params })
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        check_dims("mlp parameters", spec.param_count(), params.len())?;
        let shapes = spec.layer_shapes();
        Ok(Self { spec, shapes, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dims("mlp parameters", self.params.len(), params.len())?;
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Range of the flat parameter vector holding the output layer's biases.
    pub fn output_bias_range(&self) -> core::ops::Range<usize> {
        let n = self.params.len();
        n - self.spec.output_dim..n
    }

    fn activation_for(&self, layer: usize, z: f64) -> f64 {
        if layer + 1 == self.shapes.len() {
            match self.spec.final_activation {
                FinalActivation::None => z,
                FinalActivation::Tanh => float::tanh(z),
            }
        } else {
            self.spec.activation.apply(z)
        }
    }

    fn derivative_for(&self, layer: usize, z: f64, y: f64) -> f64 {
        if layer + 1 == self.shapes.len() {
            match self.spec.final_activation {
                FinalActivation::None => 1.0,
                FinalActivation::Tanh => 1.0 - y * y,
            }
        } else {
            self.spec.activation.derivative(z, y)
        }
    }

    fn dense(&self, layer: usize, offset: usize, x: &[f64], out: &mut Vec<f64>) {
        let (fan_in, fan_out) = self.shapes[layer];
        let w = &self.params[offset..offset + fan_in * fan_out];
        let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        out.clear();
        out.extend((0..fan_out).map(|o| b[o] + dot(&w[o * fan_in..(o + 1) * fan_in], x)));
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_dims("mlp input", self.spec.input_dim, input.len())?;
        let mut x = input.to_vec();
        let mut y = Vec::new();
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in self.shapes.iter().enumerate() {
            self.dense(l, offset, &x, &mut y);
            for v in y.iter_mut() {
                *v = self.activation_for(l, *v);
            }
            offset += fan_in * fan_out + fan_out;
            core::mem::swap(&mut x, &mut y);
        }
        Ok(x)
    }

    pub fn forward_tape(&self, input: &[f64]) -> Result<Tape> {
        check_dims("mlp input", self.spec.input_dim, input.len())?;
        let mut acts = Vec::with_capacity(self.shapes.len() + 1);
        let mut pre = Vec::with_capacity(self.shapes.len());
        acts.push(input.to_vec());
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in self.shapes.iter().enumerate() {
            let mut z = Vec::with_capacity(fan_out);
            self.dense(l, offset, &acts[l], &mut z);
            let y: Vec<f64> = z.iter().map(|&v| self.activation_for(l, v)).collect();
            pre.push(z);
            acts.push(y);
            offset += fan_in * fan_out + fan_out;
        }
        Ok(Tape { acts, pre })
    }

    fn backward_impl(
        &self,
        tape: &Tape,
        grad_out: &[f64],
        mut grad_params: Option<&mut [f64]>,
    ) -> Result<Vec<f64>> {
        check_dims("mlp output gradient", self.spec.output_dim, grad_out.len())?;
        if let Some(g) = grad_params.as_deref() {
            check_dims("mlp parameter gradient", self.params.len(), g.len())?;
        }
        let mut offset = self.params.len();
        let mut g = grad_out.to_vec();
        for l in (0..self.shapes.len()).rev() {
            let (fan_in, fan_out) = self.shapes[l];
            offset -= fan_in * fan_out + fan_out;
            let z = &tape.pre[l];
            let y = &tape.acts[l + 1];
            for o in 0..fan_out {
                g[o] *= self.derivative_for(l, z[o], y[o]);
            }
            let x = &tape.acts[l];
            if let Some(gp) = grad_params.as_deref_mut() {
                let (gw, gb) = gp[offset..offset + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for o in 0..fan_out {
                    if g[o] != 0.0 {
                        axpy(g[o], x, &mut gw[o * fan_in..(o + 1) * fan_in]);
                    }
                    gb[o] += g[o];
                }
            }
            let w = &self.params[offset..offset + fan_in * fan_out];
            let mut gx = vec![0.0; fan_in];
            for o in 0..fan_out {
                if g[o] != 0.0 {
                    axpy(g[o], &w[o * fan_in..(o + 1) * fan_in], &mut gx);
                }
            }
            g = gx;
        }
        Ok(g)
    }

    /// Accumulates parameter gradients into `grad_params` and returns the input gradient.
    pub fn backward(&self, tape: &Tape, grad_out: &[f64], grad_params: &mut [f64]) -> Result<Vec<f64>> {
        self.backward_impl(tape, grad_out, Some(grad_params))
    }

    /// Input gradient only.
    pub fn input_grad(&self, tape: &Tape, grad_out: &[f64]) -> Result<Vec<f64>> {
        self.backward_impl(tape, grad_out, None)
    }

    /// `target <- (1 - rate) * target + rate * self`, parameterwise.
    pub fn blend_into(&self, target: &mut Mlp, rate: f64) -> Result<()> {
        check_dims("soft update", self.params.len(), target.params.len())?;
        if rate == 1.0 {
            target.params.copy_from_slice(&self.params);
        } else if rate != 0.0 {
            for (t, s) in target.params.iter_mut().zip(&self.params) {
                *t = (1.0 - rate) * *t + rate * s;
            }
        }
        Ok(())
    }
}

impl Checkpointable for Mlp {
    fn save_tensors(&self, prefix: &str, out: &mut TensorMap) {
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in self.shapes.iter().enumerate() {
            let w = self.params[offset..offset + fan_in * fan_out].to_vec();
            offset += fan_in * fan_out;
            let b = self.params[offset..offset + fan_out].to_vec();
            offset += fan_out;
            out.insert(alloc::format!("{prefix}.l{l}.weight"), Tensor::new(vec![fan_out, fan_in], w));
            out.insert(alloc::format!("{prefix}.l{l}.bias"), Tensor::new(vec![fan_out], b));
        }
    }

    fn load_tensors(&mut self, prefix: &str, map: &TensorMap) -> Result<()> {
        let mut params = Vec::with_capacity(self.params.len());
        for (l, &(fan_in, fan_out)) in self.shapes.iter().enumerate() {
            let w = Tensor::fetch(map, &alloc::format!("{prefix}.l{l}.weight"), &[fan_out, fan_in])?;
            let b = Tensor::fetch(map, &alloc::format!("{prefix}.l{l}.bias"), &[fan_out])?;
            params.extend_from_slice(&w.data);
            params.extend_from_slice(&b.data);
        }
        self.params = params;
        Ok(())
    }
}

/// Sinusoidal embedding of an integer timestep with [`TIME_FREQS`] frequencies.
pub fn timestep_embedding(t: usize) -> [f64; TIME_EMBED_DIM] {
    let mut out = [0.0; TIME_EMBED_DIM];
    let tf = t as f64;
    for k in 0..TIME_FREQS {
        let freq = float::exp(-float::ln(10_000.0) * k as f64 / TIME_FREQS as f64);
        out[k] = float::sin(tf * freq);
        out[TIME_FREQS + k] = float::cos(tf * freq);
    }
    out
}

/// `[state, action, embed(t)]`, the input layout of every time-conditioned net.
pub fn time_conditioned_input(state: &[f64], action: &[f64], t: usize) -> Vec<f64> {
    time_conditioned_input_with(state, action, &timestep_embedding(t))
}

/// [`time_conditioned_input`] with a precomputed embedding.
pub fn time_conditioned_input_with(state: &[f64], action: &[f64], embedding: &[f64; TIME_EMBED_DIM]) -> Vec<f64> {
    let mut x = Vec::with_capacity(state.len() + action.len() + TIME_EMBED_DIM);
    x.extend_from_slice(state);
    x.extend_from_slice(action);
    x.extend_from_slice(embedding);
    x
}
