//! Time-conditioned MLP denoiser: sinusoidal step embedding through a small
//! FC-Swish-FC block, concatenated with the noisy input and the condition,
//! then fully-connected layers.

use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoise, Parameterization};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Parameter, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Swish,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub condition_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub time_embed_dim: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Swish
}

impl DenoiserConfig {
    /// Desk-scale sizes for 2-D point data.
    pub fn toy(input_dim: usize) -> Self {
        Self {
            input_dim,
            condition_dim: 0,
            hidden_dims: vec![128, 128, 128],
            time_embed_dim: 32,
            activation: Activation::Swish,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("denoiser input_dim must be >= 1"));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::config(format!(
                "time_embed_dim must be even and >= 2, got {}",
                self.time_embed_dim
            )));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden layer widths must be >= 1"));
        }
        Ok(())
    }

    /// `(name, shape)` of every parameter tensor, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let e = self.time_embed_dim;
        let mut out = vec![
            ("time.w1".to_string(), vec![e, e]),
            ("time.b1".to_string(), vec![e]),
            ("time.w2".to_string(), vec![e, e]),
            ("time.b2".to_string(), vec![e]),
        ];
        let mut width = self.input_dim + e + self.condition_dim;
        for (i, &h) in self.hidden_dims.iter().enumerate() {
            out.push((format!("hidden{i}.w"), vec![width, h]));
            out.push((format!("hidden{i}.b"), vec![h]));
            width = h;
        }
        out.push(("out.w".to_string(), vec![width, self.input_dim]));
        out.push(("out.b".to_string(), vec![self.input_dim]));
        out
    }
}

/// Sinusoidal embedding: entry `2k` is `sin(t w_k)`, `2k+1` is `cos(t w_k)`,
/// `w_k = 10000^(-2k/dim)`.
pub fn time_embedding(t: usize, dim: usize, max_t: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::config(format!("time embedding dimension must be even, got {dim}")));
    }
    if t > max_t {
        return Err(Error::Index { index: t, max: max_t });
    }
    let mut out = vec![0.0; dim];
    write_embedding(t, &mut out);
    Ok(Tensor::vector(out))
}

fn write_embedding(t: usize, out: &mut [f64]) {
    let dim = out.len();
    for k in 0..dim / 2 {
        let w = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        let (s, c) = (t as f64 * w).sin_cos();
        out[2 * k] = s;
        out[2 * k + 1] = c;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    pub params: Vec<Parameter>,
    pub parameterization: Parameterization,
    /// The network sees step `t` as `t * time_stride`; distilled students
    /// keep their teachers' time axis this way.
    pub time_stride: usize,
}

impl DenoiserModel {
    /// Weights ~ N(0, 1/fan_in), biases 0, output layer 0.
    pub fn new(config: DenoiserConfig, parameterization: Parameterization, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let shapes = config.parameter_shapes();
        let last = shapes.len() - 2;
        let params = shapes
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let value = if shape.len() == 2 && i < last {
                    let sd = (1.0 / shape[0] as f64).sqrt();
                    rng.normal_tensor(&shape).scale(sd)
                } else {
                    Tensor::zeros(&shape)
                };
                Parameter::new(name, value)
            })
            .collect();
        Ok(Self {
            config,
            params,
            parameterization,
            time_stride: 1,
        })
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Checks parameter names and shapes against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = self.config.parameter_shapes();
        if expected.len() != self.params.len() {
            return Err(Error::shape(format!(
                "config implies {} parameter tensors, model has {}",
                expected.len(),
                self.params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&self.params) {
            if name != &p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::shape(format!(
                    "parameter `{}` has shape {:?}; config expects `{name}` with {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        if self.time_stride == 0 {
            return Err(Error::config("time_stride must be >= 1"));
        }
        Ok(())
    }

    pub fn time_features(&self, steps: &[usize]) -> Tensor {
        let e = self.config.time_embed_dim;
        let mut data = vec![0.0; steps.len() * e];
        for (row, &t) in data.chunks_mut(e).zip(steps) {
            write_embedding(t * self.time_stride, row);
        }
        Tensor::from_parts(vec![steps.len(), e], data)
    }

    fn check_inputs(&self, x: &Tensor, steps: &[usize], cond: &Tensor) -> Result<()> {
        let (n, d) = x.dims2()?;
        if d != self.config.input_dim {
            return Err(Error::shape(format!(
                "denoiser expects input dim {}, got {d}",
                self.config.input_dim
            )));
        }
        let (cn, cd) = cond.dims2()?;
        if cd != self.config.condition_dim || cn != n {
            return Err(Error::shape(format!(
                "condition must be [{n}, {}], got [{cn}, {cd}]",
                self.config.condition_dim
            )));
        }
        if steps.len() != n {
            return Err(Error::shape(format!("{} steps for a batch of {n}", steps.len())));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. `params` are the tape handles for
    /// `self.params` (leaves when training, constants when frozen).
    pub fn forward_on<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        x_t: Var<'t>,
        steps: &[usize],
        cond: Var<'t>,
    ) -> Result<Var<'t>> {
        self.check_inputs(&x_t.value(), steps, &cond.value())?;
        let act = |v: Var<'t>| match self.config.activation {
            Activation::Swish => v.swish(),
            Activation::Relu => v.relu(),
        };
        let temb = tape.constant(self.time_features(steps));
        let h = temb.matmul(params[0])?.add_row(params[1])?.swish()?;
        let h = h.matmul(params[2])?.add_row(params[3])?;
        let mut z = tape.concat_cols(&[x_t, h, cond])?;
        let mut i = 4;
        for _ in &self.config.hidden_dims {
            z = act(z.matmul(params[i])?.add_row(params[i + 1])?)?;
            i += 2;
        }
        z.matmul(params[i])?.add_row(params[i + 1])
    }

    /// Forward pass with one step per batch row.
    pub fn forward_steps(&self, x_t: &Tensor, steps: &[usize], cond: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params: Vec<Var<'_>> = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        let x = tape.constant(x_t.clone());
        let c = tape.constant(cond.clone());
        let out = self.forward_on(&tape, &params, x, steps, c)?;
        let v = out.value().clone();
        Ok(v)
    }

    pub fn forward(&self, x_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        self.forward_steps(x_t, &vec![t; x_t.rows()], cond)
    }

    /// Empty `[n, 0]` condition for unconditional models.
    pub fn no_condition(n: usize) -> Tensor {
        Tensor::zeros(&[n, 0])
    }
}

impl Denoise for DenoiserModel {
    fn predict(&self, x_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        self.forward(x_t, t, cond)
    }
}
