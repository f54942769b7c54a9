//! Dense feed-forward networks whose symbolic forward pass emits [`Expr`]
//! outputs.
//!
//! Hidden layers use tanh, the output layer is linear (temperatures are
//! unbounded), and weights follow the Glorot uniform scheme with zero biases.
//! Parameters live in one flat vector — per layer, the row-major weight block
//! (`n_in x n_out`) followed by the bias block — so an optimizer can treat
//! the whole network as a single slice.
//!
//! Each network owns a contiguous block of parameter [`VarId`]s; the outputs
//! of [`Mlp::forward`] are expressions over both the input variables and
//! those parameter variables, so they can be differentiated with respect to
//! either (inputs for PDE residuals, parameters for training).

use std::io::{Read, Write};

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Binding, Expr, VarId};

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("layer sizes need at least input and output dimensions, got {0:?}")]
    TooFewLayers(Vec<usize>),
    #[error("layer sizes must be positive, got {0:?}")]
    ZeroWidthLayer(Vec<usize>),
    #[error("expected {expected} inputs, got {got}")]
    InputDimension { expected: usize, got: usize },
    #[error("expected {expected} parameters, got {got}")]
    ParamLength { expected: usize, got: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

/// Dense tanh network with a linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
    param_vars: Vec<VarId>,
}

/// Number of parameters implied by a layer-size list.
pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes
        .windows(2)
        .map(|w| w[0] * w[1] + w[1])
        .sum()
}

impl Mlp {
    /// Builds a network with weights drawn uniform on `(-b, b)`,
    /// `b = sqrt(6 / (fan_in + fan_out))`, and zero biases. Deterministic
    /// given the seed.
    pub fn glorot_init(seed: u64, layer_sizes: &[usize]) -> Result<Mlp, NetworkError> {
        if layer_sizes.len() < 2 {
            return Err(NetworkError::TooFewLayers(layer_sizes.to_vec()));
        }
        if layer_sizes.iter().any(|&n| n == 0) {
            return Err(NetworkError::ZeroWidthLayer(layer_sizes.to_vec()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(layer_sizes));
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new(-bound, bound);
            params.extend((0..fan_in * fan_out).map(|_| dist.sample(&mut rng)));
            params.extend(std::iter::repeat(0.0).take(fan_out));
        }
        let param_vars = VarId::fresh_block(params.len());
        Ok(Mlp {
            layer_sizes: layer_sizes.to_vec(),
            params,
            param_vars,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), NetworkError> {
        if params.len() != self.params.len() {
            return Err(NetworkError::ParamLength {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// The parameter variables used by [`Mlp::forward`], aligned with
    /// [`Mlp::params`].
    pub fn param_vars(&self) -> &[VarId] {
        &self.param_vars
    }

    /// Inserts the current parameter values into a binding so symbolic
    /// outputs can be evaluated.
    pub fn bind_params(&self, binding: &mut Binding) {
        for (var, value) in self.param_vars.iter().zip(&self.params) {
            binding.set(*var, *value);
        }
    }

    /// Symbolic forward pass: outputs are expressions over the given input
    /// expressions and this network's parameter variables.
    pub fn forward(&self, inputs: &[Expr]) -> Result<Vec<Expr>, NetworkError> {
        if inputs.len() != self.input_dim() {
            return Err(NetworkError::InputDimension {
                expected: self.input_dim(),
                got: inputs.len(),
            });
        }
        let n_layers = self.layer_sizes.len() - 1;
        let mut activations: Vec<Expr> = inputs.to_vec();
        let mut offset = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let weights = &self.param_vars[offset..offset + n_in * n_out];
            let biases = &self.param_vars[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let mut next = Vec::with_capacity(n_out);
            for j in 0..n_out {
                let mut z = Expr::var(biases[j]);
                for (i, a) in activations.iter().enumerate() {
                    z = z + Expr::var(weights[i * n_out + j]) * a;
                }
                next.push(if l + 1 < n_layers { z.tanh() } else { z });
            }
            activations = next;
        }
        Ok(activations)
    }

    /// Plain numeric forward pass (no graph construction).
    pub fn forward_values(&self, inputs: &[f64]) -> Result<Vec<f64>, NetworkError> {
        Ok(self.forward_trace(inputs)?.pop().unwrap())
    }

    /// Numeric forward pass returning every post-activation layer, hidden
    /// layers first and the linear output last.
    pub(crate) fn forward_trace(&self, inputs: &[f64]) -> Result<Vec<Vec<f64>>, NetworkError> {
        if inputs.len() != self.input_dim() {
            return Err(NetworkError::InputDimension {
                expected: self.input_dim(),
                got: inputs.len(),
            });
        }
        let n_layers = self.layer_sizes.len() - 1;
        let mut trace = Vec::with_capacity(n_layers);
        let mut activations = inputs.to_vec();
        let mut offset = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let weights = &self.params[offset..offset + n_in * n_out];
            let biases = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let mut next = vec![0.0; n_out];
            for (j, out) in next.iter_mut().enumerate() {
                let mut z = biases[j];
                for (i, a) in activations.iter().enumerate() {
                    z += weights[i * n_out + j] * a;
                }
                *out = if l + 1 < n_layers { z.tanh() } else { z };
            }
            trace.push(next.clone());
            activations = next;
        }
        Ok(trace)
    }

    /// Writes the checkpoint: `u32` layer count, `u32` layer sizes, then the
    /// flat parameter vector, all little-endian with 64-bit float params.
    pub fn save(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.layer_sizes.len() as u32).to_le_bytes())?;
        for &n in &self.layer_sizes {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        for &p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a checkpoint written by [`Mlp::save`]. Fresh parameter variables
    /// are allocated for the loaded network.
    pub fn load(r: &mut impl Read) -> Result<Mlp, NetworkError> {
        let mut u32buf = [0u8; 4];
        let bad = |what: &str| NetworkError::Checkpoint(what.to_string());
        r.read_exact(&mut u32buf)
            .map_err(|_| bad("missing layer count"))?;
        let n_layers = u32::from_le_bytes(u32buf) as usize;
        if n_layers < 2 || n_layers > 64 {
            return Err(bad("implausible layer count"));
        }
        let mut layer_sizes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            r.read_exact(&mut u32buf)
                .map_err(|_| bad("truncated layer sizes"))?;
            layer_sizes.push(u32::from_le_bytes(u32buf) as usize);
        }
        if layer_sizes.iter().any(|&n| n == 0) {
            return Err(NetworkError::ZeroWidthLayer(layer_sizes));
        }
        let count = param_count(&layer_sizes);
        let mut params = Vec::with_capacity(count);
        let mut f64buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut f64buf)
                .map_err(|_| bad("truncated parameters"))?;
            params.push(f64::from_le_bytes(f64buf));
        }
        let param_vars = VarId::fresh_block(params.len());
        Ok(Mlp {
            layer_sizes,
            params,
            param_vars,
        })
    }
}
