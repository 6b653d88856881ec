use serde::{Deserialize, Serialize};

use super::rng::RngStream;
use super::tape::{Tape, Var};
use super::Matrix;
use crate::error::{dim_err, LacimError, Result};

/// Elementwise LeakyReLU. The derivative convention at 0 is the positive
/// branch (slope 1).
pub fn leaky_relu(x: &[f64], slope: f64) -> Result<Vec<f64>> {
    check_slope(slope)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LacimError::NonFinite("leaky_relu input".into()));
    }
    Ok(x.iter().map(|&v| if v >= 0.0 { v } else { slope * v }).collect())
}

fn check_slope(slope: f64) -> Result<()> {
    if slope > 0.0 && slope <= 1.0 {
        Ok(())
    } else {
        Err(LacimError::InvalidArgument(format!(
            "LeakyReLU slope must lie in (0, 1], got {slope}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `fan_in × fan_out`; inputs are row vectors.
    pub weight: Matrix,
    /// `1 × fan_out`.
    pub bias: Matrix,
}

/// Fully connected network with LeakyReLU between layers.
///
/// With `activate_output` the activation is also applied after the last
/// layer, which is the shape of the ground-truth generator nets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub slope: f64,
    pub activate_output: bool,
}

impl Mlp {
    /// Weights ~ U(−1/√fan_in, 1/√fan_in), biases zero.
    pub fn new(dims: &[usize], slope: f64, activate_output: bool, rng: &mut RngStream) -> Result<Self> {
        Self::with_weight_scale(dims, slope, activate_output, 1.0, rng)
    }

    /// As [`Mlp::new`] with every weight bound multiplied by `scale`.
    pub fn with_weight_scale(
        dims: &[usize],
        slope: f64,
        activate_output: bool,
        scale: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        check_slope(slope)?;
        if dims.len() < 2 || dims.contains(&0) {
            return Err(LacimError::InvalidArgument(format!(
                "MLP needs at least two positive layer sizes, got {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = scale / (w[0] as f64).sqrt();
                Layer {
                    weight: Matrix::from_fn(w[0], w[1], |_, _| rng.uniform_range(-bound, bound)),
                    bias: Matrix::zeros(1, w[1]),
                }
            })
            .collect();
        Ok(Self {
            layers,
            slope,
            activate_output,
        })
    }

    pub fn from_layers(layers: Vec<Layer>, slope: f64, activate_output: bool) -> Result<Self> {
        check_slope(slope)?;
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].weight.cols() != pair[1].weight.rows() {
                return Err(dim_err(
                    format!("Mlp layer {} → {}", i, i + 1),
                    pair[0].weight.cols(),
                    pair[1].weight.rows(),
                ));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != (1, l.weight.cols()) {
                return Err(dim_err(format!("Mlp bias {i}"), format!("(1, {})", l.weight.cols()), format!("{:?}", l.bias.shape())));
            }
        }
        if layers.is_empty() {
            return Err(LacimError::InvalidArgument("MLP without layers".into()));
        }
        Ok(Self {
            layers,
            slope,
            activate_output,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    /// Layer sizes including input.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.weight.cols()));
        d
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.activate_output
    }

    /// Batch forward pass without recording, `x` is `n × input_dim`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(dim_err("Mlp::forward input", self.input_dim(), x.cols()));
        }
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight)?;
            let b = layer.bias.data();
            let cols = h.cols();
            for (k, v) in h.data_mut().iter_mut().enumerate() {
                *v += b[k % cols];
            }
            if self.activated(l) {
                let s = self.slope;
                h = h.map(|v| if v >= 0.0 { v } else { s * v });
            }
        }
        Ok(h)
    }

    /// Recorded forward pass. Parameters are registered on the tape under
    /// keys `key_base + 2·layer` (weight) and `key_base + 2·layer + 1` (bias).
    pub fn forward_tape(&self, tape: &mut Tape, x: Var, key_base: usize) -> Result<Var> {
        if tape.value(x).cols() != self.input_dim() {
            return Err(dim_err("Mlp::forward_tape input", self.input_dim(), tape.value(x).cols()));
        }
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = tape.param(key_base + 2 * l, &layer.weight);
            let b = tape.param(key_base + 2 * l + 1, &layer.bias);
            h = tape.matmul(h, w)?;
            h = tape.add_bias(h, b)?;
            if self.activated(l) {
                h = tape.leaky_relu(h, self.slope);
            }
        }
        Ok(h)
    }

    /// Single-vector forward pass recorded on `tape`.
    pub fn forward_vec(&self, x: &[f64], tape: &mut Tape, key_base: usize) -> Result<(Var, Vec<f64>)> {
        if x.len() != self.input_dim() {
            return Err(dim_err("mlp_forward input", self.input_dim(), x.len()));
        }
        let xv = tape.constant(Matrix::row_vector(x));
        let out = self.forward_tape(tape, xv, key_base)?;
        let values = tape.value(out).data().to_vec();
        Ok((out, values))
    }

    pub fn param_count(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|m| m.is_finite())
    }
}
