//! Test-time latent recovery and prediction.
//!
//! For a new `x` the latents are found by maximizing
//! `log p(x | s, z) + sign · (λ_s‖s‖² + λ_z‖z‖²)` over `(s, z)`: the best of
//! `k` draws from N(0, I) seeds an Adam run of `T` steps, and the best iterate
//! seen is returned. The prediction is then read from `p(y | s*)`.
//!
//! Every sample is optimized independently (Adam is elementwise), so a batch
//! is processed as one matrix without coupling rows. Start draws for a batch
//! are keyed by row content, which makes results independent of row order.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, LacimError, Result};
use crate::model::{LacimModel, TargetKind};
use crate::numeric::rng::{content_key, purpose, RngStream};
use crate::numeric::{adam_step, gaussian_log_pdf, AdamConfig, AdamState, Matrix, Tape};
use crate::scm::Targets;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub k_starts: usize,
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda_s: f64,
    pub lambda_z: f64,
    /// `-1` penalizes the squared norms, `+1` rewards them.
    pub penalty_sign: f64,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            k_starts: 10,
            iterations: 50,
            lr: 0.002,
            weight_decay: 0.0002,
            lambda_s: 1e-3,
            lambda_z: 1e-3,
            penalty_sign: -1.0,
            seed: 0,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_starts == 0 {
            return Err(LacimError::Config("k_starts must be at least 1".into()));
        }
        if self.penalty_sign != 1.0 && self.penalty_sign != -1.0 {
            return Err(LacimError::Config(format!("penalty_sign must be ±1, got {}", self.penalty_sign)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferResult {
    pub s: Vec<f64>,
    pub z: Vec<f64>,
    /// Objective of the returned iterate.
    pub objective: f64,
    /// Objective at the initializer and after each Adam step.
    pub trace: Vec<f64>,
}

/// Objective value for each `[s, z]` row against the matching `x` row.
pub fn objective(model: &LacimModel, x: &Matrix, sz: &Matrix, cfg: &InferConfig) -> Result<Vec<f64>> {
    let (mu, ls) = model.decode_x(sz)?;
    let qs = model.dims.q_s;
    Ok((0..x.rows())
        .map(|i| {
            let row = sz.row(i);
            let ns: f64 = row[..qs].iter().map(|v| v * v).sum();
            let nz: f64 = row[qs..].iter().map(|v| v * v).sum();
            gaussian_log_pdf(x.row(i), mu.row(i), ls.row(i))
                + cfg.penalty_sign * (cfg.lambda_s * ns + cfg.lambda_z * nz)
        })
        .collect())
}

fn draw_starts(q: usize, k: usize, rng: &mut RngStream) -> Matrix {
    rng.normal_matrix(k, q)
}

/// Core batched optimization. `starts[i]` holds the `k × q` candidate
/// initializers of row `i`.
fn optimize(model: &LacimModel, x: &Matrix, starts: &[Matrix], cfg: &InferConfig) -> Result<Vec<InferResult>> {
    cfg.validate()?;
    let n = x.rows();
    let q = model.dims.q_sz();
    let qs = model.dims.q_s;
    if x.cols() != model.dims.q_x {
        return Err(dim_err("inference input", model.dims.q_x, x.cols()));
    }

    // Best of k initializers per row.
    let mut current = Matrix::zeros(n, q);
    let mut any_finite = vec![false; n];
    for (i, cand) in starts.iter().enumerate() {
        let xi = Matrix::from_fn(cand.rows(), x.cols(), |_, j| x.get(i, j));
        let vals = objective(model, &xi, cand, cfg)?;
        let mut best = (f64::NEG_INFINITY, 0);
        for (r, &v) in vals.iter().enumerate() {
            if v.is_finite() && v > best.0 {
                best = (v, r);
                any_finite[i] = true;
            }
        }
        for j in 0..q {
            current.set(i, j, cand.get(best.1, j));
        }
    }
    if let Some(i) = any_finite.iter().position(|ok| !ok) {
        return Err(LacimError::NonFinite(format!("inference objective at every start for sample {i}")));
    }

    let adam = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let names = vec!["latents".to_string()];
    let mut state = AdamState::new();
    let mut best = current.clone();
    let mut best_obj = objective(model, x, &current, cfg)?;
    let mut traces: Vec<Vec<f64>> = best_obj.iter().map(|&v| vec![v]).collect();

    let penalty = Matrix::from_fn(1, q, |_, j| {
        cfg.penalty_sign * if j < qs { cfg.lambda_s } else { cfg.lambda_z }
    });
    for _ in 0..cfg.iterations {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let szv = tape.constant(current.clone());
        let lp = model.log_px_tape(&mut tape, xv, szv)?;
        let sq = tape.square(szv);
        let pen_w = tape.constant(Matrix::from_fn(n, q, |_, j| penalty.get(0, j)));
        let pen = tape.mul(sq, pen_w)?;
        let pen = tape.sum_rows(pen);
        let obj = tape.add(lp, pen)?;
        let total = tape.sum(obj);
        let neg = tape.scale(total, -1.0);
        let mut grads = tape.backward(neg)?;
        let g = grads.take(szv);
        adam_step(&mut [&mut current], &[g], &names, &mut state, &adam)?;
        let vals = objective(model, x, &current, cfg)?;
        for i in 0..n {
            traces[i].push(vals[i]);
            if vals[i] > best_obj[i] {
                best_obj[i] = vals[i];
                for j in 0..q {
                    best.set(i, j, current.get(i, j));
                }
            }
        }
    }

    Ok((0..n)
        .map(|i| InferResult {
            s: best.row(i)[..qs].to_vec(),
            z: best.row(i)[qs..].to_vec(),
            objective: best_obj[i],
            trace: std::mem::take(&mut traces[i]),
        })
        .collect())
}

/// Recovers `(s*, z*)` for one input. Start points are drawn from `rng`.
pub fn infer_latents(model: &LacimModel, x: &[f64], cfg: &InferConfig, rng: &mut RngStream) -> Result<InferResult> {
    cfg.validate()?;
    let xm = Matrix::row_vector(x);
    let starts = vec![draw_starts(model.dims.q_sz(), cfg.k_starts, rng)];
    Ok(optimize(model, &xm, &starts, cfg)?.remove(0))
}

/// Stream used for the start points of a sample inside [`predict_batch`].
pub fn sample_stream(x: &[f64], seed: u64) -> RngStream {
    RngStream::for_purpose(seed, purpose::INFER, content_key(x))
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `argmax_y p(y | s)` for each row of `s`: the class with the largest logit
/// (lowest index on ties), or the decoder mean for continuous targets.
pub fn predict(model: &LacimModel, s: &Matrix) -> Result<Targets> {
    if s.cols() != model.dims.q_s {
        return Err(dim_err("predict input", model.dims.q_s, s.cols()));
    }
    let out = model.decode_y(s)?;
    Ok(match model.dims.target {
        TargetKind::Classification { .. } => Targets::Labels((0..out.rows()).map(|i| argmax(out.row(i))).collect()),
        TargetKind::Regression { q_y } => Targets::Continuous(out.slice_cols(0, q_y)),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPrediction {
    pub predictions: Targets,
    pub latents: Vec<InferResult>,
    pub samples_per_second: f64,
}

/// Latent inference and prediction for every row of `xs`.
pub fn predict_batch(model: &LacimModel, xs: &Matrix, cfg: &InferConfig) -> Result<BatchPrediction> {
    cfg.validate()?;
    let q = model.dims.q_sz();
    let started = Instant::now();
    let starts: Vec<Matrix> = (0..xs.rows())
        .map(|i| draw_starts(q, cfg.k_starts, &mut sample_stream(xs.row(i), cfg.seed)))
        .collect();
    let latents = optimize(model, xs, &starts, cfg)?;
    let s = Matrix::from_fn(xs.rows(), model.dims.q_s, |i, j| latents[i].s[j]);
    let predictions = predict(model, &s)?;
    let secs = started.elapsed().as_secs_f64();
    Ok(BatchPrediction {
        predictions,
        latents,
        samples_per_second: if secs > 0.0 { xs.rows() as f64 / secs } else { f64::INFINITY },
    })
}

#[cfg(test)]
mod tests;
