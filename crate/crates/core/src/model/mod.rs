//! The learnable multi-environment latent model.
//!
//! Each environment `e` has its own prior `p_e(s, z)` and its own encoder
//! head for `q_e(s, z | x)` on top of a shared trunk. The decoders
//! `p(x | s, z)` and `p(y | s)` are shared by all environments. Training
//! minimizes, per environment and per sample,
//!
//! ```text
//! −log q_e(y|x) − E_{q_e(s,z|x)} [ p(y|s)/q_e(y|x) · log( p(x|s,z) p_e(s,z) / q_e(s,z|x) ) ]
//! ```
//!
//! with `q_e(y|x) = ∫ q_e(s|x) p(y|s) ds` estimated from the same `L`
//! reparameterized draws used for the outer expectation. With shared draws
//! the ratio weights are `L · softmax_l(log p(y|s_l))`.

mod checkpoint;
mod erm;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use erm::{train_erm_baseline, ErmModel};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, LacimError, Result};
use crate::numeric::rng::{purpose, RngStream};
use crate::numeric::{adam_step, gaussian_log_density, AdamConfig, AdamState, Matrix, Mlp, Tape, Var, LOG_STD_MAX};
use crate::scm::{EnvDataset, Observed, Targets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Gaussian `p(y|s)` over `q_y` outputs.
    Regression { q_y: usize },
    /// Categorical `p(y|s)` over `classes` labels.
    Classification { classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub q_x: usize,
    pub q_s: usize,
    pub q_z: usize,
    pub target: TargetKind,
    /// Number of environments (one prior and one encoder head each).
    pub m: usize,
}

impl ModelDims {
    pub fn q_sz(&self) -> usize {
        self.q_s + self.q_z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub prior_hidden: usize,
    pub trunk_hidden: usize,
    pub head_hidden: usize,
    pub decoder_hidden: usize,
    pub slope: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            prior_hidden: 16,
            trunk_hidden: 64,
            head_hidden: 64,
            decoder_hidden: 64,
            slope: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Lacim,
    Pooled,
    Erm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Rows per iteration summed over environments, split evenly.
    pub batch_size: usize,
    pub iterations: usize,
    /// Reparameterized draws per sample.
    pub mc_samples: usize,
    pub mode: TrainMode,
    pub seed: u64,
    /// Clamp `p(y|s)/q(y|x)` to `[1e-6, 1e6]`.
    pub clamp_ratio: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 0.0,
            batch_size: 512,
            iterations: 2000,
            mc_samples: 8,
            mode: TrainMode::Lacim,
            seed: 0,
            clamp_ratio: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 {
            return Err(LacimError::Config("mc_samples must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(LacimError::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(LacimError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

pub const RATIO_MIN: f64 = 1e-6;
pub const RATIO_MAX: f64 = 1e6;
/// Every Gaussian head clamps its log-std to this range, so a single
/// far-out Monte Carlo draw cannot blow the loss up through `exp(-2 log σ)`.
pub const LOG_STD_RANGE: (f64, f64) = (-6.0, LOG_STD_MAX);

fn bound_log_std(m: Matrix) -> Matrix {
    m.map(|v| v.clamp(LOG_STD_RANGE.0, LOG_STD_RANGE.1))
}

/// Diagonal-Gaussian posterior parameters for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean_s: Matrix,
    pub log_std_s: Matrix,
    pub mean_z: Matrix,
    pub log_std_z: Matrix,
}

/// Parameter groups, in the fixed order used for keys and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Prior(usize),
    Trunk,
    Head(usize),
    DecX,
    DecY,
}

impl Group {
    pub fn name(&self) -> String {
        match self {
            Group::Prior(e) => format!("prior[{}]", e + 1),
            Group::Trunk => "trunk".into(),
            Group::Head(e) => format!("head[{}]", e + 1),
            Group::DecX => "dec_x".into(),
            Group::DecY => "dec_y".into(),
        }
    }

    /// Whether the group belongs to a single environment.
    pub fn env_specific(&self) -> bool {
        matches!(self, Group::Prior(_) | Group::Head(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LacimModel {
    pub dims: ModelDims,
    pub arch: Architecture,
    pub priors: Vec<Mlp>,
    pub trunk: Mlp,
    pub heads: Vec<Mlp>,
    pub dec_x: Mlp,
    pub dec_y: Mlp,
}

/// Loss trace of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

/// Per-term values of one ELBO evaluation, used for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub log_q_y: f64,
    pub log_px: f64,
    pub log_prior: f64,
    pub log_q: f64,
}

struct ElboNodes {
    /// `n × 1` per-sample loss.
    per_sample: Var,
    log_q_y: Var,
    log_px: Var,
    log_prior: Var,
    log_q: Var,
}

impl LacimModel {
    pub fn new(dims: ModelDims, arch: Architecture, seed: u64) -> Result<Self> {
        if dims.m == 0 || dims.q_s == 0 || dims.q_z == 0 || dims.q_x == 0 {
            return Err(LacimError::InvalidArgument(format!("invalid model dims {dims:?}")));
        }
        let y_out = match dims.target {
            TargetKind::Regression { q_y } => 2 * q_y,
            TargetKind::Classification { classes } => {
                if classes < 2 {
                    return Err(LacimError::InvalidArgument("classification needs ≥ 2 classes".into()));
                }
                classes
            }
        };
        let mut rng = RngStream::for_purpose(seed, purpose::MODEL_INIT, 0);
        let q2 = 2 * dims.q_sz();
        let s = arch.slope;
        let priors = (0..dims.m)
            .map(|_| Mlp::new(&[dims.m, arch.prior_hidden, arch.prior_hidden, q2], s, false, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let trunk = Mlp::new(&[dims.q_x, arch.trunk_hidden], s, true, &mut rng)?;
        let heads = (0..dims.m)
            .map(|_| Mlp::new(&[arch.trunk_hidden, arch.head_hidden, q2], s, false, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let h = arch.decoder_hidden;
        let dec_x = Mlp::new(&[dims.q_sz(), h, h, 2 * dims.q_x], s, false, &mut rng)?;
        let dec_y = Mlp::new(&[dims.q_s, h, h, y_out], s, false, &mut rng)?;
        Ok(Self {
            dims,
            arch,
            priors,
            trunk,
            heads,
            dec_x,
            dec_y,
        })
    }

    pub fn m(&self) -> usize {
        self.dims.m
    }

    pub fn groups(&self) -> Vec<Group> {
        let m = self.dims.m;
        let mut g: Vec<Group> = (0..m).map(Group::Prior).collect();
        g.push(Group::Trunk);
        g.extend((0..m).map(Group::Head));
        g.push(Group::DecX);
        g.push(Group::DecY);
        g
    }

    pub fn group(&self, g: Group) -> &Mlp {
        match g {
            Group::Prior(e) => &self.priors[e],
            Group::Trunk => &self.trunk,
            Group::Head(e) => &self.heads[e],
            Group::DecX => &self.dec_x,
            Group::DecY => &self.dec_y,
        }
    }

    pub fn group_mut(&mut self, g: Group) -> &mut Mlp {
        match g {
            Group::Prior(e) => &mut self.priors[e],
            Group::Trunk => &mut self.trunk,
            Group::Head(e) => &mut self.heads[e],
            Group::DecX => &mut self.dec_x,
            Group::DecY => &mut self.dec_y,
        }
    }

    /// First tape key of a group.
    pub fn key_base(&self, g: Group) -> usize {
        let mut base = 0;
        for h in self.groups() {
            if h == g {
                return base;
            }
            base += self.group(h).param_count();
        }
        unreachable!("group {g:?} not in model")
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for g in self.groups() {
            for l in 0..self.group(g).layers.len() {
                names.push(format!("{}.w{l}", g.name()));
                names.push(format!("{}.b{l}", g.name()));
            }
        }
        names
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.groups().into_iter().flat_map(|g| self.group(g).params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let Self {
            priors,
            trunk,
            heads,
            dec_x,
            dec_y,
            ..
        } = self;
        let mut out: Vec<&mut Matrix> = Vec::new();
        for p in priors.iter_mut() {
            out.extend(p.params_mut());
        }
        out.extend(trunk.params_mut());
        for h in heads.iter_mut() {
            out.extend(h.params_mut());
        }
        out.extend(dec_x.params_mut());
        out.extend(dec_y.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    fn check_env(&self, e: usize) -> Result<()> {
        if e == 0 || e > self.dims.m {
            return Err(LacimError::InvalidArgument(format!(
                "environment {e} outside 1..={}",
                self.dims.m
            )));
        }
        Ok(())
    }

    fn one_hot(&self, e: usize) -> Matrix {
        Matrix::from_fn(1, self.dims.m, |_, j| if j + 1 == e { 1.0 } else { 0.0 })
    }

    fn split_params(&self, tape: &mut Tape, out: Var, half: usize) -> Result<(Var, Var)> {
        let mean = tape.slice_cols(out, 0, half)?;
        let raw = tape.slice_cols(out, half, 2 * half)?;
        Ok((mean, tape.clamp(raw, LOG_STD_RANGE.0, LOG_STD_RANGE.1)))
    }

    /// Encoder `(mean, log_std)` of `[s, z]` recorded on the tape.
    pub fn encode_tape(&self, tape: &mut Tape, x: Var, e: usize) -> Result<(Var, Var)> {
        self.check_env(e)?;
        let h = self.trunk.forward_tape(tape, x, self.key_base(Group::Trunk))?;
        let out = self.heads[e - 1].forward_tape(tape, h, self.key_base(Group::Head(e - 1)))?;
        self.split_params(tape, out, self.dims.q_sz())
    }

    /// Prior `(mean, log_std)` of `[s, z]` in environment `e`, as 1-row nodes.
    pub fn prior_tape(&self, tape: &mut Tape, e: usize) -> Result<(Var, Var)> {
        self.check_env(e)?;
        let onehot = tape.constant(self.one_hot(e));
        let out = self.priors[e - 1].forward_tape(tape, onehot, self.key_base(Group::Prior(e - 1)))?;
        self.split_params(tape, out, self.dims.q_sz())
    }

    /// `log p(x | s, z)` per row, `n × 1`.
    pub fn log_px_tape(&self, tape: &mut Tape, x: Var, sz: Var) -> Result<Var> {
        let out = self.dec_x.forward_tape(tape, sz, self.key_base(Group::DecX))?;
        let (mu, ls) = self.split_params(tape, out, self.dims.q_x)?;
        gaussian_log_density(tape, x, mu, ls)
    }

    /// Decoder output for `y` given `s`: `(mean, log_std)` stacked, or logits.
    pub fn y_head_tape(&self, tape: &mut Tape, s: Var) -> Result<Var> {
        self.dec_y.forward_tape(tape, s, self.key_base(Group::DecY))
    }

    /// `log p(y | s)` per row, `n × 1`. `y` is a one-hot matrix for
    /// classification and the raw targets for regression.
    pub fn log_py_tape(&self, tape: &mut Tape, y: Var, s: Var) -> Result<Var> {
        let out = self.y_head_tape(tape, s)?;
        match self.dims.target {
            TargetKind::Regression { q_y } => {
                let (mu, ls) = self.split_params(tape, out, q_y)?;
                gaussian_log_density(tape, y, mu, ls)
            }
            TargetKind::Classification { .. } => {
                let lp = tape.log_softmax_rows(out);
                let picked = tape.mul(lp, y)?;
                Ok(tape.sum_rows(picked))
            }
        }
    }

    /// Targets as a dense matrix: raw values, or one-hot rows for labels.
    pub fn target_matrix(&self, y: &Targets) -> Result<Matrix> {
        match (self.dims.target, y) {
            (TargetKind::Regression { q_y }, Targets::Continuous(m)) => {
                if m.cols() != q_y {
                    return Err(dim_err("regression targets", q_y, m.cols()));
                }
                Ok(m.clone())
            }
            (TargetKind::Classification { classes }, Targets::Labels(l)) => {
                if let Some(&bad) = l.iter().find(|&&c| c >= classes) {
                    return Err(LacimError::InvalidArgument(format!("label {bad} ≥ {classes} classes")));
                }
                Ok(Matrix::from_fn(l.len(), classes, |i, j| if l[i] == j { 1.0 } else { 0.0 }))
            }
            _ => Err(LacimError::InvalidArgument("target kind does not match the model".into())),
        }
    }

    fn elbo_nodes(
        &self,
        tape: &mut Tape,
        x: &Matrix,
        y: &Matrix,
        e: usize,
        mc: usize,
        rng: &mut RngStream,
        clamp_ratio: bool,
    ) -> Result<ElboNodes> {
        self.check_env(e)?;
        if x.cols() != self.dims.q_x {
            return Err(dim_err("elbo input x", self.dims.q_x, x.cols()));
        }
        if mc == 0 {
            return Err(LacimError::InvalidArgument("need at least one Monte Carlo draw".into()));
        }
        let n = x.rows();
        let q = self.dims.q_sz();
        let xv = tape.constant(x.clone());
        let (mu, ls) = self.encode_tape(tape, xv, e)?;
        // Draw-major stacking: rows l·n .. (l+1)·n hold draw l.
        let mu_r = tape.tile_rows(mu, mc)?;
        let ls_r = tape.tile_rows(ls, mc)?;
        let eps = rng.normal_matrix(mc * n, q);
        let sz = tape.gaussian_sample(mu_r, ls_r, eps)?;
        let s = tape.slice_cols(sz, 0, self.dims.q_s)?;

        let x_r = tape.constant(tile(x, mc));
        let y_r = tape.constant(tile(y, mc));
        let log_px = self.log_px_tape(tape, x_r, sz)?;
        let log_py = self.log_py_tape(tape, y_r, s)?;
        let (pm, pl) = self.prior_tape(tape, e)?;
        let pm_r = tape.tile_rows(pm, mc * n)?;
        let pl_r = tape.tile_rows(pl, mc * n)?;
        let log_prior = gaussian_log_density(tape, sz, pm_r, pl_r)?;
        let log_q = gaussian_log_density(tape, sz, mu_r, ls_r)?;

        // (mc·n)×1 → n×mc
        let to_cols = |tape: &mut Tape, v: Var| -> Result<Var> {
            let r = tape.reshape(v, mc, n)?;
            Ok(tape.transpose(r))
        };
        let lpy = to_cols(tape, log_py)?;
        let lse = tape.logsumexp_rows(lpy);
        let log_q_y = tape.add_scalar(lse, -(mc as f64).ln());
        let centered = tape.sub_col_broadcast(lpy, log_q_y)?;
        let log_w = if clamp_ratio {
            tape.clamp(centered, RATIO_MIN.ln(), RATIO_MAX.ln())
        } else {
            centered
        };
        let w = tape.exp(log_w);
        let a = tape.add(log_px, log_prior)?;
        let inner = tape.sub(a, log_q)?;
        let inner = to_cols(tape, inner)?;
        let weighted = tape.mul(w, inner)?;
        let wsum = tape.sum_rows(weighted);
        let wmean = tape.scale(wsum, 1.0 / mc as f64);
        let neg = tape.add(log_q_y, wmean)?;
        let per_sample = tape.scale(neg, -1.0);
        Ok(ElboNodes {
            per_sample,
            log_q_y,
            log_px,
            log_prior,
            log_q,
        })
    }

    /// Mean loss over the batch as a scalar node. Non-finite values are
    /// reported with the first diverging term.
    pub fn elbo_env_tape(
        &self,
        tape: &mut Tape,
        batch: Observed<'_>,
        mc: usize,
        rng: &mut RngStream,
        clamp_ratio: bool,
    ) -> Result<Var> {
        let y = self.target_matrix(batch.y)?;
        let nodes = self.elbo_nodes(tape, batch.x, &y, batch.env, mc, rng, clamp_ratio)?;
        let loss = tape.mean(nodes.per_sample);
        if !tape.scalar(loss).is_finite() {
            let terms = [
                ("log q(y|x)", nodes.log_q_y),
                ("log p(x|s,z)", nodes.log_px),
                ("log p_e(s,z)", nodes.log_prior),
                ("log q(s,z|x)", nodes.log_q),
            ];
            let culprit = terms
                .iter()
                .find(|(_, v)| !tape.value(*v).is_finite())
                .map_or("importance weights", |(name, _)| *name);
            return Err(LacimError::NonFinite(format!(
                "loss in environment {} (diverging term: {culprit})",
                batch.env
            )));
        }
        Ok(loss)
    }

    /// Monte Carlo estimate of the environment loss on a batch.
    pub fn elbo_env(&self, batch: Observed<'_>, mc: usize, rng: &mut RngStream) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.elbo_env_tape(&mut tape, batch, mc, rng, true)?;
        Ok(tape.scalar(loss))
    }

    /// Per-sample loss values (no clamping), for diagnostics and bound checks.
    pub fn elbo_per_sample(&self, batch: Observed<'_>, mc: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
        let y = self.target_matrix(batch.y)?;
        let mut tape = Tape::new();
        let nodes = self.elbo_nodes(&mut tape, batch.x, &y, batch.env, mc, rng, false)?;
        Ok(tape.value(nodes.per_sample).data().to_vec())
    }

    /// Term means of one ELBO evaluation.
    pub fn elbo_terms(&self, batch: Observed<'_>, mc: usize, rng: &mut RngStream) -> Result<ElboTerms> {
        let y = self.target_matrix(batch.y)?;
        let mut tape = Tape::new();
        let nodes = self.elbo_nodes(&mut tape, batch.x, &y, batch.env, mc, rng, false)?;
        let mean = |v: Var| {
            let m = tape.value(v);
            m.sum() / m.len().max(1) as f64
        };
        Ok(ElboTerms {
            log_q_y: mean(nodes.log_q_y),
            log_px: mean(nodes.log_px),
            log_prior: mean(nodes.log_prior),
            log_q: mean(nodes.log_q),
        })
    }

    /// Sum of environment losses, one batch per environment, accumulated in
    /// batch order. Each environment draws noise from its own substream.
    pub fn total_loss_tape(
        &self,
        tape: &mut Tape,
        batches: &[Observed<'_>],
        mc: usize,
        rng: &RngStream,
        clamp_ratio: bool,
    ) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (k, b) in batches.iter().enumerate() {
            let mut sub = rng.derive(k as u64);
            let l = self.elbo_env_tape(tape, *b, mc, &mut sub, clamp_ratio)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        total.ok_or_else(|| LacimError::InvalidArgument("no batches".into()))
    }

    pub fn total_loss(&self, batches: &[Observed<'_>], mc: usize, rng: &RngStream) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.total_loss_tape(&mut tape, batches, mc, rng, true)?;
        Ok(tape.scalar(l))
    }

    /// Gradients of a scalar tape node w.r.t. every parameter, in
    /// [`LacimModel::params`] order (zeros for parameters not on the tape).
    pub fn param_grads(&self, tape: &Tape, loss: Var) -> Result<Vec<Matrix>> {
        let mut grads = tape.backward(loss)?;
        let mut key = 0;
        let mut out = Vec::new();
        for p in self.params() {
            out.push(match tape.param_var(key) {
                Some(v) => grads.take(v),
                None => Matrix::zeros(p.rows(), p.cols()),
            });
            key += 1;
        }
        Ok(out)
    }

    /// Posterior parameters of `q_e(s, z | x)`.
    pub fn encode(&self, x: &Matrix, e: usize) -> Result<Posterior> {
        self.check_env(e)?;
        if x.cols() != self.dims.q_x {
            return Err(dim_err("encode input", self.dims.q_x, x.cols()));
        }
        let h = self.trunk.forward(x)?;
        let out = self.heads[e - 1].forward(&h)?;
        let (qs, q) = (self.dims.q_s, self.dims.q_sz());
        Ok(Posterior {
            mean_s: out.slice_cols(0, qs),
            mean_z: out.slice_cols(qs, q),
            log_std_s: bound_log_std(out.slice_cols(q, q + qs)),
            log_std_z: bound_log_std(out.slice_cols(q + qs, 2 * q)),
        })
    }

    /// Prior `(mean, log_std)` vectors of `[s, z]` for environment `e`.
    pub fn prior(&self, e: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_env(e)?;
        let out = self.priors[e - 1].forward(&self.one_hot(e))?;
        let q = self.dims.q_sz();
        let ls = out.row(0)[q..].iter().map(|v| v.clamp(LOG_STD_RANGE.0, LOG_STD_RANGE.1));
        Ok((out.row(0)[..q].to_vec(), ls.collect()))
    }

    /// `(μ_x, log σ_x)` of the shared decoder for `[s, z]` rows.
    pub fn decode_x(&self, sz: &Matrix) -> Result<(Matrix, Matrix)> {
        let out = self.dec_x.forward(sz)?;
        let q = self.dims.q_x;
        Ok((out.slice_cols(0, q), bound_log_std(out.slice_cols(q, 2 * q))))
    }

    /// Raw `dec_y` output for `s` rows.
    pub fn decode_y(&self, s: &Matrix) -> Result<Matrix> {
        self.dec_y.forward(s)
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }
}

fn tile(m: &Matrix, k: usize) -> Matrix {
    let parts: Vec<&Matrix> = std::iter::repeat_n(m, k).collect();
    Matrix::vstack(&parts).expect("tiles share column count")
}

/// All datasets merged into environment 1.
pub fn pool_datasets(datasets: &[EnvDataset]) -> Result<Vec<EnvDataset>> {
    let refs: Vec<&EnvDataset> = datasets.iter().collect();
    Ok(vec![EnvDataset::concat(1, &refs)?])
}

/// Model dimensions matching a set of datasets.
pub fn dims_for(datasets: &[EnvDataset], q_s: usize, q_z: usize, m: usize) -> Result<ModelDims> {
    let first = datasets
        .first()
        .ok_or_else(|| LacimError::InvalidArgument("no datasets".into()))?;
    let target = match &first.y {
        Targets::Continuous(y) => TargetKind::Regression { q_y: y.cols() },
        Targets::Labels(_) => {
            let max = datasets
                .iter()
                .filter_map(|d| match &d.y {
                    Targets::Labels(l) => l.iter().max().copied(),
                    Targets::Continuous(_) => None,
                })
                .max()
                .unwrap_or(0);
            TargetKind::Classification { classes: (max + 1).max(2) }
        }
    };
    Ok(ModelDims {
        q_x: first.x.cols(),
        q_s,
        q_z,
        target,
        m,
    })
}

/// Adam on all parameters of `model`. In pooled mode the datasets are merged
/// into one environment and the model must have `m = 1`.
pub fn train(model: &mut LacimModel, datasets: &[EnvDataset], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let pooled;
    let data: &[EnvDataset] = match cfg.mode {
        TrainMode::Lacim => datasets,
        TrainMode::Pooled => {
            pooled = pool_datasets(datasets)?;
            &pooled
        }
        TrainMode::Erm => {
            return Err(LacimError::Config("ERM mode trains a separate model; use train_erm_baseline".into()))
        }
    };
    if data.len() != model.m() {
        return Err(LacimError::InvalidArgument(format!(
            "model has {} environments but {} datasets were given",
            model.m(),
            data.len()
        )));
    }
    for (k, d) in data.iter().enumerate() {
        if d.env != k + 1 {
            return Err(LacimError::InvalidArgument(format!(
                "dataset {k} carries environment {} (expected {})",
                d.env,
                k + 1
            )));
        }
        if d.is_empty() {
            return Err(LacimError::InvalidArgument(format!("environment {} is empty", d.env)));
        }
    }

    let per_env = (cfg.batch_size / data.len()).max(1);
    let adam = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let names = model.param_names();
    let mut state = AdamState::new();
    let mut batch_rng = RngStream::for_purpose(cfg.seed, purpose::BATCH, 0);
    let mut losses = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let subsets: Vec<EnvDataset> = data
            .iter()
            .map(|d| {
                let idx = batch_rng.sample_indices(d.len(), per_env);
                d.subset(&idx)
            })
            .collect();
        let batches: Vec<Observed<'_>> = subsets.iter().map(EnvDataset::observed).collect();
        let noise = RngStream::for_purpose(cfg.seed, purpose::ELBO_NOISE, it as u64);
        let mut tape = Tape::new();
        let loss = match model.total_loss_tape(&mut tape, &batches, cfg.mc_samples, &noise, cfg.clamp_ratio) {
            Ok(l) => l,
            Err(LacimError::NonFinite(_)) => {
                losses.push(f64::NAN);
                return Err(LacimError::Diverged {
                    iteration: it,
                    loss: f64::NAN,
                    trace: losses,
                });
            }
            Err(e) => return Err(e),
        };
        let value = tape.scalar(loss);
        losses.push(value);
        if !value.is_finite() || value > 1e10 {
            return Err(LacimError::Diverged {
                iteration: it,
                loss: value,
                trace: losses,
            });
        }
        let grads = model.param_grads(&tape, loss)?;
        let mut params = model.params_mut();
        adam_step(&mut params, &grads, &names, &mut state, &adam)?;
    }
    Ok(TrainReport { losses })
}
