//! Direct supervised baseline `x → y` trained on the pooled environments.

use serde::{Deserialize, Serialize};

use super::{pool_datasets, TargetKind, TrainConfig, TrainReport};
use crate::error::{LacimError, Result};
use crate::numeric::rng::{purpose, RngStream};
use crate::numeric::{adam_step, AdamConfig, AdamState, Matrix, Mlp, Tape};
use crate::scm::{EnvDataset, Targets};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErmModel {
    pub net: Mlp,
    pub target: TargetKind,
}

impl ErmModel {
    pub fn new(q_x: usize, target: TargetKind, hidden: usize, seed: u64) -> Result<Self> {
        let out = match target {
            TargetKind::Regression { q_y } => q_y,
            TargetKind::Classification { classes } => classes,
        };
        let mut rng = RngStream::for_purpose(seed, purpose::MODEL_INIT, 1);
        let net = Mlp::new(&[q_x, hidden, hidden, out], 0.5, false, &mut rng)?;
        Ok(Self { net, target })
    }

    /// Class with the largest logit (lowest index on ties), or the regression output.
    pub fn predict(&self, x: &Matrix) -> Result<Targets> {
        let out = self.net.forward(x)?;
        Ok(match self.target {
            TargetKind::Regression { .. } => Targets::Continuous(out),
            TargetKind::Classification { .. } => {
                Targets::Labels((0..out.rows()).map(|i| crate::inference::argmax(out.row(i))).collect())
            }
        })
    }

    fn loss_tape(&self, tape: &mut Tape, x: &Matrix, y: &Targets) -> Result<crate::numeric::Var> {
        let xv = tape.constant(x.clone());
        let out = self.net.forward_tape(tape, xv, 0)?;
        match (self.target, y) {
            (TargetKind::Classification { classes }, Targets::Labels(l)) => {
                let onehot = Matrix::from_fn(l.len(), classes, |i, j| if l[i] == j { 1.0 } else { 0.0 });
                let yv = tape.constant(onehot);
                let lp = tape.log_softmax_rows(out);
                let picked = tape.mul(lp, yv)?;
                let ll = tape.sum_rows(picked);
                let mean = tape.mean(ll);
                Ok(tape.scale(mean, -1.0))
            }
            (TargetKind::Regression { .. }, Targets::Continuous(t)) => {
                let yv = tape.constant(t.clone());
                let d = tape.sub(out, yv)?;
                let sq = tape.square(d);
                let per = tape.sum_rows(sq);
                Ok(tape.mean(per))
            }
            _ => Err(LacimError::InvalidArgument("target kind does not match the baseline".into())),
        }
    }
}

/// Cross-entropy (labels) or squared error (continuous) on all environments
/// pooled, with the optimizer settings of `cfg`.
pub fn train_erm_baseline(
    datasets: &[EnvDataset],
    cfg: &TrainConfig,
    hidden: usize,
) -> Result<(ErmModel, TrainReport)> {
    cfg.validate()?;
    let pooled = pool_datasets(datasets)?.pop().expect("one pooled dataset");
    if pooled.is_empty() {
        return Err(LacimError::InvalidArgument("no training data".into()));
    }
    let target = match &pooled.y {
        Targets::Continuous(m) => TargetKind::Regression { q_y: m.cols() },
        Targets::Labels(l) => TargetKind::Classification {
            classes: (l.iter().max().copied().unwrap_or(0) + 1).max(2),
        },
    };
    let mut model = ErmModel::new(pooled.x.cols(), target, hidden, cfg.seed)?;
    let adam = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let names: Vec<String> = (0..model.net.param_count()).map(|k| format!("erm.p{k}")).collect();
    let mut state = AdamState::new();
    let mut rng = RngStream::for_purpose(cfg.seed, purpose::BATCH, 1);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let idx = rng.sample_indices(pooled.len(), cfg.batch_size);
        let batch = pooled.subset(&idx);
        let mut tape = Tape::new();
        let loss = model.loss_tape(&mut tape, &batch.x, &batch.y)?;
        let value = tape.scalar(loss);
        losses.push(value);
        if !value.is_finite() || value > 1e10 {
            return Err(LacimError::Diverged {
                iteration: it,
                loss: value,
                trace: losses,
            });
        }
        let mut grads = tape.backward(loss)?;
        let g: Vec<Matrix> = (0..model.net.param_count())
            .map(|k| match tape.param_var(k) {
                Some(v) => grads.take(v),
                None => Matrix::zeros(0, 0),
            })
            .collect();
        let mut params = model.net.params_mut();
        adam_step(&mut params, &g, &names, &mut state, &adam)?;
    }
    Ok((model, TrainReport { losses }))
}
