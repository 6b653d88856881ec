//! Identifiability and predictive scores.

mod hungarian;

pub use hungarian::{max_score_assignment, min_cost_assignment};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, LacimError, Result};
use crate::model::LacimModel;
use crate::numeric::Matrix;
use crate::scm::{format_f64, EnvDataset, Targets};

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a[..n].iter().zip(&b[..n]) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Mean absolute correlation under the best one-to-one matching of learned
/// to true components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MccScore {
    pub mcc: f64,
    /// `assignment[i]` is the true component matched to learned component `i`.
    pub assignment: Vec<usize>,
    /// `|corr(learned_i, truth_j)|`, row-major `q × q`.
    pub abs_corr: Vec<Vec<f64>>,
}

pub fn mcc(learned: &Matrix, truth: &Matrix) -> Result<MccScore> {
    if learned.shape() != truth.shape() {
        return Err(dim_err(
            "mcc inputs",
            format!("{:?}", truth.shape()),
            format!("{:?}", learned.shape()),
        ));
    }
    if learned.rows() < 3 {
        return Err(LacimError::InvalidArgument(format!(
            "mcc needs at least 3 samples, got {}",
            learned.rows()
        )));
    }
    let q = learned.cols();
    let lc: Vec<Vec<f64>> = (0..q).map(|j| learned.column(j)).collect();
    let tc: Vec<Vec<f64>> = (0..q).map(|j| truth.column(j)).collect();
    let abs_corr: Vec<Vec<f64>> = lc
        .iter()
        .map(|l| tc.iter().map(|t| pearson(l, t).abs()).collect())
        .collect();
    let assignment = max_score_assignment(&abs_corr);
    let mcc = if q == 0 {
        0.0
    } else {
        assignment.iter().enumerate().map(|(i, &j)| abs_corr[i][j]).sum::<f64>() / q as f64
    };
    Ok(MccScore {
        mcc,
        assignment,
        abs_corr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MccReport {
    pub mcc_s: f64,
    pub mcc_z: f64,
    pub s: MccScore,
    pub z: MccScore,
}

/// Pooled report plus one report per environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityReport {
    pub pooled: MccReport,
    pub per_env: Vec<MccReport>,
    /// Mean over environments of the per-environment scores.
    pub per_env_mean_s: f64,
    pub per_env_mean_z: f64,
}

fn report(ls: &Matrix, lz: &Matrix, ts: &Matrix, tz: &Matrix) -> Result<MccReport> {
    let s = mcc(ls, ts)?;
    let z = mcc(lz, tz)?;
    Ok(MccReport {
        mcc_s: s.mcc,
        mcc_z: z.mcc,
        s,
        z,
    })
}

/// Posterior means `(s, z)` for a dataset. Environment `env` selects the
/// encoder head; pooled models (m = 1) always use head 1.
pub fn posterior_means(model: &LacimModel, ds: &EnvDataset) -> Result<(Matrix, Matrix)> {
    let head = if model.m() == 1 { 1 } else { ds.env };
    let post = model.encode(&ds.x, head)?;
    Ok((post.mean_s, post.mean_z))
}

/// Scores posterior means against the stored true `s` and `z`.
pub fn evaluate_identifiability(model: &LacimModel, datasets: &[EnvDataset]) -> Result<IdentifiabilityReport> {
    let mut parts = Vec::new();
    let mut per_env = Vec::new();
    for ds in datasets {
        let lat = ds
            .latents
            .as_ref()
            .ok_or_else(|| LacimError::MissingLatents(format!("environment {}", ds.env)))?;
        let (ms, mz) = posterior_means(model, ds)?;
        per_env.push(report(&ms, &mz, &lat.s, &lat.z)?);
        parts.push((ms, mz, lat.s.clone(), lat.z.clone()));
    }
    let stack = |f: fn(&(Matrix, Matrix, Matrix, Matrix)) -> &Matrix| -> Result<Matrix> {
        let ms: Vec<&Matrix> = parts.iter().map(f).collect();
        Matrix::vstack(&ms)
    };
    let pooled = report(&stack(|p| &p.0)?, &stack(|p| &p.1)?, &stack(|p| &p.2)?, &stack(|p| &p.3)?)?;
    let k = per_env.len().max(1) as f64;
    Ok(IdentifiabilityReport {
        per_env_mean_s: per_env.iter().map(|r| r.mcc_s).sum::<f64>() / k,
        per_env_mean_z: per_env.iter().map(|r| r.mcc_z).sum::<f64>() / k,
        pooled,
        per_env,
    })
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(dim_err("accuracy", labels.len(), predictions.len()));
    }
    if labels.is_empty() {
        return Err(LacimError::InvalidArgument("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean over rows of the squared Euclidean error.
pub fn mse(predictions: &Matrix, targets: &Matrix) -> Result<f64> {
    if predictions.shape() != targets.shape() {
        return Err(dim_err(
            "mse",
            format!("{:?}", targets.shape()),
            format!("{:?}", predictions.shape()),
        ));
    }
    if targets.rows() == 0 {
        return Err(LacimError::InvalidArgument("mse of an empty set".into()));
    }
    let total: f64 = predictions
        .data()
        .iter()
        .zip(targets.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(total / targets.rows() as f64)
}

/// Accuracy for labels, mse for continuous targets.
pub fn score(predictions: &Targets, targets: &Targets) -> Result<f64> {
    match (predictions, targets) {
        (Targets::Labels(p), Targets::Labels(t)) => accuracy(p, t),
        (Targets::Continuous(p), Targets::Continuous(t)) => mse(p, t),
        _ => Err(LacimError::InvalidArgument("prediction and target kinds differ".into())),
    }
}

/// CSV of true latents next to posterior means, one row per sample:
/// `true_s*, true_z*, post_mean_s*, post_mean_z*, env`.
pub fn export_latent_scatter(model: &LacimModel, ds: &EnvDataset, path: &Path) -> Result<()> {
    let lat = ds
        .latents
        .as_ref()
        .ok_or_else(|| LacimError::MissingLatents(format!("environment {}", ds.env)))?;
    let (ms, mz) = posterior_means(model, ds)?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = Vec::new();
    for (prefix, q) in [
        ("true_s", lat.s.cols()),
        ("true_z", lat.z.cols()),
        ("post_mean_s", ms.cols()),
        ("post_mean_z", mz.cols()),
    ] {
        header.extend((0..q).map(|j| format!("{prefix}{j}")));
    }
    header.push("env".into());
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for m in [&lat.s, &lat.z, &ms, &mz] {
            rec.extend(m.row(i).iter().map(|&v| format_f64(v)));
        }
        rec.push(ds.env.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
