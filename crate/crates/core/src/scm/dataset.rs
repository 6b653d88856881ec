//! Per-environment datasets and their CSV representation.
//!
//! Columns are `x0..x{qx-1}`, then `y0..` (a single integer-valued `y0` for
//! class labels), then the optional latent blocks `s*`, `z*`, `c*`, and
//! finally `env`. Floats are written with 17 significant digits, which makes
//! the round trip exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LacimError, Result};
use crate::numeric::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    /// `n × q_y` real-valued targets.
    Continuous(Matrix),
    /// Class indices.
    Labels(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Continuous(m) => m.rows(),
            Targets::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Continuous(m) => Targets::Continuous(m.select_rows(idx)),
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
        }
    }

    fn width(&self) -> usize {
        match self {
            Targets::Continuous(m) => m.cols(),
            Targets::Labels(_) => 1,
        }
    }
}

/// Simulator ground truth. Evaluation only; never a model input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latents {
    pub s: Matrix,
    pub z: Matrix,
    pub c: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvDataset {
    /// 1-based environment index.
    pub env: usize,
    pub x: Matrix,
    pub y: Targets,
    pub latents: Option<Latents>,
}

/// The part of a dataset a learner may see: inputs, targets, environment.
#[derive(Debug, Clone, Copy)]
pub struct Observed<'a> {
    pub env: usize,
    pub x: &'a Matrix,
    pub y: &'a Targets,
}

impl Observed<'_> {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

impl EnvDataset {
    pub fn new(env: usize, x: Matrix, y: Targets, latents: Option<Latents>) -> Result<Self> {
        let n = x.rows();
        if y.len() != n {
            return Err(crate::error::dim_err("EnvDataset targets", n, y.len()));
        }
        if let Some(l) = &latents {
            for (name, m) in [("s", &l.s), ("z", &l.z), ("c", &l.c)] {
                if m.rows() != n {
                    return Err(crate::error::dim_err(format!("EnvDataset latent {name}"), n, m.rows()));
                }
            }
        }
        Ok(Self { env, x, y, latents })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn observed(&self) -> Observed<'_> {
        Observed {
            env: self.env,
            x: &self.x,
            y: &self.y,
        }
    }

    /// Copy relabeled to another environment index.
    pub fn with_env(&self, env: usize) -> Self {
        Self {
            env,
            ..self.clone()
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            env: self.env,
            x: self.x.select_rows(idx),
            y: self.y.select(idx),
            latents: self.latents.as_ref().map(|l| Latents {
                s: l.s.select_rows(idx),
                z: l.z.select_rows(idx),
                c: l.c.select_rows(idx),
            }),
        }
    }

    /// Concatenation of datasets under one environment label.
    pub fn concat(env: usize, parts: &[&EnvDataset]) -> Result<Self> {
        let xs: Vec<&Matrix> = parts.iter().map(|p| &p.x).collect();
        let x = Matrix::vstack(&xs)?;
        let y = match parts.first().map(|p| &p.y) {
            Some(Targets::Labels(_)) => {
                let mut all = Vec::new();
                for p in parts {
                    match &p.y {
                        Targets::Labels(l) => all.extend_from_slice(l),
                        Targets::Continuous(_) => {
                            return Err(LacimError::InvalidArgument("mixed target kinds".into()))
                        }
                    }
                }
                Targets::Labels(all)
            }
            _ => {
                let mut ms = Vec::new();
                for p in parts {
                    match &p.y {
                        Targets::Continuous(m) => ms.push(m),
                        Targets::Labels(_) => {
                            return Err(LacimError::InvalidArgument("mixed target kinds".into()))
                        }
                    }
                }
                Targets::Continuous(if ms.is_empty() { Matrix::zeros(0, 0) } else { Matrix::vstack(&ms)? })
            }
        };
        let latents = if parts.iter().all(|p| p.latents.is_some()) && !parts.is_empty() {
            let pick = |f: fn(&Latents) -> &Matrix| -> Result<Matrix> {
                let ms: Vec<&Matrix> = parts.iter().map(|p| f(p.latents.as_ref().unwrap())).collect();
                Matrix::vstack(&ms)
            };
            Some(Latents {
                s: pick(|l| &l.s)?,
                z: pick(|l| &l.z)?,
                c: pick(|l| &l.c)?,
            })
        } else {
            None
        };
        Self::new(env, x, y, latents)
    }

    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = (0..self.x.cols()).map(|j| format!("x{j}")).collect();
        h.extend((0..self.y.width()).map(|j| format!("y{j}")));
        if let Some(l) = &self.latents {
            h.extend((0..l.s.cols()).map(|j| format!("s{j}")));
            h.extend((0..l.z.cols()).map(|j| format!("z{j}")));
            h.extend((0..l.c.cols()).map(|j| format!("c{j}")));
        }
        h.push("env".into());
        h
    }
}

/// 17 significant digits: exact round trip for every finite `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn export_dataset(ds: &EnvDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ds.header())?;
    let mut record = Vec::new();
    for i in 0..ds.len() {
        record.clear();
        record.extend(ds.x.row(i).iter().map(|&v| format_f64(v)));
        match &ds.y {
            Targets::Continuous(m) => record.extend(m.row(i).iter().map(|&v| format_f64(v))),
            Targets::Labels(l) => record.push(l[i].to_string()),
        }
        if let Some(l) = &ds.latents {
            for m in [&l.s, &l.z, &l.c] {
                record.extend(m.row(i).iter().map(|&v| format_f64(v)));
            }
        }
        record.push(ds.env.to_string());
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`export_dataset`]. A single integer-formatted
/// `y0` column is read back as class labels.
pub fn import_dataset(path: &Path) -> Result<EnvDataset> {
    let malformed = |reason: String| LacimError::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let count = |prefix: char| {
        header
            .iter()
            .filter(|h| h.starts_with(prefix) && h[1..].parse::<usize>().is_ok())
            .count()
    };
    let (qx, qy, qs, qz, qc) = (count('x'), count('y'), count('s'), count('z'), count('c'));
    let expected = qx + qy + qs + qz + qc + 1;
    if header.len() != expected || header.last().map(String::as_str) != Some("env") {
        return Err(malformed(format!("unrecognized header {header:?}")));
    }
    if (qs == 0) != (qz == 0) {
        return Err(malformed("latent columns must include both s and z".into()));
    }

    let mut x = Vec::new();
    let mut y_raw: Vec<String> = Vec::new();
    let mut lat = (Vec::new(), Vec::new(), Vec::new());
    let mut env: Option<usize> = None;
    let mut n = 0;
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        if rec.len() != expected {
            return Err(malformed(format!("row {line}: expected {expected} columns, found {}", rec.len())));
        }
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse::<f64>()
                .map_err(|e| malformed(format!("row {line}, column {}: {e}", header[k])))
        };
        for k in 0..qx {
            x.push(num(k)?);
        }
        for k in qx..qx + qy {
            y_raw.push(rec[k].to_string());
        }
        let mut k = qx + qy;
        for (dst, q) in [(&mut lat.0, qs), (&mut lat.1, qz), (&mut lat.2, qc)] {
            for _ in 0..q {
                dst.push(num(k)?);
                k += 1;
            }
        }
        let e: usize = rec[k]
            .parse()
            .map_err(|e| malformed(format!("row {line}, env: {e}")))?;
        match env {
            None => env = Some(e),
            Some(prev) if prev != e => {
                return Err(malformed(format!("row {line}: env {e} differs from {prev}")))
            }
            _ => {}
        }
        n += 1;
    }

    let labels = qy == 1 && !y_raw.is_empty() && y_raw.iter().all(|v| v.parse::<usize>().is_ok());
    let y = if labels {
        Targets::Labels(y_raw.iter().map(|v| v.parse().unwrap()).collect())
    } else {
        let vals = y_raw
            .iter()
            .map(|v| v.parse::<f64>().map_err(|e| malformed(format!("target value {v}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Targets::Continuous(Matrix::new(n, qy, vals)?)
    };
    let latents = if qs > 0 {
        Some(Latents {
            s: Matrix::new(n, qs, lat.0)?,
            z: Matrix::new(n, qz, lat.1)?,
            c: Matrix::new(n, qc, lat.2)?,
        })
    } else {
        None
    };
    EnvDataset::new(env.unwrap_or(0), Matrix::new(n, qx, x)?, y, latents)
}
