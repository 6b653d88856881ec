//! Numerical checks of the side conditions behind identifiability and OOD
//! transfer: rank of natural-parameter differences, the environment-count
//! rule, a full-dimensionality proxy for the open-set condition, Stein
//! kernels, and the posterior-shift bound on Gaussian instances.

mod stein;

pub use stein::{
    grid, ood_bound_check, random_ood_pair, ratio_slope_sup, stein_kernel, trapezoid, GaussianMixture,
    GaussianPosteriorPair, OodBound, OodOutcome, SteinKernel, GRID_POINTS, UNRELIABLE_DENSITY,
};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{LacimError, Result};
use crate::numeric::rng::{purpose, RngStream};
use crate::numeric::Matrix;
use crate::scm::GroundTruthScm;

/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub check: String,
    pub pass: bool,
    /// Positive when the check passes with room to spare.
    pub margin: f64,
    pub details: serde_json::Value,
}

/// Natural-parameter map of a factorized exponential family,
/// `Γ(c, d) ∈ R^{k × q}` (row `j` holds the coefficient of `T_j`).
pub struct ExpFamSpec {
    pub q: usize,
    pub k: usize,
    gamma: Box<dyn Fn(&[f64], &[f64]) -> Matrix + Send + Sync>,
}

impl std::fmt::Debug for ExpFamSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExpFamSpec").field("q", &self.q).field("k", &self.k).finish()
    }
}

impl ExpFamSpec {
    pub fn new(q: usize, k: usize, gamma: impl Fn(&[f64], &[f64]) -> Matrix + Send + Sync + 'static) -> Self {
        Self {
            q,
            k,
            gamma: Box::new(gamma),
        }
    }

    /// Diagonal Gaussian with `T(t) = (t, t²)`; `params(c, d)` returns the
    /// per-dimension mean and log-std.
    pub fn gaussian(q: usize, params: impl Fn(&[f64], &[f64]) -> (Vec<f64>, Vec<f64>) + Send + Sync + 'static) -> Self {
        Self::new(q, 2, move |c, d| {
            let (mu, ls) = params(c, d);
            let mut g = Matrix::zeros(2, q);
            for i in 0..q {
                let var = (2.0 * ls[i]).exp();
                g.set(0, i, mu[i] / var);
                g.set(1, i, -0.5 / var);
            }
            g
        })
    }

    pub fn gamma(&self, c: &[f64], d: &[f64]) -> Matrix {
        (self.gamma)(c, d)
    }
}

/// `max(q_s·k_s, q_z·k_z) + 1`.
pub fn required_environments(s: &ExpFamSpec, z: &ExpFamSpec) -> usize {
    (s.q * s.k).max(z.q * z.k) + 1
}

/// Singular values, largest first.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    let mut sv: Vec<f64> = dm.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub full_column_rank: bool,
}

pub fn rank_summary(m: &Matrix) -> RankSummary {
    let sv = singular_values(m);
    let sigma_max = sv.first().copied().unwrap_or(0.0);
    let rank = sv.iter().filter(|&&s| sigma_max > 0.0 && s > RANK_TOL * sigma_max).count();
    RankSummary {
        rows: m.rows(),
        cols: m.cols(),
        rank,
        sigma_max,
        sigma_min: if sv.len() < m.cols() { 0.0 } else { sv.last().copied().unwrap_or(0.0) },
        full_column_rank: rank == m.cols(),
    }
}

/// Rows `vec(Γ(c_r, d^e)) − vec(Γ(c_1, d^1))` for every `(e, r)` except the
/// reference, giving an `(R·m − 1) × (q·k)` matrix.
pub fn gamma_differences(spec: &ExpFamSpec, env_values: &[Vec<f64>], c_values: &[Vec<f64>]) -> Matrix {
    let width = spec.q * spec.k;
    let reference = spec.gamma(&c_values[0], &env_values[0]);
    let mut rows = Vec::new();
    for d in env_values {
        for c in c_values {
            let g = spec.gamma(c, d);
            rows.push(g.data().iter().zip(reference.data()).map(|(a, b)| a - b).collect::<Vec<_>>());
        }
    }
    // The first row is the reference minus itself.
    rows.remove(0);
    Matrix::from_fn(rows.len(), width, |i, j| rows[i][j])
}

/// Rank condition on the Γ differences for both latent blocks, the
/// environment-count rule, and (when given) the rank of the mixture matrix
/// `L = [P^e(C = c_r)]`.
pub fn check_diversity(
    s: &ExpFamSpec,
    z: &ExpFamSpec,
    env_values: &[Vec<f64>],
    c_values: &[Vec<f64>],
    mixture: Option<&Matrix>,
) -> Result<TheoryReport> {
    let m = env_values.len();
    if m < 2 {
        return Ok(TheoryReport {
            check: "diversity".into(),
            pass: false,
            margin: m as f64 - 2.0,
            details: json!({
                "environments": m,
                "required_environments": required_environments(s, z),
                "reason": "differences across environments need at least two environments",
            }),
        });
    }
    if c_values.is_empty() {
        return Err(LacimError::InvalidArgument("diversity needs at least one c value".into()));
    }
    let rs = rank_summary(&gamma_differences(s, env_values, c_values));
    let rz = rank_summary(&gamma_differences(z, env_values, c_values));
    let required = required_environments(s, z);
    let count_ok = m >= required;
    let lm = mixture.map(rank_summary);
    let rank_ok = rs.full_column_rank && rz.full_column_rank;
    let ratio = |r: &RankSummary| if r.sigma_max > 0.0 { r.sigma_min / r.sigma_max } else { 0.0 };
    let margin = if count_ok {
        ratio(&rs).min(ratio(&rz)) - RANK_TOL
    } else {
        m as f64 - required as f64
    };
    Ok(TheoryReport {
        check: "diversity".into(),
        pass: rank_ok && count_ok,
        margin,
        details: json!({
            "environments": m,
            "required_environments": required,
            "environment_count_ok": count_ok,
            "s": rs,
            "z": rz,
            "mixture": lm,
        }),
    })
}

/// Γ maps of the simulator's `p(s | c)` and `p(z | c)`. The `c` argument is
/// read as the deviation of the confounder from its environment mean, so the
/// conditional is evaluated at `d^e + c`.
pub fn scm_exp_fam(scm: &GroundTruthScm) -> (ExpFamSpec, ExpFamSpec) {
    let qs = scm.dims.q_s;
    let qz = scm.dims.q_z;
    let block = |lo: usize, hi: usize| {
        let scm = scm.clone();
        move |c: &[f64], d: &[f64]| {
            let at: Vec<f64> = c.iter().zip(d).map(|(a, b)| a + b).collect();
            let (mu, ls) = scm.latent_params(&at).expect("c matches q_c");
            (mu[lo..hi].to_vec(), ls[lo..hi].to_vec())
        }
    };
    (
        ExpFamSpec::gaussian(qs, block(0, qs)),
        ExpFamSpec::gaussian(qz, block(qs, qs + qz)),
    )
}

/// Environment means `d^e = 2·5·e` (per coordinate) for `e = 1..=m`.
pub fn scm_env_values(scm: &GroundTruthScm) -> Vec<Vec<f64>> {
    (1..=scm.m).map(|e| vec![scm.env_offset(e); scm.dims.q_d]).collect()
}

/// `r` standard-normal deviations of `c`, reproducible from `seed`.
pub fn c_grid(q_c: usize, r: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = RngStream::for_purpose(seed, purpose::THEORY, 0);
    (0..r).map(|_| (0..q_c).map(|_| rng.normal()).collect()).collect()
}

/// Diversity check on a simulator with an `r`-point grid of `c` values.
pub fn check_scm_diversity(scm: &GroundTruthScm, r: usize, seed: u64) -> Result<TheoryReport> {
    let (s, z) = scm_exp_fam(scm);
    check_diversity(&s, &z, &scm_env_values(scm), &c_grid(scm.dims.q_c, r, seed), None)
}

/// Gaussian sufficient statistics `(t, t²)` of every column, interleaved.
pub fn gaussian_sufficient_stats(latents: &Matrix) -> Matrix {
    Matrix::from_fn(latents.rows(), 2 * latents.cols(), |i, j| {
        let v = latents.get(i, j / 2);
        if j % 2 == 0 {
            v
        } else {
            v * v
        }
    })
}

/// Smallest correlation eigenvalue required by [`check_nonempty_open_set`].
pub const OPEN_SET_MIN_EIGEN: f64 = 1e-6;

/// Full-dimensionality proxy for "contains a non-empty open set": every
/// eigenvalue of the sample correlation matrix of `points` must exceed
/// [`OPEN_SET_MIN_EIGEN`]. Points inside a lower-dimensional affine subspace
/// fail.
pub fn check_nonempty_open_set(points: &Matrix) -> Result<TheoryReport> {
    let (n, p) = points.shape();
    if n < 100 {
        return Err(LacimError::InvalidArgument(format!("open-set check needs at least 100 points, got {n}")));
    }
    let means: Vec<f64> = (0..p).map(|j| points.column(j).iter().sum::<f64>() / n as f64).collect();
    let mut cov = DMatrix::<f64>::zeros(p, p);
    for i in 0..n {
        let row = points.row(i);
        for a in 0..p {
            for b in a..p {
                cov[(a, b)] += (row[a] - means[a]) * (row[b] - means[b]);
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            cov[(a, b)] = cov[(b, a)];
        }
    }
    let sd: Vec<f64> = (0..p).map(|a| cov[(a, a)].sqrt()).collect();
    let degenerate = sd.iter().any(|&s| s == 0.0 || !s.is_finite());
    let eigen: Vec<f64> = if degenerate {
        vec![0.0; p]
    } else {
        let corr = DMatrix::from_fn(p, p, |a, b| cov[(a, b)] / (sd[a] * sd[b]));
        let mut ev: Vec<f64> = SymmetricEigen::new(corr).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    };
    let smallest = eigen.first().copied().unwrap_or(0.0);
    Ok(TheoryReport {
        check: "nonempty_open_set".into(),
        pass: smallest > OPEN_SET_MIN_EIGEN,
        margin: smallest - OPEN_SET_MIN_EIGEN,
        details: json!({
            "points": n,
            "dimension": p,
            "correlation_eigenvalues": eigen,
            "constant_columns": degenerate,
        }),
    })
}
