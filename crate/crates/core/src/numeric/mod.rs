//! Dense numerics: matrices, a reverse-mode tape, MLPs, Adam and seeded RNG.

mod adam;
pub mod gradcheck;
mod matrix;
mod mlp;
pub mod rng;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use matrix::Matrix;
pub use mlp::{leaky_relu, Layer, Mlp};
pub use rng::RngStream;
pub use tape::{logsumexp, Gradients, Tape, Var, LOG_STD_MAX, LOG_STD_MIN};

/// Reparameterized Gaussian draw for a single vector. `ε` comes from `rng`
/// and is not differentiated.
pub fn gaussian_sample(
    mean: &[f64],
    log_std: &[f64],
    rng: &mut RngStream,
    tape: &mut Tape,
) -> crate::Result<(Var, Vec<f64>)> {
    if mean.len() != log_std.len() {
        return Err(crate::error::dim_err("gaussian_sample", mean.len(), log_std.len()));
    }
    if mean.iter().chain(log_std).any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(crate::LacimError::NonFinite("gaussian_sample input".into()));
    }
    // −∞ log-std is a zero-noise sentinel; the clamp maps it to LOG_STD_MIN.
    let mu = tape.constant(Matrix::row_vector(mean));
    let ls = tape.constant(Matrix::row_vector(log_std));
    let eps = rng.normal_matrix(1, mean.len());
    let out = tape.gaussian_sample(mu, ls, eps)?;
    let values = tape.value(out).data().to_vec();
    Ok((out, values))
}

/// Sum over rows of the diagonal-Gaussian log-density, recorded on the tape.
/// Returns an `n × 1` node.
pub fn gaussian_log_density(tape: &mut Tape, x: Var, mean: Var, log_std: Var) -> crate::Result<Var> {
    let d = tape.value(x).cols() as f64;
    let ls = tape.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX);
    let diff = tape.sub(x, mean)?;
    let neg_ls = tape.scale(ls, -1.0);
    let inv_std = tape.exp(neg_ls);
    let z = tape.mul(diff, inv_std)?;
    let z2 = tape.square(z);
    let quad = tape.sum_rows(z2);
    let log_det = tape.sum_rows(ls);
    let a = tape.scale(quad, -0.5);
    let b = tape.sub(a, log_det)?;
    Ok(tape.add_scalar(b, -0.5 * d * (2.0 * std::f64::consts::PI).ln()))
}

/// Plain (untaped) diagonal-Gaussian log-density.
pub fn gaussian_log_pdf(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((&x, &m), &l)| {
            let l = l.clamp(LOG_STD_MIN, LOG_STD_MAX);
            let z = (x - m) * (-l).exp();
            -0.5 * z * z - l - 0.5 * (2.0 * std::f64::consts::PI).ln()
        })
        .sum()
}
