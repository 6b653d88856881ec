//! Binary classification preset with an environment-dependent spurious
//! feature.
//!
//! `y ~ Bernoulli(1/2)`; the causal latent `s ~ N(±μ_s, σ_s² I)` by class.
//! The spurious latent `z ~ N(±μ_z, σ_z² I)` takes the sign of `y` with
//! probability `ρ_e` and the opposite sign otherwise. `x = f([s, z]) + σ_x ε`
//! for a fixed random LeakyReLU net. The latent `c` column stores the
//! spurious class actually used for `z`.

use serde::{Deserialize, Serialize};

use super::{EnvDataset, Latents, Targets};
use crate::error::{LacimError, Result};
use crate::numeric::rng::{purpose, RngStream};
use crate::numeric::{Matrix, Mlp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub n_per_env: usize,
    pub n_test: usize,
    pub q_s: usize,
    pub q_z: usize,
    pub q_x: usize,
    pub s_class_mean: f64,
    pub s_std: f64,
    pub z_class_mean: f64,
    pub z_std: f64,
    pub x_noise_std: f64,
    pub slope: f64,
    /// Per-layer bound multiplier of the mixing net.
    pub mixing_scale: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_per_env: 2000,
            n_test: 2000,
            q_s: 2,
            q_z: 2,
            q_x: 6,
            s_class_mean: 1.0,
            s_std: 1.0,
            z_class_mean: 1.0,
            z_std: 1.0,
            x_noise_std: 1.0,
            slope: 0.5,
            mixing_scale: 2.45,
        }
    }
}

/// Frozen toy generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScm {
    pub config: ToyConfig,
    pub mixing: Mlp,
}

impl ToyScm {
    pub fn new(seed: u64, config: ToyConfig) -> Result<Self> {
        if config.q_s == 0 || config.q_z == 0 || config.q_x < config.q_s + config.q_z {
            return Err(LacimError::InvalidArgument(format!(
                "toy dims need q_s, q_z > 0 and q_x ≥ q_s + q_z: {config:?}"
            )));
        }
        let mut rng = RngStream::for_purpose(seed, purpose::TOY, 0);
        let q = config.q_s + config.q_z;
        let mixing = Mlp::with_weight_scale(
            &[q, config.q_x, config.q_x, config.q_x],
            config.slope,
            true,
            config.mixing_scale,
            &mut rng,
        )?;
        Ok(Self { config, mixing })
    }

    /// `n` samples with spurious alignment probability `rho`, labeled `env`.
    pub fn sample(&self, env: usize, rho: f64, n: usize, rng: &mut RngStream) -> Result<EnvDataset> {
        check_strength(rho)?;
        let cfg = &self.config;
        let mut labels = Vec::with_capacity(n);
        let mut s = Matrix::zeros(n, cfg.q_s);
        let mut z = Matrix::zeros(n, cfg.q_z);
        let mut c = Matrix::zeros(n, 1);
        for i in 0..n {
            let y = usize::from(rng.bernoulli(0.5));
            let sign = if y == 1 { 1.0 } else { -1.0 };
            let aligned = rng.bernoulli(rho);
            let z_class = if aligned { y } else { 1 - y };
            let z_sign = if z_class == 1 { 1.0 } else { -1.0 };
            for j in 0..cfg.q_s {
                s.set(i, j, sign * cfg.s_class_mean + cfg.s_std * rng.normal());
            }
            for j in 0..cfg.q_z {
                z.set(i, j, z_sign * cfg.z_class_mean + cfg.z_std * rng.normal());
            }
            c.set(i, 0, z_class as f64);
            labels.push(y);
        }
        let sz = Matrix::hstack(&[&s, &z])?;
        let clean = self.mixing.forward(&sz)?;
        let mut x = clean;
        for v in x.data_mut() {
            *v += cfg.x_noise_std * rng.normal();
        }
        EnvDataset::new(env, x, Targets::Labels(labels), Some(Latents { s, z, c }))
    }
}

fn check_strength(rho: f64) -> Result<()> {
    if rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        Err(LacimError::InvalidArgument(format!(
            "correlation strength must lie in (0, 1], got {rho}"
        )))
    }
}

/// Training environments `1..=m` with strengths `train_strengths` and a test
/// set (environment `m + 1`) with `test_strength`.
pub fn build_toy_spurious(
    seed: u64,
    train_strengths: &[f64],
    test_strength: f64,
    config: &ToyConfig,
) -> Result<(Vec<EnvDataset>, EnvDataset)> {
    let m = train_strengths.len();
    if m < 2 {
        return Err(LacimError::InvalidArgument("toy preset needs at least two training environments".into()));
    }
    for &r in train_strengths.iter().chain([&test_strength]) {
        check_strength(r)?;
    }
    for i in 0..m {
        for j in i + 1..m {
            if train_strengths[i] == train_strengths[j] {
                return Err(LacimError::InvalidArgument(format!(
                    "training strengths must be distinct, {} repeats",
                    train_strengths[i]
                )));
            }
        }
    }
    let scm = ToyScm::new(seed, config.clone())?;
    let train = train_strengths
        .iter()
        .enumerate()
        .map(|(k, &rho)| {
            let mut rng = RngStream::for_purpose(seed, purpose::TOY, 1 + k as u64);
            scm.sample(k + 1, rho, config.n_per_env, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = RngStream::for_purpose(seed, purpose::TOY, 1000);
    let test = scm.sample(m + 1, test_strength, config.n_test, &mut rng)?;
    Ok((train, test))
}
