//! Ground-truth latent causal model used to generate multi-environment data.
//!
//! Per sample in environment `e`:
//!
//! ```text
//! d ~ (N(0, I) + 5e) · 2
//! c ~ N(d, I)
//! (s, z) ~ N(A_μ c, diag(exp(A_σ c))²)
//! x ~ N(f_x^μ([s, z]), diag(exp(f_x^σ([s, z])))²)
//! y ~ N(f_y^μ(s), diag(exp(f_y^σ(s)))²)
//! ```
//!
//! where the `f` nets are three LeakyReLU(0.5) layers with the activation
//! also applied to the output, and no biases.

mod dataset;
pub mod toy;

pub use dataset::{export_dataset, format_f64, import_dataset, EnvDataset, Latents, Observed, Targets};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, LacimError, Result};
use crate::numeric::rng::{purpose, RngStream};
use crate::numeric::{Matrix, Mlp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmDims {
    pub q_d: usize,
    pub q_c: usize,
    pub q_s: usize,
    pub q_z: usize,
    pub q_x: usize,
    pub q_y: usize,
}

impl Default for ScmDims {
    fn default() -> Self {
        Self {
            q_d: 2,
            q_c: 2,
            q_s: 2,
            q_z: 2,
            q_x: 4,
            q_y: 2,
        }
    }
}

impl ScmDims {
    pub fn validate(&self) -> Result<()> {
        let all = [self.q_d, self.q_c, self.q_s, self.q_z, self.q_x, self.q_y];
        if all.contains(&0) {
            return Err(LacimError::InvalidArgument(format!("all dimensions must be positive: {self:?}")));
        }
        if self.q_c != self.q_d {
            return Err(LacimError::InvalidArgument(format!(
                "c is drawn around d, so q_c must equal q_d ({} vs {})",
                self.q_c, self.q_d
            )));
        }
        if self.q_s + self.q_z > self.q_x {
            return Err(LacimError::InvalidArgument(format!(
                "q_s + q_z must not exceed q_x ({} + {} > {})",
                self.q_s, self.q_z, self.q_x
            )));
        }
        Ok(())
    }
}

/// Generator scales not pinned down by the model definition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScmOptions {
    /// Hidden width of the observation and target nets.
    pub hidden: usize,
    pub slope: f64,
    /// Bound multiplier for `A_μ` entries (base bound 1/√q_c).
    pub latent_mean_scale: f64,
    /// Bound multiplier for `A_σ` entries.
    pub latent_logstd_scale: f64,
    /// Per-layer bound multiplier of the mean nets.
    pub mean_net_scale: f64,
    /// Per-layer bound multiplier of the log-std nets.
    pub logstd_net_scale: f64,
    /// Environment offset step: `d = (N(0, I) + step·e) · spread`.
    pub env_step: f64,
    pub env_spread: f64,
}

impl Default for ScmOptions {
    fn default() -> Self {
        Self {
            hidden: 16,
            slope: 0.5,
            latent_mean_scale: 0.1,
            latent_logstd_scale: 0.02,
            mean_net_scale: 2.45,
            logstd_net_scale: 1.0,
            env_step: 5.0,
            env_spread: 2.0,
        }
    }
}

/// Frozen parameters of the data-generating model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthScm {
    pub m: usize,
    pub dims: ScmDims,
    pub options: ScmOptions,
    /// `(q_s + q_z) × q_c`.
    pub a_mu_sz: Matrix,
    pub a_sigma_sz: Matrix,
    pub f_x_mu: Mlp,
    pub f_x_sigma: Mlp,
    pub f_y_mu: Mlp,
    pub f_y_sigma: Mlp,
}

/// Switches for degenerate sampling used in tests and diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SampleOptions {
    /// Drop the N(0, I) term of `d` (and the N(d, I) term of `c`).
    pub zero_env_noise: bool,
    /// Force σ_x = 0 so `x` is a deterministic function of `(s, z)`.
    pub zero_observation_noise: bool,
}

/// Hard intervention on the latents.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub s_star: Option<Vec<f64>>,
    pub z_star: Option<Vec<f64>>,
}

pub fn build_scm(seed: u64, dims: ScmDims, m: usize) -> Result<GroundTruthScm> {
    build_scm_with(seed, dims, m, ScmOptions::default())
}

pub fn build_scm_with(seed: u64, dims: ScmDims, m: usize, options: ScmOptions) -> Result<GroundTruthScm> {
    dims.validate()?;
    if m == 0 {
        return Err(LacimError::InvalidArgument("at least one environment required".into()));
    }
    let mut rng = RngStream::for_purpose(seed, purpose::SCM_INIT, 0);
    let q_sz = dims.q_s + dims.q_z;
    let lin = |scale: f64, rng: &mut RngStream| {
        let bound = scale / (dims.q_c as f64).sqrt();
        Matrix::from_fn(q_sz, dims.q_c, |_, _| rng.uniform_range(-bound, bound))
    };
    let a_mu_sz = lin(options.latent_mean_scale, &mut rng);
    let a_sigma_sz = lin(options.latent_logstd_scale, &mut rng);
    let h = options.hidden;
    let net = |inp: usize, out: usize, scale: f64, rng: &mut RngStream| {
        Mlp::with_weight_scale(&[inp, h, h, out], options.slope, true, scale, rng)
    };
    let f_x_mu = net(q_sz, dims.q_x, options.mean_net_scale, &mut rng)?;
    let f_x_sigma = net(q_sz, dims.q_x, options.logstd_net_scale, &mut rng)?;
    let f_y_mu = net(dims.q_s, dims.q_y, options.mean_net_scale, &mut rng)?;
    let f_y_sigma = net(dims.q_s, dims.q_y, options.logstd_net_scale, &mut rng)?;
    Ok(GroundTruthScm {
        m,
        dims,
        options,
        a_mu_sz,
        a_sigma_sz,
        f_x_mu,
        f_x_sigma,
        f_y_mu,
        f_y_sigma,
    })
}

impl GroundTruthScm {
    /// Mean of `d` in environment `e`: `step·e·spread` per coordinate.
    pub fn env_offset(&self, e: usize) -> f64 {
        self.options.env_step * e as f64 * self.options.env_spread
    }

    /// Natural-parameter inputs of the conditional `p(s, z | c)`: mean and
    /// log-std, both `(q_s + q_z)`-vectors.
    pub fn latent_params(&self, c: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.a_mu_sz.mul_vec(c)?, self.a_sigma_sz.mul_vec(c)?))
    }

    /// `(μ_x, log σ_x)` for a batch of `[s, z]` rows.
    pub fn x_params(&self, sz: &Matrix) -> Result<(Matrix, Matrix)> {
        Ok((self.f_x_mu.forward(sz)?, self.f_x_sigma.forward(sz)?))
    }

    pub fn y_params(&self, s: &Matrix) -> Result<(Matrix, Matrix)> {
        Ok((self.f_y_mu.forward(s)?, self.f_y_sigma.forward(s)?))
    }

    pub fn sample_env(&self, e: usize, n: usize, rng: &mut RngStream) -> Result<EnvDataset> {
        self.sample_env_with(e, n, rng, SampleOptions::default())
    }

    pub fn sample_env_with(
        &self,
        e: usize,
        n: usize,
        rng: &mut RngStream,
        opts: SampleOptions,
    ) -> Result<EnvDataset> {
        if e == 0 || e > self.m {
            return Err(LacimError::InvalidArgument(format!(
                "environment {e} outside 1..={}",
                self.m
            )));
        }
        let ScmDims { q_c, q_s, q_z, .. } = self.dims;
        let q_sz = q_s + q_z;
        let noise = |rng: &mut RngStream| if opts.zero_env_noise { 0.0 } else { rng.normal() };
        let mut c = Matrix::zeros(n, q_c);
        let mut sz = Matrix::zeros(n, q_sz);
        for i in 0..n {
            // d is redrawn for every sample.
            let ci: Vec<f64> = (0..q_c)
                .map(|_| {
                    let d = (noise(rng) + self.options.env_step * e as f64) * self.options.env_spread;
                    d + noise(rng)
                })
                .collect();
            let (mu, ls) = self.latent_params(&ci)?;
            for j in 0..q_sz {
                sz.set(i, j, mu[j] + ls[j].exp() * rng.normal());
            }
            for (j, v) in ci.into_iter().enumerate() {
                c.set(i, j, v);
            }
        }
        let x = self.draw_x(&sz, rng, opts.zero_observation_noise)?;
        let s = sz.slice_cols(0, q_s);
        let z = sz.slice_cols(q_s, q_sz);
        let y = self.draw_y(&s, rng)?;
        EnvDataset::new(e, x, Targets::Continuous(y), Some(Latents { s, z, c }))
    }

    fn draw_x(&self, sz: &Matrix, rng: &mut RngStream, zero_noise: bool) -> Result<Matrix> {
        let (mu, ls) = self.x_params(sz)?;
        Ok(Matrix::from_fn(mu.rows(), mu.cols(), |i, j| {
            if zero_noise {
                mu.get(i, j)
            } else {
                mu.get(i, j) + ls.get(i, j).exp() * rng.normal()
            }
        }))
    }

    fn draw_y(&self, s: &Matrix, rng: &mut RngStream) -> Result<Matrix> {
        let (mu, ls) = self.y_params(s)?;
        Ok(Matrix::from_fn(mu.rows(), mu.cols(), |i, j| {
            mu.get(i, j) + ls.get(i, j).exp() * rng.normal()
        }))
    }

    /// Draws `x ~ p(x | do(s*), do(z*))` and `y ~ p(y | do(s*))`. Nothing about
    /// environments, `c` or `d` enters; the dataset carries `env` 0.
    pub fn sample_interventional(
        &self,
        intervention: &Intervention,
        n: usize,
        rng: &mut RngStream,
    ) -> Result<EnvDataset> {
        let s_star = intervention
            .s_star
            .as_ref()
            .ok_or_else(|| LacimError::InvalidArgument("x-sampling under intervention needs s*".into()))?;
        let z_star = intervention
            .z_star
            .as_ref()
            .ok_or_else(|| LacimError::InvalidArgument("x-sampling under intervention needs z*".into()))?;
        if s_star.len() != self.dims.q_s {
            return Err(dim_err("intervention s*", self.dims.q_s, s_star.len()));
        }
        if z_star.len() != self.dims.q_z {
            return Err(dim_err("intervention z*", self.dims.q_z, z_star.len()));
        }
        let s = Matrix::from_fn(n, self.dims.q_s, |_, j| s_star[j]);
        let z = Matrix::from_fn(n, self.dims.q_z, |_, j| z_star[j]);
        let sz = Matrix::hstack(&[&s, &z])?;
        let x = self.draw_x(&sz, rng, false)?;
        let y = self.draw_y(&s, rng)?;
        let c = Matrix::zeros(n, 0);
        EnvDataset::new(0, x, Targets::Continuous(y), Some(Latents { s, z, c }))
    }

    /// Draws `y ~ p(y | do(s*))` only.
    pub fn sample_interventional_y(&self, s_star: &[f64], n: usize, rng: &mut RngStream) -> Result<Matrix> {
        if s_star.len() != self.dims.q_s {
            return Err(dim_err("intervention s*", self.dims.q_s, s_star.len()));
        }
        let s = Matrix::from_fn(n, self.dims.q_s, |_, j| s_star[j]);
        self.draw_y(&s, rng)
    }

    /// One dataset per environment, each from its own stream.
    pub fn sample_all(&self, n_per_env: usize, seed: u64) -> Result<Vec<EnvDataset>> {
        (1..=self.m)
            .map(|e| {
                let mut rng = RngStream::for_purpose(seed, purpose::ENV_SAMPLE, e as u64);
                self.sample_env(e, n_per_env, &mut rng)
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.a_mu_sz.is_finite()
            && self.a_sigma_sz.is_finite()
            && [&self.f_x_mu, &self.f_x_sigma, &self.f_y_mu, &self.f_y_sigma]
                .iter()
                .all(|n| n.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_build_shapes() {
        let scm = build_scm(1, ScmDims::default(), 5).unwrap();
        assert_eq!(scm.m, 5);
        assert_eq!(scm.f_x_mu.dims(), vec![4, 16, 16, 4]);
        assert_eq!(scm.f_y_mu.dims(), vec![2, 16, 16, 2]);
        assert_eq!(scm.f_x_mu.layers.len(), 3);
        assert_eq!(scm.a_mu_sz.shape(), (4, 2));
        assert!(scm.is_finite());
    }

    #[test]
    fn same_seed_same_scm() {
        let a = build_scm(9, ScmDims::default(), 5).unwrap();
        let b = build_scm(9, ScmDims::default(), 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, build_scm(10, ScmDims::default(), 5).unwrap());
    }

    #[test]
    fn latent_dims_must_fit_under_x() {
        let dims = ScmDims {
            q_x: 4,
            q_s: 2,
            q_z: 2,
            ..ScmDims::default()
        };
        assert!(dims.validate().is_ok());
        let bad = ScmDims { q_x: 3, ..dims };
        assert!(build_scm(0, bad, 5).is_err());
        assert!(build_scm(0, ScmDims::default(), 0).is_err());
    }

    #[test]
    fn zero_noise_offset() {
        let scm = build_scm(3, ScmDims::default(), 5).unwrap();
        let mut rng = RngStream::new(0, 0);
        let ds = scm
            .sample_env_with(
                1,
                3,
                &mut rng,
                SampleOptions {
                    zero_env_noise: true,
                    ..Default::default()
                },
            )
            .unwrap();
        let c = &ds.latents.as_ref().unwrap().c;
        assert_eq!(c.row(0), &[10.0, 10.0]);
    }

    #[test]
    fn env_index_checked() {
        let scm = build_scm(3, ScmDims::default(), 5).unwrap();
        let mut rng = RngStream::new(0, 0);
        assert!(scm.sample_env(0, 2, &mut rng).is_err());
        assert!(scm.sample_env(6, 2, &mut rng).is_err());
    }

    #[test]
    fn five_envs_of_thousand() {
        let scm = build_scm(4, ScmDims::default(), 5).unwrap();
        let all = scm.sample_all(1000, 4).unwrap();
        assert_eq!(all.len(), 5);
        for (k, ds) in all.iter().enumerate() {
            assert_eq!(ds.env, k + 1);
            assert_eq!(ds.len(), 1000);
            assert!(ds.x.is_finite());
        }
    }

    #[test]
    fn deterministic_without_observation_noise() {
        let scm = build_scm(5, ScmDims::default(), 5).unwrap();
        let mut rng = RngStream::new(1, 1);
        let opts = SampleOptions {
            zero_observation_noise: true,
            ..Default::default()
        };
        let ds = scm.sample_env_with(2, 50, &mut rng, opts).unwrap();
        let l = ds.latents.unwrap();
        let sz = Matrix::hstack(&[&l.s, &l.z]).unwrap();
        assert_eq!(ds.x, scm.f_x_mu.forward(&sz).unwrap());
    }

    #[test]
    fn intervention_needs_both_components() {
        let scm = build_scm(5, ScmDims::default(), 5).unwrap();
        let mut rng = RngStream::new(1, 1);
        let only_s = Intervention {
            s_star: Some(vec![0.1, 0.2]),
            z_star: None,
        };
        assert!(scm.sample_interventional(&only_s, 5, &mut rng).is_err());
        assert!(scm.sample_interventional_y(&[0.1, 0.2], 5, &mut rng).is_ok());
        let wrong_len = Intervention {
            s_star: Some(vec![0.1]),
            z_star: Some(vec![0.0, 0.0]),
        };
        assert!(scm.sample_interventional(&wrong_len, 5, &mut rng).is_err());
    }
}
