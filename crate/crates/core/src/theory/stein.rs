//! Stein kernels by quadrature and the posterior-shift bound
//! `|E₁g − E₂g| ≤ ‖g′‖∞ ‖π′‖∞ Var₁(S)` with `π = p₂/p₁`.

use serde::{Deserialize, Serialize};

use crate::error::{LacimError, Result};
use crate::numeric::RngStream;

/// Densities below this value make `τ(x)` unreliable.
pub const UNRELIABLE_DENSITY: f64 = 1e-12;

/// Default quadrature resolution.
pub const GRID_POINTS: usize = 4001;

/// `n` evenly spaced points on `[lo, hi]`.
pub fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + step * i as f64).collect()
}

/// Trapezoid rule for values `f` on an even grid of spacing `h`.
pub fn trapezoid(f: &[f64], h: f64) -> f64 {
    match f.len() {
        0 | 1 => 0.0,
        n => h * (f[1..n - 1].iter().sum::<f64>() + 0.5 * (f[0] + f[n - 1])),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteinKernel {
    pub grid: Vec<f64>,
    /// Normalized density on the grid.
    pub density: Vec<f64>,
    /// `∫_{−∞}^{x} (E[X] − t) p(t) dt` on the grid.
    pub integral: Vec<f64>,
    /// `τ(x)`; NaN where the density is below [`UNRELIABLE_DENSITY`].
    pub tau: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

impl SteinKernel {
    pub fn reliable(&self, i: usize) -> bool {
        self.density[i] >= UNRELIABLE_DENSITY
    }

    /// `E[τ(X)]`, computed as `∫ τ p = ∫ integral` so tails need no division.
    pub fn expected_tau(&self) -> f64 {
        trapezoid(&self.integral, self.grid[1] - self.grid[0])
    }

    /// Linear interpolation of `τ`; `None` outside the grid or at
    /// unreliable points.
    pub fn eval(&self, x: f64) -> Option<f64> {
        let (lo, hi) = (self.grid[0], *self.grid.last()?);
        if !(lo..=hi).contains(&x) {
            return None;
        }
        let h = self.grid[1] - self.grid[0];
        let i = (((x - lo) / h).floor() as usize).min(self.grid.len() - 2);
        if !self.reliable(i) || !self.reliable(i + 1) {
            return None;
        }
        let w = (x - self.grid[i]) / h;
        Some((1.0 - w) * self.tau[i] + w * self.tau[i + 1])
    }
}

/// Stein kernel of the (possibly unnormalized) density `p`, tabulated on
/// `n` points of `[lo, hi]`, which must cover its effective support.
pub fn stein_kernel(p: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> Result<SteinKernel> {
    if n < 3 || !(hi > lo) {
        return Err(LacimError::InvalidArgument(format!("bad quadrature grid [{lo}, {hi}] with {n} points")));
    }
    let xs = grid(lo, hi, n);
    let h = xs[1] - xs[0];
    let raw: Vec<f64> = xs.iter().map(|&x| p(x)).collect();
    if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(LacimError::NonFinite("density values must be finite and non-negative".into()));
    }
    let z = trapezoid(&raw, h);
    if !(z > 0.0) {
        return Err(LacimError::InvalidArgument("density integrates to zero on the grid".into()));
    }
    let density: Vec<f64> = raw.iter().map(|v| v / z).collect();
    let xp: Vec<f64> = xs.iter().zip(&density).map(|(x, p)| x * p).collect();
    let mean = trapezoid(&xp, h);
    let centered: Vec<f64> = xs.iter().zip(&density).map(|(x, p)| (mean - x) * p).collect();
    let mut integral = vec![0.0; n];
    for i in 1..n {
        integral[i] = integral[i - 1] + 0.5 * h * (centered[i - 1] + centered[i]);
    }
    let sq: Vec<f64> = xs.iter().zip(&density).map(|(x, p)| (x - mean).powi(2) * p).collect();
    let variance = trapezoid(&sq, h);
    let tau = integral
        .iter()
        .zip(&density)
        .map(|(f, p)| if *p >= UNRELIABLE_DENSITY { f / p } else { f64::NAN })
        .collect();
    Ok(SteinKernel {
        grid: xs,
        density,
        integral,
        tau,
        mean,
        variance,
    })
}

/// Two Gaussian posteriors of `S` given the same `x` in two environments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosteriorPair {
    pub mu1: f64,
    pub sigma1: f64,
    pub mu2: f64,
    pub sigma2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodBound {
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs − lhs`.
    pub slack: f64,
    pub g_lipschitz: f64,
    pub ratio_slope: f64,
    pub variance: f64,
}

impl OodBound {
    pub fn holds(&self, tol: f64) -> bool {
        self.lhs <= self.rhs + tol
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum OodOutcome {
    Applicable(OodBound),
    /// `π` or `π′` is unbounded, so the bound says nothing.
    Inapplicable { reason: String },
}

fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// `sup |π′|` for `π = N(μ₂, σ₂²)/N(μ₁, σ₁²)`, or `None` when unbounded.
///
/// For `σ₂ < σ₁`, `log π = log π_max − a (s − s₀)²` with
/// `a = 1/(2σ₂²) − 1/(2σ₁²)`, and `|π′|` peaks at `|s − s₀| = 1/√(2a)`.
pub fn ratio_slope_sup(pair: &GaussianPosteriorPair) -> Option<f64> {
    let GaussianPosteriorPair { mu1, sigma1, mu2, sigma2 } = *pair;
    if sigma1 == sigma2 {
        return (mu1 == mu2).then_some(0.0);
    }
    if sigma2 > sigma1 {
        return None;
    }
    let (v1, v2) = (sigma1 * sigma1, sigma2 * sigma2);
    let a = 0.5 / v2 - 0.5 / v1;
    // Vertex of the quadratic log-ratio.
    let s0 = (mu2 / v2 - mu1 / v1) / (2.0 * a);
    // In log space: both densities underflow at a far-out vertex when σ₂ ≈ σ₁.
    let log_pdf = |mu: f64, v: f64| -0.5 * v.ln() - (s0 - mu).powi(2) / (2.0 * v);
    let log_max = log_pdf(mu2, v2) - log_pdf(mu1, v1);
    Some((2.0 * a).sqrt() * (log_max - 0.5).exp())
}

/// Evaluates both sides of the bound by quadrature on a grid covering both
/// posteriors (`±8σ`, [`GRID_POINTS`] points). `‖g′‖∞` is the largest
/// central-difference slope of `g` on that grid.
pub fn ood_bound_check(pair: &GaussianPosteriorPair, g: impl Fn(f64) -> f64) -> Result<OodOutcome> {
    let GaussianPosteriorPair { mu1, sigma1, mu2, sigma2 } = *pair;
    if !(sigma1 > 0.0 && sigma2 > 0.0) || ![mu1, mu2, sigma1, sigma2].iter().all(|v| v.is_finite()) {
        return Err(LacimError::InvalidArgument(format!("invalid posterior pair {pair:?}")));
    }
    let Some(ratio_slope) = ratio_slope_sup(pair) else {
        return Ok(OodOutcome::Inapplicable {
            reason: if sigma2 > sigma1 {
                format!("σ₂ = {sigma2} > σ₁ = {sigma1}: density ratio grows without bound in the tails")
            } else {
                "equal scales with different means: density ratio is exponential".into()
            },
        });
    };
    let lo = (mu1 - 8.0 * sigma1).min(mu2 - 8.0 * sigma2);
    let hi = (mu1 + 8.0 * sigma1).max(mu2 + 8.0 * sigma2);
    let xs = grid(lo, hi, GRID_POINTS);
    let h = xs[1] - xs[0];
    let gv: Vec<f64> = xs.iter().map(|&x| g(x)).collect();
    if gv.iter().any(|v| !v.is_finite()) {
        return Err(LacimError::NonFinite("g is not finite on the grid".into()));
    }
    let e1 = trapezoid(&xs.iter().zip(&gv).map(|(&x, g)| g * normal_pdf(x, mu1, sigma1)).collect::<Vec<_>>(), h);
    let e2 = trapezoid(&xs.iter().zip(&gv).map(|(&x, g)| g * normal_pdf(x, mu2, sigma2)).collect::<Vec<_>>(), h);
    let g_lipschitz = xs
        .iter()
        .map(|&x| ((g(x + 1e-5) - g(x - 1e-5)) / 2e-5).abs())
        .fold(0.0, f64::max);
    let lhs = (e1 - e2).abs();
    let variance = sigma1 * sigma1;
    let rhs = g_lipschitz * ratio_slope * variance;
    Ok(OodOutcome::Applicable(OodBound {
        lhs,
        rhs,
        slack: rhs - lhs,
        g_lipschitz,
        ratio_slope,
        variance,
    }))
}

/// A random pair with `σ₂ < σ₁` (always applicable).
pub fn random_ood_pair(rng: &mut RngStream) -> GaussianPosteriorPair {
    let sigma1 = rng.uniform_range(0.3, 2.0);
    GaussianPosteriorPair {
        mu1: rng.uniform_range(-2.0, 2.0),
        sigma1,
        mu2: rng.uniform_range(-2.0, 2.0),
        sigma2: sigma1 * rng.uniform_range(0.3, 0.99),
    }
}

/// Finite Gaussian mixture, used as a family of smooth test densities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    /// `(weight, mean, std)`; weights sum to one.
    pub components: Vec<(f64, f64, f64)>,
}

impl GaussianMixture {
    pub fn pdf(&self, x: f64) -> f64 {
        self.components.iter().map(|&(w, m, s)| w * normal_pdf(x, m, s)).sum()
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|&(w, m, _)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.components.iter().map(|&(w, m, s)| w * (s * s + (m - mean).powi(2))).sum()
    }

    /// Interval holding every component to `±8σ`.
    pub fn support(&self) -> (f64, f64) {
        let lo = self.components.iter().map(|&(_, m, s)| m - 8.0 * s).fold(f64::INFINITY, f64::min);
        let hi = self.components.iter().map(|&(_, m, s)| m + 8.0 * s).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    /// One to three components with means in `[−3, 3]` and stds in `[0.5, 2]`.
    pub fn random(rng: &mut RngStream) -> Self {
        let k = 1 + rng.below(3);
        let raw: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.2, 1.0)).collect();
        let total: f64 = raw.iter().sum();
        Self {
            components: raw
                .iter()
                .map(|w| (w / total, rng.uniform_range(-3.0, 3.0), rng.uniform_range(0.5, 2.0)))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_kernel_is_one() {
        let k = stein_kernel(|x| (-0.5 * x * x).exp(), -8.0, 8.0, GRID_POINTS).unwrap();
        for (i, &x) in k.grid.iter().enumerate() {
            if x.abs() <= 3.0 {
                assert!((k.tau[i] - 1.0).abs() < 1e-4, "τ({x}) = {}", k.tau[i]);
            }
        }
        assert!((k.eval(0.37).unwrap() - 1.0).abs() < 1e-4);
        assert!(k.eval(9.0).is_none());
    }

    #[test]
    fn scaled_normal_kernel_is_variance() {
        let s = 1.7;
        let k = stein_kernel(|x| normal_pdf(x, 0.5, s), 0.5 - 8.0 * s, 0.5 + 8.0 * s, GRID_POINTS).unwrap();
        for (i, &x) in k.grid.iter().enumerate() {
            if (x - 0.5).abs() <= 3.0 * s {
                assert!((k.tau[i] - s * s).abs() < 1e-4 * s * s);
            }
        }
    }

    #[test]
    fn far_tails_are_flagged() {
        let k = stein_kernel(|x| (-0.5 * x * x).exp(), -10.0, 10.0, 2001).unwrap();
        assert!(!k.reliable(0));
        assert!(k.tau[0].is_nan());
        assert!(k.reliable(1000));
    }

    #[test]
    fn mixture_identity_and_sign() {
        let p = |x: f64| 0.3 * normal_pdf(x, -1.0, 0.6) + 0.7 * normal_pdf(x, 1.5, 1.1);
        let k = stein_kernel(p, -10.0, 12.0, GRID_POINTS).unwrap();
        assert!((k.expected_tau() - k.variance).abs() < 1e-4 * k.variance);
        for i in 0..k.grid.len() {
            if k.reliable(i) {
                assert!(k.tau[i] > -1e-9);
            }
        }
    }

    #[test]
    fn quadrature_moments_match_mixture_formulas() {
        let mut rng = RngStream::new(4, 0);
        for _ in 0..5 {
            let mix = GaussianMixture::random(&mut rng);
            let (lo, hi) = mix.support();
            let k = stein_kernel(|x| mix.pdf(x), lo, hi, GRID_POINTS).unwrap();
            assert!((k.mean - mix.mean()).abs() < 1e-8);
            assert!((k.variance - mix.variance()).abs() < 1e-6 * mix.variance());
        }
    }

    #[test]
    fn invalid_grids() {
        assert!(stein_kernel(|_| 1.0, 1.0, 0.0, 10).is_err());
        assert!(stein_kernel(|_| 0.0, 0.0, 1.0, 10).is_err());
        assert!(stein_kernel(|_| -1.0, 0.0, 1.0, 10).is_err());
    }

    fn applicable(o: OodOutcome) -> OodBound {
        match o {
            OodOutcome::Applicable(b) => b,
            OodOutcome::Inapplicable { reason } => panic!("inapplicable: {reason}"),
        }
    }

    #[test]
    fn identical_posteriors() {
        let p = GaussianPosteriorPair { mu1: 0.2, sigma1: 1.0, mu2: 0.2, sigma2: 1.0 };
        let b = applicable(ood_bound_check(&p, f64::tanh).unwrap());
        assert!(b.lhs < 1e-12);
        assert_eq!(b.rhs, 0.0);
    }

    #[test]
    fn constant_g_gives_zero_sides() {
        let p = GaussianPosteriorPair { mu1: 0.0, sigma1: 1.0, mu2: 0.5, sigma2: 0.5 };
        let b = applicable(ood_bound_check(&p, |_| 3.0).unwrap());
        assert!(b.lhs < 1e-12);
        assert_eq!(b.rhs, 0.0);
        assert!(b.holds(1e-6));
    }

    #[test]
    fn wider_second_posterior_is_inapplicable() {
        let p = GaussianPosteriorPair { mu1: 0.0, sigma1: 1.0, mu2: 0.0, sigma2: 1.2 };
        assert!(matches!(ood_bound_check(&p, f64::tanh).unwrap(), OodOutcome::Inapplicable { .. }));
        let shifted = GaussianPosteriorPair { mu1: 0.0, sigma1: 1.0, mu2: 1.0, sigma2: 1.0 };
        assert!(matches!(ood_bound_check(&shifted, f64::tanh).unwrap(), OodOutcome::Inapplicable { .. }));
    }

    #[test]
    fn ratio_slope_matches_grid_search() {
        let p = GaussianPosteriorPair { mu1: 0.0, sigma1: 1.0, mu2: 0.3, sigma2: 0.8 };
        let closed = ratio_slope_sup(&p).unwrap();
        let slope = |s: f64| {
            let pi = normal_pdf(s, p.mu2, p.sigma2) / normal_pdf(s, p.mu1, p.sigma1);
            let dlog = -(s - p.mu2) / (p.sigma2 * p.sigma2) + (s - p.mu1) / (p.sigma1 * p.sigma1);
            (pi * dlog).abs()
        };
        let searched = grid(-10.0, 10.0, 200_001).into_iter().map(slope).fold(0.0, f64::max);
        assert!((closed - searched).abs() < 1e-6 * closed);
    }

    #[test]
    fn nearly_equal_scales_stay_finite() {
        // The ratio peaks far out in both tails, where the densities underflow.
        let p = GaussianPosteriorPair { mu1: 0.1086, sigma1: 0.4689, mu2: -1.9403, sigma2: 0.4468 };
        let closed = ratio_slope_sup(&p).unwrap();
        let slope = |s: f64| {
            let log_pi = -(s - p.mu2).powi(2) / (2.0 * p.sigma2 * p.sigma2) + (s - p.mu1).powi(2) / (2.0 * p.sigma1 * p.sigma1)
                + (p.sigma1 / p.sigma2).ln();
            let dlog = -(s - p.mu2) / (p.sigma2 * p.sigma2) + (s - p.mu1) / (p.sigma1 * p.sigma1);
            (log_pi.exp() * dlog).abs()
        };
        let searched = grid(-200.0, 0.0, 2_000_001).into_iter().map(slope).fold(0.0, f64::max);
        assert!(closed.is_finite());
        assert!((closed - searched).abs() < 1e-6 * closed, "{closed} vs {searched}");
        assert!(applicable(ood_bound_check(&p, f64::tanh).unwrap()).holds(1e-6));
    }

    #[test]
    fn tanh_example_has_positive_slack() {
        let p = GaussianPosteriorPair { mu1: 0.0, sigma1: 1.0, mu2: 0.3, sigma2: 0.8 };
        let b = applicable(ood_bound_check(&p, f64::tanh).unwrap());
        // Independent oracle: composite Simpson on a wide grid.
        let simpson = |f: &dyn Fn(f64) -> f64| {
            let (lo, hi, n) = (-12.0, 12.0, 20_000);
            let h = (hi - lo) / n as f64;
            let mut acc = f(lo) + f(hi);
            for i in 1..n {
                acc += f(lo + h * i as f64) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            acc * h / 3.0
        };
        let e1 = simpson(&|x| x.tanh() * normal_pdf(x, 0.0, 1.0));
        let e2 = simpson(&|x| x.tanh() * normal_pdf(x, 0.3, 0.8));
        assert!((b.lhs - (e1 - e2).abs()).abs() < 1e-8);
        assert!((b.g_lipschitz - 1.0).abs() < 1e-6);
        assert!(b.slack > 0.0);
    }
}
