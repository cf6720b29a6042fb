//! One-dimensional toy generative process and its exact posterior oracle.
//!
//! Data: `z ~ N(0,1)`, `x | z ~ N(z^2, sigma^2)`. The posterior over z is
//! proportional to `exp(-(z^2-x)^2 / (2 sigma^2) - z^2/2)` — bimodal for
//! large `x` with peaks near `z = +-sqrt(x)` — and the temperature-tilted
//! variant divides the likelihood exponent by `gamma`. The oracle normalizes
//! on a grid by the trapezoid rule and reports density, moments, and mode
//! locations; it is the ground truth the Langevin chain is checked against.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::standard_normal;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid toy config: {0}")]
    InvalidConfig(String),
    #[error("posterior mass {mass:.3e} below 1e-12: grid too narrow for x = {x}")]
    GridTooNarrow { mass: f64, x: f64 },
}

pub type Result<T> = std::result::Result<T, ToyError>;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    /// Observation noise of `x | z`.
    pub sigma: f64,
    /// Temperature of the tilted posterior; 1 recovers the plain posterior.
    pub gamma: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub n_points: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { sigma: 0.5, gamma: 1.0, z_min: -6.0, z_max: 6.0, n_points: 4001 }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma <= 0.0 {
            return Err(ToyError::InvalidConfig(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.gamma <= 0.0 {
            return Err(ToyError::InvalidConfig(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.z_min > -6.0 || self.z_max < 6.0 {
            return Err(ToyError::InvalidConfig(format!(
                "grid [{}, {}] must cover [-6, 6]",
                self.z_min, self.z_max
            )));
        }
        if self.n_points < 2001 {
            return Err(ToyError::InvalidConfig(format!(
                "need at least 2001 grid points, got {}",
                self.n_points
            )));
        }
        Ok(())
    }
}

/// `n` i.i.d. draws of the generative process, returned as `(z, x)` pairs.
pub fn toy_sample(cfg: &ToyConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    (0..n)
        .map(|_| {
            let z = standard_normal(rng);
            let x = z * z + cfg.sigma * standard_normal(rng);
            (z, x)
        })
        .collect()
}

/// Unnormalized tilted posterior `exp(-z^2/2 - (z^2 - x)^2 / (2 gamma sigma^2))`.
pub fn true_posterior_unnorm(cfg: &ToyConfig, z: f64, x: f64) -> f64 {
    let r = z * z - x;
    (-z * z / 2.0 - r * r / (2.0 * cfg.gamma * cfg.sigma * cfg.sigma)).exp()
}

/// Quadrature-normalized posterior on the config grid.
#[derive(Debug, Clone)]
pub struct PosteriorOracle {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    pub modes: Vec<f64>,
}

impl PosteriorOracle {
    /// Probability mass on `[a, b]` by trapezoid integration of the density.
    pub fn mass_between(&self, a: f64, b: f64) -> f64 {
        let mut acc = 0.0;
        for w in self.grid.windows(2).zip(self.density.windows(2)) {
            let ((z0, z1), (d0, d1)) = ((w.0[0], w.0[1]), (w.1[0], w.1[1]));
            let (lo, hi) = (z0.max(a), z1.min(b));
            if hi <= lo {
                continue;
            }
            // Linear interpolation of the density over the clipped interval.
            let t0 = (lo - z0) / (z1 - z0);
            let t1 = (hi - z0) / (z1 - z0);
            let dl = d0 + (d1 - d0) * t0;
            let dh = d0 + (d1 - d0) * t1;
            acc += 0.5 * (dl + dh) * (hi - lo);
        }
        acc
    }
}

/// Normalize the unnormalized posterior by the trapezoid rule and extract
/// moments and strict local maxima (over +-3 grid neighbors).
pub fn posterior_oracle(cfg: &ToyConfig, x: f64) -> Result<PosteriorOracle> {
    cfg.validate()?;
    let n = cfg.n_points;
    let h = (cfg.z_max - cfg.z_min) / (n - 1) as f64;
    let grid: Vec<f64> = (0..n).map(|i| cfg.z_min + i as f64 * h).collect();
    let unnorm: Vec<f64> = grid.iter().map(|&z| true_posterior_unnorm(cfg, z, x)).collect();
    let mass = trapezoid(&unnorm, h);
    if mass < 1e-12 {
        return Err(ToyError::GridTooNarrow { mass, x });
    }
    let density: Vec<f64> = unnorm.iter().map(|u| u / mass).collect();
    let m1 = {
        let f: Vec<f64> = grid.iter().zip(&density).map(|(z, d)| z * d).collect();
        trapezoid(&f, h)
    };
    let m2 = {
        let f: Vec<f64> = grid.iter().zip(&density).map(|(z, d)| z * z * d).collect();
        trapezoid(&f, h)
    };
    let modes = strict_local_maxima(&grid, &density, 3);
    Ok(PosteriorOracle { grid, density, mean: m1, variance: m2 - m1 * m1, modes })
}

fn trapezoid(f: &[f64], h: f64) -> f64 {
    if f.len() < 2 {
        return 0.0;
    }
    let inner: f64 = f[1..f.len() - 1].iter().sum();
    h * (0.5 * f[0] + inner + 0.5 * f[f.len() - 1])
}

/// Strict local maxima over a +-`k` neighborhood; guards against plateau
/// false positives.
pub fn strict_local_maxima(grid: &[f64], density: &[f64], k: usize) -> Vec<f64> {
    let n = density.len();
    let mut modes = Vec::new();
    for i in k..n - k {
        let v = density[i];
        let mut strict = true;
        for j in 1..=k {
            if v <= density[i - j] || v <= density[i + j] {
                strict = false;
                break;
            }
        }
        if strict {
            modes.push(grid[i]);
        }
    }
    modes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{mean_var, rng_from_seed};
    use rand::Rng;

    #[test]
    fn sample_moments_match_chi_square_identities() {
        // E[x] = E[z^2] = 1 and Var[x] = Var[z^2] + sigma^2 = 2 + sigma^2.
        let cfg = ToyConfig::default();
        let mut rng = rng_from_seed(10);
        let n = 100_000;
        let xs: Vec<f64> = toy_sample(&cfg, n, &mut rng).iter().map(|p| p.1).collect();
        let (mean, var) = mean_var(&xs);
        let se_mean = (var / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se_mean, "mean {mean}");
        // SE of the variance of a non-Gaussian variable via the fourth moment.
        let m = xs.iter().sum::<f64>() / n as f64;
        let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n as f64;
        let se_var = ((m4 - var * var) / n as f64).sqrt();
        let expect = 2.0 + cfg.sigma * cfg.sigma;
        assert!((var - expect).abs() < 3.0 * se_var, "var {var} vs {expect}");
    }

    #[test]
    fn fixed_seed_reproduces_sample_set() {
        let cfg = ToyConfig::default();
        let a = toy_sample(&cfg, 1000, &mut rng_from_seed(7));
        let b = toy_sample(&cfg, 1000, &mut rng_from_seed(7));
        assert_eq!(a, b);
    }

    #[test]
    fn posterior_is_even_in_z() {
        let cfg = ToyConfig::default();
        let mut rng = rng_from_seed(8);
        for _ in 0..200 {
            let z: f64 = rng.random_range(-4.0..4.0);
            let x: f64 = rng.random_range(-1.0..6.0);
            let (a, b) = (true_posterior_unnorm(&cfg, z, x), true_posterior_unnorm(&cfg, -z, x));
            assert!((a - b).abs() <= 1e-15 * a.max(1.0));
        }
    }

    #[test]
    fn large_x_is_bimodal_at_plus_minus_sqrt_x() {
        let cfg = ToyConfig { sigma: 0.5, ..Default::default() };
        let oracle = posterior_oracle(&cfg, 4.0).unwrap();
        assert_eq!(oracle.modes.len(), 2, "modes: {:?}", oracle.modes);
        let sqrt_x = 2.0;
        assert!((oracle.modes[0] + sqrt_x).abs() < 0.05, "{:?}", oracle.modes);
        assert!((oracle.modes[1] - sqrt_x).abs() < 0.05, "{:?}", oracle.modes);
    }

    #[test]
    fn x_zero_is_unimodal_at_origin() {
        let cfg = ToyConfig::default();
        let oracle = posterior_oracle(&cfg, 0.0).unwrap();
        assert_eq!(oracle.modes.len(), 1);
        assert!(oracle.modes[0].abs() < 1e-9);
    }

    #[test]
    fn oracle_mean_zero_and_unit_mass() {
        let cfg = ToyConfig::default();
        for x in [0.3, 1.0, 2.5] {
            let oracle = posterior_oracle(&cfg, x).unwrap();
            assert!(oracle.mean.abs() < 1e-9, "mean {} at x={x}", oracle.mean);
            let h = oracle.grid[1] - oracle.grid[0];
            let mass = super::trapezoid(&oracle.density, h);
            assert!((mass - 1.0).abs() < 1e-9, "mass {mass}");
        }
    }

    #[test]
    fn oracle_variance_matches_rejection_sampler() {
        // Independent rejection-sampling oracle at (x=2, sigma=0.5, gamma=1).
        let cfg = ToyConfig::default();
        let x = 2.0;
        let oracle = posterior_oracle(&cfg, x).unwrap();
        // Frozen quadrature value, checked first so drift in either oracle is caught.
        assert!((oracle.variance - 1.7972061640097472).abs() < 1e-6);

        let mut rng = rng_from_seed(9);
        let max = oracle
            .grid
            .iter()
            .map(|&z| true_posterior_unnorm(&cfg, z, x))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut accepted = Vec::new();
        let target = 200_000;
        while accepted.len() < target {
            let z: f64 = rng.random_range(-6.0..6.0);
            let u: f64 = rng.random_range(0.0..max);
            if u < true_posterior_unnorm(&cfg, z, x) {
                accepted.push(z);
            }
        }
        let (_, var) = mean_var(&accepted);
        let m = accepted.iter().sum::<f64>() / target as f64;
        let m4 = accepted.iter().map(|v| (v - m).powi(4)).sum::<f64>() / target as f64;
        let se_var = ((m4 - var * var) / target as f64).sqrt();
        assert!(
            (var - oracle.variance).abs() < 3.0 * se_var,
            "rejection var {var} vs quadrature {}",
            oracle.variance
        );
    }

    #[test]
    fn refinement_stability() {
        let base = ToyConfig::default();
        let fine = ToyConfig { n_points: base.n_points * 2 - 1, ..base };
        for x in [0.5, 2.0] {
            let a = posterior_oracle(&base, x).unwrap();
            let b = posterior_oracle(&fine, x).unwrap();
            assert!((a.mean - b.mean).abs() < 1e-8);
            assert!((a.variance - b.variance).abs() < 1e-8);
        }
    }

    #[test]
    fn tilted_posterior_approaches_prior_as_gamma_grows() {
        let cfg = ToyConfig { gamma: 1e6, ..Default::default() };
        let oracle = posterior_oracle(&cfg, 2.0).unwrap();
        let mut sup = 0.0_f64;
        for (&z, &d) in oracle.grid.iter().zip(&oracle.density) {
            let prior = (-z * z / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
            sup = sup.max((d - prior).abs());
        }
        assert!(sup < 1e-3, "sup-norm to N(0,1): {sup}");
    }

    #[test]
    fn modes_approach_sqrt_x_as_sigma_shrinks() {
        let x = 2.25; // sqrt x = 1.5
        let mut prev_err = f64::INFINITY;
        for sigma in [0.5, 0.25, 0.1, 0.05] {
            let cfg = ToyConfig { sigma, ..Default::default() };
            let oracle = posterior_oracle(&cfg, x).unwrap();
            let err = oracle
                .modes
                .iter()
                .map(|m| (m.abs() - x.sqrt()).abs())
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(err <= prev_err + 1e-9, "mode error must shrink: {err} vs {prev_err}");
            prev_err = err;
        }
        assert!(prev_err < 5e-3);
    }

    #[test]
    fn narrow_grid_is_rejected() {
        // Posterior at huge x concentrates near +-sqrt(x) outside the grid.
        let cfg = ToyConfig::default();
        let err = posterior_oracle(&cfg, 500.0).unwrap_err();
        assert!(matches!(err, ToyError::GridTooNarrow { .. }));
        // Invariant-violating grids are rejected outright.
        assert!(ToyConfig { n_points: 100, ..Default::default() }.validate().is_err());
        assert!(ToyConfig { z_max: 4.0, ..Default::default() }.validate().is_err());
    }
}
