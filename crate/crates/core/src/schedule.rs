//! Variance-preserving forward-diffusion schedule.
//!
//! Time bookkeeping is always in forward coordinates `s`; reverse-time
//! samplers convert with `s = T - t` at the boundary. The linear rate
//! `beta(s) = beta_min + (beta_max - beta_min) * s / T` admits a closed-form
//! survival factor `alpha_bar(s) = exp(-beta_min*s - (beta_max-beta_min)*s^2/(2T))`,
//! so any point of a forward trajectory can be sampled in a single jump.

use crate::tensor::Tensor;
use crate::util;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("invalid schedule: {0}")]
    InvalidConfig(String),
    #[error("time {s} outside [{lo}, {hi}]")]
    TimeOutOfRange { s: f64, lo: f64, hi: f64 },
    #[error("forward_sample: z0 shape {z0:?} does not match noise shape {noise:?}")]
    ShapeMismatch { z0: Vec<usize>, noise: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, ScheduleError>;

/// VP schedule parameters. `eps_cutoff` is the lower integration limit that
/// keeps the kernel-score denominator away from zero.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VpSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub horizon_t: f64,
    pub eps_cutoff: f64,
}

impl Default for VpSchedule {
    fn default() -> Self {
        Self { beta_min: 0.1, beta_max: 16.0, horizon_t: 1.0, eps_cutoff: 1e-3 }
    }
}

impl VpSchedule {
    pub fn new(beta_min: f64, beta_max: f64, horizon_t: f64, eps_cutoff: f64) -> Result<Self> {
        let s = Self { beta_min, beta_max, horizon_t, eps_cutoff };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max) {
            return Err(ScheduleError::InvalidConfig(format!(
                "need 0 < beta_min <= beta_max, got ({}, {})",
                self.beta_min, self.beta_max
            )));
        }
        if !(self.eps_cutoff > 0.0 && self.eps_cutoff < self.horizon_t) {
            return Err(ScheduleError::InvalidConfig(format!(
                "need 0 < eps_cutoff < horizon_t, got ({}, {})",
                self.eps_cutoff, self.horizon_t
            )));
        }
        Ok(())
    }

    fn check_domain(&self, s: f64, lo: f64) -> Result<()> {
        if !(lo..=self.horizon_t).contains(&s) || !s.is_finite() {
            return Err(ScheduleError::TimeOutOfRange { s, lo, hi: self.horizon_t });
        }
        Ok(())
    }

    /// Linear rate `beta(s)`.
    pub fn beta(&self, s: f64) -> Result<f64> {
        self.check_domain(s, 0.0)?;
        Ok(self.beta_min + (self.beta_max - self.beta_min) * s / self.horizon_t)
    }

    /// Survival factor `exp(-int_0^s beta)`, strictly decreasing from 1.
    pub fn alpha_bar(&self, s: f64) -> Result<f64> {
        self.check_domain(s, 0.0)?;
        Ok(self.alpha_bar_unchecked(s))
    }

    fn alpha_bar_unchecked(&self, s: f64) -> f64 {
        (-(self.beta_min * s + (self.beta_max - self.beta_min) * s * s / (2.0 * self.horizon_t)))
            .exp()
    }

    /// One-jump sample of the forward kernel:
    /// `z_s = sqrt(alpha_bar) * z0 + sqrt(1 - alpha_bar) * noise`.
    pub fn forward_sample(&self, z0: &Tensor, s: f64, noise: &Tensor) -> Result<Tensor> {
        self.check_domain(s, 0.0)?;
        if z0.shape() != noise.shape() {
            return Err(ScheduleError::ShapeMismatch {
                z0: z0.shape().to_vec(),
                noise: noise.shape().to_vec(),
            });
        }
        let ab = self.alpha_bar_unchecked(s);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data: Vec<f64> =
            z0.data().iter().zip(noise.data()).map(|(z, n)| a * z + b * n).collect();
        Ok(Tensor::new(z0.shape().to_vec(), data).expect("same shape as z0"))
    }

    /// Draw the noise internally and return it alongside the sample, for
    /// loss construction.
    pub fn forward_sample_with_rng(
        &self,
        z0: &Tensor,
        s: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, Tensor)> {
        let noise = util::randn(z0.shape(), rng);
        let zs = self.forward_sample(z0, s, &noise)?;
        Ok((zs, noise))
    }

    /// Row-wise forward sampling with one time per row of `[B, D]` inputs.
    pub fn forward_sample_rows(
        &self,
        z0: &Tensor,
        s: &[f64],
        noise: &Tensor,
    ) -> Result<Tensor> {
        if z0.shape() != noise.shape() || z0.shape().len() != 2 || z0.shape()[0] != s.len() {
            return Err(ScheduleError::ShapeMismatch {
                z0: z0.shape().to_vec(),
                noise: noise.shape().to_vec(),
            });
        }
        let d = z0.shape()[1];
        let mut data = vec![0.0; z0.len()];
        for (i, &si) in s.iter().enumerate() {
            self.check_domain(si, 0.0)?;
            let ab = self.alpha_bar_unchecked(si);
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            for j in 0..d {
                data[i * d + j] = a * z0.data()[i * d + j] + b * noise.data()[i * d + j];
            }
        }
        Ok(Tensor::new(z0.shape().to_vec(), data).expect("same shape as z0"))
    }

    /// Score of the Gaussian transition kernel, `-noise / sqrt(1 - alpha_bar(s))`.
    /// Only defined above the cutoff where the denominator is bounded away
    /// from zero.
    pub fn kernel_score(&self, noise: &Tensor, s: f64) -> Result<Tensor> {
        self.check_domain(s, self.eps_cutoff)?;
        let denom = (1.0 - self.alpha_bar_unchecked(s)).sqrt();
        let data: Vec<f64> = noise.data().iter().map(|n| -n / denom).collect();
        Ok(Tensor::new(noise.shape().to_vec(), data).expect("same shape as noise"))
    }

    /// Re-weighting `lambda(s) = 2 (1 - alpha_bar(s)) / beta(s)` that turns the
    /// path-KL objective into the variance-dropped denoising loss.
    pub fn lambda_weight(&self, s: f64) -> Result<f64> {
        self.check_domain(s, self.eps_cutoff)?;
        Ok(2.0 * (1.0 - self.alpha_bar_unchecked(s)) / self.beta(s)?)
    }

    /// Draw `s ~ U(eps_cutoff, horizon_t]`.
    pub fn sample_time(&self, rng: &mut ChaCha8Rng) -> f64 {
        use rand::Rng;
        let u: f64 = rng.random();
        self.horizon_t - u * (self.horizon_t - self.eps_cutoff)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{mean_var, randn, rng_from_seed};

    fn sched() -> VpSchedule {
        VpSchedule::default()
    }

    /// Simpson-rule quadrature, the independent oracle for the closed-form
    /// integral of the linear rate.
    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn beta_endpoints_and_midpoint() {
        let s = sched();
        assert_eq!(s.beta(0.0).unwrap(), 0.1);
        assert_eq!(s.beta(1.0).unwrap(), 16.0);
        assert!((s.beta(0.5).unwrap() - (0.1 + 16.0) / 2.0).abs() < 1e-15);
        assert!(s.beta(1.5).is_err());
        assert!(s.beta(-0.1).is_err());
    }

    #[test]
    fn alpha_bar_matches_quadrature_oracle() {
        let s = sched();
        assert_eq!(s.alpha_bar(0.0).unwrap(), 1.0);
        // Oracle: integrate beta numerically, exponentiate.
        let integral = simpson(|u| 0.1 + 15.9 * u, 0.0, 1.0, 4000);
        assert!((integral - 8.05).abs() < 1e-12);
        let oracle = (-integral).exp();
        // Frozen value of the oracle itself.
        assert!((oracle - 3.1910192248120326e-4).abs() < 1e-16);
        assert!((s.alpha_bar(1.0).unwrap() - oracle).abs() / oracle < 1e-12);
    }

    #[test]
    fn alpha_bar_is_strictly_decreasing() {
        let s = sched();
        let mut prev = s.alpha_bar(0.0).unwrap();
        for i in 1..=100 {
            let cur = s.alpha_bar(i as f64 / 100.0).unwrap();
            assert!(cur < prev, "alpha_bar must strictly decrease");
            prev = cur;
        }
    }

    #[test]
    fn forward_sample_at_zero_is_identity() {
        let mut rng = rng_from_seed(1);
        let s = sched();
        let z0 = randn(&[4], &mut rng);
        let noise = randn(&[4], &mut rng);
        let zs = s.forward_sample(&z0, 0.0, &noise).unwrap();
        assert_eq!(zs.data(), z0.data());
    }

    #[test]
    fn forward_sample_zero_noise_scales_by_sqrt_alpha_bar() {
        let s = sched();
        let z0 = Tensor::from_vec(vec![1.0, -2.0]);
        let noise = Tensor::zeros(&[2]);
        let zs = s.forward_sample(&z0, 0.4, &noise).unwrap();
        let a = s.alpha_bar(0.4).unwrap().sqrt();
        assert!((zs.data()[0] - a).abs() < 1e-15);
        assert!((zs.data()[1] + 2.0 * a).abs() < 1e-15);
    }

    #[test]
    fn forward_sample_moments_match_kernel() {
        // Monte-Carlo moment oracle: mean sqrt(ab)*z0, variance (1-ab).
        let s = sched();
        let mut rng = rng_from_seed(2);
        let n = 100_000;
        let z0 = Tensor::from_vec(vec![1.3]);
        let time = 0.35;
        let mut draws = Vec::with_capacity(n);
        for _ in 0..n {
            let noise = randn(&[1], &mut rng);
            draws.push(s.forward_sample(&z0, time, &noise).unwrap().data()[0]);
        }
        let ab = s.alpha_bar(time).unwrap();
        let (mean, var) = mean_var(&draws);
        let se_mean = (var / n as f64).sqrt();
        assert!(
            (mean - ab.sqrt() * 1.3).abs() < 3.0 * se_mean,
            "mean {mean} vs {}",
            ab.sqrt() * 1.3
        );
        let se_var = var * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((var - (1.0 - ab)).abs() < 3.0 * se_var, "var {var} vs {}", 1.0 - ab);
    }

    #[test]
    fn kernel_score_examples() {
        let s = sched();
        let zero = Tensor::zeros(&[3]);
        assert_eq!(s.kernel_score(&zero, 0.5).unwrap().data(), &[0.0, 0.0, 0.0]);

        // alpha_bar = 0.75 -> score = -e1 / sqrt(0.25) = -2 e1.
        // Solve for the s giving alpha_bar = 0.75 by bisection.
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if s.alpha_bar(mid).unwrap() > 0.75 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let e1 = Tensor::from_vec(vec![1.0, 0.0]);
        let sc = s.kernel_score(&e1, lo).unwrap();
        assert!((sc.data()[0] + 2.0).abs() < 1e-6);
        assert_eq!(sc.data()[1], 0.0);

        // Below the cutoff the denominator diverges: error.
        assert!(s.kernel_score(&zero, 0.5e-3).is_err());
    }

    #[test]
    fn kernel_score_second_moment_is_chi_square() {
        // <|score|^2> = D / (1 - alpha_bar): chi-square moment oracle.
        let s = sched();
        let mut rng = rng_from_seed(3);
        let d = 4;
        let time = 0.6;
        let n = 100_000;
        let mut sq = Vec::with_capacity(n);
        for _ in 0..n {
            let noise = randn(&[d], &mut rng);
            let sc = s.kernel_score(&noise, time).unwrap();
            sq.push(sc.data().iter().map(|v| v * v).sum::<f64>());
        }
        let ab = s.alpha_bar(time).unwrap();
        let expect = d as f64 / (1.0 - ab);
        let (mean, var) = mean_var(&sq);
        let se = (var / n as f64).sqrt();
        assert!((mean - expect).abs() < 3.0 * se, "{mean} vs {expect}");
    }

    #[test]
    fn lambda_weight_examples_and_frozen_value() {
        let s = sched();
        // algebraic identity: lambda * beta / 2 == 1 - alpha_bar
        for i in 1..=10 {
            let t = i as f64 / 10.0;
            let lhs = s.lambda_weight(t).unwrap() * s.beta(t).unwrap() / 2.0;
            let rhs = 1.0 - s.alpha_bar(t).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
        }
        // s -> 0+: lambda -> 0 (vanishes monotonically toward the cutoff).
        let l1 = s.lambda_weight(s.eps_cutoff).unwrap();
        let l2 = s.lambda_weight(2.0 * s.eps_cutoff).unwrap();
        let l4 = s.lambda_weight(4.0 * s.eps_cutoff).unwrap();
        assert!(l1 < l2 && l2 < l4 && l1 < 2e-3, "lambda near 0: {l1} {l2} {l4}");
        // Frozen oracle value at s = 0.5 (alpha_bar evaluated independently).
        let ab = (-(0.1 * 0.5 + 15.9 * 0.125f64)).exp();
        assert!((ab - 0.13035418933417164).abs() < 1e-15);
        let expect = 2.0 * (1.0 - ab) / 8.05;
        assert!((expect - 0.21606107097287658).abs() < 1e-15);
        assert!((s.lambda_weight(0.5).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn prior_reached_at_horizon() {
        // With alpha_bar(T) < 1e-3 the forward sample from any bounded z0 is
        // statistically indistinguishable from N(0, I) in mean norm.
        let s = sched();
        assert!(s.alpha_bar(s.horizon_t).unwrap() < 1e-3);
        let mut rng = rng_from_seed(4);
        let n = 100_000;
        let z0 = Tensor::from_vec(vec![2.0]);
        let mut norms = Vec::with_capacity(n);
        for _ in 0..n {
            let noise = randn(&[1], &mut rng);
            let zs = s.forward_sample(&z0, s.horizon_t, &noise).unwrap();
            norms.push(zs.data()[0].abs());
        }
        let (mean, var) = mean_var(&norms);
        let expect = (2.0 / std::f64::consts::PI).sqrt(); // E|N(0,1)|
        let se = (var / n as f64).sqrt();
        assert!((mean - expect).abs() < 3.0 * se, "{mean} vs {expect}");
    }

    #[test]
    fn kernel_consistency_two_hop_vs_one_jump() {
        // Composing the kernel z0 -> z_s1 -> z_s2 must reproduce the one-jump
        // moments at s2: mean sqrt(ab2) z0 and variance 1 - ab2, using the
        // conditional kernel z_s2 | z_s1 ~ N(sqrt(ab2/ab1) z_s1, 1 - ab2/ab1).
        let s = sched();
        let (s1, s2) = (0.3, 0.7);
        let (ab1, ab2) = (s.alpha_bar(s1).unwrap(), s.alpha_bar(s2).unwrap());
        let mut rng = rng_from_seed(5);
        let n = 100_000;
        let z0 = 0.9;
        let ratio = (ab2 / ab1).sqrt();
        let resid = (1.0 - ab2 / ab1).sqrt();
        let mut two_hop = Vec::with_capacity(n);
        for _ in 0..n {
            let z1 = s
                .forward_sample(&Tensor::from_vec(vec![z0]), s1, &randn(&[1], &mut rng))
                .unwrap()
                .data()[0];
            let e: f64 = crate::util::standard_normal(&mut rng);
            two_hop.push(ratio * z1 + resid * e);
        }
        let (mean, var) = mean_var(&two_hop);
        let se_m = (var / n as f64).sqrt();
        assert!((mean - ab2.sqrt() * z0).abs() < 3.0 * se_m);
        let se_v = var * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((var - (1.0 - ab2)).abs() < 3.0 * se_v);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(VpSchedule::new(0.0, 16.0, 1.0, 1e-3).is_err());
        assert!(VpSchedule::new(2.0, 1.0, 1.0, 1e-3).is_err());
        assert!(VpSchedule::new(0.1, 16.0, 1.0, 0.0).is_err());
        assert!(VpSchedule::new(0.1, 16.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn sample_time_stays_in_half_open_interval() {
        let s = sched();
        let mut rng = rng_from_seed(6);
        for _ in 0..10_000 {
            let t = s.sample_time(&mut rng);
            assert!(t > s.eps_cutoff && t <= s.horizon_t);
        }
    }
}
