//! Bridge time-step machinery: timestep sampling, the reference-weight
//! schedule, the Gaussian bridge posterior between two endpoint images, and
//! the training/inference transitions that drive the iterative generation
//! stage.
//!
//! Conventions fixed here: the carried state entering step `i+1` is always
//! derived from the latest prediction (never the raw noisy state), the
//! schedule is indexed by the step being produced, and noise is drawn pixel by
//! pixel in row-major order so results are reproducible for a fixed stream.

use crate::dtype::Scalar;
use crate::rng::SeedRng;
use crate::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Time-step count, noise variance, and the reference-weight schedule.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeConfig {
    /// Maximum number of generator evaluations (time steps).
    pub nfe: usize,
    /// Gaussian noise variance added by the transitions.
    pub tau: f64,
    /// Optional override for the reference-weight schedule; length `nfe + 1`,
    /// entry 0 unused. `None` selects [`default_s_schedule`].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_schedule: Option<Vec<f64>>,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig { nfe: 5, tau: 0.01, s_schedule: None }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nfe < 1 {
            return Err(Error::Config("bridge nfe must be >= 1".into()));
        }
        if !self.tau.is_finite() || self.tau < 0.0 {
            return Err(Error::Config(format!("bridge tau {} must be finite and >= 0", self.tau)));
        }
        if let Some(s) = &self.s_schedule {
            if s.len() != self.nfe + 1 {
                return Err(Error::Config(format!(
                    "s_schedule length {} must be nfe + 1 = {}",
                    s.len(),
                    self.nfe + 1
                )));
            }
            if s.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Config("s_schedule values must lie in [0, 1]".into()));
            }
            if s.windows(2).skip(1).any(|w| w[1] > w[0]) {
                return Err(Error::Config(
                    "s_schedule must be non-increasing after index 1".into(),
                ));
            }
        }
        Ok(())
    }

    /// The effective schedule: the override if present, else the default.
    pub fn schedule(&self) -> Vec<f64> {
        self.s_schedule.clone().unwrap_or_else(|| default_s_schedule(self.nfe))
    }
}

/// Linearly decaying reference weights `s[i] = 0.9 * (1 - (i-1)/nfe)` for
/// `i in [1, nfe]`; index 0 is present but unused (no transition produces
/// step 0).
pub fn default_s_schedule(nfe: usize) -> Vec<f64> {
    assert!(nfe >= 1, "nfe must be >= 1");
    let mut s = Vec::with_capacity(nfe + 1);
    s.push(1.0);
    for i in 1..=nfe {
        s.push(0.9 * (1.0 - (i as f64 - 1.0) / nfe as f64));
    }
    s
}

/// Uniform draw of a time step from `{0, ..., nfe}`.
pub fn sample_timestep(rng: &mut SeedRng, nfe: usize) -> usize {
    assert!(nfe >= 1, "nfe must be >= 1");
    rng.below(nfe + 1)
}

fn check_shapes<S: Scalar>(context: &str, a: &Array2<S>, b: &Array2<S>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dim(context, format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    Ok(())
}

/// Add `N(0, var)` noise pixel by pixel in row-major order. `var = 0` is a
/// no-op that draws nothing.
fn add_noise<S: Scalar>(img: &mut Array2<S>, var: f64, rng: &mut SeedRng) {
    if var > 0.0 {
        let std = S::from_f64(var.sqrt());
        for v in img.iter_mut() {
            *v = *v + std * S::standard_normal(rng);
        }
    }
}

/// Sample the bridge posterior `N(t*x_B + (1-t)*x_A, t(1-t)*tau*I)`.
///
/// The endpoints are returned exactly (no arithmetic) at `t = 0` and `t = 1`.
pub fn bridge_posterior_sample<S: Scalar>(
    x_a: &Array2<S>,
    x_b: &Array2<S>,
    t: f64,
    tau: f64,
    rng: &mut SeedRng,
) -> Result<Array2<S>> {
    check_shapes("bridge_posterior_sample", x_a, x_b)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("bridge time {t} outside [0, 1]")));
    }
    if t == 0.0 {
        return Ok(x_a.clone());
    }
    if t == 1.0 {
        return Ok(x_b.clone());
    }
    let (tf, uf) = (S::from_f64(t), S::from_f64(1.0 - t));
    let mut out = Array2::from_shape_fn(x_a.dim(), |idx| tf * x_b[idx] + uf * x_a[idx]);
    add_noise(&mut out, t * (1.0 - t) * tau, rng);
    Ok(out)
}

/// Training transition `s*x_B + (1-s)*x_hat_prev + N(0, tau*I)`.
///
/// Exact at the degenerate corners: `s = 1, tau = 0` returns `x_B` and
/// `s = 0, tau = 0` returns `x_hat_prev`, both without arithmetic.
pub fn training_transition<S: Scalar>(
    x_b: &Array2<S>,
    x_hat_prev: &Array2<S>,
    s: f64,
    tau: f64,
    rng: &mut SeedRng,
) -> Result<Array2<S>> {
    check_shapes("training_transition", x_b, x_hat_prev)?;
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Config(format!("reference weight {s} outside [0, 1]")));
    }
    let mut out = if s == 1.0 {
        x_b.clone()
    } else if s == 0.0 {
        x_hat_prev.clone()
    } else {
        let (sf, uf) = (S::from_f64(s), S::from_f64(1.0 - s));
        Array2::from_shape_fn(x_b.dim(), |idx| sf * x_b[idx] + uf * x_hat_prev[idx])
    };
    add_noise(&mut out, tau, rng);
    Ok(out)
}

/// Inference transition `x_hat_prev + N(0, tau*I)`; identity at `tau = 0`.
pub fn inference_transition<S: Scalar>(
    x_hat_prev: &Array2<S>,
    tau: f64,
    rng: &mut SeedRng,
) -> Array2<S> {
    let mut out = x_hat_prev.clone();
    add_noise(&mut out, tau, rng);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn images() -> (Array2<f64>, Array2<f64>) {
        let a = Array2::from_shape_fn((4, 4), |(y, x)| (y as f64 * 0.21 - x as f64 * 0.13).sin());
        let b = Array2::from_shape_fn((4, 4), |(y, x)| (y as f64 * 0.17 + x as f64 * 0.29).cos());
        (a, b)
    }

    #[test]
    fn posterior_endpoints_are_exact() {
        let (a, b) = images();
        let mut rng = SeedRng::new(1, stream::TRAIN);
        assert_eq!(bridge_posterior_sample(&a, &b, 0.0, 0.5, &mut rng).unwrap(), a);
        assert_eq!(bridge_posterior_sample(&a, &b, 1.0, 0.5, &mut rng).unwrap(), b);
        assert!(bridge_posterior_sample(&a, &b, 1.5, 0.5, &mut rng).is_err());
        assert!(bridge_posterior_sample(&a, &b, -0.1, 0.5, &mut rng).is_err());
    }

    #[test]
    fn training_transition_degeneracies_exact() {
        let (a, b) = images();
        let mut rng = SeedRng::new(2, stream::TRAIN);
        assert_eq!(training_transition(&b, &a, 1.0, 0.0, &mut rng).unwrap(), b);
        assert_eq!(training_transition(&b, &a, 0.0, 0.0, &mut rng).unwrap(), a);

        let ones = Array2::<f64>::ones((4, 4));
        let zeros = Array2::<f64>::zeros((4, 4));
        let mid = training_transition(&ones, &zeros, 0.5, 0.0, &mut rng).unwrap();
        assert!(mid.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn inference_transition_identity_at_zero_noise() {
        let (a, _) = images();
        let mut rng = SeedRng::new(3, stream::TRAIN);
        assert_eq!(inference_transition(&a, 0.0, &mut rng), a);

        let mut r1 = SeedRng::new(4, stream::TRAIN);
        let mut r2 = SeedRng::new(4, stream::TRAIN);
        assert_eq!(inference_transition(&a, 0.04, &mut r1), inference_transition(&a, 0.04, &mut r2));
    }

    #[test]
    fn transition_linearity_in_both_arguments() {
        let (a, b) = images();
        let mut rng = SeedRng::new(5, stream::TRAIN);
        let s = 0.37;
        let out = training_transition(&b, &a, s, 0.0, &mut rng).unwrap();
        for ((&o, &xb), &xa) in out.iter().zip(b.iter()).zip(a.iter()) {
            assert!((o - (s * xb + (1.0 - s) * xa)).abs() < 1e-15);
        }
    }

    #[test]
    fn default_schedule_shape_and_values() {
        let s1 = default_s_schedule(1);
        assert_eq!(s1.len(), 2);
        assert!((s1[1] - 0.9).abs() < 1e-12);

        let s5 = default_s_schedule(5);
        assert_eq!(s5.len(), 6);
        assert!((s5[1] - 0.9).abs() < 1e-12);
        for w in s5[1..].windows(2) {
            assert!(w[1] < w[0], "schedule must strictly decrease");
        }
        for &v in &s5 {
            assert!((0.0..=1.0).contains(&v));
        }
        let expect = [0.9, 0.72, 0.54, 0.36, 0.18];
        for (got, want) in s5[1..].iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn timestep_support_and_frequencies() {
        let mut rng = SeedRng::new(6, stream::TRAIN);
        for _ in 0..50 {
            let t = sample_timestep(&mut rng, 1);
            assert!(t <= 1);
        }
        let mut counts = [0usize; 6];
        let mut rng = SeedRng::new(7, stream::TRAIN);
        let draws = 60_000;
        for _ in 0..draws {
            counts[sample_timestep(&mut rng, 5)] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 1.0 / 6.0).abs() < 0.01, "frequency {freq} off uniform");
        }
    }

    #[test]
    fn posterior_moments_match_gaussian_law() {
        // x_A = 0, x_B = 1, t = 0.5, tau = 0.04: mean 0.5, std 0.1.
        let a = Array2::<f64>::zeros((2, 2));
        let b = Array2::<f64>::ones((2, 2));
        let mut rng = SeedRng::new(8, stream::TRAIN);
        let n = 10_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let s = bridge_posterior_sample(&a, &b, 0.5, 0.04, &mut rng).unwrap();
            for &v in s.iter() {
                sum += v;
                sumsq += v * v;
            }
        }
        let count = (n * 4) as f64;
        let mean = sum / count;
        let var = sumsq / count - mean * mean;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        assert!((var.sqrt() - 0.1).abs() < 0.005, "std {}", var.sqrt());
    }

    #[test]
    fn config_validation() {
        assert!(BridgeConfig::default().validate().is_ok());
        assert!(BridgeConfig { nfe: 0, ..Default::default() }.validate().is_err());
        assert!(BridgeConfig { tau: -0.1, ..Default::default() }.validate().is_err());
        assert!(BridgeConfig {
            s_schedule: Some(vec![1.0, 0.5, 0.9]),
            nfe: 2,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(BridgeConfig { s_schedule: Some(vec![1.0, 0.9]), nfe: 2, ..Default::default() }
            .validate()
            .is_err());
    }
}
