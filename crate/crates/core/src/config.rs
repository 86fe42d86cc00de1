use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How candidate windows are ranked against each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Product of block scores.
    #[default]
    Product,
    /// Minimum block score.
    Min,
}

impl Metric {
    pub fn evaluate(self, scores: &[f64]) -> f64 {
        match self {
            Metric::Product => scores.iter().product(),
            Metric::Min => scores.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }
}

/// Which in-block offsets receive masks once the count is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionPolicy {
    /// Uniform without replacement from the supplied stream.
    #[default]
    Uniform,
    /// The first `count` offsets.
    Prefix,
}

/// Hyperparameters of one windowed review-remask-refine run.
///
/// Defaults are the reference operating point: 16 blocks of 32 tokens,
/// 128 demasking steps, temperature 0.8, threshold 0.8, intensity 0.8,
/// five candidates and alpha 10.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct R3Config {
    pub n_total: usize,
    pub block_len: usize,
    pub window: usize,
    pub tau_thresh: f64,
    pub n_samples: usize,
    pub beta_i: f64,
    pub alpha_b: f64,
    pub p_min: f64,
    pub epsilon: f64,
    pub temperature: f64,
    pub demask_steps: usize,
    pub metric: Metric,
    pub retain_original: bool,
    pub position_policy: PositionPolicy,
    pub seed: u64,
}

impl Default for R3Config {
    fn default() -> Self {
        Self {
            n_total: 16,
            block_len: 32,
            window: 8,
            tau_thresh: 0.8,
            n_samples: 5,
            beta_i: 0.8,
            alpha_b: 10.0,
            p_min: 0.01,
            epsilon: 1e-8,
            temperature: 0.8,
            demask_steps: 128,
            metric: Metric::Product,
            retain_original: true,
            position_policy: PositionPolicy::Uniform,
            seed: 0,
        }
    }
}

impl R3Config {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_total == 0 {
            return fail("n_total must be at least 1".into());
        }
        if self.block_len == 0 {
            return fail("block_len must be at least 1".into());
        }
        if self.window == 0 || self.window > self.n_total {
            return fail(format!(
                "window must lie in [1, n_total={}], got {}",
                self.n_total, self.window
            ));
        }
        if !(0.0..=1.0).contains(&self.tau_thresh) {
            return fail(format!("tau_thresh {} outside [0, 1]", self.tau_thresh));
        }
        if self.n_samples == 0 {
            return fail("n_samples must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.beta_i) {
            return fail(format!("beta_i {} outside [0, 1]", self.beta_i));
        }
        if !(self.alpha_b > 0.0 && self.alpha_b.is_finite()) {
            return fail(format!("alpha_b must be positive, got {}", self.alpha_b));
        }
        if !(0.0..1.0).contains(&self.p_min) {
            return fail(format!("p_min {} outside [0, 1)", self.p_min));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return fail(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature must be >= 0, got {}", self.temperature));
        }
        Ok(())
    }

    /// Demasking steps given to each block: the sequence budget split evenly,
    /// never below one.
    pub fn steps_per_block(&self) -> usize {
        (self.demask_steps / self.n_total).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_split_steps() {
        let cfg = R3Config::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.steps_per_block(), 8);
        assert_eq!(cfg.n_total * cfg.block_len, 512);
    }

    #[test]
    fn steps_never_zero() {
        let cfg = R3Config {
            demask_steps: 3,
            ..Default::default()
        };
        assert_eq!(cfg.steps_per_block(), 1);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            R3Config { window: 0, ..Default::default() },
            R3Config { window: 17, ..Default::default() },
            R3Config { p_min: 1.0, ..Default::default() },
            R3Config { beta_i: 1.5, ..Default::default() },
            R3Config { alpha_b: 0.0, ..Default::default() },
            R3Config { n_samples: 0, ..Default::default() },
            R3Config { epsilon: 0.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn metrics() {
        assert!((Metric::Product.evaluate(&[0.9, 0.9]) - 0.81).abs() < 1e-12);
        assert_eq!(Metric::Min.evaluate(&[0.99, 0.5]), 0.5);
    }
}
