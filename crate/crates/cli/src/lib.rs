//! Command-line front end: experiment runner, trace replay, self test, and
//! HTTP adapters for externally served models.

pub mod commands;
pub mod http;

use std::time::Duration;

use r3_core::error::Result;
use r3_core::experiment::{ExperimentConfig, ModelProvider};
use r3_core::toyworld::ToyWorld;
use r3_core::{Denoiser, ProcessReward};

use crate::http::{HttpDenoiser, HttpPrm, RetryPolicy};

/// Uses an HTTP adapter for each model whose endpoint is configured and the
/// toy oracle for the other.
pub struct ConfiguredModels {
    denoiser: Option<String>,
    prm: Option<String>,
    policy: RetryPolicy,
}

impl ConfiguredModels {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            denoiser: cfg.denoiser_endpoint.clone(),
            prm: cfg.prm_endpoint.clone(),
            policy: RetryPolicy {
                timeout: Duration::from_millis(cfg.http_timeout_ms),
                retries: cfg.http_retries,
                ..Default::default()
            },
        }
    }
}

impl ModelProvider for ConfiguredModels {
    fn denoiser<'a>(&'a self, world: &'a ToyWorld) -> Result<Box<dyn Denoiser + 'a>> {
        Ok(match &self.denoiser {
            Some(url) => Box::new(HttpDenoiser::new(url, self.policy)?),
            None => Box::new(&world.denoiser),
        })
    }

    fn prm<'a>(&'a self, world: &'a ToyWorld) -> Result<Box<dyn ProcessReward + 'a>> {
        Ok(match &self.prm {
            Some(url) => Box::new(HttpPrm::new(url, self.policy)?),
            None => Box::new(&world.prm),
        })
    }
}
