//! HTTP adapters that satisfy the denoiser and PRM contracts by calling a
//! model server.
//!
//! Endpoints, relative to the configured base URL:
//!
//! ```text
//! POST /denoise        {tokens, editable, temperature, steps, stream_key} -> {tokens}
//! POST /denoise/batch  [request, ...]                                     -> [response, ...]
//! POST /score          {context, block, stream_key}                       -> {score}
//! POST /score/batch    [request, ...]                                     -> [response, ...]
//! ```
//!
//! Transport problems are retried; what the server returns is checked by the
//! engine like any other model output.

use std::time::Duration;

use r3_core::error::{ContractViolation, Error, Result};
use r3_core::model::{DenoiseRequest, Denoiser, ProcessReward, ScoreRequest};
use r3_core::{StreamKey, TokenId};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseWire {
    pub tokens: Vec<TokenId>,
    pub editable: Vec<usize>,
    pub temperature: f64,
    pub steps: usize,
    pub stream_key: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseReply {
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreWire {
    pub context: Vec<TokenId>,
    pub block: Vec<TokenId>,
    pub stream_key: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReply {
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub timeout: Duration,
    /// Extra attempts after the first.
    pub retries: u32,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(10),
            retries: 3,
            backoff: Duration::from_millis(50),
        }
    }
}

#[derive(Debug, Clone)]
struct Endpoint {
    base: String,
    client: reqwest::blocking::Client,
    policy: RetryPolicy,
}

impl Endpoint {
    fn new(base: &str, policy: RetryPolicy) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(policy.timeout)
            .build()
            .map_err(|e| Error::Transport(format!("http client: {e}")))?;
        Ok(Self {
            base: base.trim_end_matches('/').to_string(),
            client,
            policy,
        })
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp> {
        let url = format!("{}{path}", self.base);
        let mut last = String::new();
        for attempt in 0..=self.policy.retries {
            if attempt > 0 {
                std::thread::sleep(self.policy.backoff * attempt);
            }
            let sent = self
                .client
                .post(&url)
                .json(body)
                .send()
                .and_then(|r| r.error_for_status());
            match sent.and_then(|r| r.json::<Resp>()) {
                Ok(v) => return Ok(v),
                Err(e) => {
                    tracing::debug!(%url, attempt, error = %e, "model request failed");
                    last = e.to_string();
                }
            }
        }
        Err(Error::Transport(format!(
            "{url}: giving up after {} attempts: {last}",
            self.policy.retries + 1
        )))
    }
}

pub struct HttpDenoiser {
    endpoint: Endpoint,
}

impl HttpDenoiser {
    pub fn new(base_url: &str, policy: RetryPolicy) -> Result<Self> {
        Ok(Self {
            endpoint: Endpoint::new(base_url, policy)?,
        })
    }

    pub fn denoise_batch(&self, requests: &[DenoiseWire]) -> Result<Vec<Vec<TokenId>>> {
        let replies: Vec<DenoiseReply> = self.endpoint.post("/denoise/batch", &requests)?;
        if replies.len() != requests.len() {
            return Err(ContractViolation::BatchMisaligned {
                expected: requests.len(),
                got: replies.len(),
            }
            .into());
        }
        Ok(replies.into_iter().map(|r| r.tokens).collect())
    }
}

pub fn denoise_wire(req: &DenoiseRequest<'_>) -> DenoiseWire {
    DenoiseWire {
        tokens: req.seq.tokens().to_vec(),
        editable: req.editable.to_vec(),
        temperature: req.temperature,
        steps: req.steps,
        stream_key: req.stream.to_string(),
    }
}

impl Denoiser for HttpDenoiser {
    fn denoise(&self, req: &DenoiseRequest<'_>) -> Result<Vec<TokenId>> {
        let reply: DenoiseReply = self.endpoint.post("/denoise", &denoise_wire(req))?;
        Ok(reply.tokens)
    }
}

pub struct HttpPrm {
    endpoint: Endpoint,
}

impl HttpPrm {
    pub fn new(base_url: &str, policy: RetryPolicy) -> Result<Self> {
        Ok(Self {
            endpoint: Endpoint::new(base_url, policy)?,
        })
    }
}

fn checked(score: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&score) {
        Ok(score)
    } else {
        Err(ContractViolation::ScoreOutOfRange(score).into())
    }
}

impl ProcessReward for HttpPrm {
    fn score(&self, context: &[TokenId], block: &[TokenId], stream: &StreamKey) -> Result<f64> {
        let body = ScoreWire {
            context: context.to_vec(),
            block: block.to_vec(),
            stream_key: stream.to_string(),
        };
        let reply: ScoreReply = self.endpoint.post("/score", &body)?;
        checked(reply.score)
    }

    fn score_batch(&self, requests: &[ScoreRequest<'_>]) -> Result<Vec<f64>> {
        let body: Vec<ScoreWire> = requests
            .iter()
            .map(|r| ScoreWire {
                context: r.context.to_vec(),
                block: r.block.to_vec(),
                stream_key: r.stream.to_string(),
            })
            .collect();
        let replies: Vec<ScoreReply> = self.endpoint.post("/score/batch", &body)?;
        if replies.len() != requests.len() {
            return Err(ContractViolation::BatchMisaligned {
                expected: requests.len(),
                got: replies.len(),
            }
            .into());
        }
        replies.into_iter().map(|r| checked(r.score)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_shapes() {
        let req = ScoreWire {
            context: vec![1, 11],
            block: vec![3, 10],
            stream_key: "7/0/candidates/2/1/3".into(),
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"context":[1,11],"block":[3,10],"stream_key":"7/0/candidates/2/1/3"}"#
        );
        let reply: DenoiseReply = serde_json::from_str(r#"{"tokens":[4,5]}"#).unwrap();
        assert_eq!(reply.tokens, vec![4, 5]);
    }

    #[test]
    fn scores_outside_unit_interval_are_rejected() {
        assert!(checked(0.0).is_ok() && checked(1.0).is_ok());
        assert!(matches!(
            checked(1.2),
            Err(Error::Contract(ContractViolation::ScoreOutOfRange(_)))
        ));
        assert!(checked(f64::NAN).is_err());
    }
}
