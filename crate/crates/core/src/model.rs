//! Denoiser and process-reward contracts, plus the call accountant that
//! every engine-side model invocation goes through.

use std::ops::{Add, AddAssign};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{ContractViolation, Error, Result};
use crate::seq::{TokenId, TokenSeq};
use crate::stream::StreamKey;

pub struct DenoiseRequest<'a> {
    pub seq: &'a TokenSeq,
    /// Sorted, distinct absolute positions the model may rewrite.
    pub editable: &'a [usize],
    pub temperature: f64,
    pub steps: usize,
    pub stream: StreamKey,
}

/// A masked-infilling model. Must return the full token buffer with every
/// mask inside `editable` filled and every other position untouched.
pub trait Denoiser: Send + Sync {
    fn denoise(&self, req: &DenoiseRequest<'_>) -> Result<Vec<TokenId>>;

    /// True when the model cannot serve concurrent calls.
    fn serialized(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScoreRequest<'a> {
    /// Everything before the block, prompt included.
    pub context: &'a [TokenId],
    pub block: &'a [TokenId],
    pub stream: StreamKey,
}

/// A process reward model: scores one block given its prefix, in `[0, 1]`.
pub trait ProcessReward: Send + Sync {
    fn score(&self, context: &[TokenId], block: &[TokenId], stream: &StreamKey) -> Result<f64>;

    /// Scores a batch; adapters with a native batch endpoint override this.
    fn score_batch(&self, requests: &[ScoreRequest<'_>]) -> Result<Vec<f64>> {
        requests
            .iter()
            .map(|r| self.score(r.context, r.block, &r.stream))
            .collect()
    }

    fn serialized(&self) -> bool {
        false
    }
}

impl<T: Denoiser + ?Sized> Denoiser for &T {
    fn denoise(&self, req: &DenoiseRequest<'_>) -> Result<Vec<TokenId>> {
        (**self).denoise(req)
    }
    fn serialized(&self) -> bool {
        (**self).serialized()
    }
}

impl<T: ProcessReward + ?Sized> ProcessReward for &T {
    fn score(&self, context: &[TokenId], block: &[TokenId], stream: &StreamKey) -> Result<f64> {
        (**self).score(context, block, stream)
    }
    fn score_batch(&self, requests: &[ScoreRequest<'_>]) -> Result<Vec<f64>> {
        (**self).score_batch(requests)
    }
    fn serialized(&self) -> bool {
        (**self).serialized()
    }
}

/// PRM that returns the same score for every block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedScore(pub f64);

impl ProcessReward for FixedScore {
    fn score(&self, _: &[TokenId], _: &[TokenId], _: &StreamKey) -> Result<f64> {
        Ok(self.0)
    }
}

/// Plain snapshot of an accountant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    /// Score-request batches submitted, regardless of size.
    pub batched_prm_invocations: u64,
    /// Individual (context, block) pairs scored.
    pub block_scorings: u64,
    pub denoiser_invocations: u64,
    /// Positions filled by the denoiser.
    pub denoiser_token_updates: u64,
}

impl Add for CallCounts {
    type Output = CallCounts;
    fn add(self, rhs: CallCounts) -> CallCounts {
        CallCounts {
            batched_prm_invocations: self.batched_prm_invocations + rhs.batched_prm_invocations,
            block_scorings: self.block_scorings + rhs.block_scorings,
            denoiser_invocations: self.denoiser_invocations + rhs.denoiser_invocations,
            denoiser_token_updates: self.denoiser_token_updates + rhs.denoiser_token_updates,
        }
    }
}

impl AddAssign for CallCounts {
    fn add_assign(&mut self, rhs: CallCounts) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for CallCounts {
    fn sum<I: Iterator<Item = CallCounts>>(iter: I) -> CallCounts {
        iter.fold(CallCounts::default(), Add::add)
    }
}

/// Thread-safe model-call counters. Monotone within a run.
#[derive(Debug, Default)]
pub struct CallAccountant {
    batched_prm_invocations: AtomicU64,
    block_scorings: AtomicU64,
    denoiser_invocations: AtomicU64,
    denoiser_token_updates: AtomicU64,
}

impl CallAccountant {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_prm_batch(&self, pairs: usize) {
        self.batched_prm_invocations.fetch_add(1, Ordering::Relaxed);
        self.block_scorings.fetch_add(pairs as u64, Ordering::Relaxed);
    }

    pub fn record_denoise(&self, updated: usize) {
        self.denoiser_invocations.fetch_add(1, Ordering::Relaxed);
        self.denoiser_token_updates
            .fetch_add(updated as u64, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CallCounts {
        CallCounts {
            batched_prm_invocations: self.batched_prm_invocations.load(Ordering::Relaxed),
            block_scorings: self.block_scorings.load(Ordering::Relaxed),
            denoiser_invocations: self.denoiser_invocations.load(Ordering::Relaxed),
            denoiser_token_updates: self.denoiser_token_updates.load(Ordering::Relaxed),
        }
    }
}

/// Submits one batched scoring request and validates every returned score.
pub fn score_blocks<P: ProcessReward + ?Sized>(
    prm: &P,
    requests: &[ScoreRequest<'_>],
    block_len: usize,
    acct: &CallAccountant,
) -> Result<Vec<f64>> {
    if let Some(bad) = requests.iter().find(|r| r.block.len() != block_len) {
        return Err(Error::BlockLength {
            expected: block_len,
            got: bad.block.len(),
        });
    }
    acct.record_prm_batch(requests.len());
    let scores = prm.score_batch(requests)?;
    if scores.len() != requests.len() {
        return Err(ContractViolation::BatchMisaligned {
            expected: requests.len(),
            got: scores.len(),
        }
        .into());
    }
    if let Some(&s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(ContractViolation::ScoreOutOfRange(s).into());
    }
    Ok(scores)
}

/// Runs the denoiser over `editable` and enforces the infilling contract:
/// no mask left in the editable region and nothing outside it changed.
pub fn denoise_region<D: Denoiser + ?Sized>(
    dn: &D,
    seq: &TokenSeq,
    editable: &[usize],
    temperature: f64,
    steps: usize,
    stream: StreamKey,
    acct: &CallAccountant,
) -> Result<TokenSeq> {
    let mut is_editable = vec![false; seq.len()];
    for &p in editable {
        if p >= seq.len() {
            return Err(Error::Precondition(format!(
                "editable position {p} beyond sequence length {}",
                seq.len()
            )));
        }
        is_editable[p] = true;
    }
    if let Some(p) = seq.mask_positions().find(|&p| !is_editable[p]) {
        return Err(Error::Precondition(format!(
            "mask at position {p} lies outside the editable region"
        )));
    }

    let req = DenoiseRequest {
        seq,
        editable,
        temperature,
        steps,
        stream,
    };
    let out = dn.denoise(&req);
    let updated = match &out {
        Ok(tokens) => tokens
            .iter()
            .zip(seq.tokens())
            .zip(&is_editable)
            .filter(|((a, b), &e)| e && a != b)
            .count(),
        Err(_) => 0,
    };
    acct.record_denoise(updated);
    let tokens = out?;

    if tokens.len() != seq.len() {
        return Err(ContractViolation::LengthChanged {
            expected: seq.len(),
            got: tokens.len(),
        }
        .into());
    }
    for (i, (&after, &before)) in tokens.iter().zip(seq.tokens()).enumerate() {
        if is_editable[i] {
            if after == seq.mask_id() {
                return Err(ContractViolation::MaskRemaining(i).into());
            }
        } else if after != before {
            return Err(ContractViolation::LocalityBroken {
                position: i,
                before,
                after,
            }
            .into());
        }
    }
    let mut next = seq.clone();
    next.set_tokens(tokens);
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::Phase;

    struct FillWith(TokenId);
    impl Denoiser for FillWith {
        fn denoise(&self, req: &DenoiseRequest<'_>) -> Result<Vec<TokenId>> {
            let mut t = req.seq.tokens().to_vec();
            for &p in req.editable {
                t[p] = self.0;
            }
            Ok(t)
        }
    }

    struct Vandal;
    impl Denoiser for Vandal {
        fn denoise(&self, req: &DenoiseRequest<'_>) -> Result<Vec<TokenId>> {
            let mut t = req.seq.tokens().to_vec();
            for &p in req.editable {
                t[p] = 1;
            }
            t[0] = 42;
            Ok(t)
        }
    }

    struct Lazy;
    impl Denoiser for Lazy {
        fn denoise(&self, req: &DenoiseRequest<'_>) -> Result<Vec<TokenId>> {
            Ok(req.seq.tokens().to_vec())
        }
    }

    struct Const(f64);
    impl ProcessReward for Const {
        fn score(&self, _: &[TokenId], _: &[TokenId], _: &StreamKey) -> Result<f64> {
            Ok(self.0)
        }
    }

    fn key() -> StreamKey {
        StreamKey::new(0, 0, 0, Phase::Extend)
    }

    fn masked_seq(block_len: usize) -> TokenSeq {
        let mut s = TokenSeq::new(vec![3, 4], block_len, 99).unwrap();
        s.push_masked_block();
        s
    }

    #[test]
    fn empty_region_is_identity_but_counted() {
        let mut s = TokenSeq::new(vec![3, 4], 2, 99).unwrap();
        s.append_block(&[5, 6]).unwrap();
        let acct = CallAccountant::new();
        let out = denoise_region(&FillWith(1), &s, &[], 0.8, 8, key(), &acct).unwrap();
        assert_eq!(out, s);
        assert_eq!(acct.snapshot().denoiser_invocations, 1);
        assert_eq!(acct.snapshot().denoiser_token_updates, 0);
    }

    #[test]
    fn fills_a_fresh_32_token_block() {
        let s = masked_seq(32);
        let editable: Vec<usize> = s.block_range(0).collect();
        let acct = CallAccountant::new();
        let out = denoise_region(&FillWith(7), &s, &editable, 0.8, 8, key(), &acct).unwrap();
        assert_eq!(out.block_slice(0).unwrap(), &[7; 32]);
        assert_eq!(acct.snapshot().denoiser_token_updates, 32);
    }

    #[test]
    fn locality_violation_is_reported() {
        let s = masked_seq(2);
        let acct = CallAccountant::new();
        let err = denoise_region(&Vandal, &s, &[2, 3], 0.8, 8, key(), &acct).unwrap_err();
        assert!(matches!(
            err,
            Error::Contract(ContractViolation::LocalityBroken { position: 0, .. })
        ));
    }

    #[test]
    fn leftover_mask_is_reported() {
        let s = masked_seq(2);
        let acct = CallAccountant::new();
        let err = denoise_region(&Lazy, &s, &[2, 3], 0.8, 8, key(), &acct).unwrap_err();
        assert!(matches!(err, Error::Contract(ContractViolation::MaskRemaining(2))));
    }

    #[test]
    fn mask_outside_editable_is_a_precondition_error() {
        let s = masked_seq(2);
        let acct = CallAccountant::new();
        let err = denoise_region(&FillWith(1), &s, &[2], 0.8, 8, key(), &acct).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
        assert_eq!(acct.snapshot().denoiser_invocations, 0);
    }

    #[test]
    fn score_counters() {
        let acct = CallAccountant::new();
        let block = [1u32, 2];
        let reqs: Vec<_> = (0..8)
            .map(|_| ScoreRequest {
                context: &[],
                block: &block,
                stream: key(),
            })
            .collect();
        let s = score_blocks(&Const(0.5), &reqs, 2, &acct).unwrap();
        assert_eq!(s, vec![0.5; 8]);
        let c = acct.snapshot();
        assert_eq!((c.batched_prm_invocations, c.block_scorings), (1, 8));
    }

    #[test]
    fn out_of_range_score_aborts() {
        let acct = CallAccountant::new();
        let block = [1u32];
        let req = ScoreRequest {
            context: &[],
            block: &block,
            stream: key(),
        };
        let err = score_blocks(&Const(1.2), &[req], 1, &acct).unwrap_err();
        assert!(matches!(err, Error::Contract(ContractViolation::ScoreOutOfRange(_))));
        let err = score_blocks(&Const(f64::NAN), &[req], 1, &acct).unwrap_err();
        assert!(matches!(err, Error::Contract(ContractViolation::ScoreOutOfRange(_))));
    }
}
