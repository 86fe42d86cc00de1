//! Score-to-remask mapping for a reviewed window.
//!
//! Each block score `s` becomes a quality `q = exp(-alpha * s)`. The window's
//! qualities are min-max normalized into `[p_min, 1]`, giving the remask
//! probability `P`. A block then loses `round_half_up(beta * P * L)` tokens to
//! the mask.
//!
//! When every score in the window is equal the normalization has no spread
//! and would hand `p_min` to every block. Such a window is instead remasked
//! fully (`P = 1`) if its shared score is below the trigger threshold,
//! and gets `p_min` otherwise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{PositionPolicy, R3Config};
use crate::error::{Error, Result};
use crate::seq::TokenSeq;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RemaskParams {
    pub alpha_b: f64,
    pub p_min: f64,
    pub epsilon: f64,
    pub tau_thresh: f64,
    pub beta_i: f64,
    pub block_len: usize,
    pub policy: PositionPolicy,
}

impl From<&R3Config> for RemaskParams {
    fn from(cfg: &R3Config) -> Self {
        Self {
            alpha_b: cfg.alpha_b,
            p_min: cfg.p_min,
            epsilon: cfg.epsilon,
            tau_thresh: cfg.tau_thresh,
            beta_i: cfg.beta_i,
            block_len: cfg.block_len,
            policy: cfg.position_policy,
        }
    }
}

pub fn quality_value(score: f64, alpha_b: f64) -> f64 {
    (-alpha_b * score).exp()
}

pub fn remask_probabilities(scores: &[f64], params: &RemaskParams) -> Vec<f64> {
    let q: Vec<f64> = scores
        .iter()
        .map(|&s| quality_value(s, params.alpha_b))
        .collect();
    let lo = q.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = hi - lo;
    if spread < params.epsilon {
        // Uniform window: every block shares one verdict.
        let p = if scores[0] < params.tau_thresh {
            1.0
        } else {
            params.p_min
        };
        return vec![p; scores.len()];
    }
    q.iter()
        .map(|&qb| params.p_min + (1.0 - params.p_min) * (qb - lo) / (spread + params.epsilon))
        .collect()
}

pub fn remask_token_count(p_r: f64, beta_i: f64, block_len: usize) -> usize {
    let raw = (beta_i * p_r * block_len as f64 + 0.5).floor();
    raw.clamp(0.0, block_len as f64) as usize
}

/// Picks `count` distinct in-block offsets, returned in ascending order.
pub fn select_positions<R: Rng + ?Sized>(
    block_len: usize,
    count: usize,
    policy: PositionPolicy,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if count > block_len {
        return Err(Error::Precondition(format!(
            "cannot mask {count} of {block_len} tokens"
        )));
    }
    let mut picked = match policy {
        PositionPolicy::Prefix => (0..count).collect(),
        PositionPolicy::Uniform => rand::seq::index::sample(rng, block_len, count).into_vec(),
    };
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub score: f64,
    pub quality: f64,
    pub probability: f64,
    pub token_count: usize,
    /// In-block offsets, ascending.
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRemaskPlan {
    pub blocks: Vec<BlockPlan>,
}

impl WindowRemaskPlan {
    /// Computes probabilities and counts for `scores`, then draws positions.
    pub fn draw<R: Rng + ?Sized>(
        scores: &[f64],
        params: &RemaskParams,
        rng: &mut R,
    ) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Precondition("empty window".into()));
        }
        let probs = remask_probabilities(scores, params);
        let blocks = scores
            .iter()
            .zip(probs)
            .map(|(&score, probability)| {
                let token_count = remask_token_count(probability, params.beta_i, params.block_len);
                let positions =
                    select_positions(params.block_len, token_count, params.policy, rng)?;
                Ok(BlockPlan {
                    score,
                    quality: quality_value(score, params.alpha_b),
                    probability,
                    token_count,
                    positions,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn total_masks(&self) -> usize {
        self.blocks.iter().map(|b| b.token_count).sum()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.probability).collect()
    }

    pub fn positions(&self) -> Vec<Vec<usize>> {
        self.blocks.iter().map(|b| b.positions.clone()).collect()
    }
}

/// Masks the planned offsets of blocks `first_block..first_block + plan.len()`.
pub fn apply_window_mask(
    seq: &TokenSeq,
    plan: &WindowRemaskPlan,
    first_block: usize,
) -> Result<TokenSeq> {
    let last = first_block + plan.blocks.len();
    if plan.blocks.is_empty() || last > seq.n_blocks() {
        return Err(Error::Precondition(format!(
            "plan for blocks {first_block}..{last} does not fit {} blocks",
            seq.n_blocks()
        )));
    }
    let mut out = seq.clone();
    for (i, block) in plan.blocks.iter().enumerate() {
        let base = seq.block_range(first_block + i).start;
        for &off in &block.positions {
            if off >= seq.block_len() {
                return Err(Error::Precondition(format!(
                    "offset {off} outside block of length {}",
                    seq.block_len()
                )));
            }
            out.set_token(base + off, seq.mask_id());
        }
    }
    Ok(out)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p(alpha: f64) -> RemaskParams {
        RemaskParams {
            alpha_b: alpha,
            ..RemaskParams::from(&R3Config::default())
        }
    }

    proptest! {
        #[test]
        fn range_and_order_reversal(
            scores in prop::collection::vec(0.0f64..=1.0, 1..9),
            alpha in prop::sample::select(vec![1.0, 5.0, 10.0]),
        ) {
            let params = p(alpha);
            let probs = remask_probabilities(&scores, &params);
            for &pr in &probs {
                prop_assert!((params.p_min..=1.0).contains(&pr));
            }
            for i in 0..scores.len() {
                for j in 0..scores.len() {
                    if scores[i] < scores[j] {
                        prop_assert!(probs[i] >= probs[j]);
                    }
                }
            }
        }

        #[test]
        fn shift_changes_little(
            scores in prop::collection::vec(0.0f64..=0.5, 2..9),
            shift in 0.0f64..=0.5,
        ) {
            let params = p(10.0);
            let base = remask_probabilities(&scores, &params);
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let moved = remask_probabilities(&shifted, &params);
            let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let spread = quality_value(lo + shift, 10.0) - quality_value(hi + shift, 10.0);
            // Shifting shrinks the q spread; the epsilon term then weighs more.
            prop_assume!(spread > 1e-2);
            for (a, b) in base.iter().zip(&moved) {
                prop_assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }

        #[test]
        fn mask_accounting(
            scores in prop::collection::vec(0.0f64..=1.0, 1..6),
            beta in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let params = RemaskParams { beta_i: beta, block_len: 16, ..p(10.0) };
            let mut seq = TokenSeq::new(vec![0, 1], 16, 50).unwrap();
            for b in 0..scores.len() + 1 {
                seq.append_block(&[b as u32; 16]).unwrap();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let plan = WindowRemaskPlan::draw(&scores, &params, &mut rng).unwrap();
            let masked = apply_window_mask(&seq, &plan, 1).unwrap();
            let probs = remask_probabilities(&scores, &params);
            for (i, pr) in probs.iter().enumerate() {
                let n = masked.block_slice(i + 1).unwrap().iter().filter(|&&t| t == 50).count();
                prop_assert_eq!(n, remask_token_count(*pr, beta, 16));
            }
            prop_assert_eq!(masked.block_slice(0).unwrap(), seq.block_slice(0).unwrap());
            prop_assert_eq!(&masked.tokens()[..2], &seq.tokens()[..2]);
        }
    }
}
