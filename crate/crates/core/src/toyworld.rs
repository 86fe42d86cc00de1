//! Synthetic step-by-step task with oracle models.
//!
//! A [`ChainTask`] is a start value followed by `n_total` arithmetic steps;
//! block `j` of a solution must hold the value after step `j`, written as
//! `digits` digit tokens followed by padding. The oracle denoiser writes the
//! right value with probability `1 - p_err` and a uniformly chosen wrong one
//! otherwise. The oracle PRM checks a block against the expected value.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::R3Config;
use crate::error::{Error, Result};
use crate::model::{DenoiseRequest, Denoiser, ProcessReward};
use crate::seq::{TokenId, TokenSeq};
use crate::stream::StreamKey;

pub const PAD: TokenId = 10;
pub const OP_ADD: TokenId = 11;
pub const OP_SUB: TokenId = 12;
pub const OP_MUL: TokenId = 13;
/// One past the largest vocabulary id.
pub const MASK: TokenId = 14;

const MAX_RETRIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Op {
    pub kind: OpKind,
    pub operand: u64,
}

impl Op {
    /// Result if it stays below `limit`.
    pub fn apply(self, v: u64, limit: u64) -> Option<u64> {
        let r = match self.kind {
            OpKind::Add => v.checked_add(self.operand)?,
            OpKind::Sub => v.checked_sub(self.operand)?,
            OpKind::Mul => v.checked_mul(self.operand)?,
        };
        (r < limit).then_some(r)
    }

    fn token(self) -> TokenId {
        match self.kind {
            OpKind::Add => OP_ADD,
            OpKind::Sub => OP_SUB,
            OpKind::Mul => OP_MUL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainTask {
    pub seed: u64,
    pub digits: usize,
    pub block_len: usize,
    pub start_value: u64,
    pub ops: Vec<Op>,
    pub truth: Vec<u64>,
}

/// Builds the task for `seed`. Steps whose result would leave the digit range
/// are redrawn, up to a fixed number of attempts.
pub fn make_task(seed: u64, n_total: usize, block_len: usize, digits: usize) -> Result<ChainTask> {
    if digits == 0 || digits > 18 || digits > block_len {
        return Err(Error::Task(format!(
            "digit width {digits} unusable with block length {block_len}"
        )));
    }
    let limit = 10u64.pow(digits as u32);
    let step_max = (limit / 10).clamp(1, 99);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A5C_0FF1_CE00_0000);
    let start_value = rng.random_range(0..limit);
    let mut ops = Vec::with_capacity(n_total);
    let mut truth = Vec::with_capacity(n_total);
    let mut v = start_value;
    for step in 0..n_total {
        let mut next = None;
        for _ in 0..MAX_RETRIES {
            let op = match rng.random_range(0..3) {
                0 => Op { kind: OpKind::Add, operand: rng.random_range(1..=step_max) },
                1 => Op { kind: OpKind::Sub, operand: rng.random_range(1..=step_max) },
                _ => Op { kind: OpKind::Mul, operand: rng.random_range(2..=3) },
            };
            if let Some(r) = op.apply(v, limit) {
                next = Some((op, r));
                break;
            }
        }
        let (op, r) = next.ok_or_else(|| {
            Error::Task(format!("step {step}: no op keeps {v} within {digits} digits"))
        })?;
        ops.push(op);
        truth.push(r);
        v = r;
    }
    Ok(ChainTask {
        seed,
        digits,
        block_len,
        start_value,
        ops,
        truth,
    })
}

impl ChainTask {
    pub fn n_total(&self) -> usize {
        self.truth.len()
    }

    pub fn limit(&self) -> u64 {
        10u64.pow(self.digits as u32)
    }

    fn digits_of(&self, v: u64) -> impl Iterator<Item = TokenId> + '_ {
        let d = self.digits as u32;
        (0..d).map(move |i| ((v / 10u64.pow(d - 1 - i)) % 10) as TokenId)
    }

    /// `digits` digit tokens, most significant first, then padding.
    pub fn render(&self, v: u64) -> Vec<TokenId> {
        self.digits_of(v)
            .chain(std::iter::repeat_n(PAD, self.block_len - self.digits))
            .collect()
    }

    pub fn decode(&self, block: &[TokenId]) -> Option<u64> {
        if block.len() != self.block_len {
            return None;
        }
        let (value, pad) = block.split_at(self.digits);
        if pad.iter().any(|&t| t != PAD) {
            return None;
        }
        value.iter().try_fold(0u64, |acc, &t| {
            (t <= 9).then(|| acc * 10 + t as u64)
        })
    }

    /// Start value, then each step as an operator token and its operand digits.
    pub fn prompt(&self) -> Vec<TokenId> {
        let mut p: Vec<TokenId> = self.digits_of(self.start_value).collect();
        for op in &self.ops {
            p.push(op.token());
            p.extend(self.digits_of(op.operand));
        }
        p
    }

    pub fn prompt_len(&self) -> usize {
        self.digits * (self.ops.len() + 1) + self.ops.len()
    }

    pub fn prompt_seq(&self) -> TokenSeq {
        TokenSeq::new(self.prompt(), self.block_len, MASK).expect("prompt never holds the mask")
    }

    /// Block index for a context of `len` tokens.
    fn block_index(&self, len: usize) -> Option<usize> {
        let gen = len.checked_sub(self.prompt_len())?;
        (gen % self.block_len == 0).then_some(gen / self.block_len)
    }

    /// Value block `b` should hold if block `b - 1` (or the start) reads `prev`.
    pub fn step_from(&self, b: usize, prev: u64) -> Option<u64> {
        self.ops.get(b)?.apply(prev, self.limit())
    }

    fn wrong_value<R: Rng + ?Sized>(&self, truth: u64, rng: &mut R) -> u64 {
        let k = rng.random_range(0..self.limit() - 1);
        if k >= truth {
            k + 1
        } else {
            k
        }
    }
}

/// Infilling oracle with a fixed per-block error rate.
///
/// When a masked position carries a value digit, the whole block value is
/// redrawn (right w.p. `1 - p_err`) and its tokens are written into the
/// masked positions only. Unmasked positions keep their tokens, so a block
/// comes out right for certain only if every wrong digit was masked. Masked
/// padding is refilled with padding. Temperature and step count do not
/// change the oracle's behavior.
#[derive(Debug, Clone)]
pub struct NoisyOracleDenoiser {
    task: Arc<ChainTask>,
    p_err: f64,
}

impl NoisyOracleDenoiser {
    pub fn new(task: Arc<ChainTask>, p_err: f64) -> Self {
        Self { task, p_err }
    }

    fn draw<R: Rng + ?Sized>(&self, b: usize, rng: &mut R) -> u64 {
        let truth = self.task.truth[b];
        if rng.random::<f64>() < self.p_err {
            self.task.wrong_value(truth, rng)
        } else {
            truth
        }
    }
}

impl Denoiser for NoisyOracleDenoiser {
    fn denoise(&self, req: &DenoiseRequest<'_>) -> Result<Vec<TokenId>> {
        let seq = req.seq;
        let mut out = seq.tokens().to_vec();
        let mut rng = req.stream.rng();
        // editable is ascending, so blocks come out grouped and in order.
        let mut i = 0;
        while i < req.editable.len() {
            let Some(b) = seq.block_of(req.editable[i]) else {
                i += 1;
                continue;
            };
            let range = seq.block_range(b);
            let mut j = i;
            while j < req.editable.len() && range.contains(&req.editable[j]) {
                j += 1;
            }
            let masked: Vec<usize> = req.editable[i..j]
                .iter()
                .copied()
                .filter(|&p| seq.tokens()[p] == seq.mask_id())
                .collect();
            i = j;
            if masked.is_empty() {
                continue;
            }
            if b >= self.task.n_total() {
                return Err(Error::Precondition(format!(
                    "block {b} beyond task length {}",
                    self.task.n_total()
                )));
            }
            let touches_value = masked.iter().any(|&p| p - range.start < self.task.digits);
            let fill = if touches_value {
                self.task.render(self.draw(b, &mut rng))
            } else {
                vec![PAD; self.task.block_len]
            };
            for p in masked {
                out[p] = fill[p - range.start];
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrmMode {
    #[default]
    Exact,
    Noisy,
}

/// Where the PRM takes the expected value of a block from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    /// The task's ground truth, ignoring earlier blocks.
    #[default]
    Truth,
    /// One step applied to the previous block as written.
    Contextual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrmSettings {
    pub mode: PrmMode,
    pub context: ContextMode,
    pub hi: f64,
    pub lo: f64,
    pub sigma: f64,
}

impl Default for PrmSettings {
    fn default() -> Self {
        Self {
            mode: PrmMode::Exact,
            context: ContextMode::Truth,
            hi: 0.95,
            lo: 0.1,
            sigma: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleProcessReward {
    task: Arc<ChainTask>,
    settings: PrmSettings,
}

impl OracleProcessReward {
    pub fn new(task: Arc<ChainTask>, settings: PrmSettings) -> Self {
        Self { task, settings }
    }

    fn expected(&self, context: &[TokenId], b: usize) -> Option<u64> {
        match self.settings.context {
            ContextMode::Truth => self.task.truth.get(b).copied(),
            ContextMode::Contextual => {
                let prev = if b == 0 {
                    self.task.start_value
                } else {
                    let end = context.len();
                    self.task.decode(&context[end - self.task.block_len..])?
                };
                self.task.step_from(b, prev)
            }
        }
    }
}

impl ProcessReward for OracleProcessReward {
    fn score(&self, context: &[TokenId], block: &[TokenId], stream: &StreamKey) -> Result<f64> {
        let b = self.task.block_index(context.len()).ok_or_else(|| {
            Error::Precondition(format!(
                "context of {} tokens does not end on a block boundary",
                context.len()
            ))
        })?;
        let ok = self.expected(context, b).is_some() && self.task.decode(block) == self.expected(context, b);
        let base = if ok { self.settings.hi } else { self.settings.lo };
        Ok(match self.settings.mode {
            PrmMode::Exact => base,
            PrmMode::Noisy => {
                let sigma = self.settings.sigma;
                if sigma <= 0.0 {
                    base
                } else {
                    let normal = Normal::new(0.0, sigma)
                        .map_err(|e| Error::Config(format!("prm sigma: {e}")))?;
                    let mut rng = stream.rng();
                    let noise = loop {
                        let x: f64 = normal.sample(&mut rng);
                        if x.abs() <= 2.0 * sigma {
                            break x;
                        }
                    };
                    (base + noise).clamp(0.0, 1.0)
                }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockVerdict {
    Correct,
    Wrong,
    Undecodable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grade {
    pub blocks: Vec<BlockVerdict>,
    /// The final block holds the final answer.
    pub final_correct: bool,
    pub all_correct: bool,
}

impl Grade {
    pub fn correct_blocks(&self) -> usize {
        self.blocks.iter().filter(|v| **v == BlockVerdict::Correct).count()
    }

    pub fn undecodable_blocks(&self) -> usize {
        self.blocks.iter().filter(|v| **v == BlockVerdict::Undecodable).count()
    }
}

pub fn grade(seq: &TokenSeq, task: &ChainTask) -> Result<Grade> {
    if seq.n_blocks() != task.n_total() {
        return Err(Error::Precondition(format!(
            "sequence has {} blocks, task has {}",
            seq.n_blocks(),
            task.n_total()
        )));
    }
    let blocks: Vec<BlockVerdict> = (0..seq.n_blocks())
        .map(|b| match task.decode(&seq.tokens()[seq.block_range(b)]) {
            None => BlockVerdict::Undecodable,
            Some(v) if v == task.truth[b] => BlockVerdict::Correct,
            Some(_) => BlockVerdict::Wrong,
        })
        .collect();
    Ok(Grade {
        final_correct: blocks.last() == Some(&BlockVerdict::Correct),
        all_correct: blocks.iter().all(|v| *v == BlockVerdict::Correct),
        blocks,
    })
}

/// Everything one toy trial needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToySettings {
    pub p_err: f64,
    pub digits: usize,
    pub prm: PrmSettings,
}

impl Default for ToySettings {
    fn default() -> Self {
        Self {
            p_err: 0.3,
            digits: 4,
            prm: PrmSettings::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyWorld {
    pub task: Arc<ChainTask>,
    pub denoiser: NoisyOracleDenoiser,
    pub prm: OracleProcessReward,
}

impl ToyWorld {
    pub fn new(seed: u64, cfg: &R3Config, settings: &ToySettings) -> Result<Self> {
        if !(0.0..=1.0).contains(&settings.p_err) {
            return Err(Error::Config(format!("p_err {} outside [0, 1]", settings.p_err)));
        }
        let p = &settings.prm;
        if !(0.0..=1.0).contains(&p.hi) || !(0.0..=1.0).contains(&p.lo) {
            return Err(Error::Config("prm hi/lo must lie in [0, 1]".into()));
        }
        let task = Arc::new(make_task(seed, cfg.n_total, cfg.block_len, settings.digits)?);
        Ok(Self {
            denoiser: NoisyOracleDenoiser::new(task.clone(), settings.p_err),
            prm: OracleProcessReward::new(task.clone(), settings.prm),
            task,
        })
    }

    pub fn prompt(&self) -> TokenSeq {
        self.task.prompt_seq()
    }
}
