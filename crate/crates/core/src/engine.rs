//! Windowed review-remask-refine loop.
//!
//! Blocks are generated one at a time. Every `window` blocks (and after the
//! final block) the most recent window is scored by the PRM in one batched
//! request. An item whose lowest window score falls below the threshold gets
//! `n_samples` candidate windows: each is remasked from the window scores,
//! re-denoised block by block, scored in one more batched request, and the
//! best candidate under the configured metric replaces the window.

use rayon::prelude::*;

use crate::config::{Metric, R3Config};
use crate::error::{Error, Result, RunFailure};
use crate::ledger::ScoreLedger;
use crate::model::{
    denoise_region, score_blocks, CallAccountant, CallCounts, Denoiser, ProcessReward,
    ScoreRequest,
};
use crate::remask::{apply_window_mask, RemaskParams, WindowRemaskPlan};
use crate::seq::{TokenId, TokenSeq};
use crate::stream::{Phase, StreamKey};
use crate::transcript::{EventKind, Payload, Transcript};

/// Inclusive block span reviewed together.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRef {
    pub first_block: usize,
    pub last_block: usize,
}

impl WindowRef {
    /// The last `k` blocks ending at block `j`.
    pub fn ending_at(j: usize, k: usize) -> Self {
        Self {
            first_block: (j + 1).saturating_sub(k),
            last_block: j,
        }
    }

    pub fn width(&self) -> usize {
        self.last_block - self.first_block + 1
    }

    pub fn range(&self) -> (usize, usize) {
        (self.first_block, self.last_block)
    }

    pub fn blocks(&self) -> std::ops::RangeInclusive<usize> {
        self.first_block..=self.last_block
    }
}

/// Whether block `j` closes a review window.
pub fn is_review_point(j: usize, window: usize, n_total: usize) -> bool {
    (j + 1).is_multiple_of(window) || j + 1 == n_total
}

/// One batch item: its sequence, score ledger and event log.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemState {
    pub seq: TokenSeq,
    pub ledger: ScoreLedger,
    pub transcript: Transcript,
}

impl ItemState {
    pub fn new(seq: TokenSeq) -> Self {
        Self {
            seq,
            ledger: ScoreLedger::new(),
            transcript: Transcript::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub items: Vec<ItemState>,
    pub counts: CallCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub plan: WindowRemaskPlan,
    pub masked_window: Vec<TokenId>,
    pub window_tokens: Vec<TokenId>,
    /// Filled by [`score_candidates`].
    pub scores: Vec<f64>,
    seq: TokenSeq,
}

impl Candidate {
    /// The whole candidate sequence: the original outside the window.
    pub fn seq(&self) -> &TokenSeq {
        &self.seq
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub window: WindowRef,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// `None` keeps the original window.
    pub winner: Option<usize>,
    pub original_metric: Option<f64>,
    pub candidate_metrics: Vec<f64>,
}

impl Selection {
    /// Metric values in ranking order: the original first when it competed.
    pub fn all_metrics(&self) -> Vec<f64> {
        self.original_metric
            .iter()
            .chain(&self.candidate_metrics)
            .copied()
            .collect()
    }
}

/// Appends a fully masked block `j` to `state` and denoises it.
pub fn extend_block<D: Denoiser + ?Sized>(
    item: usize,
    state: &mut ItemState,
    j: usize,
    dn: &D,
    cfg: &R3Config,
    acct: &CallAccountant,
) -> Result<()> {
    if state.seq.n_blocks() != j || j >= cfg.n_total {
        return Err(Error::Precondition(format!(
            "extend of block {j} on a sequence with {} blocks",
            state.seq.n_blocks()
        )));
    }
    let mut seq = state.seq.clone();
    seq.push_masked_block();
    let editable: Vec<usize> = seq.block_range(j).collect();
    let stream = StreamKey::new(cfg.seed, item, j, Phase::Extend);
    state.seq = denoise_region(
        dn,
        &seq,
        &editable,
        cfg.temperature,
        cfg.steps_per_block(),
        stream,
        acct,
    )?;
    state.ledger.push_placeholder();
    state.transcript.push(
        item,
        EventKind::Extend,
        (j, j),
        Payload {
            tokens: Some(state.seq.block_slice(j)?.to_vec()),
            ..Default::default()
        },
    );
    Ok(())
}

/// Scores every block of `window` for every item in a single batched PRM
/// request, fills the ledgers and logs a Review event per item.
pub fn review_window<P: ProcessReward + ?Sized>(
    states: &mut [ItemState],
    window: WindowRef,
    prm: &P,
    cfg: &R3Config,
    acct: &CallAccountant,
) -> Result<Vec<Vec<f64>>> {
    let requests: Vec<ScoreRequest<'_>> = states
        .iter()
        .enumerate()
        .flat_map(|(item, st)| {
            window.blocks().map(move |b| ScoreRequest {
                context: st.seq.context_before(b),
                block: &st.seq.tokens()[st.seq.block_range(b)],
                stream: StreamKey::new(cfg.seed, item, b, Phase::Review)
                    .with_round(window.last_block),
            })
        })
        .collect();
    let flat = score_blocks(prm, &requests, cfg.block_len, acct)?;
    drop(requests);

    let per_item: Vec<Vec<f64>> = flat.chunks(window.width()).map(<[f64]>::to_vec).collect();
    for (item, (st, scores)) in states.iter_mut().zip(&per_item).enumerate() {
        st.ledger.fill(window.first_block, scores);
        let range = st.seq.window_range(window.first_block, window.last_block);
        st.transcript.push(
            item,
            EventKind::Review,
            window.range(),
            Payload {
                scores: Some(scores.clone()),
                tokens: Some(st.seq.tokens()[range].to_vec()),
                ..Default::default()
            },
        );
    }
    Ok(per_item)
}

pub fn needs_refinement(scores: &[f64], tau: f64) -> bool {
    scores.iter().any(|&s| s < tau)
}

/// Draws `n_samples` remask plans for the window and re-denoises each masked
/// copy left to right, one block at a time.
pub fn propose_candidates<D: Denoiser + ?Sized>(
    item: usize,
    state: &mut ItemState,
    window: WindowRef,
    scores: &[f64],
    dn: &D,
    cfg: &R3Config,
    acct: &CallAccountant,
) -> Result<CandidateSet> {
    let params = RemaskParams::from(cfg);
    let span = state.seq.window_range(window.first_block, window.last_block);
    let mut candidates = Vec::with_capacity(cfg.n_samples);
    for s in 0..cfg.n_samples {
        let mut rng = StreamKey::new(cfg.seed, item, window.first_block, Phase::Remask)
            .with_round(window.last_block)
            .with_sample(s)
            .rng();
        let plan = WindowRemaskPlan::draw(scores, &params, &mut rng)?;
        let mut seq = apply_window_mask(&state.seq, &plan, window.first_block)?;
        let masked_window = seq.tokens()[span.clone()].to_vec();
        state.transcript.push(
            item,
            EventKind::Remask,
            window.range(),
            Payload {
                sample: Some(s),
                probabilities: Some(plan.probabilities()),
                positions: Some(plan.positions()),
                masked: Some(masked_window.clone()),
                mask_id: Some(seq.mask_id()),
                ..Default::default()
            },
        );

        for (i, b) in window.blocks().enumerate() {
            let offsets = &plan.blocks[i].positions;
            if offsets.is_empty() {
                continue;
            }
            let base = seq.block_range(b).start;
            let editable: Vec<usize> = offsets.iter().map(|o| base + o).collect();
            // The model sees the candidate up to and including block b.
            let prefix = seq.truncated(b + 1);
            let stream = StreamKey::new(cfg.seed, item, b, Phase::Refine)
                .with_round(window.last_block)
                .with_sample(s);
            let filled = denoise_region(
                dn,
                &prefix,
                &editable,
                cfg.temperature,
                cfg.steps_per_block(),
                stream,
                acct,
            )?;
            seq.replace_window(b, filled.block_slice(b)?)?;
        }

        let window_tokens = seq.tokens()[span.clone()].to_vec();
        state.transcript.push(
            item,
            EventKind::Propose,
            window.range(),
            Payload {
                sample: Some(s),
                tokens: Some(window_tokens.clone()),
                ..Default::default()
            },
        );
        candidates.push(Candidate {
            plan,
            masked_window,
            window_tokens,
            scores: Vec::new(),
            seq,
        });
    }
    Ok(CandidateSet { window, candidates })
}

/// Scores every block of every candidate, each against its own prefix, in
/// one batched PRM request.
pub fn score_candidates<P: ProcessReward + ?Sized>(
    item: usize,
    state: &mut ItemState,
    cands: &mut CandidateSet,
    prm: &P,
    cfg: &R3Config,
    acct: &CallAccountant,
) -> Result<()> {
    let window = cands.window;
    let requests: Vec<ScoreRequest<'_>> = cands
        .candidates
        .iter()
        .enumerate()
        .flat_map(|(s, c)| {
            window.blocks().map(move |b| ScoreRequest {
                context: c.seq.context_before(b),
                block: &c.seq.tokens()[c.seq.block_range(b)],
                stream: StreamKey::new(cfg.seed, item, b, Phase::Candidates)
                    .with_round(window.last_block)
                    .with_sample(s),
            })
        })
        .collect();
    let flat = score_blocks(prm, &requests, cfg.block_len, acct)?;
    drop(requests);
    for (c, chunk) in cands.candidates.iter_mut().zip(flat.chunks(window.width())) {
        c.scores = chunk.to_vec();
    }
    let candidate_scores: Vec<Vec<f64>> =
        cands.candidates.iter().map(|c| c.scores.clone()).collect();
    let metrics = candidate_scores
        .iter()
        .map(|s| cfg.metric.evaluate(s))
        .collect();
    state.transcript.push(
        item,
        EventKind::ScoreCandidates,
        window.range(),
        Payload {
            candidate_scores: Some(candidate_scores),
            metrics: Some(metrics),
            ..Default::default()
        },
    );
    Ok(())
}

/// Argmax of `metric` over candidates. When `retain_original` is set the
/// original window competes first, so ties keep it; among candidates ties go
/// to the lowest index.
pub fn select_best(
    candidate_scores: &[Vec<f64>],
    original_scores: &[f64],
    metric: Metric,
    retain_original: bool,
) -> Selection {
    let candidate_metrics: Vec<f64> = candidate_scores.iter().map(|s| metric.evaluate(s)).collect();
    let original_metric = retain_original.then(|| metric.evaluate(original_scores));
    let mut best: Option<(Option<usize>, f64)> = original_metric.map(|m| (None, m));
    for (i, &m) in candidate_metrics.iter().enumerate() {
        match best {
            Some((_, b)) if m <= b => {}
            _ => best = Some((Some(i), m)),
        }
    }
    Selection {
        winner: best.and_then(|(w, _)| w),
        original_metric,
        candidate_metrics,
    }
}

/// Installs the winning candidate (if any) into `state` and closes the
/// trigger with a Select or Retain event.
fn commit_selection(
    item: usize,
    state: &mut ItemState,
    cands: &CandidateSet,
    selection: &Selection,
) -> Result<()> {
    let window = cands.window;
    match selection.winner {
        Some(s) => {
            let c = &cands.candidates[s];
            state.seq.replace_window(window.first_block, &c.window_tokens)?;
            state.ledger.fill(window.first_block, &c.scores);
            state.transcript.push(
                item,
                EventKind::Select,
                window.range(),
                Payload {
                    candidate: Some(s),
                    metrics: Some(selection.all_metrics()),
                    scores: Some(c.scores.clone()),
                    tokens: Some(c.window_tokens.clone()),
                    ..Default::default()
                },
            );
        }
        None => state.transcript.push(
            item,
            EventKind::Retain,
            window.range(),
            Payload {
                metrics: Some(selection.all_metrics()),
                ..Default::default()
            },
        ),
    }
    Ok(())
}

/// Full refinement cycle for one item whose review triggered.
#[allow(clippy::too_many_arguments)]
fn refine_item<D: Denoiser + ?Sized, P: ProcessReward + ?Sized>(
    item: usize,
    state: &mut ItemState,
    window: WindowRef,
    scores: &[f64],
    dn: &D,
    prm: &P,
    cfg: &R3Config,
    acct: &CallAccountant,
) -> Result<()> {
    state.transcript.push(
        item,
        EventKind::Trigger,
        window.range(),
        Payload {
            scores: Some(scores.to_vec()),
            ..Default::default()
        },
    );
    let mut cands = propose_candidates(item, state, window, scores, dn, cfg, acct)?;
    score_candidates(item, state, &mut cands, prm, cfg, acct)?;
    let candidate_scores: Vec<Vec<f64>> =
        cands.candidates.iter().map(|c| c.scores.clone()).collect();
    let selection = select_best(&candidate_scores, scores, cfg.metric, cfg.retain_original);
    commit_selection(item, state, &cands, &selection)
}

/// Runs `f` over every item, in parallel unless `serial` is set. Items are
/// independent, so the outcome does not depend on the schedule.
pub(crate) fn for_each_item<F>(states: &mut [ItemState], serial: bool, f: F) -> Result<()>
where
    F: Fn(usize, &mut ItemState) -> Result<()> + Sync + Send,
{
    if serial || states.len() < 2 {
        states.iter_mut().enumerate().try_for_each(|(i, s)| f(i, s))
    } else {
        states
            .par_iter_mut()
            .enumerate()
            .try_for_each(|(i, s)| f(i, s))
    }
}

pub(crate) fn initial_states(prompts: &[TokenSeq], cfg: &R3Config) -> Result<Vec<ItemState>> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    prompts
        .iter()
        .map(|p| {
            if p.n_blocks() != 0 || p.prompt_len() == 0 {
                return Err(Error::Precondition(
                    "each prompt must be nonempty and hold no generated blocks".into(),
                ));
            }
            if p.block_len() != cfg.block_len {
                return Err(Error::Config(format!(
                    "prompt block_len {} differs from config block_len {}",
                    p.block_len(),
                    cfg.block_len
                )));
            }
            Ok(ItemState::new(p.clone()))
        })
        .collect()
}

pub(crate) fn fail(err: Error, states: Vec<ItemState>) -> RunFailure {
    RunFailure::new(err, states.into_iter().map(|s| s.transcript).collect())
}

/// Review-remask-refine generation for a batch of prompts.
pub fn run_r3<D, P>(
    prompts: &[TokenSeq],
    dn: &D,
    prm: &P,
    cfg: &R3Config,
) -> std::result::Result<RunOutput, RunFailure>
where
    D: Denoiser + ?Sized,
    P: ProcessReward + ?Sized,
{
    let acct = CallAccountant::new();
    let mut states =
        initial_states(prompts, cfg).map_err(|e| RunFailure::new(e, Vec::new()))?;
    let serial = dn.serialized() || prm.serialized();
    match r3_loop(&mut states, dn, prm, cfg, &acct, serial) {
        Ok(()) => Ok(RunOutput {
            items: states,
            counts: acct.snapshot(),
        }),
        Err(e) => Err(fail(e, states)),
    }
}

fn r3_loop<D, P>(
    states: &mut [ItemState],
    dn: &D,
    prm: &P,
    cfg: &R3Config,
    acct: &CallAccountant,
    serial: bool,
) -> Result<()>
where
    D: Denoiser + ?Sized,
    P: ProcessReward + ?Sized,
{
    for j in 0..cfg.n_total {
        for_each_item(states, serial, |item, st| extend_block(item, st, j, dn, cfg, acct))?;
        if !is_review_point(j, cfg.window, cfg.n_total) {
            continue;
        }
        let window = WindowRef::ending_at(j, cfg.window);
        let scores = review_window(states, window, prm, cfg, acct)?;
        for_each_item(states, serial, |item, st| {
            let s = &scores[item];
            if needs_refinement(s, cfg.tau_thresh) {
                refine_item(item, st, window, s, dn, prm, cfg, acct)
            } else {
                Ok(())
            }
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn review_points() {
        let at = |k| {
            (0..16)
                .filter(|&j| is_review_point(j, k, 16))
                .collect::<Vec<_>>()
        };
        assert_eq!(at(8), vec![7, 15]);
        assert_eq!(at(5), vec![4, 9, 14, 15]);
        assert_eq!(at(1), (0..16).collect::<Vec<_>>());
        assert_eq!(WindowRef::ending_at(15, 5).range(), (11, 15));
        assert_eq!(WindowRef::ending_at(15, 5).width(), 5);
        assert_eq!(WindowRef::ending_at(2, 8).range(), (0, 2));
        assert_eq!(WindowRef::ending_at(3, 1).width(), 1);
    }

    #[test]
    fn trigger_is_strict() {
        assert!(!needs_refinement(&[0.95, 0.9, 0.85, 0.81], 0.8));
        assert!(needs_refinement(&[0.95, 0.5], 0.8));
        assert!(!needs_refinement(&[0.8, 0.9], 0.8));
    }

    #[test]
    fn selection_rules() {
        let cands = vec![vec![0.9, 0.9], vec![0.99, 0.5]];
        let sel = select_best(&cands, &[0.1, 0.1], Metric::Product, true);
        assert_eq!(sel.winner, Some(0));
        assert!((sel.candidate_metrics[0] - 0.81).abs() < 1e-12);
        assert!((sel.candidate_metrics[1] - 0.495).abs() < 1e-12);
        let sel = select_best(&cands, &[0.1, 0.1], Metric::Min, true);
        assert_eq!(sel.winner, Some(0));
        assert_eq!(sel.candidate_metrics, vec![0.9, 0.5]);

        let sel = select_best(&[vec![0.7, 0.7]], &[0.7, 0.7], Metric::Product, true);
        assert_eq!(sel.winner, None);
        let sel = select_best(&[vec![0.7, 0.7]], &[0.7, 0.7], Metric::Product, false);
        assert_eq!(sel.winner, Some(0));
        let sel = select_best(&[vec![0.5], vec![0.6], vec![0.6]], &[0.9], Metric::Min, false);
        assert_eq!(sel.winner, Some(1));
    }
}
