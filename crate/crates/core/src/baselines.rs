//! Comparison systems: plain sequential generation, and block-wise best-of-N
//! where every block is sampled `n_samples` times and the PRM picks one.

use crate::config::R3Config;
use crate::engine::{extend_block, fail, for_each_item, initial_states, ItemState, RunOutput};
use crate::error::{Result, RunFailure};
use crate::model::{denoise_region, score_blocks, CallAccountant, Denoiser, ProcessReward, ScoreRequest};
use crate::seq::TokenSeq;
use crate::stream::{Phase, StreamKey};
use crate::transcript::{EventKind, Payload};

/// Block-by-block generation with no reward model. Uses the same per-block
/// streams as the R3 extend step, so a never-triggering R3 run matches it
/// token for token. Ledgers stay unfilled.
pub fn run_pass1<D: Denoiser + ?Sized>(
    prompts: &[TokenSeq],
    dn: &D,
    cfg: &R3Config,
) -> std::result::Result<RunOutput, RunFailure> {
    let acct = CallAccountant::new();
    let mut states =
        initial_states(prompts, cfg).map_err(|e| RunFailure::new(e, Vec::new()))?;
    let serial = dn.serialized();
    let res = (0..cfg.n_total).try_for_each(|j| {
        for_each_item(&mut states, serial, |item, st| {
            extend_block(item, st, j, dn, cfg, &acct)
        })
    });
    match res {
        Ok(()) => Ok(RunOutput {
            items: states,
            counts: acct.snapshot(),
        }),
        Err(e) => Err(fail(e, states)),
    }
}

/// Block-wise best-of-N. Candidate `s` of block `j` draws from the same
/// stream pass@1 uses for sample `s`, so `n_samples = 1` reproduces pass@1.
pub fn run_block_bon<D, P>(
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
    let res = (0..cfg.n_total).try_for_each(|j| bon_step(&mut states, j, dn, prm, cfg, &acct, serial));
    match res {
        Ok(()) => Ok(RunOutput {
            items: states,
            counts: acct.snapshot(),
        }),
        Err(e) => Err(fail(e, states)),
    }
}

fn bon_step<D, P>(
    states: &mut [ItemState],
    j: usize,
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
    // Candidate sequences per item, each ending in a freshly denoised block j.
    let gen = |item: usize, st: &ItemState| -> Result<Vec<TokenSeq>> {
        let mut masked = st.seq.clone();
        masked.push_masked_block();
        let editable: Vec<usize> = masked.block_range(j).collect();
        (0..cfg.n_samples)
            .map(|s| {
                let stream = StreamKey::new(cfg.seed, item, j, Phase::Extend).with_sample(s);
                denoise_region(
                    dn,
                    &masked,
                    &editable,
                    cfg.temperature,
                    cfg.steps_per_block(),
                    stream,
                    acct,
                )
            })
            .collect()
    };
    let candidates: Vec<Vec<TokenSeq>> = if serial || states.len() < 2 {
        states
            .iter()
            .enumerate()
            .map(|(item, st)| gen(item, st))
            .collect::<Result<_>>()?
    } else {
        use rayon::prelude::*;
        states
            .par_iter()
            .enumerate()
            .map(|(item, st)| gen(item, st))
            .collect::<Result<_>>()?
    };

    let requests: Vec<ScoreRequest<'_>> = candidates
        .iter()
        .enumerate()
        .flat_map(|(item, cands)| {
            cands.iter().enumerate().map(move |(s, c)| ScoreRequest {
                context: c.context_before(j),
                block: &c.tokens()[c.block_range(j)],
                stream: StreamKey::new(cfg.seed, item, j, Phase::Candidates).with_sample(s),
            })
        })
        .collect();
    let flat = score_blocks(prm, &requests, cfg.block_len, acct)?;
    drop(requests);

    for (item, ((st, cands), scores)) in states
        .iter_mut()
        .zip(candidates)
        .zip(flat.chunks(cfg.n_samples))
        .enumerate()
    {
        let mut best = 0;
        for (s, &v) in scores.iter().enumerate() {
            if v > scores[best] {
                best = s;
            }
        }
        let chosen = cands.into_iter().nth(best).expect("n_samples >= 1");
        st.transcript.push(
            item,
            EventKind::ScoreCandidates,
            (j, j),
            Payload {
                candidate_scores: Some(scores.iter().map(|&v| vec![v]).collect()),
                ..Default::default()
            },
        );
        st.seq = chosen;
        st.ledger.push_placeholder();
        st.ledger.fill(j, &[scores[best]]);
        st.transcript.push(
            item,
            EventKind::Extend,
            (j, j),
            Payload {
                candidate: Some(best),
                scores: Some(vec![scores[best]]),
                tokens: Some(st.seq.block_slice(j)?.to_vec()),
                ..Default::default()
            },
        );
    }
    Ok(())
}
