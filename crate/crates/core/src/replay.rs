//! Re-derives every remasked window in a trace from the review snapshot that
//! preceded it, and groups events into correction cycles.

use std::collections::HashMap;

use serde::Serialize;

use crate::seq::TokenId;
use crate::transcript::{EventKind, TraceRecord};

/// One review that triggered refinement, from low score to outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrectionCycle {
    pub run_id: String,
    pub item: usize,
    pub block_range: (usize, usize),
    pub review_scores: Vec<f64>,
    pub before: Vec<TokenId>,
    /// Masked window of the candidate that was finally chosen, if any.
    pub masked: Option<Vec<TokenId>>,
    pub after: Option<Vec<TokenId>>,
    pub after_scores: Option<Vec<f64>>,
    pub selected: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ReplaySummary {
    pub events: usize,
    pub reviews: usize,
    pub remasks_verified: usize,
    /// Human-readable description of each remask that did not reproduce.
    pub mismatches: Vec<String>,
    pub cycles: Vec<CorrectionCycle>,
}

impl ReplaySummary {
    pub fn is_consistent(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Applies recorded positions to `snapshot`, block by block.
pub fn reapply_positions(
    snapshot: &[TokenId],
    block_len: usize,
    positions: &[Vec<usize>],
    mask_id: TokenId,
) -> Option<Vec<TokenId>> {
    if snapshot.len() != block_len * positions.len() {
        return None;
    }
    let mut out = snapshot.to_vec();
    for (i, offs) in positions.iter().enumerate() {
        for &o in offs {
            if o >= block_len {
                return None;
            }
            out[i * block_len + o] = mask_id;
        }
    }
    Some(out)
}

type RunItem = (String, usize);
/// Window range, window tokens and review scores.
type Snapshot = ((usize, usize), Vec<TokenId>, Vec<f64>);

pub fn replay(records: &[TraceRecord]) -> ReplaySummary {
    let mut summary = ReplaySummary {
        events: records.len(),
        ..Default::default()
    };
    // Latest review per (run, item): window range and snapshot.
    let mut snapshots: HashMap<RunItem, Snapshot> = HashMap::new();
    // Open cycle and the masked window of each candidate.
    let mut open: HashMap<RunItem, (CorrectionCycle, Vec<Vec<TokenId>>)> = HashMap::new();

    for (i, rec) in records.iter().enumerate() {
        let key = (rec.run_id.clone(), rec.item);
        let p = &rec.payload;
        match rec.event {
            EventKind::Review => {
                summary.reviews += 1;
                snapshots.insert(
                    key,
                    (
                        rec.block_range,
                        p.tokens.clone().unwrap_or_default(),
                        p.scores.clone().unwrap_or_default(),
                    ),
                );
            }
            EventKind::Trigger => {
                let (range, before, scores) = snapshots.get(&key).cloned().unwrap_or_default();
                if range != rec.block_range {
                    summary
                        .mismatches
                        .push(format!("line {}: trigger without matching review", i + 1));
                }
                let cycle = CorrectionCycle {
                    run_id: rec.run_id.clone(),
                    item: rec.item,
                    block_range: rec.block_range,
                    review_scores: scores,
                    before,
                    masked: None,
                    after: None,
                    after_scores: None,
                    selected: None,
                };
                open.insert(key, (cycle, Vec::new()));
            }
            EventKind::Remask => {
                let Some((cycle, masks)) = open.get_mut(&key) else {
                    summary
                        .mismatches
                        .push(format!("line {}: remask outside a trigger", i + 1));
                    continue;
                };
                let width = rec.block_range.1 - rec.block_range.0 + 1;
                let block_len = cycle.before.len() / width.max(1);
                let rebuilt = match (&p.positions, p.mask_id) {
                    (Some(pos), Some(mask)) => reapply_positions(&cycle.before, block_len, pos, mask),
                    _ => None,
                };
                match (&rebuilt, &p.masked) {
                    (Some(a), Some(b)) if a == b => summary.remasks_verified += 1,
                    _ => summary.mismatches.push(format!(
                        "line {}: remask of sample {:?} does not reproduce from the review snapshot",
                        i + 1,
                        p.sample
                    )),
                }
                masks.push(p.masked.clone().unwrap_or_default());
            }
            EventKind::Select | EventKind::Retain => {
                if let Some((mut cycle, masks)) = open.remove(&key) {
                    if rec.event == EventKind::Select {
                        cycle.selected = p.candidate;
                        cycle.masked = p.candidate.and_then(|c| masks.get(c).cloned());
                        cycle.after = p.tokens.clone();
                        cycle.after_scores = p.scores.clone();
                    }
                    summary.cycles.push(cycle);
                }
            }
            _ => {}
        }
    }
    summary
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reapply() {
        let snap = [1, 2, 3, 4];
        assert_eq!(
            reapply_positions(&snap, 2, &[vec![1], vec![]], 9),
            Some(vec![1, 9, 3, 4])
        );
        assert_eq!(reapply_positions(&snap, 2, &[vec![2], vec![]], 9), None);
        assert_eq!(reapply_positions(&snap, 2, &[vec![]], 9), None);
    }
}
