use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreEntry {
    Unfilled,
    Filled(f64),
}

impl ScoreEntry {
    pub fn value(self) -> Option<f64> {
        match self {
            ScoreEntry::Unfilled => None,
            ScoreEntry::Filled(s) => Some(s),
        }
    }
}

/// Per-block PRM scores for one batch item. Grows by one `Unfilled`
/// placeholder per generated block; entries fill when the block is reviewed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreLedger {
    entries: Vec<ScoreEntry>,
}

impl ScoreLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_placeholder(&mut self) {
        self.entries.push(ScoreEntry::Unfilled);
    }

    pub fn fill(&mut self, first_block: usize, scores: &[f64]) {
        for (slot, &s) in self.entries[first_block..first_block + scores.len()]
            .iter_mut()
            .zip(scores)
        {
            *slot = ScoreEntry::Filled(s);
        }
    }

    pub fn entries(&self) -> &[ScoreEntry] {
        &self.entries
    }

    pub fn get(&self, b: usize) -> Option<f64> {
        self.entries.get(b).and_then(|e| e.value())
    }

    /// Filled scores for `first..=last`; `None` if any is still a placeholder.
    pub fn window(&self, first: usize, last: usize) -> Option<Vec<f64>> {
        self.entries[first..=last].iter().map(|e| e.value()).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.entries.iter().all(|e| matches!(e, ScoreEntry::Filled(_)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholders_then_fill() {
        let mut l = ScoreLedger::new();
        l.push_placeholder();
        l.push_placeholder();
        assert_eq!(l.window(0, 1), None);
        l.fill(1, &[0.4]);
        assert_eq!(l.get(0), None);
        assert_eq!(l.get(1), Some(0.4));
        assert!(!l.is_complete());
        l.fill(0, &[0.9, 0.5]);
        assert_eq!(l.window(0, 1), Some(vec![0.9, 0.5]));
        assert!(l.is_complete());
    }
}
