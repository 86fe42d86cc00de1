//! Keyed random streams. Every stochastic draw in a run comes from a child
//! stream of the run seed addressed by (item, block, phase, round, sample),
//! so results do not depend on batch order or thread scheduling.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Fresh block generation (also block-wise best-of-N candidates).
    Extend,
    /// PRM review of a window.
    Review,
    /// Remask position draws for a candidate.
    Remask,
    /// Re-denoising a remasked block of a candidate.
    Refine,
    /// PRM scoring of candidates.
    Candidates,
}

impl Phase {
    fn tag(self) -> u64 {
        match self {
            Phase::Extend => 1,
            Phase::Review => 2,
            Phase::Remask => 3,
            Phase::Refine => 4,
            Phase::Candidates => 5,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Phase::Extend => "extend",
            Phase::Review => "review",
            Phase::Remask => "remask",
            Phase::Refine => "refine",
            Phase::Candidates => "candidates",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "extend" => Phase::Extend,
            "review" => Phase::Review,
            "remask" => Phase::Remask,
            "refine" => Phase::Refine,
            "candidates" => Phase::Candidates,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub item: u32,
    pub block: u32,
    pub phase: Phase,
    /// Window end block for refinement phases, 0 otherwise.
    pub round: u32,
    pub sample: u32,
}

impl StreamKey {
    pub fn new(seed: u64, item: usize, block: usize, phase: Phase) -> Self {
        Self {
            seed,
            item: item as u32,
            block: block as u32,
            phase,
            round: 0,
            sample: 0,
        }
    }

    pub fn with_round(mut self, round: usize) -> Self {
        self.round = round as u32;
        self
    }

    pub fn with_sample(mut self, sample: usize) -> Self {
        self.sample = sample as u32;
        self
    }

    /// 64-bit digest of the key, used as the child-stream seed.
    pub fn digest(&self) -> u64 {
        let mut h = splitmix(self.seed);
        for word in [
            self.item as u64,
            self.block as u64,
            self.phase.tag(),
            self.round as u64,
            self.sample as u64,
        ] {
            h = splitmix(h ^ word);
        }
        h
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.digest())
    }
}

impl fmt::Display for StreamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}/{}/{}",
            self.seed,
            self.item,
            self.phase.name(),
            self.block,
            self.round,
            self.sample
        )
    }
}

impl std::str::FromStr for StreamKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('/').collect();
        if parts.len() != 6 {
            return Err(format!("malformed stream key {s:?}"));
        }
        let num = |i: usize| parts[i].parse::<u64>().map_err(|e| format!("{s:?}: {e}"));
        Ok(StreamKey {
            seed: num(0)?,
            item: num(1)? as u32,
            phase: Phase::from_name(parts[2]).ok_or_else(|| format!("unknown phase in {s:?}"))?,
            block: num(3)? as u32,
            round: num(4)? as u32,
            sample: num(5)? as u32,
        })
    }
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
