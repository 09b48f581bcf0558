//! Per-participant randomization and protocol state.

use iconoloc::MethodId;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Neutral labels under which overlays are shown.
pub const SLOT_LETTERS: [char; 7] = ['A', 'B', 'C', 'D', 'E', 'F', 'G'];

/// Pair order and per-pair map order, drawn from one seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Randomization {
    /// Indices into the configured pairs, in presentation order.
    pub pair_order: Vec<usize>,
    /// `map_orders[p][slot]` is the method shown in `slot` for configured pair `p`.
    pub map_orders: Vec<[MethodId; 7]>,
}

impl Randomization {
    pub fn from_seed(seed: u64, n_pairs: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pair_order: Vec<usize> = (0..n_pairs).collect();
        pair_order.shuffle(&mut rng);
        let map_orders = (0..n_pairs)
            .map(|_| {
                let mut m = MethodId::ALL;
                m.shuffle(&mut rng);
                m
            })
            .collect();
        Self { pair_order, map_orders }
    }

    pub fn method_in_slot(&self, pair: usize, slot: char) -> Option<MethodId> {
        SLOT_LETTERS.iter().position(|&c| c == slot).map(|i| self.map_orders[pair][i])
    }

    pub fn slot_of(&self, pair: usize, method: MethodId) -> char {
        let i = self.map_orders[pair].iter().position(|&m| m == method).expect("orders are permutations");
        SLOT_LETTERS[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Step {
    Annotate,
    Rank,
    Done,
}

/// Where a participant stands: `position` counts fully finished pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Cursor {
    pub position: usize,
    pub step: Step,
}

impl Cursor {
    /// Rebuilds the cursor from what has been stored so far.
    pub fn from_progress(ranked: usize, annotated: usize, n_pairs: usize) -> Self {
        let step = if ranked >= n_pairs {
            Step::Done
        } else if annotated > ranked {
            Step::Rank
        } else {
            Step::Annotate
        };
        Self { position: ranked, step }
    }
}
