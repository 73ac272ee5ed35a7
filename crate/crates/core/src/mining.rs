//! Candidate gathering and hard positive/negative mining over patch embeddings.
//!
//! Candidates for a (stage, class) are pooled across every image of the
//! batch, shuffled and capped. Hard negatives are the most similar half of a
//! fixed budget of random positive–negative pairs; hard positives are the
//! least similar half of a random pairing of the positives with each other.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::losses::cosine;
use crate::patching::{negative_indices, positive_indices, PatchLabelGrid};

/// Where a candidate patch came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatchRef {
    /// Position of the image inside the batch.
    pub image: usize,
    /// Flat grid index of the patch at this stage.
    pub index: usize,
}

impl PatchRef {
    /// Row of this patch in a `[B·patches, n]` embedding matrix.
    pub fn row(&self, patches_per_image: usize) -> usize {
        self.image * patches_per_image + self.index
    }
}

/// Positive and negative candidates for one (stage, class).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSet {
    pub stage: usize,
    pub class: u8,
    pub positives: Vec<PatchRef>,
    pub negatives: Vec<PatchRef>,
}

/// Pools positive and negative patches for class `c` over the whole batch,
/// shuffles each pool and truncates it to `cap`.
///
/// `grids` holds one grid per image, all from the same stage.
pub fn gather_candidates<R: Rng>(
    grids: &[&PatchLabelGrid],
    class: u8,
    cap: usize,
    rng: &mut R,
) -> SampleSet {
    let stage = grids.first().map_or(0, |g| g.stage.stage);
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (image, grid) in grids.iter().enumerate() {
        positives.extend(
            positive_indices(grid, class)
                .into_iter()
                .map(|index| PatchRef { image, index }),
        );
        negatives.extend(
            negative_indices(grid, class)
                .into_iter()
                .map(|index| PatchRef { image, index }),
        );
    }
    positives.shuffle(rng);
    negatives.shuffle(rng);
    positives.truncate(cap);
    negatives.truncate(cap);
    SampleSet {
        stage,
        class,
        positives,
        negatives,
    }
}

/// A mined pair: indices into the two input sequences plus their similarity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinedPair {
    pub first: usize,
    pub second: usize,
    pub similarity: f32,
}

/// Survivors and the discarded remainder of one mining pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HardPairs {
    pub kept: Vec<MinedPair>,
    pub discarded: Vec<MinedPair>,
}

impl HardPairs {
    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }
}

fn split_sorted(mut pairs: Vec<MinedPair>, keep: usize, descending: bool) -> HardPairs {
    // stable sort: ties keep formation order
    pairs.sort_by(|a, b| {
        let ord = a.similarity.total_cmp(&b.similarity);
        if descending {
            ord.reverse()
        } else {
            ord
        }
    });
    let discarded = pairs.split_off(keep.min(pairs.len()));
    HardPairs {
        kept: pairs,
        discarded,
    }
}

/// Forms `pair_budget` random (positive, negative) pairs and keeps the most
/// similar half (at least one).
pub fn mine_hard_negatives<R: Rng>(
    positives: &[&[f32]],
    negatives: &[&[f32]],
    pair_budget: usize,
    rng: &mut R,
) -> HardPairs {
    if positives.is_empty() || negatives.is_empty() || pair_budget == 0 {
        return HardPairs::default();
    }
    let pairs: Vec<MinedPair> = (0..pair_budget)
        .map(|_| {
            let first = rng.gen_range(0..positives.len());
            let second = rng.gen_range(0..negatives.len());
            MinedPair {
                first,
                second,
                similarity: cosine(positives[first], negatives[second]),
            }
        })
        .collect();
    split_sorted(pairs, (pair_budget / 2).max(1), true)
}

/// Shuffles the positives, pairs the first half with the second half and
/// keeps the least similar half of those pairs (at least one).
pub fn mine_hard_positives<R: Rng>(positives: &[&[f32]], rng: &mut R) -> HardPairs {
    if positives.len() < 2 {
        return HardPairs::default();
    }
    let mut order: Vec<usize> = (0..positives.len()).collect();
    order.shuffle(rng);
    let half = positives.len() / 2;
    let pairs: Vec<MinedPair> = (0..half)
        .map(|i| {
            let (first, second) = (order[i], order[half + i]);
            MinedPair {
                first,
                second,
                similarity: cosine(positives[first], positives[second]),
            }
        })
        .collect();
    split_sorted(pairs, (half / 2).max(1), false)
}
