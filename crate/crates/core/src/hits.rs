use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::text::SegmentId;

/// One retrieved segment with the retriever's native score
/// (Levenshtein similarity for lexical retrieval, cosine for dense).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: SegmentId,
    pub score: f64,
}

/// Ranking order used everywhere: score descending, then id ascending.
pub fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

/// Bounded best-k collector under [`rank_order`].
pub(crate) struct TopK {
    k: usize,
    items: Vec<Hit>,
}

impl TopK {
    pub fn new(k: usize) -> TopK {
        TopK {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    pub fn push(&mut self, hit: Hit) {
        if self.k == 0 {
            return;
        }
        if self.items.len() == self.k
            && rank_order(&hit, self.items.last().unwrap()) != Ordering::Less
        {
            return;
        }
        let at = self
            .items
            .partition_point(|h| rank_order(h, &hit) == Ordering::Less);
        self.items.insert(at, hit);
        self.items.truncate(self.k);
    }

    pub fn into_sorted(self) -> Vec<Hit> {
        self.items
    }
}
