//! Non-dominated points in (base perplexity, style perplexity) space, both
//! minimized.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub lambda: f64,
    pub base_ppl: f64,
    pub style_ppl: f64,
}

impl ParetoPoint {
    pub fn new(lambda: f64, base_ppl: f64, style_ppl: f64) -> Self {
        Self { lambda, base_ppl, style_ppl }
    }

    /// `self` is no worse on both axes and strictly better on one.
    pub fn dominates(&self, other: &Self) -> bool {
        self.base_ppl <= other.base_ppl
            && self.style_ppl <= other.style_ppl
            && (self.base_ppl < other.base_ppl || self.style_ppl < other.style_ppl)
    }
}

/// All non-dominated points, sorted by base perplexity ascending (ties by
/// style perplexity, then λ). Exact duplicates do not dominate each other,
/// so both copies survive. O(n log n).
pub fn pareto_frontier(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| {
        a.base_ppl.total_cmp(&b.base_ppl).then(a.style_ppl.total_cmp(&b.style_ppl)).then(a.lambda.total_cmp(&b.lambda))
    });
    let mut frontier = Vec::new();
    // Lowest style seen among points with strictly smaller base.
    let mut best_before = f64::INFINITY;
    let mut i = 0;
    while i < sorted.len() {
        let base = sorted[i].base_ppl;
        let mut j = i;
        while j < sorted.len() && sorted[j].base_ppl == base {
            j += 1;
        }
        // Within a base-ppl group only the minimal style values survive.
        let group_min = sorted[i].style_ppl;
        if group_min < best_before {
            frontier.extend(sorted[i..j].iter().take_while(|p| p.style_ppl == group_min));
            best_before = group_min;
        }
        i = j;
    }
    frontier
}
