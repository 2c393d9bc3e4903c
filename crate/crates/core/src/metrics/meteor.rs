// SPDX-License-Identifier: MIT OR Apache-2.0

//! METEOR restricted to exact token matches.
//!
//! Tokens are whitespace-separated and compared case-sensitively. The
//! alignment is one-to-one, has the maximum possible number of matches, and
//! among those the fewest chunks (maximal runs that are contiguous and in
//! the same order on both sides).

use std::collections::HashMap;

/// Search nodes explored before settling for the best alignment found.
const SEARCH_BUDGET: usize = 200_000;

#[derive(Clone, Debug, PartialEq)]
pub struct MeteorAlignment {
    pub matches: usize,
    pub chunks: usize,
    pub precision: f64,
    pub recall: f64,
    pub fmean: f64,
    pub penalty: f64,
    pub score: f64,
    /// False when the chunk search hit its budget; `chunks` is then an
    /// upper bound on the optimum.
    pub exact_search: bool,
}

struct Search<'a> {
    cand: &'a [&'a str],
    positions: HashMap<&'a str, Vec<usize>>,
    used: Vec<bool>,
    // Matches still obtainable from candidate index i onward, per token.
    remaining_need: Vec<usize>,
    target: usize,
    best: usize,
    nodes: usize,
}

impl Search<'_> {
    /// `i`: next candidate index; `prev`: reference index matched by
    /// candidate `i - 1`, if any.
    fn go(&mut self, i: usize, prev: Option<usize>, matched: usize, chunks: usize) {
        self.nodes += 1;
        if chunks >= self.best || self.nodes > SEARCH_BUDGET {
            return;
        }
        if i == self.cand.len() {
            if matched == self.target {
                self.best = chunks;
            }
            return;
        }
        if matched + self.remaining_need[i] < self.target {
            return;
        }
        let tok = self.cand[i];
        let options = self.positions.get(tok).cloned().unwrap_or_default();
        // Continuing the current chunk first finds good bounds quickly.
        let mut order: Vec<usize> = options.into_iter().filter(|&j| !self.used[j]).collect();
        if let Some(p) = prev {
            if let Some(k) = order.iter().position(|&j| j == p + 1) {
                order.swap(0, k);
            }
        }
        for j in order {
            let extends = prev == Some(j.wrapping_sub(1)) && j > 0;
            self.used[j] = true;
            self.go(i + 1, Some(j), matched + 1, chunks + usize::from(!extends));
            self.used[j] = false;
        }
        self.go(i + 1, None, matched, chunks);
    }
}

/// Full alignment statistics for `candidate` against `reference`.
pub fn meteor_alignment(candidate: &str, reference: &str) -> MeteorAlignment {
    let cand: Vec<&str> = candidate.split_whitespace().collect();
    let refs: Vec<&str> = reference.split_whitespace().collect();
    let mut positions: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, t) in refs.iter().enumerate() {
        positions.entry(*t).or_default().push(j);
    }
    let mut cand_counts: HashMap<&str, usize> = HashMap::new();
    for t in &cand {
        *cand_counts.entry(*t).or_default() += 1;
    }
    let target: usize = cand_counts
        .iter()
        .map(|(t, c)| (*c).min(positions.get(t).map_or(0, Vec::len)))
        .sum();
    let zero = MeteorAlignment {
        matches: 0,
        chunks: 0,
        precision: 0.0,
        recall: 0.0,
        fmean: 0.0,
        penalty: 0.0,
        score: 0.0,
        exact_search: true,
    };
    if target == 0 {
        return zero;
    }

    // remaining_need[i]: max matches obtainable from cand[i..] ignoring usage.
    let mut remaining_need = vec![0usize; cand.len() + 1];
    let mut suffix_counts: HashMap<&str, usize> = HashMap::new();
    for i in (0..cand.len()).rev() {
        let c = suffix_counts.entry(cand[i]).or_default();
        *c += 1;
        let avail = positions.get(cand[i]).map_or(0, Vec::len);
        remaining_need[i] = remaining_need[i + 1] + usize::from(*c <= avail);
    }

    let mut search = Search {
        cand: &cand,
        positions,
        used: vec![false; refs.len()],
        remaining_need,
        target,
        best: target + 1,
        nodes: 0,
    };
    search.go(0, None, 0, 0);
    let exact_search = search.nodes <= SEARCH_BUDGET;
    // Every match in its own chunk is always achievable.
    let chunks = search.best.min(target);

    let m = target as f64;
    let precision = m / cand.len() as f64;
    let recall = m / refs.len() as f64;
    let fmean = 10.0 * precision * recall / (recall + 9.0 * precision);
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    MeteorAlignment {
        matches: target,
        chunks,
        precision,
        recall,
        fmean,
        penalty,
        score: fmean * (1.0 - penalty),
        exact_search,
    }
}

/// Exact-match METEOR score in `[0, 1]`.
pub fn meteor_exact(candidate: &str, reference: &str) -> f64 {
    meteor_alignment(candidate, reference).score
}
