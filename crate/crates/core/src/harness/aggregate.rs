// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ScoreReport;

use super::record::RunRecord;

/// Steering-strength bins by `|beta|`: `[0, 25)`, `[25, 50)`, `[50, 100]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaBin {
    Low,
    Mid,
    High,
}

impl BetaBin {
    pub const ALL: [BetaBin; 3] = [BetaBin::Low, BetaBin::Mid, BetaBin::High];

    pub fn of(beta: f32) -> BetaBin {
        let b = beta.abs();
        if b < 25.0 {
            BetaBin::Low
        } else if b < 50.0 {
            BetaBin::Mid
        } else {
            BetaBin::High
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            BetaBin::Low => "[0,25)",
            BetaBin::Mid => "[25,50)",
            BetaBin::High => "[50,100]",
        }
    }

    pub fn from_label(label: &str) -> Option<BetaBin> {
        BetaBin::ALL.into_iter().find(|b| b.label() == label)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
        Some(Stat {
            n,
            mean: values.iter().sum::<f64>() / n as f64,
            median,
        })
    }
}

/// Summary of the complete records in one (layer, bin) group; `None`
/// means "all".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub layer: Option<usize>,
    pub bin: Option<BetaBin>,
    pub runs: usize,
    pub dead_features: usize,
    pub anlcs_steered: Option<Stat>,
    pub anlcs_default: Option<Stat>,
    pub ppl_ratio: Option<Stat>,
    pub meteor_exact_steered: Option<Stat>,
    pub meteor_exact_default: Option<Stat>,
    /// Per-run mean task accuracy over task kinds.
    pub task_steered: Option<Stat>,
    pub task_default: Option<Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Overall, then per bin, per layer, and per (layer, bin).
    pub cells: Vec<CellSummary>,
    pub failed_runs: usize,
}

impl Aggregate {
    pub fn cell(&self, layer: Option<usize>, bin: Option<BetaBin>) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.layer == layer && c.bin == bin)
    }
}

fn summarize(layer: Option<usize>, bin: Option<BetaBin>, recs: &[&RunRecord]) -> CellSummary {
    let scores: Vec<&ScoreReport> = recs.iter().filter_map(|r| r.scores.as_ref()).collect();
    let stat = |f: &dyn Fn(&ScoreReport) -> Option<f64>| {
        Stat::of(&scores.iter().filter_map(|s| f(s)).collect::<Vec<_>>())
    };
    CellSummary {
        layer,
        bin,
        runs: recs.len(),
        dead_features: recs.iter().filter(|r| r.dead_feature).count(),
        anlcs_steered: stat(&|s| s.anlcs_steered),
        anlcs_default: stat(&|s| s.anlcs_default),
        ppl_ratio: stat(&|s| s.ppl_ratio),
        meteor_exact_steered: stat(&|s| s.meteor_exact_steered),
        meteor_exact_default: stat(&|s| s.meteor_exact_default),
        task_steered: stat(&|s| ScoreReport::mean_task(&s.task_steered)),
        task_default: stat(&|s| ScoreReport::mean_task(&s.task_default)),
    }
}

/// Groups complete records by layer and by `|beta|` bin. Empty groups are
/// omitted.
pub fn aggregate(records: &[RunRecord]) -> Result<Aggregate> {
    let complete: Vec<&RunRecord> = records.iter().filter(|r| r.is_complete()).collect();
    if complete.is_empty() {
        return Err(Error::contract("no complete records to aggregate"));
    }
    let layers: BTreeSet<usize> = complete.iter().map(|r| r.spec.layer).collect();
    let select = |layer: Option<usize>, bin: Option<BetaBin>| -> Vec<&RunRecord> {
        complete
            .iter()
            .copied()
            .filter(|r| layer.is_none_or(|l| r.spec.layer == l))
            .filter(|r| bin.is_none_or(|b| BetaBin::of(r.spec.beta) == b))
            .collect()
    };
    let mut groups = vec![(None, None)];
    groups.extend(BetaBin::ALL.iter().map(|b| (None, Some(*b))));
    for &l in &layers {
        groups.push((Some(l), None));
    }
    for &l in &layers {
        groups.extend(BetaBin::ALL.iter().map(|b| (Some(l), Some(*b))));
    }
    let cells = groups
        .into_iter()
        .filter_map(|(l, b)| {
            let recs = select(l, b);
            (!recs.is_empty()).then(|| summarize(l, b, &recs))
        })
        .collect();
    Ok(Aggregate {
        cells,
        failed_runs: records.len() - complete.len(),
    })
}
