// SPDX-License-Identifier: MIT OR Apache-2.0

//! CSV tables and SVG scatter plots of sweep records.

mod svg;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::{aggregate, Aggregate, BetaBin, CellSummary, RunRecord, Stat};
use crate::metrics::ScoreReport;

pub use svg::{escape as xml_escape, Plot, Series};

pub const ANLCS_CSV: &str = "anlcs_vs_beta.csv";
pub const PPL_CSV: &str = "ppl_ratio_vs_beta.csv";
pub const TASK_CSV: &str = "task_score_vs_beta.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const ANLCS_SVG: &str = "anlcs_vs_beta.svg";
pub const PPL_SVG: &str = "ppl_ratio_vs_beta.svg";
pub const TASK_SVG: &str = "task_score_vs_beta.svg";

const METRICS: [&str; 7] = [
    "anlcs_steered",
    "anlcs_default",
    "ppl_ratio",
    "meteor_exact_steered",
    "meteor_exact_default",
    "task_steered",
    "task_default",
];

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn cell_stats(c: &CellSummary) -> [Option<Stat>; 7] {
    [
        c.anlcs_steered,
        c.anlcs_default,
        c.ppl_ratio,
        c.meteor_exact_steered,
        c.meteor_exact_default,
        c.task_steered,
        c.task_default,
    ]
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn record_prefix(r: &RunRecord) -> Vec<String> {
    vec![
        r.run_id.clone(),
        r.index.to_string(),
        format!("{:?}", r.status).to_lowercase(),
        r.spec.layer.to_string(),
        r.spec.feature_id.to_string(),
        r.spec.beta.to_string(),
        BetaBin::of(r.spec.beta).label().to_string(),
        r.dead_feature.to_string(),
    ]
}

const PREFIX: [&str; 8] = [
    "run_id",
    "index",
    "status",
    "layer",
    "feature_id",
    "beta",
    "beta_bin",
    "dead_feature",
];

fn write_record_csv(
    path: &Path,
    records: &[RunRecord],
    columns: &[String],
    values: impl Fn(Option<&ScoreReport>) -> Vec<String>,
) -> Result<()> {
    let mut w = csv_writer(path)?;
    let header: Vec<&str> = PREFIX.iter().copied().chain(columns.iter().map(String::as_str)).collect();
    w.write_record(&header)?;
    for r in records {
        let mut row = record_prefix(r);
        row.extend(values(r.scores.as_ref()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_summary_csv(path: &Path, agg: &Aggregate) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["layer".to_string(), "beta_bin".into(), "runs".into(), "dead_features".into()];
    for m in METRICS {
        header.extend([format!("{m}_n"), format!("{m}_mean"), format!("{m}_median")]);
    }
    w.write_record(&header)?;
    for c in &agg.cells {
        let mut row = vec![
            c.layer.map_or("all".into(), |l| l.to_string()),
            c.bin.map_or("all", BetaBin::label).to_string(),
            c.runs.to_string(),
            c.dead_features.to_string(),
        ];
        for s in cell_stats(c) {
            match s {
                Some(s) => row.extend([s.n.to_string(), s.mean.to_string(), s.median.to_string()]),
                None => row.extend([String::new(), String::new(), String::new()]),
            }
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses a summary written by [`emit_report`] back into cells.
pub fn read_summary_csv(path: &Path) -> Result<Vec<CellSummary>> {
    let mut r = csv::Reader::from_path(path)?;
    let bad = |m: String| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        message: m,
    };
    let mut cells = Vec::new();
    for row in r.records() {
        let row = row?;
        let get = |i: usize| row.get(i).ok_or_else(|| bad(format!("missing column {i}")));
        let int = |i: usize| -> Result<usize> {
            get(i)?.parse().map_err(|e| bad(format!("column {i}: {e}")))
        };
        let layer = match get(0)? {
            "all" => None,
            l => Some(l.parse().map_err(|e| bad(format!("layer: {e}")))?),
        };
        let bin = match get(1)? {
            "all" => None,
            b => Some(BetaBin::from_label(b).ok_or_else(|| bad(format!("unknown bin {b}")))?),
        };
        let mut stats = [None; 7];
        for (k, s) in stats.iter_mut().enumerate() {
            let base = 4 + 3 * k;
            if get(base)?.is_empty() {
                continue;
            }
            let float = |i: usize| -> Result<f64> {
                get(i)?.parse().map_err(|e| bad(format!("column {i}: {e}")))
            };
            *s = Some(Stat {
                n: int(base)?,
                mean: float(base + 1)?,
                median: float(base + 2)?,
            });
        }
        let [anlcs_steered, anlcs_default, ppl_ratio, meteor_exact_steered, meteor_exact_default, task_steered, task_default] =
            stats;
        cells.push(CellSummary {
            layer,
            bin,
            runs: int(2)?,
            dead_features: int(3)?,
            anlcs_steered,
            anlcs_default,
            ppl_ratio,
            meteor_exact_steered,
            meteor_exact_default,
            task_steered,
            task_default,
        });
    }
    Ok(cells)
}

fn layer_series(
    records: &[&RunRecord],
    pick: impl Fn(&ScoreReport) -> (Option<f64>, Option<f64>),
) -> Vec<Series> {
    let layers: BTreeSet<usize> = records.iter().map(|r| r.spec.layer).collect();
    layers
        .into_iter()
        .map(|layer| {
            let mut s = Series {
                name: format!("layer {layer}"),
                layer,
                steered: Vec::new(),
                default: Vec::new(),
            };
            for r in records.iter().filter(|r| r.spec.layer == layer) {
                let Some(scores) = &r.scores else { continue };
                let beta = f64::from(r.spec.beta);
                let (st, de) = pick(scores);
                if let Some(v) = st {
                    s.steered.push((beta, v));
                }
                if let Some(v) = de {
                    s.default.push((beta, v));
                }
            }
            s
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub csv: Vec<PathBuf>,
    pub svg: Vec<PathBuf>,
    pub aggregate: Aggregate,
}

/// Writes per-record CSVs, the grouped summary CSV and three scatter plots
/// into `out_dir`.
pub fn emit_report(records: &[RunRecord], out_dir: &Path) -> Result<ReportFiles> {
    let agg = aggregate(records)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let complete: Vec<&RunRecord> = records.iter().filter(|r| r.is_complete()).collect();

    let anlcs_csv = out_dir.join(ANLCS_CSV);
    write_record_csv(
        &anlcs_csv,
        records,
        &["anlcs_steered".into(), "anlcs_default".into()],
        |s| vec![opt(s.and_then(|s| s.anlcs_steered)), opt(s.and_then(|s| s.anlcs_default))],
    )?;
    let ppl_csv = out_dir.join(PPL_CSV);
    write_record_csv(
        &ppl_csv,
        records,
        &[
            "perplexity_steered".into(),
            "perplexity_default".into(),
            "ppl_ratio".into(),
            "meteor_exact_steered".into(),
            "meteor_exact_default".into(),
        ],
        |s| {
            vec![
                opt(s.and_then(|s| s.perplexity_steered)),
                opt(s.and_then(|s| s.perplexity_default)),
                opt(s.and_then(|s| s.ppl_ratio)),
                opt(s.and_then(|s| s.meteor_exact_steered)),
                opt(s.and_then(|s| s.meteor_exact_default)),
            ]
        },
    )?;
    let kinds: BTreeSet<String> = complete
        .iter()
        .filter_map(|r| r.scores.as_ref())
        .flat_map(|s| s.task_steered.keys().cloned())
        .collect();
    let mut task_cols = vec!["task_steered".to_string(), "task_default".into()];
    for k in &kinds {
        task_cols.push(format!("task_steered_{k}"));
        task_cols.push(format!("task_default_{k}"));
    }
    let task_csv = out_dir.join(TASK_CSV);
    write_record_csv(&task_csv, records, &task_cols, |s| {
        let mut row = vec![
            opt(s.and_then(|s| ScoreReport::mean_task(&s.task_steered))),
            opt(s.and_then(|s| ScoreReport::mean_task(&s.task_default))),
        ];
        for k in &kinds {
            row.push(opt(s.and_then(|s| s.task_steered.get(k).copied())));
            row.push(opt(s.and_then(|s| s.task_default.get(k).copied())));
        }
        row
    })?;
    let summary_csv = out_dir.join(SUMMARY_CSV);
    write_summary_csv(&summary_csv, &agg)?;

    let beta_range = (-100.0, 100.0);
    let anlcs_plot = Plot {
        title: "ANLCS vs steering strength".into(),
        x_label: "beta".into(),
        y_label: "ANLCS".into(),
        x_range: beta_range,
        y_range: (0.0, 1.0),
        series: layer_series(&complete, |s| (s.anlcs_steered, s.anlcs_default)),
        references: Vec::new(),
    };
    let ratios: Vec<f64> = complete
        .iter()
        .filter_map(|r| r.scores.as_ref()?.ppl_ratio)
        .collect();
    let max_ratio = ratios.iter().copied().fold(1.0, f64::max);
    let ppl_plot = Plot {
        title: "Steered / default perplexity vs steering strength".into(),
        x_label: "beta".into(),
        y_label: "perplexity ratio".into(),
        x_range: beta_range,
        y_range: (0.0, (max_ratio * 1.1).max(1.5)),
        series: layer_series(&complete, |s| (s.ppl_ratio, None)),
        references: vec![("ratio = 1".into(), 1.0)],
    };
    let mut references = Vec::new();
    if let Some(avg) = agg.cell(None, None).and_then(|c| c.task_default) {
        references.push(("default average".to_string(), avg.mean));
    }
    let task_plot = Plot {
        title: "Task score vs steering strength".into(),
        x_label: "beta".into(),
        y_label: "task accuracy".into(),
        x_range: beta_range,
        y_range: (0.0, 1.0),
        series: layer_series(&complete, |s| {
            (ScoreReport::mean_task(&s.task_steered), None)
        }),
        references,
    };
    let mut svgs = Vec::new();
    for (name, plot) in [(ANLCS_SVG, anlcs_plot), (PPL_SVG, ppl_plot), (TASK_SVG, task_plot)] {
        let path = out_dir.join(name);
        std::fs::write(&path, plot.render()).map_err(|e| Error::io(&path, e))?;
        svgs.push(path);
    }
    Ok(ReportFiles {
        csv: vec![anlcs_csv, ppl_csv, task_csv, summary_csv],
        svg: svgs,
        aggregate: agg,
    })
}

/// Mean ppl_ratio per layer over complete records, ascending by layer.
pub fn layer_ratio_means(agg: &Aggregate) -> BTreeMap<usize, f64> {
    agg.cells
        .iter()
        .filter(|c| c.bin.is_none())
        .filter_map(|c| Some((c.layer?, c.ppl_ratio?.mean)))
        .collect()
}
