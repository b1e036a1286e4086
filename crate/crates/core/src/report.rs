//! Tables and plots derived from run manifests.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::ExperimentManifest;
use crate::probes::ProbeReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub block_id: usize,
    pub accuracy: f64,
    /// Zero for the stem.
    pub contribution: f64,
    pub degraded: bool,
}

/// Probe accuracy per block with successive differences.
pub fn probe_curve(report: &ProbeReport) -> Vec<CurveRow> {
    let mut prev = None;
    report
        .accuracies
        .iter()
        .map(|(&id, &acc)| {
            let contribution = prev.map_or(0.0, |p| acc - p);
            prev = Some(acc);
            CurveRow {
                block_id: id,
                accuracy: acc,
                contribution,
                degraded: contribution < 0.0,
            }
        })
        .collect()
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("block_id,accuracy,contribution,degraded\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.block_id, r.accuracy, r.contribution, r.degraded);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CensusRow {
    /// 0 is the un-pruned model, `k` the model after round `k`.
    pub model: usize,
    pub blocks: usize,
    pub units: usize,
    /// `None` when that model was never probed.
    pub degraded: Option<usize>,
}

/// Number of degraded blocks in each successive model of a run.
pub fn census(manifest: &ExperimentManifest) -> Vec<CensusRow> {
    let models = std::iter::once(&manifest.baseline).chain(manifest.rounds.iter().map(|r| &r.model));
    models
        .enumerate()
        .map(|(k, m)| CensusRow {
            model: k,
            blocks: m.block_count,
            units: m.unit_count,
            degraded: manifest
                .probe_of_model(k)
                .map(|p| probe_curve(p).iter().filter(|r| r.degraded).count()),
        })
        .collect()
}

pub fn census_table(rows: &[CensusRow]) -> String {
    let mut out = String::from("model  blocks  units  degraded\n");
    for r in rows {
        let d = r.degraded.map_or("-".to_string(), |d| d.to_string());
        let _ = writeln!(out, "{:>5}  {:>6}  {:>5}  {:>8}", r.model, r.blocks, r.units, d);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub label: String,
    pub accuracy: f64,
    pub frr: f64,
    pub mean_ms: Option<f64>,
    pub ar: Option<f64>,
}

/// One row per manifest. All manifests must come from the same dataset.
pub fn results_table(manifests: &[(String, ExperimentManifest)]) -> Result<Vec<ResultRow>> {
    if let Some((_, first)) = manifests.first() {
        if let Some((label, m)) = manifests.iter().find(|(_, m)| m.dataset_id != first.dataset_id) {
            return Err(Error::IncompatibleManifests(format!(
                "`{label}` was run on {} but the first manifest on {}",
                m.dataset_id, first.dataset_id
            )));
        }
    }
    Ok(manifests
        .iter()
        .map(|(label, m)| ResultRow {
            label: label.clone(),
            accuracy: m.summary.accuracy,
            frr: m.summary.frr,
            mean_ms: m.summary.mean_ms,
            ar: m.summary.ar,
        })
        .collect())
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut out = String::from("label,accuracy,frr,mean_ms,ar\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.label, r.accuracy, r.frr, opt(r.mean_ms), opt(r.ar));
    }
    out
}

pub fn results_markdown(rows: &[ResultRow]) -> String {
    let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |v| format!("{v:.p$}"));
    let mut out = String::from("| model | Acc (%) | Frr (%) | Time (ms) | AR |\n|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {:.2} | {:.2} | {} | {} |",
            r.label,
            100.0 * r.accuracy,
            100.0 * r.frr,
            opt(r.mean_ms, 2),
            opt(r.ar, 2)
        );
    }
    out
}

/// Line plot of probe accuracy against block id.
pub fn curve_svg(rows: &[CurveRow], title: &str) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let n = rows.len().max(2) as f64 - 1.0;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{pad}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n\
         <line x1=\"{pad}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{y0}\" stroke=\"black\"/>\n",
        y0 = h - pad,
        x1 = w - pad
    );
    let pt = |i: usize, acc: f64| (pad + (w - 2.0 * pad) * i as f64 / n, h - pad - (h - 2.0 * pad) * acc);
    let points: Vec<String> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let (x, y) = pt(i, r.accuracy);
            format!("{x:.1},{y:.1}")
        })
        .collect();
    let _ = writeln!(out, "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>", points.join(" "));
    for (i, r) in rows.iter().enumerate().filter(|(_, r)| r.degraded) {
        let (x, y) = pt(i, r.accuracy);
        let _ = writeln!(out, "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"4\" fill=\"crimson\"><title>block {}</title></circle>", r.block_id);
    }
    out.push_str("</svg>\n");
    out
}

/// Writes `curve_round_<k>.csv`/`.svg` for every probed round, the census
/// and the results row of one manifest into `dir`.
pub fn write_run_report(manifest: &ExperimentManifest, dir: &Path, svg: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: String, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    let last = manifest.rounds.len();
    for k in 0..=last {
        if let Some(p) = manifest.probe_of_model(k) {
            let rows = probe_curve(p);
            write(format!("curve_model_{k}.csv"), curve_csv(&rows))?;
            if svg {
                write(format!("curve_model_{k}.svg"), curve_svg(&rows, &format!("model {k}")))?;
            }
        }
    }
    write("census.txt".into(), census_table(&census(manifest)))?;
    let rows = results_table(&[(manifest.mode.to_string(), manifest.clone())])?;
    write("results.csv".into(), results_csv(&rows))?;
    write("results.md".into(), results_markdown(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_contributions_telescope() {
        let report = ProbeReport {
            accuracies: [(0, 0.35), (1, 0.5), (2, 0.62), (3, 0.6), (4, 0.7)].into_iter().collect(),
            eval_split_size: 10,
            seed: 0,
            reduction: Default::default(),
        };
        let rows = probe_curve(&report);
        let sum: f64 = rows.iter().map(|r| r.contribution).sum();
        assert!((sum - (0.7 - 0.35)).abs() < 1e-12);
        assert_eq!(rows.iter().filter(|r| r.degraded).count(), 1);
        assert!(curve_csv(&rows).starts_with("block_id,accuracy,contribution,degraded\n"));
        assert!(curve_svg(&rows, "t").contains("block 3"));
    }
}
