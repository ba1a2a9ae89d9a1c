//! Regression metrics, stratified breakdowns, the pollution-day warning
//! evaluation and report rendering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, MaskedField};
use crate::synth::hour_of_slice;

/// Truth below this magnitude is left out of MAPE.
pub const MAPE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    /// Fraction, not percent. `None` when every truth value is near zero.
    pub mape: Option<f64>,
    pub n: usize,
    /// Entries left out of MAPE because the truth was near zero.
    pub mape_excluded: usize,
}

fn check_lengths(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<()> {
    if pred.len() != truth.len() || mask.len() != truth.len() {
        return Err(Error::dim(format!(
            "pred, truth and mask lengths differ: {}, {}, {}",
            pred.len(),
            truth.len(),
            mask.len()
        )));
    }
    Ok(())
}

/// MAE, RMSE and MAPE over entries where `mask` is set.
pub fn metrics(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<MetricReport> {
    check_lengths(pred, truth, mask)?;
    metrics_where(pred, truth, |i| mask[i])
        .ok_or_else(|| Error::InsufficientData("no entries to evaluate".into()))
}

fn metrics_where(pred: &[f64], truth: &[f64], keep: impl Fn(usize) -> bool) -> Option<MetricReport> {
    let (mut n, mut abs, mut sq, mut pct, mut pct_n) = (0usize, 0.0, 0.0, 0.0, 0usize);
    for i in 0..truth.len() {
        if !keep(i) {
            continue;
        }
        let e = pred[i] - truth[i];
        n += 1;
        abs += e.abs();
        sq += e * e;
        if truth[i].abs() >= MAPE_EPS {
            pct += (e / truth[i]).abs();
            pct_n += 1;
        }
    }
    (n > 0).then(|| MetricReport {
        mae: abs / n as f64,
        rmse: (sq / n as f64).sqrt(),
        mape: (pct_n > 0).then(|| pct / pct_n as f64),
        n,
        mape_excluded: n - pct_n,
    })
}

pub const TIME_BUCKETS: [&str; 4] = ["00-06", "06-12", "12-18", "18-24"];
pub const COVERAGE_BUCKETS: [&str; 4] = ["[0.0,0.2]", "(0.2,0.4]", "(0.4,0.6]", "(0.6,1.0]"];

/// Index into [`COVERAGE_BUCKETS`].
pub fn coverage_bucket(c: f64) -> usize {
    if c <= 0.2 {
        0
    } else if c <= 0.4 {
        1
    } else if c <= 0.6 {
        2
    } else {
        3
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub name: String,
    /// `None` when no evaluated entry falls in the bucket.
    pub report: Option<MetricReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratifiedReport {
    pub time: Vec<Bucket>,
    pub coverage: Vec<Bucket>,
}

/// Where evaluated entries sit in time and which cells they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub cells: usize,
    /// Hour of day at the first slice.
    pub start_hour: f64,
    /// Seconds per slice.
    pub slice_length: f64,
}

/// Metrics per hour-of-day bucket and per cell-coverage bucket.
///
/// Arrays are slice-major with `layout.cells` entries per slice;
/// `coverage` holds each cell's temporal coverage.
pub fn stratified(
    pred: &[f64],
    truth: &[f64],
    mask: &[bool],
    coverage: &[f64],
    layout: &Layout,
) -> Result<StratifiedReport> {
    check_lengths(pred, truth, mask)?;
    let k = layout.cells;
    if k == 0 || !truth.len().is_multiple_of(k) || coverage.len() != k {
        return Err(Error::dim(format!(
            "stratification needs whole slices of {k} cells and one coverage value per cell (got {} entries, {} coverages)",
            truth.len(),
            coverage.len()
        )));
    }
    metrics(pred, truth, mask)?;
    let hour = |i: usize| hour_of_slice(layout.start_hour, layout.slice_length, i / k) as usize;
    let time = (0..4)
        .map(|b| Bucket {
            name: TIME_BUCKETS[b].into(),
            report: metrics_where(pred, truth, |i| mask[i] && hour(i) / 6 == b),
        })
        .collect();
    let cov = (0..4)
        .map(|b| Bucket {
            name: COVERAGE_BUCKETS[b].into(),
            report: metrics_where(pred, truth, |i| mask[i] && coverage_bucket(coverage[i % k]) == b),
        })
        .collect();
    Ok(StratifiedReport { time, coverage: cov })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarningReport {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    /// Days without any observed truth.
    pub skipped_days: usize,
}

pub const DEFAULT_THRESHOLD: f64 = 25.0;

impl WarningReport {
    pub fn from_counts(threshold: f64, tp: usize, fp: usize, fn_: usize, tn: usize, skipped_days: usize) -> Self {
        let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
        let recall = ratio(tp, tp + fn_);
        let precision = ratio(tp, tp + fp);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        WarningReport { threshold, tp, fp, fn_, tn, recall, precision, f1, skipped_days }
    }
}

/// 24-hour means: per slice the spatial mean over entries where `mask` is
/// set, then the mean over that day's slices that had any. Days without
/// entries are `None`.
pub fn daily_means(values: &[f64], mask: &[bool], cells: usize, slices_per_day: usize) -> Vec<Option<f64>> {
    let slices = values.len() / cells.max(1);
    (0..slices.div_ceil(slices_per_day.max(1)))
        .map(|d| {
            let means: Vec<f64> = (d * slices_per_day..((d + 1) * slices_per_day).min(slices))
                .filter_map(|l| {
                    let r = l * cells..(l + 1) * cells;
                    let obs: Vec<f64> =
                        values[r.clone()].iter().zip(&mask[r]).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
                    (!obs.is_empty()).then(|| obs.iter().sum::<f64>() / obs.len() as f64)
                })
                .collect();
            (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64)
        })
        .collect()
}

/// Classifies each day as a pollution day when its mean exceeds `threshold`.
pub fn warning_eval(pred_daily: &[Option<f64>], truth_daily: &[Option<f64>], threshold: f64) -> Result<WarningReport> {
    if pred_daily.len() != truth_daily.len() {
        return Err(Error::dim(format!(
            "{} predicted days vs {} true days",
            pred_daily.len(),
            truth_daily.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn, mut skipped) = (0, 0, 0, 0, 0);
    for (p, t) in pred_daily.iter().zip(truth_daily) {
        let (Some(p), Some(t)) = (p, t) else {
            skipped += 1;
            continue;
        };
        match (*p > threshold, *t > threshold) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(WarningReport::from_counts(threshold, tp, fp, fn_, tn, skipped))
}

/// Which entries count as ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthSource {
    /// Held-out mobile observations.
    Mobile,
    /// A fixed set of station cells.
    Station,
}

impl std::str::FromStr for TruthSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mobile" => Ok(TruthSource::Mobile),
            "station" => Ok(TruthSource::Station),
            _ => Err(Error::config(format!("truth source must be `mobile` or `station`, got `{s}`"))),
        }
    }
}

/// Station cells: every third cell in each direction, offset by one.
pub fn station_cells(grid: &GridSpec) -> Vec<usize> {
    let pick = |n: usize| -> Vec<usize> {
        let v: Vec<usize> = (0..n).filter(|i| i % 3 == 1).collect();
        if v.is_empty() {
            vec![n / 2]
        } else {
            v
        }
    };
    let mut out = Vec::new();
    for x in pick(grid.x) {
        for y in pick(grid.y) {
            out.push(grid.cell(x, y));
        }
    }
    out
}

/// Evaluation mask for `truth` under `source`; station mode keeps only
/// station cells.
pub fn truth_mask(truth: &MaskedField, source: TruthSource) -> Vec<bool> {
    match source {
        TruthSource::Mobile => truth.mask.clone(),
        TruthSource::Station => {
            let k = truth.cells();
            let mut keep = vec![false; k];
            station_cells(&truth.grid).into_iter().for_each(|c| keep[c] = true);
            truth.mask.iter().enumerate().map(|(i, &m)| m && keep[i % k]).collect()
        }
    }
}

/// Everything `evaluate` reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub truth_source: TruthSource,
    pub overall: MetricReport,
    pub stratified: StratifiedReport,
    pub warning: WarningReport,
    /// Per-slice metrics; `None` for slices with nothing to evaluate.
    pub per_slice: Vec<Option<MetricReport>>,
}

/// Compares a predicted field with a truth field of the same shape.
///
/// Entries count when the truth is observed (under `source`) and the
/// prediction is present.
pub fn evaluate_fields(
    pred: &MaskedField,
    truth: &MaskedField,
    source: TruthSource,
    threshold: f64,
    start_hour: f64,
) -> Result<EvalReport> {
    if pred.shape() != truth.shape() {
        return Err(Error::dim(format!(
            "prediction has shape {:?}, truth has {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let k = truth.cells();
    let tmask = truth_mask(truth, source);
    let mask: Vec<bool> = tmask.iter().zip(&pred.mask).map(|(&a, &b)| a && b).collect();
    let overall = metrics(&pred.values, &truth.values, &mask)?;
    let (_, temporal) = crate::grid::coverage_stats(truth);
    let layout = Layout { cells: k, start_hour, slice_length: truth.grid.slice_length };
    let strat = stratified(&pred.values, &truth.values, &mask, &temporal, &layout)?;
    let per_day = ((86400.0 / truth.grid.slice_length).round() as usize).max(1);
    let warning = warning_eval(
        &daily_means(&pred.values, &mask, k, per_day),
        &daily_means(&truth.values, &mask, k, per_day),
        threshold,
    )?;
    let per_slice = (0..truth.slices)
        .map(|l| {
            let r = l * k..(l + 1) * k;
            metrics_where(&pred.values[r.clone()], &truth.values[r.clone()], |i| mask[r.start + i])
        })
        .collect();
    Ok(EvalReport { truth_source: source, overall, stratified: strat, warning, per_slice })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

/// Aligned text table of a labelled set of metric reports.
pub fn metric_table(rows: &[(String, Option<&MetricReport>)]) -> String {
    let w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<w$}  {:>10}  {:>10}  {:>10}  {:>8}\n", "bucket", "MAE", "RMSE", "MAPE", "n");
    for (name, r) in rows {
        match r {
            Some(r) => {
                let _ = writeln!(
                    s,
                    "{name:<w$}  {:>10.4}  {:>10.4}  {:>10}  {:>8}",
                    r.mae,
                    r.rmse,
                    fmt_opt(r.mape),
                    r.n
                );
            }
            None => {
                let _ = writeln!(s, "{name:<w$}  {:>10}  {:>10}  {:>10}  {:>8}", "-", "-", "-", 0);
            }
        }
    }
    s
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_table(&self) -> String {
        let mut rows = vec![("overall".to_string(), Some(&self.overall))];
        for b in self.stratified.time.iter().chain(&self.stratified.coverage) {
            rows.push((b.name.clone(), b.report.as_ref()));
        }
        let mut s = metric_table(&rows);
        let w = &self.warning;
        let _ = writeln!(
            s,
            "\nwarning threshold {:.2}: tp={} fp={} fn={} tn={} skipped={} recall={} precision={} f1={}",
            w.threshold,
            w.tp,
            w.fp,
            w.fn_,
            w.tn,
            w.skipped_days,
            fmt_opt(w.recall),
            fmt_opt(w.precision),
            fmt_opt(w.f1)
        );
        s
    }

    /// `slice,metric,value` rows for slices with evaluated entries.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("slice,metric,value\n");
        for (l, r) in self.per_slice.iter().enumerate() {
            if let Some(r) = r {
                let _ = writeln!(s, "{l},mae,{}", r.mae);
                let _ = writeln!(s, "{l},rmse,{}", r.rmse);
                if let Some(m) = r.mape {
                    let _ = writeln!(s, "{l},mape,{m}");
                }
            }
        }
        s
    }
}
