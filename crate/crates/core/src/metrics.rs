//! Effectiveness metrics.
//!
//! ROC and PR areas accept soft labels: timestep `i` contributes positive
//! mass `w[i]`, and only timesteps with `w[i] == 0` count as negatives, so a
//! detection inside a buffer zone is never a false positive. With binary
//! labels this reduces
//! to the usual Mann–Whitney AUROC (ties count one half) and step-wise
//! average precision. VUS averages those areas over buffered label vectors
//! for every buffer width `0..=L`.
//!
//! Thresholded metrics pick thresholds from a quantile grid using the
//! "higher" order statistic, so every threshold is an observed score and all
//! metrics here depend on the scores only through their ranks.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};

pub const DEFAULT_VUS_BUFFER: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Curve {
    Roc,
    Pr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSeries {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSeries {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(shape_err!("{} scores for {} labels", scores.len(), labels.len()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(invalid!("scores must be finite"));
        }
        Ok(Self { scores, labels })
    }

    fn check_both_classes(&self) -> Result<()> {
        let pos = self.labels.iter().filter(|&&l| l > 0).count();
        if pos == 0 || pos == self.labels.len() {
            return Err(Error::UndefinedMetric("labels must contain both classes"));
        }
        Ok(())
    }
}

/// Indices sorted by descending score.
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

fn weighted_area(scores: &[f64], order: &[usize], weights: &[f64], curve: Curve) -> Result<f64> {
    let total_pos: f64 = weights.iter().sum();
    let total_neg = weights.iter().filter(|&&w| w == 0.0).count() as f64;
    if !(total_pos > 0.0) || !(total_neg > 0.0) {
        return Err(Error::UndefinedMetric("labels must contain both classes"));
    }
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut dtp, mut dfp) = (0.0, 0.0);
        while i < order.len() && scores[order[i]] == s {
            let w = weights[order[i]];
            dtp += w;
            if w == 0.0 {
                dfp += 1.0;
            }
            i += 1;
        }
        match curve {
            Curve::Roc => area += dfp * (tp + tp + dtp) / 2.0,
            Curve::Pr => {
                if dtp > 0.0 {
                    area += dtp * (tp + dtp) / (tp + dtp + fp + dfp);
                }
            }
        }
        tp += dtp;
        fp += dfp;
    }
    Ok(match curve {
        Curve::Roc => area / (total_pos * total_neg),
        Curve::Pr => area / total_pos,
    })
}

/// Threshold-free area under the ROC or PR curve.
pub fn auc(s: &ScoredSeries, curve: Curve) -> Result<f64> {
    s.check_both_classes()?;
    let weights: Vec<f64> = s.labels.iter().map(|&l| f64::from(l.min(1))).collect();
    weighted_area(&s.scores, &descending_order(&s.scores), &weights, curve)
}

/// Area for arbitrary soft labels in `[0, 1]`.
pub fn weighted_auc(scores: &[f64], weights: &[f64], curve: Curve) -> Result<f64> {
    if scores.len() != weights.len() {
        return Err(shape_err!("{} scores for {} weights", scores.len(), weights.len()));
    }
    weighted_area(scores, &descending_order(scores), weights, curve)
}

/// Labels widened by `buffer` steps on each side of every anomalous segment.
/// A point at distance `d` outside a segment gets weight `1 - d/(buffer+1)`;
/// overlapping ramps take the maximum.
pub fn buffered_labels(labels: &[u8], buffer: usize) -> Vec<f64> {
    let n = labels.len();
    let mut out: Vec<f64> = labels.iter().map(|&l| f64::from(l.min(1))).collect();
    if buffer == 0 {
        return out;
    }
    let denom = (buffer + 1) as f64;
    for (start, end) in segments(labels) {
        for d in 1..=buffer {
            let w = 1.0 - d as f64 / denom;
            if start >= d {
                let i = start - d;
                out[i] = out[i].max(w);
            }
            if end + d < n {
                let i = end + d;
                out[i] = out[i].max(w);
            }
        }
    }
    out
}

/// Maximal runs of positive labels as inclusive `(start, end)` pairs.
pub fn segments(labels: &[u8]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &l) in labels.iter().enumerate() {
        match (l > 0, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, labels.len() - 1));
    }
    out
}

/// Volume under the surface: mean area over buffer widths `0..=max_buffer`.
///
/// Widths whose buffers swallow every negative timestep (possible on short,
/// event-dense series) have no defined area and are left out of the mean.
pub fn vus(s: &ScoredSeries, max_buffer: usize, curve: Curve) -> Result<f64> {
    s.check_both_classes()?;
    let order = descending_order(&s.scores);
    let (mut total, mut count) = (0.0, 0usize);
    for l in 0..=max_buffer {
        let weights = buffered_labels(&s.labels, l);
        if !weights.contains(&0.0) {
            break;
        }
        total += weighted_area(&s.scores, &order, &weights, curve)?;
        count += 1;
    }
    Ok(total / count as f64)
}

/// 200 evenly spaced quantiles in `[0.50, 0.999]`.
pub fn default_quantile_grid() -> Vec<f64> {
    let n = 200;
    (0..n).map(|i| 0.50 + (0.999 - 0.50) * i as f64 / (n - 1) as f64).collect()
}

/// `q`-quantile of ascending `sorted` values, taking the higher neighbour.
pub fn quantile_higher(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let idx = libm::ceil(pos - 1e-9).max(0.0) as usize;
    sorted[idx.min(sorted.len() - 1)]
}

fn f1(labels: &[u8], preds: &[u8]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&l, &p) in labels.iter().zip(preds) {
        match (l > 0, p > 0) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    2.0 * precision * recall / (precision + recall)
}

fn sweep(s: &ScoredSeries, grid: &[f64], adjust: bool) -> Result<(f64, f64)> {
    if grid.is_empty() {
        return Err(invalid!("quantile grid is empty"));
    }
    s.check_both_classes()?;
    let mut sorted = s.scores.clone();
    sorted.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64)> = None;
    let mut preds = vec![0u8; s.scores.len()];
    for &q in grid {
        let thr = quantile_higher(&sorted, q);
        for (p, &v) in preds.iter_mut().zip(&s.scores) {
            *p = u8::from(v >= thr);
        }
        let value = if adjust { f1(&s.labels, &point_adjust(&s.labels, &preds)?) } else { f1(&s.labels, &preds) };
        best = match best {
            Some((bf, bt)) if bf > value || (bf == value && bt <= thr) => Some((bf, bt)),
            _ => Some((value, thr)),
        };
    }
    Ok(best.expect("grid is non-empty"))
}

/// Best point-wise F1 over the quantile grid and the threshold achieving it
/// (lowest threshold on ties).
pub fn best_f1(s: &ScoredSeries, grid: &[f64]) -> Result<(f64, f64)> {
    sweep(s, grid, false)
}

/// Fill every label segment that contains at least one positive prediction.
pub fn point_adjust(labels: &[u8], preds: &[u8]) -> Result<Vec<u8>> {
    if labels.len() != preds.len() {
        return Err(shape_err!("{} labels for {} predictions", labels.len(), preds.len()));
    }
    let mut out = preds.to_vec();
    for (a, b) in segments(labels) {
        if preds[a..=b].iter().any(|&p| p > 0) {
            out[a..=b].iter_mut().for_each(|p| *p = 1);
        }
    }
    Ok(out)
}

/// Best F1 after point adjustment of every thresholded prediction.
pub fn pa_best_f1(s: &ScoredSeries, grid: &[f64]) -> Result<f64> {
    sweep(s, grid, true).map(|(f, _)| f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricOptions {
    pub grid: Vec<f64>,
    pub vus_buffer: usize,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self { grid: default_quantile_grid(), vus_buffer: DEFAULT_VUS_BUFFER }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub f1: f64,
    pub pa_f1: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub vus_roc: f64,
    pub vus_pr: f64,
}

impl MetricValues {
    pub const NAMES: [&'static str; 6] = ["f1", "pa_f1", "auroc", "auprc", "vus_roc", "vus_pr"];

    pub fn to_array(self) -> [f64; 6] {
        [self.f1, self.pa_f1, self.auroc, self.auprc, self.vus_roc, self.vus_pr]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self { f1: a[0], pa_f1: a[1], auroc: a[2], auprc: a[3], vus_roc: a[4], vus_pr: a[5] }
    }
}

/// All effectiveness metrics for one (method, dataset, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub metrics: MetricValues,
    pub best_threshold: f64,
}

pub fn evaluate(
    method: &str,
    dataset: &str,
    seed: u64,
    s: &ScoredSeries,
    opts: &MetricOptions,
) -> Result<MetricReport> {
    let (f1, best_threshold) = best_f1(s, &opts.grid)?;
    let metrics = MetricValues {
        f1,
        pa_f1: pa_best_f1(s, &opts.grid)?,
        auroc: auc(s, Curve::Roc)?,
        auprc: auc(s, Curve::Pr)?,
        vus_roc: vus(s, opts.vus_buffer, Curve::Roc)?,
        vus_pr: vus(s, opts.vus_buffer, Curve::Pr)?,
    };
    Ok(MetricReport { method: method.into(), dataset: dataset.into(), seed, metrics, best_threshold })
}

/// Per-metric mean and sample standard deviation over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub method: String,
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub mean: MetricValues,
    pub std: MetricValues,
}

/// Mean and `n - 1` standard deviation of `values`; the deviation is 0 for a
/// single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, libm::sqrt(var))
}

pub fn aggregate_seeds(reports: &[MetricReport]) -> Result<SeedAggregate> {
    let first = reports.first().ok_or(Error::Empty("seed reports"))?;
    if reports.iter().any(|r| r.method != first.method || r.dataset != first.dataset) {
        return Err(invalid!("cannot aggregate reports across methods or datasets"));
    }
    let mut mean = [0.0; 6];
    let mut std = [0.0; 6];
    for k in 0..6 {
        let vals: Vec<f64> = reports.iter().map(|r| r.metrics.to_array()[k]).collect();
        (mean[k], std[k]) = mean_std(&vals);
    }
    Ok(SeedAggregate {
        method: first.method.clone(),
        dataset: first.dataset.clone(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        mean: MetricValues::from_array(mean),
        std: MetricValues::from_array(std),
    })
}
