//! Selective metrics, risk-coverage curves and score histograms.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::calibration::{achieved_coverage, apply_selector, apply_selector_exact, fit_threshold};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::selection::csv_err;

/// Coverage grid used by the comparison tables: 1.0, 0.9, ..., 0.1.
pub fn default_coverage_grid() -> Vec<f64> {
    (1..=10).rev().map(|i| i as f64 / 10.0).collect()
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::config("prediction and label counts differ"));
    }
    if pred.is_empty() {
        return Err(Error::config("accuracy of an empty set"));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// 0/1 error over the selected samples.
pub fn selective_risk(pred: &[usize], truth: &[usize], mask: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() || pred.len() != mask.len() {
        return Err(Error::config("prediction, label and mask lengths differ"));
    }
    let mut selected = 0usize;
    let mut wrong = 0usize;
    for ((p, t), &m) in pred.iter().zip(truth).zip(mask) {
        if m {
            selected += 1;
            if p != t {
                wrong += 1;
            }
        }
    }
    if selected == 0 {
        return Err(Error::UndefinedRisk("no samples selected".into()));
    }
    Ok(wrong as f64 / selected as f64)
}

/// Mean negative log-likelihood of the true class over the selected samples.
pub fn selective_nll(true_class_log_prob: &[f64], mask: &[bool]) -> Result<f64> {
    if true_class_log_prob.len() != mask.len() {
        return Err(Error::config("log-probability and mask lengths differ"));
    }
    let (sum, n) = true_class_log_prob
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (lp, _)| (s - lp, n + 1));
    if n == 0 {
        return Err(Error::UndefinedRisk("no samples selected".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCoveragePoint {
    pub target_coverage: f64,
    pub achieved_coverage: f64,
    pub selective_risk: f64,
    pub n_selected: usize,
    pub tau: f64,
}

/// Where the threshold for each curve point is fitted.
#[derive(Debug, Clone, Copy)]
pub enum CalibrationSource<'a> {
    /// Fit on the evaluated scores themselves, selecting exactly `ceil(c n)`.
    SameSet,
    /// Fit on held-out scores, then apply the plain threshold rule.
    Held(&'a [f64]),
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::config("coverage grid is empty"));
    }
    if let Some(c) = grid.iter().find(|c| !(**c > 0.0 && **c <= 1.0)) {
        return Err(Error::config(format!("coverage {c} outside (0, 1]")));
    }
    if grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::config("coverage grid must be strictly descending"));
    }
    Ok(())
}

pub fn risk_coverage_curve(
    scores: &[f64],
    pred: &[usize],
    truth: &[usize],
    grid: &[f64],
    calibration: CalibrationSource<'_>,
) -> Result<Vec<RiskCoveragePoint>> {
    risk_coverage_curve_with(scores, pred, truth, grid, calibration, Exec::default())
}

pub fn risk_coverage_curve_with(
    scores: &[f64],
    pred: &[usize],
    truth: &[usize],
    grid: &[f64],
    calibration: CalibrationSource<'_>,
    exec: Exec,
) -> Result<Vec<RiskCoveragePoint>> {
    validate_grid(grid)?;
    if scores.len() != pred.len() || scores.len() != truth.len() {
        return Err(Error::config("score, prediction and label lengths differ"));
    }
    let point = |c: &f64| -> Result<RiskCoveragePoint> {
        let mask = match calibration {
            CalibrationSource::SameSet => {
                let sel = fit_threshold(scores, *c)?;
                (apply_selector_exact(&sel, scores)?, sel.tau)
            }
            CalibrationSource::Held(cal) => {
                let sel = fit_threshold(cal, *c)?;
                (apply_selector(&sel, scores), sel.tau)
            }
        };
        let (mask, tau) = mask;
        let selective_risk = selective_risk(pred, truth, &mask)
            .map_err(|e| Error::UndefinedRisk(format!("at coverage {c}: {e}")))?;
        Ok(RiskCoveragePoint {
            target_coverage: *c,
            achieved_coverage: achieved_coverage(&mask),
            selective_risk,
            n_selected: mask.iter().filter(|&&b| b).count(),
            tau,
        })
    };
    exec.map_slice(grid, point).into_iter().collect()
}

/// Writes `target_coverage,achieved_coverage,selective_risk,n_selected,seed`.
pub fn write_curve_csv<W: Write>(out: W, points: &[RiskCoveragePoint], seed: u64) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["target_coverage", "achieved_coverage", "selective_risk", "n_selected", "seed"])
        .map_err(csv_err)?;
    for p in points {
        w.write_record([
            p.target_coverage.to_string(),
            p.achieved_coverage.to_string(),
            p.selective_risk.to_string(),
            p.n_selected.to_string(),
            seed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub edges: Vec<f64>,
    pub counts_correct: Vec<usize>,
    pub counts_incorrect: Vec<usize>,
    /// All finite scores were equal; a single zero-width bin is emitted.
    pub degenerate: bool,
}

impl ScoreHistogram {
    pub fn total(&self) -> usize {
        self.counts_correct.iter().sum::<usize>() + self.counts_incorrect.iter().sum::<usize>()
    }
}

/// Equal-width bins over `[min, max]` of the finite scores, split by whether
/// the prediction was correct. `-inf` scores land in the first bin.
pub fn score_histogram(scores: &[f64], pred: &[usize], truth: &[usize], n_bins: usize) -> Result<ScoreHistogram> {
    if n_bins < 2 {
        return Err(Error::config("histogram needs at least 2 bins"));
    }
    if scores.len() != pred.len() || scores.len() != truth.len() {
        return Err(Error::config("score, prediction and label lengths differ"));
    }
    let finite: Vec<f64> = scores.iter().cloned().filter(|s| s.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::config("histogram needs at least one finite score"));
    }
    let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (edges, bins) = if hi > lo {
        let w = (hi - lo) / n_bins as f64;
        let mut e: Vec<f64> = (0..n_bins).map(|i| lo + w * i as f64).collect();
        e.push(hi);
        (e, n_bins)
    } else {
        (vec![lo, hi], 1)
    };
    let mut hist = ScoreHistogram {
        edges,
        counts_correct: vec![0; bins],
        counts_incorrect: vec![0; bins],
        degenerate: bins == 1,
    };
    for ((&s, p), t) in scores.iter().zip(pred).zip(truth) {
        let b = if bins == 1 || !s.is_finite() {
            0
        } else {
            (((s - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
        };
        if p == t {
            hist.counts_correct[b] += 1;
        } else {
            hist.counts_incorrect[b] += 1;
        }
    }
    Ok(hist)
}

/// Writes `bin_lo,bin_hi,count_correct,count_incorrect`.
pub fn write_histogram_csv<W: Write>(out: W, hist: &ScoreHistogram) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["bin_lo", "bin_hi", "count_correct", "count_incorrect"])
        .map_err(csv_err)?;
    for b in 0..hist.counts_correct.len() {
        w.write_record([
            hist.edges[b].to_string(),
            hist.edges[b + 1].to_string(),
            hist.counts_correct[b].to_string(),
            hist.counts_incorrect[b].to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}
