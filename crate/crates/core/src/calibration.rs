//! Threshold calibration for a target coverage.
//!
//! On the fitting set the selector keeps exactly `ceil(c n)` samples: all
//! scores strictly above `tau`, then ties at `tau` by ascending sample id.
//! Elsewhere it is the plain rule `score >= tau`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::selection::SelectionMechanism;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    #[default]
    AscendingSampleId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedSelector {
    pub mechanism: Option<SelectionMechanism>,
    #[serde(with = "extended_f64")]
    pub tau: f64,
    pub target_coverage: f64,
    pub tie_policy: TiePolicy,
    /// Hash of the scores the threshold was fitted on.
    pub fingerprint: String,
    /// Number of fitting samples and how many the selector keeps there.
    pub n_fit: usize,
    pub k: usize,
}

impl CalibratedSelector {
    pub fn with_mechanism(mut self, m: SelectionMechanism) -> Self {
        self.mechanism = Some(m);
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `ceil(c n)`, treating `c n` within 1e-9 of an integer as that integer so
/// that e.g. `0.7 * 10` gives 7, not 8.
pub fn coverage_count(c: f64, n: usize) -> usize {
    let x = c * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { x.ceil() };
    (k as usize).clamp(1, n.max(1))
}

fn validate_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::config("cannot calibrate on zero samples"));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan() || *s == f64::INFINITY) {
        return Err(Error::config(format!("score {i} is not finite")));
    }
    Ok(())
}

fn fingerprint(scores: &[f64]) -> String {
    let mut h = Sha256::new();
    for s in scores {
        h.update(s.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

/// Indices sorted by descending score, ties by ascending index.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

pub fn fit_threshold(scores: &[f64], target_coverage: f64) -> Result<CalibratedSelector> {
    validate_scores(scores)?;
    if !(target_coverage > 0.0 && target_coverage <= 1.0) {
        return Err(Error::config(format!(
            "target coverage {target_coverage} must lie in (0, 1]"
        )));
    }
    if scores.iter().all(|s| *s == f64::NEG_INFINITY) {
        return Err(Error::Calibration("every score is -inf".into()));
    }
    let n = scores.len();
    let k = coverage_count(target_coverage, n);
    let order = ranked(scores);
    let tau = scores[order[k - 1]];
    Ok(CalibratedSelector {
        mechanism: None,
        tau,
        target_coverage,
        tie_policy: TiePolicy::AscendingSampleId,
        fingerprint: fingerprint(scores),
        n_fit: n,
        k,
    })
}

/// Pure threshold rule `score >= tau`.
pub fn apply_selector(sel: &CalibratedSelector, scores: &[f64]) -> Vec<bool> {
    scores.iter().map(|&s| s >= sel.tau).collect()
}

/// Exactly `sel.k` samples of the fitting set, resolving ties at `tau` by
/// ascending sample id.
pub fn apply_selector_exact(sel: &CalibratedSelector, scores: &[f64]) -> Result<Vec<bool>> {
    if scores.len() != sel.n_fit {
        return Err(Error::config(format!(
            "exact selection needs the {} fitting scores, got {}",
            sel.n_fit,
            scores.len()
        )));
    }
    let mut mask: Vec<bool> = scores.iter().map(|&s| s > sel.tau).collect();
    let mut need = sel.k - mask.iter().filter(|&&b| b).count();
    for (i, &s) in scores.iter().enumerate() {
        if need == 0 {
            break;
        }
        if s == sel.tau {
            mask[i] = true;
            need -= 1;
        }
    }
    Ok(mask)
}

pub fn achieved_coverage(mask: &[bool]) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.iter().filter(|&&b| b).count() as f64 / mask.len() as f64
}

/// JSON has no infinities; `-inf` thresholds are written as the string `"-inf"`.
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Num(*v).serialize(s)
        } else {
            Repr::Text(v.to_string()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}
