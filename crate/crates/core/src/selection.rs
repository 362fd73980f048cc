//! Soft selection scores: one real number per sample, higher means more
//! selectable.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{argmax, sigmoid, ForwardTrace, HeadConfig, Matrix, ProbOutput, HEAD_PRED, HEAD_SELECT};
use crate::objectives::predictive_entropy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMechanism {
    /// Max class probability.
    SoftmaxResponse,
    /// Negative predictive entropy.
    NegativeEntropy,
    /// `1 - p(abstain)`.
    AbstentionLogit,
    /// SelectiveNet's sigmoid selection unit.
    SelectionHead,
}

impl SelectionMechanism {
    pub const ALL: [SelectionMechanism; 4] = [
        SelectionMechanism::SoftmaxResponse,
        SelectionMechanism::NegativeEntropy,
        SelectionMechanism::AbstentionLogit,
        SelectionMechanism::SelectionHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectionMechanism::SoftmaxResponse => "softmax_response",
            SelectionMechanism::NegativeEntropy => "negative_entropy",
            SelectionMechanism::AbstentionLogit => "abstention_logit",
            SelectionMechanism::SelectionHead => "selection_head",
        }
    }

    /// The method's own mechanism, if it has one beyond the classifier.
    pub fn original_for(head: HeadConfig) -> Option<SelectionMechanism> {
        match head {
            HeadConfig::Plain => None,
            HeadConfig::Abstain => Some(SelectionMechanism::AbstentionLogit),
            HeadConfig::Selectivenet => Some(SelectionMechanism::SelectionHead),
        }
    }

    pub fn check_compatible(self, head: HeadConfig) -> Result<()> {
        match (self, head) {
            (SelectionMechanism::AbstentionLogit, h) if h != HeadConfig::Abstain => Err(Error::config(
                "abstention_logit selection needs a network with an abstain logit",
            )),
            (SelectionMechanism::SelectionHead, h) if h != HeadConfig::Selectivenet => Err(Error::config(
                "selection_head selection needs a SelectiveNet network",
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for SelectionMechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelectionMechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        match s.as_str() {
            "sr" => return Ok(SelectionMechanism::SoftmaxResponse),
            "entropy" => return Ok(SelectionMechanism::NegativeEntropy),
            _ => {}
        }
        SelectionMechanism::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown selection mechanism '{s}'")))
    }
}

pub fn score_softmax_response(p: &[f64]) -> f64 {
    p.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

pub fn score_negative_entropy(p: &ProbOutput) -> f64 {
    -predictive_entropy(p).loss
}

/// `1 - p[C]` where the last entry is the abstain class.
pub fn score_abstention_logit(p: &[f64]) -> Result<f64> {
    match p.last() {
        Some(a) if p.len() >= 3 => Ok(1.0 - a),
        _ => Err(Error::config("abstention score needs C+1 probabilities")),
    }
}

pub fn score_selection_head(g: f64) -> f64 {
    g
}

/// Softmax over the first C logits, i.e. `p[..C] / (1 - p[C])`.
pub fn drop_abstain_and_renormalize(p: &ProbOutput) -> Result<ProbOutput> {
    let c = p.len() - 1;
    if p.probs[c] == 1.0 {
        return Err(Error::Degenerate("all probability mass on the abstain logit".into()));
    }
    ProbOutput::from_logits(&p.logits[..c])
}

/// The pieces of a forward pass that selection needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs {
    pub head: HeadConfig,
    pub n_classes: usize,
    /// Prediction head logits (C or C+1 columns).
    pub logits: Matrix,
    /// Sigmoid selection values, SelectiveNet only.
    pub selection: Option<Vec<f64>>,
}

impl ModelOutputs {
    pub fn from_trace(trace: &ForwardTrace, head: HeadConfig, n_classes: usize) -> Self {
        ModelOutputs {
            head,
            n_classes,
            logits: trace.logits[HEAD_PRED].clone(),
            selection: (head == HeadConfig::Selectivenet)
                .then(|| trace.logits[HEAD_SELECT].data.iter().map(|&z| sigmoid(z)).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.logits.rows
    }

    pub fn is_empty(&self) -> bool {
        self.logits.rows == 0
    }

    /// Argmax over the C class logits; the abstain logit never predicts.
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.logits.rows)
            .map(|i| argmax(&self.logits.row(i)[..self.n_classes]))
            .collect()
    }
}

/// Scores for a batch, with the rows that were scored `-inf` because the
/// model put all its mass on abstaining.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBatch {
    pub scores: Vec<f64>,
    pub degenerate: Vec<usize>,
}

pub fn score_batch(mechanism: SelectionMechanism, outputs: &ModelOutputs) -> Result<ScoreBatch> {
    score_batch_with(mechanism, outputs, true, Exec::default())
}

/// `renormalize = false` scores abstain-head models by the max of the raw
/// (C+1)-way softmax over the C classes instead of renormalizing first.
/// It only affects softmax response.
pub fn score_batch_with(
    mechanism: SelectionMechanism,
    outputs: &ModelOutputs,
    renormalize: bool,
    exec: Exec,
) -> Result<ScoreBatch> {
    mechanism.check_compatible(outputs.head)?;
    let c = outputs.n_classes;
    let one = |i: usize| -> Result<f64> {
        if mechanism == SelectionMechanism::SelectionHead {
            let g = outputs
                .selection
                .as_ref()
                .ok_or_else(|| Error::config("outputs carry no selection head"))?;
            return Ok(score_selection_head(g[i]));
        }
        let p = ProbOutput::from_logits(outputs.logits.row(i))?;
        if mechanism == SelectionMechanism::AbstentionLogit {
            return score_abstention_logit(&p.probs);
        }
        let p = if outputs.head == HeadConfig::Abstain {
            if mechanism == SelectionMechanism::SoftmaxResponse && !renormalize {
                return Ok(score_softmax_response(&p.probs[..c]));
            }
            drop_abstain_and_renormalize(&p)?
        } else {
            p
        };
        Ok(match mechanism {
            SelectionMechanism::SoftmaxResponse => score_softmax_response(&p.probs),
            _ => score_negative_entropy(&p),
        })
    };
    let results = exec
        .above(outputs.len(), 512)
        .map_range(outputs.len(), one);
    let mut scores = Vec::with_capacity(results.len());
    let mut degenerate = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => scores.push(s),
            Err(Error::Degenerate(_)) => {
                scores.push(f64::NEG_INFINITY);
                degenerate.push(i);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(ScoreBatch { scores, degenerate })
}

/// Writes `sample_id,score,predicted_class,true_class`.
pub fn write_scores_csv<W: Write>(
    out: W,
    scores: &[f64],
    predicted: &[usize],
    truth: &[usize],
) -> Result<()> {
    if scores.len() != predicted.len() || scores.len() != truth.len() {
        return Err(Error::config("score, prediction and label columns differ in length"));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample_id", "score", "predicted_class", "true_class"])
        .map_err(csv_err)?;
    for i in 0..scores.len() {
        w.write_record([
            i.to_string(),
            scores[i].to_string(),
            predicted[i].to_string(),
            truth[i].to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}
