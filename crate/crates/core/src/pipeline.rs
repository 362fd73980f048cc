//! End-to-end evaluation: score a trained model under each selection
//! mechanism, calibrate, trace risk-coverage curves, and aggregate method
//! grids over seeds.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::calibration::{fit_threshold, CalibratedSelector};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{
    accuracy, mean_sd, risk_coverage_curve_with, score_histogram, validate_grid, CalibrationSource,
    RiskCoveragePoint, ScoreHistogram,
};
use crate::exec::Exec;
use crate::nn::{HeadConfig, Network};
use crate::objectives::ObjectiveKind;
use crate::selection::{csv_err, score_batch_with, ModelOutputs, ScoreBatch, SelectionMechanism};
use crate::training::{evaluate_split, train_method_grid, CellOutcome, DataSource, GridCell, GridSpec, TrainedCell};

/// Which scores the threshold is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationPolicy {
    /// Fit on the validation split, apply the plain threshold to test.
    #[default]
    Validation,
    /// Fit on the test scores themselves with exact-k selection.
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    #[serde(default)]
    pub mechanisms: Option<Vec<SelectionMechanism>>,
    #[serde(default = "crate::evaluation::default_coverage_grid")]
    pub coverages: Vec<f64>,
    #[serde(default)]
    pub calibration: CalibrationPolicy,
    #[serde(default = "d_bins")]
    pub histogram_bins: usize,
    /// Renormalize over the C classes before softmax response on
    /// abstain-head models. Turning it off is an ablation.
    #[serde(default = "d_true")]
    pub renormalize: bool,
}

fn d_bins() -> usize {
    20
}
fn d_true() -> bool {
    true
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mechanisms: None,
            coverages: crate::evaluation::default_coverage_grid(),
            calibration: CalibrationPolicy::Validation,
            histogram_bins: d_bins(),
            renormalize: true,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        validate_grid(&self.coverages)?;
        if self.histogram_bins < 2 {
            return Err(Error::config("histogram_bins must be at least 2"));
        }
        if let Some(m) = &self.mechanisms {
            if m.is_empty() {
                return Err(Error::config("mechanisms list is empty"));
            }
        }
        Ok(())
    }
}

/// The method's own mechanism followed by softmax response, without repeats.
pub fn default_mechanisms(head: HeadConfig) -> Vec<SelectionMechanism> {
    let mut out = Vec::new();
    if let Some(m) = SelectionMechanism::original_for(head) {
        out.push(m);
    }
    if !out.contains(&SelectionMechanism::SoftmaxResponse) {
        out.push(SelectionMechanism::SoftmaxResponse);
    }
    out
}

pub fn resolve_mechanisms(requested: Option<&[SelectionMechanism]>, head: HeadConfig) -> Result<Vec<SelectionMechanism>> {
    let list = match requested {
        Some(r) => r.to_vec(),
        None => default_mechanisms(head),
    };
    for m in &list {
        m.check_compatible(head)?;
    }
    Ok(list)
}

#[derive(Debug, Clone)]
pub struct MechanismEval {
    pub mechanism: SelectionMechanism,
    pub curve: Vec<RiskCoveragePoint>,
    pub histogram: ScoreHistogram,
    pub test_scores: ScoreBatch,
    /// Thresholds fitted on the calibration scores, one per coverage.
    pub selectors: Vec<CalibratedSelector>,
}

#[derive(Debug, Clone)]
pub struct ModelEval {
    pub calibration: CalibrationPolicy,
    pub test_predictions: Vec<usize>,
    pub test_accuracy: f64,
    pub mechanisms: Vec<MechanismEval>,
}

impl ModelEval {
    pub fn get(&self, m: SelectionMechanism) -> Option<&MechanismEval> {
        self.mechanisms.iter().find(|e| e.mechanism == m)
    }
}

fn outputs(net: &Network, data: &Dataset, exec: Exec) -> Result<ModelOutputs> {
    let trace = net.forward_with(&data.features, exec)?;
    Ok(ModelOutputs::from_trace(&trace, net.head_config(), net.n_classes()))
}

/// Scores `test` (and `val`, for validation calibration) under each
/// mechanism and traces one curve per mechanism over `opts.coverages`.
pub fn evaluate_model(net: &Network, val: &Dataset, test: &Dataset, opts: &EvalOptions, exec: Exec) -> Result<ModelEval> {
    opts.validate()?;
    let mechs = resolve_mechanisms(opts.mechanisms.as_deref(), net.head_config())?;
    let test_out = outputs(net, test, exec)?;
    let val_out = match opts.calibration {
        CalibrationPolicy::Validation => Some(outputs(net, val, exec)?),
        CalibrationPolicy::Test => None,
    };
    let pred = test_out.predictions();
    let mut per = Vec::with_capacity(mechs.len());
    for &m in &mechs {
        let test_scores = score_batch_with(m, &test_out, opts.renormalize, exec)?;
        let cal_scores = match &val_out {
            Some(v) => score_batch_with(m, v, opts.renormalize, exec)?.scores,
            None => test_scores.scores.clone(),
        };
        let source = match opts.calibration {
            CalibrationPolicy::Validation => CalibrationSource::Held(&cal_scores),
            CalibrationPolicy::Test => CalibrationSource::SameSet,
        };
        let curve = risk_coverage_curve_with(&test_scores.scores, &pred, &test.labels, &opts.coverages, source, exec)?;
        let selectors = opts
            .coverages
            .iter()
            .map(|&c| fit_threshold(&cal_scores, c).map(|s| s.with_mechanism(m)))
            .collect::<Result<Vec<_>>>()?;
        let histogram = score_histogram(&test_scores.scores, &pred, &test.labels, opts.histogram_bins)?;
        per.push(MechanismEval {
            mechanism: m,
            curve,
            histogram,
            test_scores,
            selectors,
        });
    }
    Ok(ModelEval {
        calibration: opts.calibration,
        test_accuracy: accuracy(&pred, &test.labels)?,
        test_predictions: pred,
        mechanisms: per,
    })
}

/// Methods, seeds and coverages of a comparison grid. SelectiveNet is
/// trained once per coverage and evaluated only at that coverage; every
/// other method is trained once per seed and evaluated at all coverages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPlan {
    pub methods: Vec<ObjectiveKind>,
    pub seeds: Vec<u64>,
    #[serde(default = "crate::evaluation::default_coverage_grid")]
    pub coverages: Vec<f64>,
}

impl GridPlan {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("grid needs at least one method and one seed"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::config("grid seeds must be distinct"));
        }
        validate_grid(&self.coverages)
    }
}

/// Evaluation of one grid cell.
#[derive(Debug, Clone)]
pub struct CellEval {
    pub eval: ModelEval,
    /// Mean full-softmax entropy of the prediction head on the test split.
    pub test_entropy: f64,
}

#[derive(Debug)]
pub struct GridCellResult {
    pub cell: GridCell,
    pub trained: Option<TrainedCell>,
    pub eval: Result<CellEval>,
}

pub fn evaluate_cell(trained: &TrainedCell, plan: &GridPlan, opts: &EvalOptions, exec: Exec) -> Result<CellEval> {
    let mut o = opts.clone();
    if let Some(c) = trained.cell.c_target {
        o.coverages = vec![c];
    } else {
        o.coverages = plan.coverages.clone();
    }
    let eval = evaluate_model(&trained.net, &trained.splits.val, &trained.splits.test, &o, exec)?;
    let (_, test_entropy) = evaluate_split(&trained.net, &trained.splits.test)?;
    Ok(CellEval { eval, test_entropy })
}

/// Trains and evaluates every cell. Failures are kept per cell.
pub fn run_grid(plan: &GridPlan, data: &DataSource, spec: &GridSpec, opts: &EvalOptions, exec: Exec) -> Result<Vec<GridCellResult>> {
    plan.validate()?;
    opts.validate()?;
    for m in &plan.methods {
        resolve_mechanisms(opts.mechanisms.as_deref(), m.head())?;
    }
    let trained = train_method_grid(&plan.methods, &plan.coverages, &plan.seeds, data, spec, exec);
    // cells already run concurrently, so each evaluation stays sequential
    let inner = Exec::Sequential;
    Ok(exec.map_slice(&trained, |o: &CellOutcome| match &o.result {
        Ok(t) => GridCellResult {
            cell: o.cell.clone(),
            eval: evaluate_cell(t, plan, opts, inner),
            trained: Some(t.clone()),
        },
        Err(e) => GridCellResult {
            cell: o.cell.clone(),
            trained: None,
            eval: Err(clone_error(e)),
        },
    }))
}

fn clone_error(e: &Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(m.clone()),
        Error::Config(m) => Error::Config(m.clone()),
        Error::UndefinedRisk(m) => Error::UndefinedRisk(m.clone()),
        Error::Calibration(m) => Error::Calibration(m.clone()),
        Error::Degenerate(m) => Error::Degenerate(m.clone()),
        other => Error::Protocol(other.to_string()),
    }
}

/// One row of the aggregated results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub method: ObjectiveKind,
    pub mechanism: SelectionMechanism,
    pub coverage: f64,
    pub mean_risk: Option<f64>,
    /// Sample standard deviation over seeds.
    pub sd: Option<f64>,
    pub n_seeds: usize,
    pub n_failed: usize,
}

/// Mean and sample standard deviation of selective risk per
/// (method, mechanism, coverage), in plan order.
pub fn aggregate_grid(plan: &GridPlan, opts: &EvalOptions, results: &[GridCellResult]) -> Vec<GridRow> {
    let mut rows = Vec::new();
    for &method in &plan.methods {
        let mechs = resolve_mechanisms(opts.mechanisms.as_deref(), method.head()).unwrap_or_default();
        for &mech in &mechs {
            for &cov in &plan.coverages {
                let mut risks = Vec::new();
                let mut failed = 0;
                for r in results.iter().filter(|r| r.cell.method == method) {
                    if let Some(c) = r.cell.c_target {
                        if c != cov {
                            continue;
                        }
                    }
                    let point = r.eval.as_ref().ok().and_then(|e| {
                        e.eval
                            .get(mech)
                            .and_then(|m| m.curve.iter().find(|p| p.target_coverage == cov))
                    });
                    match point {
                        Some(p) => risks.push(p.selective_risk),
                        None => failed += 1,
                    }
                }
                let (mean, sd) = if risks.is_empty() {
                    (None, None)
                } else {
                    let (m, s) = mean_sd(&risks);
                    (Some(m), Some(s))
                };
                rows.push(GridRow {
                    method,
                    mechanism: mech,
                    coverage: cov,
                    mean_risk: mean,
                    sd,
                    n_seeds: risks.len(),
                    n_failed: failed,
                });
            }
        }
    }
    rows
}

/// Writes `method,mechanism,coverage,mean_risk,sd,n_seeds,n_failed`.
/// Missing statistics are left empty.
pub fn write_grid_csv<W: Write>(out: W, rows: &[GridRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "mechanism", "coverage", "mean_risk", "sd", "n_seeds", "n_failed"])
        .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.method.name().to_string(),
            r.mechanism.name().to_string(),
            r.coverage.to_string(),
            opt(r.mean_risk),
            opt(r.sd),
            r.n_seeds.to_string(),
            r.n_failed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
