//! Finite-difference verification of every objective, end to end through
//! randomly shaped networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{max_relative_error, Architecture, ForwardTrace, Matrix, Network};
use crate::objectives::{
    objective_dispatch, BatchContext, CoveragePenalty, ObjectiveConfig, ObjectiveKind, SatTargetStore,
};
use crate::seed::derive_seed;

/// Floor on the relative-error denominator. Entries smaller than this are
/// effectively compared on absolute error, since a true zero gradient comes
/// back from finite differences as rounding noise around 1e-13.
pub const REL_ERR_GUARD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckOptions {
    #[serde(default = "d_nets")]
    pub n_nets: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_tol")]
    pub tolerance: f64,
    /// Fault injection: perturb the analytic gradient of the named case.
    #[serde(default)]
    pub corrupt: Option<String>,
}

fn d_nets() -> usize {
    20
}
fn d_eps() -> f64 {
    1e-3
}
fn d_tol() -> f64 {
    1e-5
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            n_nets: d_nets(),
            seed: 0,
            eps: d_eps(),
            tolerance: d_tol(),
            corrupt: None,
        }
    }
}

/// One objective configuration under test.
#[derive(Debug, Clone)]
pub struct GradcheckCase {
    pub label: &'static str,
    pub family: &'static str,
    pub kind: ObjectiveKind,
    pub penalty: CoveragePenalty,
}

pub fn default_cases() -> Vec<GradcheckCase> {
    use ObjectiveKind::*;
    let case = |label, family, kind, penalty| GradcheckCase { label, family, kind, penalty };
    vec![
        case("CE", "CE", Ce, CoveragePenalty::Hinge),
        case("CE+EM", "EM", CeEm, CoveragePenalty::Hinge),
        case("DG", "DG", Dg, CoveragePenalty::Hinge),
        case("DG+EM", "EM", DgEm, CoveragePenalty::Hinge),
        case("SAT", "SAT", Sat, CoveragePenalty::Hinge),
        case("SAT+EM", "EM", SatEm, CoveragePenalty::Hinge),
        case("SelectiveNet/hinge", "SelectiveNet", SelectiveNet, CoveragePenalty::Hinge),
        case("SelectiveNet/symmetric", "SelectiveNet", SelectiveNet, CoveragePenalty::Symmetric),
        case("SelectiveNet+EM", "EM", SelectiveNetEm, CoveragePenalty::Symmetric),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub label: String,
    pub family: String,
    pub max_rel_err: f64,
    /// Network index and parameter coordinates of the worst entry.
    pub worst_net: usize,
    pub worst_param: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub cases: Vec<CaseResult>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn families(&self) -> Vec<String> {
        let mut f: Vec<String> = self.cases.iter().map(|c| c.family.clone()).collect();
        f.sort();
        f.dedup();
        f
    }
}

/// A random problem instance: network, batch, labels and objective.
struct Instance {
    net: Network,
    batch: Matrix,
    labels: Vec<usize>,
    ids: Vec<usize>,
    cfg: ObjectiveConfig,
    store: Option<SatTargetStore>,
}

fn random_instance(case: &GradcheckCase, seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = rng.random_range(2..=5);
    let input_dim = rng.random_range(1..=6);
    let depth = rng.random_range(1..=2);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=16)).collect();
    let m = rng.random_range(1..=8);
    let arch = Architecture { input_dim, hidden, n_classes, head: case.kind.head() };
    let mut net = Network::new(arch, rng.random())?;
    // non-zero biases so no unit sits exactly at the rectifier kink
    for l in net.layers_mut() {
        l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
    let data: Vec<f64> = (0..m * input_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let batch = Matrix::from_vec(m, input_dim, data)?;
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..n_classes)).collect();
    let ids: Vec<usize> = (0..m).collect();

    let mut cfg = ObjectiveConfig::new(case.kind);
    cfg.coverage_penalty = case.penalty;
    cfg.beta = rng.random_range(0.05..0.5);
    cfg.o = Some(rng.random_range(1.05..=n_classes as f64));
    cfg.c_target = rng.random_range(0.3..1.0);
    cfg.alpha_mix = rng.random_range(0.2..0.8);
    cfg.lambda = rng.random_range(0.5..32.0);
    cfg.validate(n_classes)?;

    let store = if case.kind.is_sat() {
        let mut st = SatTargetStore::new(&labels, n_classes, 0.9, 0)?;
        for i in 0..m {
            let raw: Vec<f64> = (0..=n_classes).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            st.set_target(i, raw.into_iter().map(|v| v / s).collect())?;
        }
        Some(st)
    } else {
        None
    };
    Ok(Instance { net, batch, labels, ids, cfg, store })
}

fn instance_loss(inst: &Instance, net: &Network) -> Result<(f64, Vec<Matrix>, Vec<bool>)> {
    let trace = net.forward_with(&inst.batch, Exec::Sequential)?;
    let ctx = BatchContext {
        labels: &inst.labels,
        ids: &inst.ids,
        epoch: 0,
        sat_targets: inst.store.as_ref(),
    };
    let obj = objective_dispatch(&inst.cfg, net.head_config(), net.n_classes(), &trace, ctx)?;
    Ok((obj.loss, obj.dlogits, regime(inst, &trace)))
}

/// Which smooth piece of the loss surface a point lies on: the rectifier
/// pattern, plus the side of the coverage hinge when one is active.
fn regime(inst: &Instance, trace: &ForwardTrace) -> Vec<bool> {
    let mut pat: Vec<bool> = trace.pre.iter().flat_map(|m| m.data.iter().map(|&v| v > 0.0)).collect();
    if inst.cfg.coverage_penalty == CoveragePenalty::Hinge {
        if let Some(g) = trace.selection() {
            let mean = g.iter().sum::<f64>() / g.len() as f64;
            pat.push(mean < inst.cfg.c_target);
        }
    }
    pat
}

/// Central difference of parameter `k` at step `h`, or `None` when either
/// probe lands on a different regime than the base point.
fn central(inst: &Instance, probe: &mut Network, flat: &mut [f64], k: usize, h: f64, base_pat: &[bool]) -> Result<Option<f64>> {
    let x = flat[k];
    flat[k] = x + h;
    probe.set_flat_params(flat)?;
    let (up, _, pu) = instance_loss(inst, probe)?;
    flat[k] = x - h;
    probe.set_flat_params(flat)?;
    let (down, _, pd) = instance_loss(inst, probe)?;
    flat[k] = x;
    if !up.is_finite() || !down.is_finite() {
        return Err(Error::numeric(format!("loss is non-finite when perturbing parameter {k}")));
    }
    if pu != base_pat || pd != base_pat {
        return Ok(None);
    }
    Ok(Some((up - down) / (2.0 * h)))
}

/// Richardson-extrapolated central differences. The step shrinks until no
/// probe crosses a kink, so the estimate is taken on the smooth
/// piece that contains the base point.
fn numeric_gradient(inst: &Instance, h0: f64, base_pat: &[bool]) -> Result<Vec<f64>> {
    let base = inst.net.flat_params();
    let mut flat = base.clone();
    let mut probe = inst.net.clone();
    let mut out = Vec::with_capacity(base.len());
    for k in 0..base.len() {
        let mut h = h0;
        let est = loop {
            let coarse = central(inst, &mut probe, &mut flat, k, h, base_pat)?;
            let fine = central(inst, &mut probe, &mut flat, k, h / 2.0, base_pat)?;
            match (coarse, fine) {
                (Some(c), Some(f)) => break (4.0 * f - c) / 3.0,
                _ if h > 1e-9 => h /= 8.0,
                (_, Some(f)) => break f,
                _ => {
                    return Err(Error::numeric(format!(
                        "parameter {k} sits on a kink of the loss"
                    )))
                }
            }
        };
        out.push(est);
    }
    Ok(out)
}

/// Worst relative error for one instance, with its flat parameter index.
fn check_instance(inst: &Instance, eps: f64, corrupt: bool) -> Result<(f64, usize)> {
    let trace = inst.net.forward_with(&inst.batch, Exec::Sequential)?;
    let (_, mut dlogits, pattern) = instance_loss(inst, &inst.net)?;
    if corrupt {
        for d in dlogits.iter_mut() {
            d.data.iter_mut().for_each(|v| *v *= 1.01);
        }
    }
    let analytic = inst.net.backward_with(&trace, &dlogits, Exec::Sequential)?.flatten();
    let numeric = numeric_gradient(inst, eps, &pattern)?;
    Ok(max_relative_error(&analytic, &numeric, REL_ERR_GUARD))
}

fn describe_param(net: &Network, mut k: usize) -> String {
    let n_trunk = net.trunk.len();
    for (li, l) in net.layers().enumerate() {
        let name = if li < n_trunk {
            format!("trunk[{li}]")
        } else {
            format!("head[{}]", li - n_trunk)
        };
        if k < l.weight.len() {
            return format!("{name}.weight[{}][{}]", k / l.in_dim, k % l.in_dim);
        }
        k -= l.weight.len();
        if k < l.bias.len() {
            return format!("{name}.bias[{k}]");
        }
        k -= l.bias.len();
    }
    "out of range".into()
}

pub fn run_gradcheck(opts: &GradcheckOptions, exec: Exec) -> Result<GradcheckReport> {
    run_cases(&default_cases(), opts, exec)
}

pub fn run_cases(cases: &[GradcheckCase], opts: &GradcheckOptions, exec: Exec) -> Result<GradcheckReport> {
    if opts.n_nets == 0 || !(opts.eps > 0.0) {
        return Err(Error::config("gradcheck needs n_nets >= 1 and eps > 0"));
    }
    if let Some(name) = &opts.corrupt {
        if !cases.iter().any(|c| c.label == name) {
            return Err(Error::config(format!("unknown gradcheck case '{name}'")));
        }
    }
    let mut out = Vec::with_capacity(cases.len());
    for case in cases {
        let corrupt = opts.corrupt.as_deref() == Some(case.label);
        let results = exec.map_range(opts.n_nets, |i| -> Result<(f64, usize, String)> {
            let seed = derive_seed(opts.seed, &format!("{}/{i}", case.label));
            let inst = random_instance(case, seed)?;
            let (err, k) = check_instance(&inst, opts.eps, corrupt)?;
            Ok((err, k, describe_param(&inst.net, k)))
        });
        let mut worst = (0.0, 0usize, String::new());
        for (i, r) in results.into_iter().enumerate() {
            let (err, _, coord) = r?;
            if err > worst.0 || worst.2.is_empty() {
                worst = (err, i, coord);
            }
        }
        out.push(CaseResult {
            label: case.label.to_string(),
            family: case.family.to_string(),
            max_rel_err: worst.0,
            worst_net: worst.1,
            worst_param: worst.2,
            passed: worst.0 < opts.tolerance,
        });
    }
    Ok(GradcheckReport {
        cases: out,
        tolerance: opts.tolerance,
    })
}
