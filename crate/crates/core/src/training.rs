//! SGD with momentum, step-decay schedule, and the per-method training protocols.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{generate_mixture, Dataset, MixtureSpec, Splits};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{Architecture, Network, NumericMode, ProbOutput, HEAD_PRED};
use crate::objectives::{
    objective_dispatch, predictive_entropy, BatchContext, ObjectiveConfig, ObjectiveKind, SatTargetStore,
    SatUpdateSchedule,
};
use crate::seed::derive_seed;
use crate::selection::csv_err;

/// Loss magnitude treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr0")]
    pub lr0: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_decay")]
    pub decay_factor: f64,
    #[serde(default = "d_decay_every")]
    pub decay_every: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub numeric_mode: NumericMode,
}

fn d_epochs() -> usize {
    100
}
fn d_batch() -> usize {
    64
}
fn d_lr0() -> f64 {
    0.1
}
fn d_momentum() -> f64 {
    0.9
}
fn d_decay() -> f64 {
    0.5
}
fn d_decay_every() -> usize {
    25
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: d_epochs(),
            batch_size: d_batch(),
            lr0: d_lr0(),
            momentum: d_momentum(),
            decay_factor: d_decay(),
            decay_every: d_decay_every(),
            weight_decay: 0.0,
            seed: 0,
            numeric_mode: NumericMode::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::config("lr0 must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.decay_every == 0 {
            return Err(Error::config("decay_every must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.decay_factor > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("decay_factor must be positive and weight_decay non-negative"));
        }
        Ok(())
    }
}

/// `lr0 * decay_factor ^ floor(epoch / decay_every)`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

/// Classical momentum: `v <- mu v + g`, `theta <- theta - lr v`.
pub fn sgd_momentum_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::config("parameter, gradient and velocity shapes differ"));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric(format!("non-finite gradient at parameter {i}")));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    /// Mean entropy of the prediction head's full softmax on the validation split.
    pub val_entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "lr", "train_loss", "train_accuracy", "val_accuracy", "val_entropy"])
            .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                r.lr.to_string(),
                r.train_loss.to_string(),
                r.train_accuracy.to_string(),
                opt(r.val_accuracy),
                opt(r.val_entropy),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Result of [`train`]: the report plus SAT's final targets, if any.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub sat_targets: Option<SatTargetStore>,
}

/// Accuracy and mean full-softmax entropy of the prediction head.
pub fn evaluate_split(net: &Network, data: &Dataset) -> Result<(f64, f64)> {
    let trace = net.forward(&data.features)?;
    let z = &trace.logits[HEAD_PRED];
    let c = net.n_classes();
    let mut hits = 0usize;
    let mut ent = 0.0;
    for i in 0..z.rows {
        let p = ProbOutput::from_logits(z.row(i))?;
        if crate::nn::argmax(&z.row(i)[..c]) == data.labels[i] {
            hits += 1;
        }
        ent += predictive_entropy(&p).loss;
    }
    let n = z.rows.max(1) as f64;
    Ok((hits as f64 / n, ent / n))
}

/// Trains `net` in place. Deterministic given `(net, train, cfg, objective)`.
pub fn train(
    net: &mut Network,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    objective: &ObjectiveConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    objective.validate(net.n_classes())?;
    if objective.kind.head() != net.head_config() {
        return Err(Error::config(format!(
            "objective {} is incompatible with a {:?} head",
            objective.kind,
            net.head_config()
        )));
    }
    if train_set.dim() != net.arch.input_dim {
        return Err(Error::config("training features do not match network input"));
    }
    if train_set.is_empty() {
        return Err(Error::config("empty training set"));
    }
    net.numeric_mode = cfg.numeric_mode;
    let exec = Exec::Sequential;
    let n = train_set.len();
    let c = net.n_classes();
    let mut store = if objective.kind.is_sat() {
        Some(SatTargetStore::new(
            &train_set.labels,
            c,
            objective.sat_momentum,
            objective.sat_pretrain_epochs,
        )?)
    } else {
        None
    };
    let mut params = net.flat_params();
    let mut velocity = vec![0.0; params.len()];
    let mut report = TrainReport::default();
    let shuffle_root = derive_seed(cfg.seed, "shuffle");

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(shuffle_root, &epoch.to_string()));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        let mut pending: Vec<(usize, Vec<f64>)> = Vec::new();
        for (b, ids) in order.chunks(cfg.batch_size).enumerate() {
            let x = train_set.features.select_rows(ids);
            let y: Vec<usize> = ids.iter().map(|&i| train_set.labels[i]).collect();
            let trace = net.forward_with(&x, exec).map_err(|e| context(e, epoch, b))?;
            let z = &trace.logits[HEAD_PRED];
            for (i, &yi) in y.iter().enumerate() {
                if crate::nn::argmax(&z.row(i)[..c]) == yi {
                    hits += 1;
                }
            }
            if let Some(st) = store.as_mut() {
                if !st.in_pretraining(epoch) {
                    let probs: Vec<Vec<f64>> = (0..z.rows)
                        .map(|i| ProbOutput::from_logits(z.row(i)).map(|p| p.probs))
                        .collect::<Result<_>>()?;
                    match objective.sat_update {
                        SatUpdateSchedule::PerBatch => st.update(epoch, ids, &probs)?,
                        SatUpdateSchedule::PerEpoch => pending.extend(ids.iter().copied().zip(probs)),
                    }
                }
            }
            let ctx = BatchContext {
                labels: &y,
                ids,
                epoch,
                sat_targets: store.as_ref(),
            };
            let obj = objective_dispatch(objective, net.head_config(), c, &trace, ctx)?;
            if !obj.loss.is_finite() || obj.loss > DIVERGENCE_LIMIT {
                return Err(Error::numeric(format!(
                    "training diverged at epoch {epoch}, batch {b}: loss {}",
                    obj.loss
                )));
            }
            loss_sum += obj.loss * ids.len() as f64;
            let grads = net.backward_with(&trace, &obj.dlogits, exec)?;
            let mut g = grads.flatten();
            if cfg.weight_decay > 0.0 {
                for (gi, p) in g.iter_mut().zip(&params) {
                    *gi += cfg.weight_decay * p;
                }
            }
            sgd_momentum_step(&mut params, &g, &mut velocity, lr, cfg.momentum)
                .map_err(|e| context(e, epoch, b))?;
            if cfg.numeric_mode == NumericMode::F32 {
                params.iter_mut().for_each(|p| *p = NumericMode::F32.round(*p));
                velocity.iter_mut().for_each(|v| *v = NumericMode::F32.round(*v));
            }
            net.set_flat_params(&params)?;
        }
        if let Some(st) = store.as_mut() {
            if !pending.is_empty() {
                let (ids, probs): (Vec<usize>, Vec<Vec<f64>>) = pending.into_iter().unzip();
                st.update(epoch, &ids, &probs)?;
            }
        }
        let (val_accuracy, val_entropy) = match val_set {
            Some(v) if !v.is_empty() => {
                let (a, h) = evaluate_split(net, v)?;
                (Some(a), Some(h))
            }
            _ => (None, None),
        };
        report.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n as f64,
            train_accuracy: hits as f64 / n as f64,
            val_accuracy,
            val_entropy,
        });
    }
    Ok(TrainOutcome {
        report,
        sat_targets: store,
    })
}

fn context(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {batch}: {m}")),
        other => other,
    }
}

/// Where each grid seed gets its data.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// Regenerated per seed with `spec.seed = derive_seed(seed, "dataset")`.
    Mixture(MixtureSpec),
    /// Shared across seeds.
    Fixed(Splits),
}

impl DataSource {
    pub fn splits(&self, seed: u64) -> Result<Splits> {
        match self {
            DataSource::Mixture(spec) => {
                let mut s = spec.clone();
                s.seed = derive_seed(seed, "dataset");
                generate_mixture(&s)
            }
            DataSource::Fixed(s) => Ok(s.clone()),
        }
    }
}

/// One training run in a method grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub method: ObjectiveKind,
    pub seed: u64,
    /// Training coverage, SelectiveNet only.
    pub c_target: Option<f64>,
}

impl GridCell {
    pub fn label(&self) -> String {
        match self.c_target {
            Some(c) => format!("{}-c{c}-s{}", self.method.name().replace('+', "_"), self.seed),
            None => format!("{}-s{}", self.method.name().replace('+', "_"), self.seed),
        }
    }
}

/// SelectiveNet gets one cell per coverage; every other method one cell per seed.
pub fn grid_cells(methods: &[ObjectiveKind], coverages: &[f64], seeds: &[u64]) -> Vec<GridCell> {
    let mut cells = Vec::new();
    for &method in methods {
        for &seed in seeds {
            if method.is_selectivenet() {
                for &c in coverages {
                    cells.push(GridCell { method, seed, c_target: Some(c) });
                }
            } else {
                cells.push(GridCell { method, seed, c_target: None });
            }
        }
    }
    cells
}

#[derive(Debug, Clone)]
pub struct TrainedCell {
    pub cell: GridCell,
    pub net: Network,
    pub report: TrainReport,
    pub splits: Splits,
}

#[derive(Debug)]
pub struct CellOutcome {
    pub cell: GridCell,
    pub result: Result<TrainedCell>,
}

/// Shared settings for every grid cell.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    /// Template; `kind` and (for SelectiveNet) `c_target` are overwritten per cell.
    pub objective: ObjectiveConfig,
}

pub fn train_cell(cell: &GridCell, data: &DataSource, spec: &GridSpec) -> Result<TrainedCell> {
    let splits = data.splits(cell.seed)?;
    let arch = Architecture {
        input_dim: splits.train.dim(),
        hidden: spec.hidden.clone(),
        n_classes: splits.train.n_classes,
        head: cell.method.head(),
    };
    let mut net = Network::new(arch, derive_seed(cell.seed, "init"))?;
    let mut obj = spec.objective.clone();
    obj.kind = cell.method;
    if let Some(c) = cell.c_target {
        obj.c_target = c;
    }
    let mut cfg = spec.train.clone();
    cfg.seed = cell.seed;
    let out = train(&mut net, &splits.train, Some(&splits.val), &cfg, &obj)?;
    Ok(TrainedCell {
        cell: cell.clone(),
        net,
        report: out.report,
        splits,
    })
}

/// Trains every cell; failures are recorded per cell and the grid continues.
pub fn train_method_grid(
    methods: &[ObjectiveKind],
    coverages: &[f64],
    seeds: &[u64],
    data: &DataSource,
    spec: &GridSpec,
    exec: Exec,
) -> Vec<CellOutcome> {
    let cells = grid_cells(methods, coverages, seeds);
    exec.map_slice(&cells, |cell| CellOutcome {
        cell: cell.clone(),
        result: train_cell(cell, data, spec),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::HeadConfig;

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_epoch(&cfg, 0), 0.1);
        assert_eq!(lr_at_epoch(&cfg, 24), 0.1);
        assert_eq!(lr_at_epoch(&cfg, 25), 0.05);
        assert_eq!(lr_at_epoch(&cfg, 50), 0.025);
    }

    #[test]
    fn momentum_step_examples() {
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.9).unwrap();
        assert_eq!(v, vec![1.0]);
        assert!((p[0] - 0.9).abs() < 1e-15);

        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.5, 0.5];
        sgd_momentum_step(&mut p, &[0.2, -0.4], &mut v, 0.5, 0.0).unwrap();
        assert_eq!(v, vec![0.2, -0.4]);
        assert_eq!(p, vec![0.9, -1.8]);

        // zero gradients: v_n = mu^n v0, theta drifts by lr * v_n
        let mut p = vec![0.0];
        let mut v = vec![1.0];
        let mut expect_p = 0.0;
        for n in 1..=10 {
            sgd_momentum_step(&mut p, &[0.0], &mut v, 0.1, 0.9).unwrap();
            expect_p -= 0.1 * 0.9f64.powi(n);
            assert!((v[0] - 0.9f64.powi(n)).abs() < 1e-15);
            assert!((p[0] - expect_p).abs() < 1e-14);
        }
        assert!(sgd_momentum_step(&mut p, &[f64::NAN], &mut v, 0.1, 0.9).is_err());
    }

    fn toy() -> Splits {
        let mut spec = MixtureSpec::separable(10.0, 1);
        spec.n_train = 200;
        spec.n_val = 50;
        spec.n_test = 50;
        generate_mixture(&spec).unwrap()
    }

    fn net_for(head: HeadConfig, seed: u64) -> Network {
        Network::new(Architecture { input_dim: 2, hidden: vec![8], n_classes: 2, head }, seed).unwrap()
    }

    #[test]
    fn zero_epochs_is_noop() {
        let data = toy();
        let mut net = net_for(HeadConfig::Plain, 1);
        let before = net.clone();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let out = train(&mut net, &data.train, Some(&data.val), &cfg, &ObjectiveConfig::new(ObjectiveKind::Ce)).unwrap();
        assert!(out.report.epochs.is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn lr_recorded_per_schedule_and_reproducible() {
        let data = toy();
        let cfg = TrainConfig { epochs: 6, decay_every: 2, batch_size: 32, ..Default::default() };
        let obj = ObjectiveConfig::new(ObjectiveKind::CeEm);
        let mut a = net_for(HeadConfig::Plain, 3);
        let mut b = net_for(HeadConfig::Plain, 3);
        let ra = train(&mut a, &data.train, Some(&data.val), &cfg, &obj).unwrap().report;
        let rb = train(&mut b, &data.train, Some(&data.val), &cfg, &obj).unwrap().report;
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        for r in &ra.epochs {
            assert_eq!(r.lr, lr_at_epoch(&cfg, r.epoch));
        }
    }

    #[test]
    fn sat_targets_frozen_during_pretraining() {
        let data = toy();
        let cfg = TrainConfig { epochs: 3, batch_size: 50, ..Default::default() };
        let mut obj = ObjectiveConfig::new(ObjectiveKind::Sat);
        obj.sat_pretrain_epochs = 3;
        let mut net = net_for(HeadConfig::Abstain, 2);
        let out = train(&mut net, &data.train, None, &cfg, &obj).unwrap();
        let st = out.sat_targets.unwrap();
        for (i, &y) in data.train.labels.iter().enumerate() {
            let mut onehot = vec![0.0; 3];
            onehot[y] = 1.0;
            assert_eq!(st.target(i), onehot.as_slice());
        }

        obj.sat_pretrain_epochs = 1;
        for sched in [SatUpdateSchedule::PerBatch, SatUpdateSchedule::PerEpoch] {
            obj.sat_update = sched;
            let mut net = net_for(HeadConfig::Abstain, 2);
            let st = train(&mut net, &data.train, None, &cfg, &obj).unwrap().sat_targets.unwrap();
            assert!(st.target(0).iter().filter(|&&v| v > 0.0).count() > 1);
        }
    }

    #[test]
    fn incompatible_objective_rejected() {
        let data = toy();
        let mut net = net_for(HeadConfig::Plain, 0);
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        assert!(matches!(
            train(&mut net, &data.train, None, &cfg, &ObjectiveConfig::new(ObjectiveKind::Dg)),
            Err(Error::Config(_))
        ));
        let bad = TrainConfig { momentum: 1.0, ..Default::default() };
        assert!(train(&mut net, &data.train, None, &bad, &ObjectiveConfig::new(ObjectiveKind::Ce)).is_err());
    }

    #[test]
    fn divergence_is_numeric_fault() {
        let data = toy();
        let mut net = net_for(HeadConfig::Plain, 0);
        let cfg = TrainConfig { epochs: 5, lr0: 1e12, momentum: 0.0, ..Default::default() };
        let err = train(&mut net, &data.train, None, &cfg, &ObjectiveConfig::new(ObjectiveKind::Ce)).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("epoch")), "{err}");
    }

    #[test]
    fn f32_mode_keeps_params_single_precision() {
        let data = toy();
        let mut net = net_for(HeadConfig::Plain, 0);
        let cfg = TrainConfig { epochs: 1, numeric_mode: NumericMode::F32, ..Default::default() };
        train(&mut net, &data.train, None, &cfg, &ObjectiveConfig::new(ObjectiveKind::Ce)).unwrap();
        assert!(net.flat_params().iter().all(|&p| p == p as f32 as f64));
    }

    #[test]
    fn grid_cell_counts() {
        let cov = [0.9, 0.7, 0.5];
        assert_eq!(grid_cells(&[ObjectiveKind::Sat], &cov, &[1]).len(), 1);
        assert_eq!(grid_cells(&[ObjectiveKind::SelectiveNet], &cov, &[1]).len(), 3);
        assert_eq!(grid_cells(&[ObjectiveKind::Ce, ObjectiveKind::SelectiveNetEm], &cov, &[1, 2]).len(), 8);
    }

    #[test]
    fn report_csv() {
        let r = TrainReport {
            epochs: vec![EpochRecord { epoch: 0, lr: 0.1, train_loss: 1.5, train_accuracy: 0.5, val_accuracy: None, val_entropy: Some(0.25) }],
            checkpoint: None,
        };
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,lr,train_loss,train_accuracy,val_accuracy,val_entropy\n0,0.1,1.5,0.5,,0.25\n"
        );
    }
}
