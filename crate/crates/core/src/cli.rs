//! Command-line driver: run configuration, subcommands and artifact layout.
//!
//! Every artifact carries the hash of the configuration sections that
//! determine the trained model (seed, dataset, model, objective, training).
//! CSV files carry it on a leading `# config_hash=...` comment line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datasets::{
    load_csv_dataset, save_csv_dataset, split_dataset, MixtureSpec, Splits, Standardization,
};
use crate::error::{Error, Result};
use crate::evaluation::{write_curve_csv, write_histogram_csv};
use crate::exec::Exec;
use crate::gradcheck::{run_gradcheck, GradcheckOptions, GradcheckReport};
use crate::nn::HeadConfig;
use crate::objectives::ObjectiveConfig;
use crate::pipeline::{
    aggregate_grid, evaluate_model, run_grid, write_grid_csv, CalibrationPolicy, EvalOptions, GridPlan,
};
use crate::seed::{config_hash, derive_seed};
use crate::selection::{write_scores_csv, SelectionMechanism};
use crate::training::{train_cell, DataSource, GridCell, GridSpec, TrainConfig};

pub const OUTPUT_ROOT_ENV: &str = "SELCLS_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Blobs8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    #[serde(default)]
    pub n_classes: Option<usize>,
    /// Train, validation and test fractions of a stratified split.
    #[serde(default = "d_fractions")]
    pub fractions: [f64; 3],
    /// Standardize features with statistics of the training part.
    #[serde(default)]
    pub standardize: bool,
}

fn d_fractions() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Preset(Preset),
    Mixture(MixtureSpec),
    Csv(CsvSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "d_hidden")]
    pub hidden: Vec<usize>,
    /// Optional; must agree with the objective when given.
    #[serde(default)]
    pub head: Option<HeadConfig>,
}

fn d_hidden() -> Vec<usize> {
    vec![64, 64]
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: d_hidden(), head: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed. Dataset, initialization and shuffling seeds derive from it.
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub evaluation: EvalOptions,
    #[serde(default)]
    pub grid: Option<GridPlan>,
    #[serde(default)]
    pub gradcheck: Option<GradcheckOptions>,
    #[serde(default = "d_output")]
    pub output_dir: PathBuf,
}

fn d_output() -> PathBuf {
    PathBuf::from("runs/default")
}

/// The sections that determine a trained model.
#[derive(Serialize)]
struct ModelSections<'a> {
    seed: u64,
    dataset: &'a DatasetConfig,
    model: &'a ModelConfig,
    objective: &'a ObjectiveConfig,
    training: &'a TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    pub fn config_hash(&self) -> String {
        config_hash(&ModelSections {
            seed: self.seed,
            dataset: &self.dataset,
            model: &self.model,
            objective: &self.objective,
            training: &self.training,
        })
    }

    pub fn n_classes(&self) -> Result<Option<usize>> {
        Ok(match &self.dataset {
            DatasetConfig::Preset(Preset::Blobs8) => Some(8),
            DatasetConfig::Mixture(m) => Some(m.n_classes),
            DatasetConfig::Csv(c) => c.n_classes,
        })
    }

    /// Everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        if let DatasetConfig::Mixture(m) = &self.dataset {
            m.validate()?;
            if m.seed != 0 {
                return Err(Error::config(
                    "dataset.mixture.seed is derived from the root seed; set `seed` at the top level instead",
                ));
            }
        }
        if let DatasetConfig::Csv(c) = &self.dataset {
            if c.fractions.iter().any(|f| !(*f > 0.0)) || c.fractions.iter().sum::<f64>() > 1.0 + 1e-12 {
                return Err(Error::config("dataset.csv.fractions must be positive and sum to at most 1"));
            }
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::config("model.hidden widths must be positive"));
        }
        let head = self.objective.kind.head();
        if let Some(h) = self.model.head {
            if h != head {
                return Err(Error::config(format!(
                    "model.head {h:?} does not match objective {} (needs {head:?})",
                    self.objective.kind
                )));
            }
        }
        if let Some(c) = self.n_classes()? {
            self.objective.validate(c)?;
        }
        if self.training.seed != 0 {
            return Err(Error::config("training.seed is derived from the root seed; set `seed` at the top level instead"));
        }
        self.training.validate()?;
        self.evaluation.validate()?;
        if let Some(m) = &self.evaluation.mechanisms {
            for mech in m {
                mech.check_compatible(head)?;
            }
        }
        if let Some(g) = &self.grid {
            g.validate()?;
            if let Some(c) = self.n_classes()? {
                for &kind in &g.methods {
                    let mut o = self.objective.clone();
                    o.kind = kind;
                    o.validate(c)?;
                }
            }
        }
        Ok(())
    }
}

/// Resolved data for one root seed, plus the feature transform if any.
pub struct PreparedData {
    pub source: DataSource,
    pub standardization: Option<Standardization>,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    match &cfg.dataset {
        DatasetConfig::Preset(Preset::Blobs8) => Ok(PreparedData {
            source: DataSource::Mixture(MixtureSpec::blobs8(0)),
            standardization: None,
        }),
        DatasetConfig::Mixture(m) => Ok(PreparedData {
            source: DataSource::Mixture(m.clone()),
            standardization: None,
        }),
        DatasetConfig::Csv(c) => {
            let data = load_csv_dataset(&c.path, c.n_classes)?;
            cfg.objective.validate(data.n_classes)?;
            let mut parts = split_dataset(&data, &c.fractions, derive_seed(cfg.seed, "split"))?;
            let mut it = parts.drain(..);
            let (mut train, mut val, mut test) = (
                it.next().expect("three parts").with_split("train"),
                it.next().expect("three parts").with_split("val"),
                it.next().expect("three parts").with_split("test"),
            );
            let standardization = if c.standardize {
                let st = Standardization::fit(&train);
                st.apply(&mut train)?;
                st.apply(&mut val)?;
                st.apply(&mut test)?;
                Some(st)
            } else {
                None
            };
            Ok(PreparedData {
                source: DataSource::Fixed(Splits { train, val, test }),
                standardization,
            })
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "selcls", version, about = "Selective classification: train, calibrate, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Root prepended to a relative `output_dir`.
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    pub output_root: Option<PathBuf>,
    /// Run sequentially instead of on the thread pool.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write checkpoint, report and manifest.
    Train(Common),
    /// Score, calibrate and evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path; defaults to `<output>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate even if the checkpoint's config hash differs.
        #[arg(long)]
        force: bool,
        /// Override the calibration split.
        #[arg(long, value_enum)]
        calibrate_on: Option<CalibrateOn>,
        /// Override the mechanisms, comma separated.
        #[arg(long, value_delimiter = ',')]
        mechanisms: Option<Vec<SelectionMechanism>>,
    },
    /// Finite-difference check of every objective's gradient.
    Gradcheck {
        /// Optional config whose `gradcheck` section supplies defaults.
        #[arg(long, short)]
        config: Option<PathBuf>,
        /// Random networks per case (default 20).
        #[arg(long)]
        nets: Option<usize>,
        /// Seed for the random networks and batches.
        #[arg(long)]
        seed: Option<u64>,
        /// Fault injection: perturb the analytic gradient of one case.
        #[arg(long)]
        corrupt: Option<String>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
        /// Run sequentially instead of on the thread pool.
        #[arg(long)]
        sequential: bool,
    },
    /// Train and evaluate a method x seed grid and aggregate over seeds.
    Grid(Common),
    /// Write the configured synthetic splits as CSV.
    MakeData(Common),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CalibrateOn {
    Validation,
    Test,
}

impl Common {
    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::default()
        }
    }

    fn out_dir(&self, cfg: &RunConfig) -> PathBuf {
        if let Some(o) = &self.output {
            return o.clone();
        }
        match &self.output_root {
            Some(root) if cfg.output_dir.is_relative() => root.join(&cfg.output_dir),
            _ => cfg.output_dir.clone(),
        }
    }

    fn load(&self) -> Result<(RunConfig, PathBuf)> {
        let cfg = RunConfig::load(&self.config)?;
        cfg.validate()?;
        let out = self.out_dir(&cfg);
        Ok((cfg, out))
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: String,
    version: &'a str,
    config: &'a RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    calibration: Option<CalibrationPolicy>,
    files: Vec<String>,
    notes: Vec<String>,
}

impl<'a> Manifest<'a> {
    fn new(command: &'a str, cfg: &'a RunConfig) -> Self {
        Manifest {
            command,
            config_hash: cfg.config_hash(),
            version: env!("CARGO_PKG_VERSION"),
            config: cfg,
            calibration: None,
            files: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn write(&self, dir: &Path, name: &str) -> Result<()> {
        fs::write(dir.join(name), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Writes `body` to `path` after a `# config_hash=` line.
fn write_hashed_csv(path: &Path, hash: &str, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = format!("# config_hash={hash}\n").into_bytes();
    body(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::config(format!("cannot create {}: {e}", dir.display())))
}

pub fn cmd_train(common: &Common) -> Result<i32> {
    let (cfg, out) = common.load()?;
    let data = prepare_data(&cfg)?;
    create_dir(&out)?;
    let hash = cfg.config_hash();
    let spec = GridSpec {
        hidden: cfg.model.hidden.clone(),
        train: cfg.training.clone(),
        objective: cfg.objective.clone(),
    };
    let cell = GridCell { method: cfg.objective.kind, seed: cfg.seed, c_target: None };
    let trained = train_cell(&cell, &data.source, &spec)?;
    let ck = Checkpoint::from_network(&trained.net, &cfg.objective, hash.clone(), data.standardization)?;
    ck.save(&out.join("checkpoint.json"))?;
    write_hashed_csv(&out.join("train_report.csv"), &hash, |b| trained.report.write_csv(b))?;
    let mut m = Manifest::new("train", &cfg);
    m.files = vec!["checkpoint.json".into(), "train_report.csv".into()];
    if let Some(last) = trained.report.epochs.last() {
        m.notes.push(format!("final train loss {}", last.train_loss));
        println!(
            "trained {} for {} epochs: train acc {:.4}, val acc {}",
            cfg.objective.kind,
            trained.report.epochs.len(),
            last.train_accuracy,
            last.val_accuracy.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
        );
    }
    m.write(&out, "manifest_train.json")?;
    println!("wrote {}", out.display());
    Ok(0)
}

pub fn cmd_eval(
    common: &Common,
    checkpoint: Option<&Path>,
    force: bool,
    calibrate_on: Option<CalibrateOn>,
    mechanisms: Option<Vec<SelectionMechanism>>,
) -> Result<i32> {
    let (mut cfg, out) = common.load()?;
    if let Some(c) = calibrate_on {
        cfg.evaluation.calibration = match c {
            CalibrateOn::Validation => CalibrationPolicy::Validation,
            CalibrateOn::Test => CalibrationPolicy::Test,
        };
    }
    if let Some(m) = mechanisms {
        cfg.evaluation.mechanisms = Some(m);
    }
    let ck_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.join("checkpoint.json"));
    let ck = Checkpoint::load(&ck_path)?;
    let hash = cfg.config_hash();
    if ck.config_hash != hash && !force {
        return Err(Error::config(format!(
            "checkpoint config hash {} does not match this config ({hash}); pass --force to evaluate anyway",
            ck.config_hash
        )));
    }
    let net = ck.to_network()?;
    crate::pipeline::resolve_mechanisms(cfg.evaluation.mechanisms.as_deref(), net.head_config())?;

    // rebuild the raw splits, then reuse the checkpoint's feature transform
    let mut raw = cfg.clone();
    if let DatasetConfig::Csv(c) = &mut raw.dataset {
        c.standardize = false;
    }
    let mut splits = prepare_data(&raw)?.source.splits(cfg.seed)?;
    if let Some(st) = &ck.standardization {
        st.apply(&mut splits.val)?;
        st.apply(&mut splits.test)?;
    }
    let ev = evaluate_model(&net, &splits.val, &splits.test, &cfg.evaluation, common.exec())?;

    let dir = out.join("eval");
    create_dir(&dir)?;
    let mut m = Manifest::new("eval", &cfg);
    m.calibration = Some(ev.calibration);
    if ck.config_hash != hash {
        m.notes.push(format!("forced: checkpoint hash {} differs", ck.config_hash));
    }
    m.notes.push(format!("test accuracy {}", ev.test_accuracy));
    println!("test accuracy {:.4} (calibrated on {:?})", ev.test_accuracy, ev.calibration);
    for me in &ev.mechanisms {
        let name = me.mechanism.name();
        let curve = format!("curve_{name}.csv");
        let hist = format!("histogram_{name}.csv");
        let scores = format!("scores_{name}.csv");
        let sel = format!("selectors_{name}.json");
        write_hashed_csv(&dir.join(&curve), &hash, |b| write_curve_csv(b, &me.curve, cfg.seed))?;
        write_hashed_csv(&dir.join(&hist), &hash, |b| write_histogram_csv(b, &me.histogram))?;
        write_hashed_csv(&dir.join(&scores), &hash, |b| {
            write_scores_csv(b, &me.test_scores.scores, &ev.test_predictions, &splits.test.labels)
        })?;
        let sel_doc = serde_json::json!({ "config_hash": hash, "selectors": me.selectors });
        fs::write(dir.join(&sel), serde_json::to_string_pretty(&sel_doc)? + "\n")?;
        m.files.extend([curve, hist, scores, sel]);
        if !me.test_scores.degenerate.is_empty() {
            m.notes.push(format!(
                "{name}: {} test samples put all mass on abstaining and were scored -inf",
                me.test_scores.degenerate.len()
            ));
        }
        if me.histogram.degenerate {
            m.notes.push(format!("{name}: constant scores, single-bin histogram"));
        }
        println!("{name}:");
        for p in &me.curve {
            println!(
                "  coverage {:.2} (achieved {:.4}): risk {:.4}",
                p.target_coverage, p.achieved_coverage, p.selective_risk
            );
        }
    }
    m.write(&dir, "manifest_eval.json")?;
    println!("wrote {}", dir.display());
    Ok(0)
}

pub fn print_gradcheck(rep: &GradcheckReport) {
    for c in &rep.cases {
        println!(
            "{:<24} max rel err {:.3e}  {}{}",
            c.label,
            c.max_rel_err,
            if c.passed { "ok" } else { "FAIL" },
            if c.passed {
                String::new()
            } else {
                format!("  at net {} {}", c.worst_net, c.worst_param)
            }
        );
    }
    println!("families: {}", rep.families().join(", "));
}

pub fn cmd_gradcheck(
    config: Option<&Path>,
    nets: Option<usize>,
    seed: Option<u64>,
    corrupt: Option<String>,
    json: bool,
    exec: Exec,
) -> Result<i32> {
    let mut opts = match config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            cfg.gradcheck.unwrap_or_default()
        }
        None => GradcheckOptions::default(),
    };
    if let Some(n) = nets {
        opts.n_nets = n;
    }
    if let Some(s) = seed {
        opts.seed = s;
    }
    if corrupt.is_some() {
        opts.corrupt = corrupt;
    }
    let rep = run_gradcheck(&opts, exec)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&rep)?);
    } else {
        print_gradcheck(&rep);
    }
    if rep.passed() {
        Ok(0)
    } else {
        for c in rep.cases.iter().filter(|c| !c.passed) {
            eprintln!(
                "gradient check failed for {} at net {} {} (rel err {:.3e})",
                c.label, c.worst_net, c.worst_param, c.max_rel_err
            );
        }
        Ok(1)
    }
}

pub fn cmd_grid(common: &Common) -> Result<i32> {
    let (cfg, out) = common.load()?;
    let plan = cfg
        .grid
        .clone()
        .ok_or_else(|| Error::config("config has no `grid` section"))?;
    let data = prepare_data(&cfg)?;
    let spec = GridSpec {
        hidden: cfg.model.hidden.clone(),
        train: cfg.training.clone(),
        objective: cfg.objective.clone(),
    };
    let mut opts = cfg.evaluation.clone();
    opts.coverages = plan.coverages.clone();
    let results = run_grid(&plan, &data.source, &spec, &opts, common.exec())?;
    let hash = cfg.config_hash();

    // all cells are done; write per-cell files, then the merged table
    let dir = out.join("grid");
    create_dir(&dir)?;
    let mut m = Manifest::new("grid", &cfg);
    m.calibration = Some(opts.calibration);
    let mut exit = 0;
    for r in &results {
        let label = r.cell.label();
        let cell_dir = dir.join("cells").join(&label);
        create_dir(&cell_dir)?;
        if let Some(t) = &r.trained {
            write_hashed_csv(&cell_dir.join("train_report.csv"), &hash, |b| t.report.write_csv(b))?;
        }
        match &r.eval {
            Ok(e) => {
                for me in &e.eval.mechanisms {
                    let f = cell_dir.join(format!("curve_{}.csv", me.mechanism.name()));
                    write_hashed_csv(&f, &hash, |b| write_curve_csv(b, &me.curve, r.cell.seed))?;
                }
            }
            Err(err) => {
                let code = err.exit_code();
                exit = if exit == 3 || code == 3 { 3 } else { 1 };
                eprintln!("cell {label} failed: {err}");
                m.notes.push(format!("cell {label} failed: {err}"));
                fs::write(cell_dir.join("FAILED"), format!("{err}\n"))?;
            }
        }
    }
    let rows = aggregate_grid(&plan, &opts, &results);
    write_hashed_csv(&dir.join("grid_results.csv"), &hash, |b| write_grid_csv(b, &rows))?;
    m.files.push("grid_results.csv".into());
    m.notes.push("sd is the sample standard deviation over seeds".into());
    m.write(&dir, "manifest_grid.json")?;
    for r in &rows {
        println!(
            "{:<16} {:<18} c={:<4} risk {} sd {} (n={}{})",
            r.method.name(),
            r.mechanism.name(),
            r.coverage,
            r.mean_risk.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            r.sd.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            r.n_seeds,
            if r.n_failed > 0 { format!(", {} failed", r.n_failed) } else { String::new() }
        );
    }
    println!("wrote {}", dir.join("grid_results.csv").display());
    Ok(exit)
}

pub fn cmd_make_data(common: &Common) -> Result<i32> {
    let (cfg, out) = common.load()?;
    let spec = match &cfg.dataset {
        DatasetConfig::Preset(Preset::Blobs8) => MixtureSpec::blobs8(0),
        DatasetConfig::Mixture(m) => m.clone(),
        DatasetConfig::Csv(_) => return Err(Error::config("make-data needs a synthetic dataset section")),
    };
    let mut effective = spec.clone();
    effective.seed = derive_seed(cfg.seed, "dataset");
    let splits = DataSource::Mixture(spec).splits(cfg.seed)?;
    create_dir(&out)?;
    for d in [&splits.train, &splits.val, &splits.test] {
        save_csv_dataset(d, &out.join(format!("{}.csv", d.split)))?;
        println!("{}: {} rows, fingerprint {}", d.split, d.len(), d.fingerprint);
    }
    fs::write(out.join("mixture_spec.json"), serde_json::to_string_pretty(&effective)? + "\n")?;
    let mut m = Manifest::new("make-data", &cfg);
    m.files = vec!["train.csv".into(), "val.csv".into(), "test.csv".into(), "mixture_spec.json".into()];
    m.write(&out, "manifest_data.json")?;
    Ok(0)
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train(c) => cmd_train(&c),
        Command::Eval { common, checkpoint, force, calibrate_on, mechanisms } => {
            cmd_eval(&common, checkpoint.as_deref(), force, calibrate_on, mechanisms)
        }
        Command::Gradcheck { config, nets, seed, corrupt, json, sequential } => {
            let exec = if sequential { Exec::Sequential } else { Exec::default() };
            cmd_gradcheck(config.as_deref(), nets, seed, corrupt, json, exec)
        }
        Command::Grid(c) => cmd_grid(&c),
        Command::MakeData(c) => cmd_make_data(&c),
    }
}

/// Parses arguments, runs, and maps errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let _ = std::io::stderr().flush();
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{"dataset": {"preset": "blobs8"}, "objective": {"kind": "CE"}}"#
    }

    #[test]
    fn minimal_config_parses_and_validates() {
        let cfg = RunConfig::from_json(minimal()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.hidden, vec![64, 64]);
        assert_eq!(cfg.config_hash().len(), 64);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_json(r#"{"dataset": {"preset": "blobs8"}, "objective": {"kind": "CE"}, "bogus": 1}"#)
            .unwrap_err();
        assert!(err.to_string().contains("bogus"));
        let err = RunConfig::from_json(r#"{"dataset": {"preset": "blobs8"}, "objective": {"kind": "CE", "betta": 1}}"#)
            .unwrap_err();
        assert!(err.to_string().contains("betta"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn validation_catches_conflicts() {
        let bad_o = RunConfig::from_json(r#"{"dataset": {"preset": "blobs8"}, "objective": {"kind": "DG", "o": 0.5}}"#).unwrap();
        let e = bad_o.validate().unwrap_err();
        assert!(e.to_string().contains("1 < o <= C"), "{e}");

        let bad_head = RunConfig::from_json(
            r#"{"dataset": {"preset": "blobs8"}, "model": {"head": "plain"}, "objective": {"kind": "SAT"}}"#,
        )
        .unwrap();
        assert!(bad_head.validate().is_err());

        let bad_mech = RunConfig::from_json(
            r#"{"dataset": {"preset": "blobs8"}, "objective": {"kind": "CE"}, "evaluation": {"mechanisms": ["abstention_logit"]}}"#,
        )
        .unwrap();
        assert_eq!(bad_mech.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn hash_ignores_evaluation_and_output() {
        let a = RunConfig::from_json(minimal()).unwrap();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        b.evaluation.coverages = vec![1.0];
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed = 9;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn output_dir_resolution() {
        let cfg = RunConfig::from_json(minimal()).unwrap();
        let c = Common { config: "x".into(), output: None, output_root: Some("/tmp/root".into()), sequential: false };
        assert_eq!(c.out_dir(&cfg), PathBuf::from("/tmp/root/runs/default"));
        let c = Common { output: Some("/o".into()), ..c };
        assert_eq!(c.out_dir(&cfg), PathBuf::from("/o"));
    }
}
