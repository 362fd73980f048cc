use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_selcls");

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env_remove("SELCLS_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL_DATA: &str = r#"{"mixture": {"n_classes": 3, "dim": 2, "means": [[0,2],[2,0],[-2,-1]],
    "variances": [1,1,1], "priors": [0.3,0.3,0.4], "label_noise": 0.05,
    "n_train": 300, "n_val": 120, "n_test": 200}}"#;

fn write_config(dir: &Path, name: &str, objective: &str, extra: &str) -> PathBuf {
    let text = format!(
        r#"{{"seed": 5, "dataset": {SMALL_DATA}, "model": {{"hidden": [8]}},
            "objective": {objective}, "training": {{"epochs": 3, "batch_size": 32}},
            "output_dir": "out_{name}"{extra}}}"#
    );
    let p = dir.join(format!("{name}.json"));
    fs::write(&p, text).unwrap();
    p
}

fn read_csv_body(p: &Path) -> (String, Vec<String>) {
    let text = fs::read_to_string(p).unwrap();
    let mut lines = text.lines();
    let hash = lines.next().unwrap().to_string();
    (hash, lines.map(str::to_string).collect())
}

#[test]
fn train_then_eval_sat_gives_two_curves() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "sat", r#"{"kind": "SAT", "sat_pretrain_epochs": 1}"#, "");
    let o = run(&["train", "-c", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = tmp.path().join("out_sat");
    assert!(out.join("checkpoint.json").exists());
    let (hash_line, report) = read_csv_body(&out.join("train_report.csv"));
    assert!(hash_line.starts_with("# config_hash="));
    assert_eq!(report[0], "epoch,lr,train_loss,train_accuracy,val_accuracy,val_entropy");
    assert_eq!(report.len(), 4);

    let o = run(&["eval", "-c", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let eval = out.join("eval");
    for m in ["abstention_logit", "softmax_response"] {
        let (h, body) = read_csv_body(&eval.join(format!("curve_{m}.csv")));
        assert_eq!(h, hash_line);
        assert_eq!(body[0], "target_coverage,achieved_coverage,selective_risk,n_selected,seed");
        assert_eq!(body.len(), 11);
        let (_, hist) = read_csv_body(&eval.join(format!("histogram_{m}.csv")));
        assert_eq!(hist[0], "bin_lo,bin_hi,count_correct,count_incorrect");
        let counted: usize = hist[1..]
            .iter()
            .map(|l| l.split(',').skip(2).map(|v| v.parse::<usize>().unwrap()).sum::<usize>())
            .sum();
        assert_eq!(counted, 200);
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval.join("manifest_eval.json")).unwrap()).unwrap();
    assert_eq!(manifest["calibration"], "validation");
    assert_eq!(format!("# config_hash={}", manifest["config_hash"].as_str().unwrap()), hash_line);
}

#[test]
fn full_coverage_curve_is_error_rate() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "ce", r#"{"kind": "CE"}"#, r#", "evaluation": {"coverages": [1.0]}"#);
    assert_eq!(code(&run(&["train", "-c", cfg.to_str().unwrap()], tmp.path())), 0);
    let o = run(&["eval", "-c", cfg.to_str().unwrap(), "--calibrate-on", "test"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let eval = tmp.path().join("out_ce/eval");
    let (_, curve) = read_csv_body(&eval.join("curve_softmax_response.csv"));
    assert_eq!(curve.len(), 2);
    let risk: f64 = curve[1].split(',').nth(2).unwrap().parse().unwrap();
    let (_, scores) = read_csv_body(&eval.join("scores_softmax_response.csv"));
    let wrong = scores[1..]
        .iter()
        .filter(|l| {
            let f: Vec<&str> = l.split(',').collect();
            f[2] != f[3]
        })
        .count();
    assert_eq!(risk, wrong as f64 / 200.0);
}

#[test]
fn config_errors_exit_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "dg", r#"{"kind": "DG", "o": 0.5}"#, "");
    let o = run(&["train", "-c", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("1 < o <= C"), "{}", stderr(&o));

    let cfg = write_config(tmp.path(), "typo", r#"{"kind": "CE"}"#, r#", "trainig": {}"#);
    let o = run(&["train", "-c", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("trainig"), "{}", stderr(&o));

    let o = run(&["train", "-c", "does-not-exist.json"], tmp.path());
    assert_eq!(code(&o), 2);
    let o = run(&["frobnicate"], tmp.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn incompatible_mechanism_and_hash_mismatch() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "van", r#"{"kind": "CE"}"#, "");
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&run(&["train", "-c", c], tmp.path())), 0);
    let o = run(&["eval", "-c", c, "--mechanisms", "abstention_logit"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("abstention"), "{}", stderr(&o));

    // a different seed changes the hash; eval refuses unless forced
    let text = fs::read_to_string(&cfg).unwrap().replace(r#""seed": 5"#, r#""seed": 6"#);
    let other = tmp.path().join("other.json");
    fs::write(&other, text).unwrap();
    let ck = tmp.path().join("out_van/checkpoint.json");
    let args = ["eval", "-c", other.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap()];
    let o = run(&args, tmp.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--force"));
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&run(&forced, tmp.path())), 0);
}

#[test]
fn divergence_exits_three() {
    let tmp = TempDir::new().unwrap();
    let text = format!(
        r#"{{"dataset": {SMALL_DATA}, "model": {{"hidden": [8]}}, "objective": {{"kind": "CE"}},
            "training": {{"epochs": 3, "lr0": 1e12}}, "output_dir": "o"}}"#
    );
    let cfg = tmp.path().join("div.json");
    fs::write(&cfg, text).unwrap();
    let o = run(&["train", "-c", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn gradcheck_reports_families_and_faults() {
    let tmp = TempDir::new().unwrap();
    let o = run(&["gradcheck"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    for fam in ["CE", "EM", "DG", "SAT", "SelectiveNet"] {
        assert!(out.contains(fam));
    }
    assert!(out.contains("families: CE, DG, EM, SAT, SelectiveNet"));

    let o = run(&["gradcheck", "--nets", "2", "--corrupt", "SelectiveNet/symmetric"], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("SelectiveNet/symmetric"));
    assert!(stderr(&o).contains("net "));
}

#[test]
fn grid_single_cell_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let grid = r#", "grid": {"methods": ["CE"], "seeds": [1], "coverages": [0.5]}"#;
    let cfg = write_config(tmp.path(), "g", r#"{"kind": "CE"}"#, grid);
    let c = cfg.to_str().unwrap();
    let o = run(&["grid", "-c", c, "-o", "a"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, rows) = read_csv_body(&tmp.path().join("a/grid/grid_results.csv"));
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("CE,softmax_response,0.5,"));

    let o = run(&["grid", "-c", c, "-o", "b", "--sequential"], tmp.path());
    assert_eq!(code(&o), 0);
    let a = fs::read(tmp.path().join("a/grid/grid_results.csv")).unwrap();
    let b = fs::read(tmp.path().join("b/grid/grid_results.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn grid_marks_failed_cells() {
    let tmp = TempDir::new().unwrap();
    let text = format!(
        r#"{{"dataset": {SMALL_DATA}, "model": {{"hidden": [8]}}, "objective": {{"kind": "CE"}},
            "training": {{"epochs": 2, "lr0": 1e12}}, "output_dir": "o",
            "grid": {{"methods": ["CE"], "seeds": [1, 2], "coverages": [0.5]}}}}"#
    );
    let cfg = tmp.path().join("g.json");
    fs::write(&cfg, text).unwrap();
    let o = run(&["grid", "-c", cfg.to_str().unwrap()], tmp.path());
    assert_ne!(code(&o), 0);
    assert!(tmp.path().join("o/grid/cells/CE-s1/FAILED").exists());
    let (_, rows) = read_csv_body(&tmp.path().join("o/grid/grid_results.csv"));
    assert!(rows[1].ends_with(",0,2"), "{}", rows[1]);
}

#[test]
fn make_data_respects_output_root_env() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "data", r#"{"kind": "CE"}"#, "");
    let o = Command::new(BIN)
        .args(["make-data", "-c", cfg.to_str().unwrap()])
        .current_dir(tmp.path())
        .env("SELCLS_OUTPUT_ROOT", tmp.path().join("root"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dir = tmp.path().join("root/out_data");
    let train = selcls::datasets::load_csv_dataset(&dir.join("train.csv"), Some(3)).unwrap();
    assert_eq!(train.len(), 300);
    assert!(dir.join("manifest_data.json").exists());
    assert!(dir.join("mixture_spec.json").exists());
}
