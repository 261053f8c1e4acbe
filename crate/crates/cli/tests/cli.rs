use std::path::{Path, PathBuf};
use std::process::Command;

use fairhgr::datasets::{load_compas, split_discrete, CompasOptions, SplitSpec};
use fairhgr::discrete_fair::{fit_discrete, predict_map, FitConfig};
use fairhgr::metrics::{discrimination_j, spearman};
use fairhgr::Criterion;
use fairhgr_cli::format::fmt_g;
use fairhgr_cli::ExperimentConfig;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

struct Scratch(PathBuf);

impl Scratch {
    fn new(name: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("fairhgr-cli-{name}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        Scratch(dir)
    }

    fn path(&self, file: &str) -> PathBuf {
        self.0.join(file)
    }

    /// Writes a config whose `out` points inside the scratch directory.
    fn config(&self, body: &str) -> PathBuf {
        let path = self.path("run.toml");
        let text = format!(
            "out = {:?}\ndata_dir = {:?}\n{body}",
            self.path("out.csv").display().to_string(),
            data_dir().display().to_string()
        );
        std::fs::write(&path, text).unwrap();
        path
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn run(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_fairhgr")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn run_config(config: &Path, extra: &[&str]) -> (i32, String) {
    let mut args = vec!["--config", config.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

fn read_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn col(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap()
}

#[test]
fn unknown_key_is_a_config_error() {
    let s = Scratch::new("unknown");
    let cfg = s.config("dataset = \"synth-bias\"\npipeline = \"discrete\"\ncriterion = \"independence\"\nlambdas = [0]\nseeds = [0]\nlamdba = 3\n");
    let (code, err) = run_config(&cfg, &[]);
    assert_eq!(code, 1, "{err}");
    assert!(err.contains("lamdba"), "{err}");
    assert!(!s.path("out.csv").exists());
}

#[test]
fn discrete_separation_rejects_lambda_one() {
    let s = Scratch::new("sep-one");
    let cfg = s.config("dataset = \"synth-bias\"\npipeline = \"discrete\"\ncriterion = \"separation\"\nlambdas = [0, 1]\nseeds = [0]\n");
    let (code, err) = run_config(&cfg, &[]);
    assert_eq!(code, 1, "{err}");
    assert!(err.contains("[0, 1)"), "{err}");
}

#[test]
fn pipeline_mismatch_and_descending_lambdas_are_all_reported() {
    let s = Scratch::new("mismatch");
    let cfg = s.config("dataset = \"compas\"\npipeline = \"continuous\"\ncriterion = \"independence\"\nlambdas = [2, 1]\nseeds = [0]\n");
    let (code, err) = run_config(&cfg, &[]);
    assert_eq!(code, 1);
    assert!(err.contains("pipeline"), "{err}");
    assert!(err.contains("ascending"), "{err}");
}

#[test]
fn missing_data_is_an_ingestion_error() {
    let s = Scratch::new("missing");
    let cfg = s.config("dataset = \"compas\"\npipeline = \"discrete\"\ncriterion = \"independence\"\nlambdas = [0]\nseeds = [0]\n");
    let (code, err) = run_config(&cfg, &["--out", s.path("x.csv").to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let text = std::fs::read_to_string(&cfg).unwrap().replace(&data_dir().display().to_string(), "/nonexistent");
    std::fs::write(&cfg, text).unwrap();
    let (code, err) = run_config(&cfg, &[]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn failed_points_exit_partial_with_error_rows() {
    let s = Scratch::new("partial");
    let cfg = s.config("dataset = \"synth-bias\"\npipeline = \"discrete\"\ncriterion = \"independence\"\nlambdas = [0, 1]\nseeds = [0]\nk = 50\n");
    let (code, err) = run_config(&cfg, &[]);
    assert_eq!(code, 3, "{err}");
    let (header, rows) = read_rows(&s.path("out.csv"));
    assert_eq!(rows.len(), 2);
    let st = col(&header, "status");
    let auc = col(&header, "auc");
    for r in &rows {
        assert!(r[st].starts_with("error: "), "{r:?}");
        assert_eq!(r[auc], "");
    }
}

#[test]
fn grid_of_eight_lambdas_and_three_seeds_gives_24_sorted_rows() {
    let s = Scratch::new("grid");
    let cfg = s.config("dataset = \"synth-bias\"\npipeline = \"discrete\"\ncriterion = \"separation\"\nlambdas = [0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]\nseeds = [0, 1, 2]\n");
    let (code, err) = run_config(&cfg, &[]);
    assert_eq!(code, 0, "{err}");
    let (header, rows) = read_rows(&s.path("out.csv"));
    assert_eq!(
        header,
        ["lambda", "seed", "criterion", "k", "auc", "accuracy", "balanced_accuracy", "j", "deo", "hgr_d", "status"]
    );
    assert_eq!(rows.len(), 24);
    let keys: Vec<(f64, u64)> = rows.iter().map(|r| (r[0].parse().unwrap(), r[1].parse().unwrap())).collect();
    let mut sorted = keys.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    assert_eq!(keys, sorted);
    assert!(rows.iter().all(|r| r[2] == "separation" && r[10] == "ok"));
    assert!(s.path("out.csv.timings.csv").exists());
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(s.path("out.csv.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["rows"], 24);
    assert_eq!(meta["failures"], 0);
}

#[test]
fn compas_lambda_zero_matches_an_unregularized_fit() {
    let s = Scratch::new("compas");
    let cfg = s.config("dataset = \"compas\"\npipeline = \"discrete\"\ncriterion = \"independence\"\nlambdas = [0]\nseeds = [3]\n");
    let (code, err) = run_config(&cfg, &[]);
    assert_eq!(code, 0, "{err}");
    let (header, rows) = read_rows(&s.path("out.csv"));

    let data = load_compas(data_dir().join("compas-scores-two-years.csv"), CompasOptions::default()).unwrap();
    let (train, test) = split_discrete(&data, &SplitSpec::fraction(0.8, 3)).unwrap();
    let model = fit_discrete(&train.x, &train.y, &train.d, train.cardinalities(), &FitConfig::new(Criterion::Independence, 0.0)).unwrap();
    let preds: Vec<usize> = test.x.iter().map(|&x| predict_map(&model, x).unwrap()).collect();
    let j = discrimination_j(&preds, &test.d).unwrap();
    assert_eq!(rows[0][col(&header, "j")], fmt_g(j));

    let (header, timings) = read_rows(&s.path("out.csv.timings.csv"));
    let ms: f64 = timings[0][col(&header, "wall_time_ms")].parse().unwrap();
    assert!(ms < 1000.0, "{ms} ms");
}

#[test]
fn planted_bias_dependence_falls_with_lambda() {
    let s = Scratch::new("planted");
    let cfg = s.config("dataset = \"synth-bias\"\npipeline = \"discrete\"\ncriterion = \"independence\"\nlambdas = [0, 0.25, 0.5, 1, 2, 4]\nseeds = [0]\n");
    let (code, err) = run_config(&cfg, &[]);
    assert_eq!(code, 0, "{err}");
    let (header, rows) = read_rows(&s.path("out.csv"));
    let h = col(&header, "hgr_d");
    let lambdas: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    let hgr: Vec<f64> = rows.iter().map(|r| r[h].parse().unwrap()).collect();
    let rho = spearman(&lambdas, &hgr).unwrap();
    assert!(rho <= -0.9, "spearman {rho}, hgr_d {hgr:?}");
}

#[test]
fn flags_override_the_config_file() {
    let s = Scratch::new("flags");
    let cfg = s.config("dataset = \"synth-bias\"\npipeline = \"discrete\"\ncriterion = \"independence\"\nlambdas = [0]\nseeds = [0]\n");
    let out = s.path("flagged.csv");
    let (code, err) = run_config(
        &cfg,
        &["--criterion", "separation", "--lambdas", "0,0.5", "--seeds", "4,5", "--out", out.to_str().unwrap()],
    );
    assert_eq!(code, 0, "{err}");
    let (_, rows) = read_rows(&out);
    let keys: Vec<(&str, &str, &str)> = rows.iter().map(|r| (r[0].as_str(), r[1].as_str(), r[2].as_str())).collect();
    assert_eq!(
        keys,
        [("0", "4", "separation"), ("0", "5", "separation"), ("0.5", "4", "separation"), ("0.5", "5", "separation")]
    );
}

#[test]
fn reruns_are_byte_identical() {
    let s = Scratch::new("rerun");
    let cfg = s.config(
        "dataset = \"synth-cts-bias\"\npipeline = \"continuous\"\ncriterion = \"separation\"\nlambdas = [0, 0.5]\nseeds = [0, 1]\nsamples = 400\n[train]\nepochs = 5\n",
    );
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let (code, err) = run_config(&cfg, &[]);
        assert_eq!(code, 0, "{err}");
        outputs.push((
            std::fs::read(s.path("out.csv")).unwrap(),
            std::fs::read(s.path("out.csv.meta.json")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

fn few_shot_rows(steps: usize) -> (Vec<String>, Vec<Vec<String>>) {
    let s = Scratch::new(&format!("few-{steps}"));
    let cfg = s.config(&format!(
        "dataset = \"synth-cts-bias\"\npipeline = \"continuous\"\ncriterion = \"separation\"\nlambdas = [0, 1]\nseeds = [0]\nsamples = 800\n[train]\nepochs = 20\n[few_shot]\nsize = 10\nsteps = {steps}\n"
    ));
    let (code, err) = run_config(&cfg, &["--few-shot"]);
    assert_eq!(code, 0, "{err}");
    read_rows(&s.path("out.csv"))
}

#[test]
fn few_shot_with_zero_steps_changes_nothing() {
    let (header, rows) = few_shot_rows(0);
    assert_eq!(header, ["lambda", "seed", "criterion", "phase", "mse", "mi", "cmi", "status"]);
    assert_eq!(rows.len(), 4);
    for pair in rows.chunks(2) {
        assert_eq!((pair[0][3].as_str(), pair[1][3].as_str()), ("pre", "post"));
        assert_eq!(pair[0][4..], pair[1][4..]);
    }
}

#[test]
fn few_shot_without_fairness_weight_keeps_dependence() {
    let s = Scratch::new("few-cc");
    let preset = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/cc_few_shot.toml");
    let text = std::fs::read_to_string(preset).unwrap();
    let cfg = s.config(&text.lines().filter(|l| !l.starts_with("out") && !l.starts_with("data_dir")).collect::<Vec<_>>().join("\n"));
    let (code, err) = run_config(&cfg, &["--few-shot", "--lambdas", "0"]);
    assert_eq!(code, 0, "{err}");
    let (header, rows) = read_rows(&s.path("out.csv"));
    let (pre, post) = (&rows[0], &rows[1]);
    assert_eq!((pre[0].as_str(), post[3].as_str()), ("0", "post"));
    for c in [col(&header, "mi"), col(&header, "cmi")] {
        let change = (pre[c].parse::<f64>().unwrap() - post[c].parse::<f64>().unwrap()).abs();
        assert!(change < 0.05, "{}: {} -> {}", header[c], pre[c], post[c]);
    }
}

#[test]
fn few_shot_reduces_planted_conditional_dependence() {
    let s = Scratch::new("few-planted");
    let cfg = s.config(
        "dataset = \"synth-cts-bias\"\npipeline = \"continuous\"\ncriterion = \"separation\"\nlambdas = [0, 4]\nseeds = [0, 1, 2]\nsamples = 2000\n[train]\nepochs = 100\n[few_shot]\nsize = 10\nsteps = 5\n",
    );
    let (code, err) = run_config(&cfg, &["--few-shot"]);
    assert_eq!(code, 0, "{err}");
    let (header, rows) = read_rows(&s.path("out.csv"));
    let cmi = col(&header, "cmi");
    let largest: Vec<&Vec<String>> = rows.iter().filter(|r| r[0] == "4").collect();
    assert_eq!(largest.len(), 6);
    for pair in largest.chunks(2) {
        let (pre, post): (f64, f64) = (pair[0][cmi].parse().unwrap(), pair[1][cmi].parse().unwrap());
        assert!(pre > 0.05, "planted dependence should be visible, got {pre}");
        assert!(post < pre, "seed {}: {pre} -> {post}", pair[0][1]);
    }
}

#[test]
fn few_shot_requires_a_continuous_dataset() {
    let s = Scratch::new("few-discrete");
    let cfg = s.config("dataset = \"synth-bias\"\npipeline = \"discrete\"\ncriterion = \"independence\"\nlambdas = [0]\nseeds = [0]\n");
    let (code, _) = run_config(&cfg, &["--few-shot"]);
    assert_eq!(code, 1);
}

#[test]
fn shipped_configs_validate_and_round_trip() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = fairhgr_cli::validate_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg, "{}", path.display());
        seen += 1;
    }
    assert!(seen >= 8);
}
