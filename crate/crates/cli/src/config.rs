//! Experiment configuration: a TOML document with a fixed schema.
//!
//! ```toml
//! dataset = "compas"            # compas | adult | cc | synth-coins | synth-bias | synth-cts-bias
//! pipeline = "discrete"         # optional, must agree with the dataset
//! criterion = "independence"    # independence | separation
//! lambdas = [0.0, 0.5, 1.0]     # strictly ascending, nonnegative
//! seeds = [0, 1, 2]             # strictly ascending
//! k = 1                         # optional feature count (discrete) or critic width (continuous)
//! out = "results/compas.csv"
//! data_dir = "data"             # optional
//! samples = 4000                # optional, synthetic datasets only
//! smoothing = 0.0               # optional additive smoothing for discrete joints
//! neighbors = 3                 # optional kNN neighbor count for MI estimates
//!
//! [train]                       # optional TrainConfig overrides (continuous)
//! epochs = 200
//!
//! [few_shot]                    # optional few-shot settings (continuous)
//! size = 10
//! steps = 5
//! ```

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use fairhgr::soft_hgr::{FewShotConfig, TrainConfig};
use fairhgr::Criterion;
use toml::{Table, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pipeline {
    Discrete,
    Continuous,
}

impl Pipeline {
    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::Discrete => "discrete",
            Pipeline::Continuous => "continuous",
        }
    }
}

impl FromStr for Pipeline {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "discrete" => Ok(Pipeline::Discrete),
            "continuous" => Ok(Pipeline::Continuous),
            _ => Err(format!("unknown pipeline `{s}` (expected discrete or continuous)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetId {
    Compas,
    Adult,
    CommunitiesCrime,
    /// X = (Y, D) for balanced independent coins.
    SynthCoins,
    /// Discrete data where part of X tracks D.
    SynthBias,
    /// Continuous data where one feature carries D beyond Y.
    SynthContinuousBias,
}

impl DatasetId {
    pub const ALL: [DatasetId; 6] = [
        DatasetId::Compas,
        DatasetId::Adult,
        DatasetId::CommunitiesCrime,
        DatasetId::SynthCoins,
        DatasetId::SynthBias,
        DatasetId::SynthContinuousBias,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Compas => "compas",
            DatasetId::Adult => "adult",
            DatasetId::CommunitiesCrime => "cc",
            DatasetId::SynthCoins => "synth-coins",
            DatasetId::SynthBias => "synth-bias",
            DatasetId::SynthContinuousBias => "synth-cts-bias",
        }
    }

    pub fn pipeline(self) -> Pipeline {
        match self {
            DatasetId::CommunitiesCrime | DatasetId::SynthContinuousBias => Pipeline::Continuous,
            _ => Pipeline::Discrete,
        }
    }

    pub fn is_synthetic(self) -> bool {
        matches!(
            self,
            DatasetId::SynthCoins | DatasetId::SynthBias | DatasetId::SynthContinuousBias
        )
    }

    /// File name under the data directory, for the real datasets.
    pub fn file_name(self) -> Option<&'static str> {
        match self {
            DatasetId::Compas => Some("compas-scores-two-years.csv"),
            DatasetId::Adult => Some("adult.csv.gz"),
            DatasetId::CommunitiesCrime => Some("communities-crime.csv"),
            _ => None,
        }
    }

    pub fn default_samples(self) -> usize {
        match self {
            DatasetId::SynthCoins => 4000,
            DatasetId::SynthBias => 20000,
            _ => 2000,
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|d| d.as_str() == s).ok_or_else(|| {
            let known: Vec<&str> = Self::ALL.iter().map(|d| d.as_str()).collect();
            format!("unknown dataset `{s}` (expected one of {})", known.join(", "))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotSettings {
    /// Number of sensitive-labeled samples drawn from the training split.
    pub size: usize,
    pub adapt: FewShotConfig,
}

impl Default for FewShotSettings {
    fn default() -> Self {
        Self {
            size: 10,
            adapt: FewShotConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetId,
    pub pipeline: Pipeline,
    pub criterion: Criterion,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub k: Option<usize>,
    pub out: PathBuf,
    pub data_dir: PathBuf,
    pub samples: Option<usize>,
    pub smoothing: f64,
    pub neighbors: usize,
    pub train: TrainConfig,
    pub few_shot: FewShotSettings,
}

/// Every problem found in a configuration document.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

const TOP_KEYS: [&str; 13] = [
    "dataset",
    "pipeline",
    "criterion",
    "lambdas",
    "seeds",
    "k",
    "out",
    "data_dir",
    "samples",
    "smoothing",
    "neighbors",
    "train",
    "few_shot",
];
const TRAIN_KEYS: [&str; 9] = [
    "epochs",
    "batch_size",
    "lr_model",
    "lr_critic",
    "critic_steps",
    "hidden",
    "feature_dim",
    "critic_hidden",
    "momentum",
];
const FEW_SHOT_KEYS: [&str; 6] = ["size", "steps", "lr_model", "lr_critic", "critic_steps", "critic_warmup"];

/// Collects problems while reading typed values out of a table.
struct Reader<'a> {
    table: &'a Table,
    prefix: &'static str,
    errors: &'a mut Vec<String>,
}

impl<'a> Reader<'a> {
    fn name(&self, key: &str) -> String {
        if self.prefix.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.prefix)
        }
    }

    fn unknown_keys(&mut self, known: &[&str]) {
        for key in self.table.keys() {
            if !known.contains(&key.as_str()) {
                let name = self.name(key);
                self.errors.push(format!("unknown key `{name}`"));
            }
        }
    }

    fn string(&mut self, key: &str) -> Option<String> {
        match self.table.get(key)? {
            Value::String(s) => Some(s.clone()),
            other => {
                let name = self.name(key);
                self.errors.push(format!("`{name}` must be a string, got {}", other.type_str()));
                None
            }
        }
    }

    fn float(&mut self, key: &str) -> Option<f64> {
        match self.table.get(key)? {
            Value::Float(v) => Some(*v),
            Value::Integer(v) => Some(*v as f64),
            other => {
                let name = self.name(key);
                self.errors.push(format!("`{name}` must be a number, got {}", other.type_str()));
                None
            }
        }
    }

    fn count(&mut self, key: &str, min: usize) -> Option<usize> {
        let name = self.name(key);
        match self.table.get(key)? {
            Value::Integer(v) if *v >= min as i64 => Some(*v as usize),
            Value::Integer(v) => {
                self.errors.push(format!("`{name}` must be at least {min}, got {v}"));
                None
            }
            other => {
                self.errors.push(format!("`{name}` must be an integer, got {}", other.type_str()));
                None
            }
        }
    }

    fn array(&mut self, key: &str) -> Option<&'a [Value]> {
        match self.table.get(key)? {
            Value::Array(a) => Some(a.as_slice()),
            other => {
                let name = self.name(key);
                self.errors.push(format!("`{name}` must be an array, got {}", other.type_str()));
                None
            }
        }
    }

    fn sub_table(&mut self, key: &str) -> Option<&'a Table> {
        match self.table.get(key)? {
            Value::Table(t) => Some(t),
            other => {
                let name = self.name(key);
                self.errors.push(format!("`{name}` must be a table, got {}", other.type_str()));
                None
            }
        }
    }

    fn parsed<T: FromStr<Err = String>>(&mut self, key: &str, required: bool) -> Option<T> {
        let Some(s) = self.string(key) else {
            if required && !self.table.contains_key(key) {
                let name = self.name(key);
                self.errors.push(format!("missing required key `{name}`"));
            }
            return None;
        };
        s.parse().map_err(|e| self.errors.push(e)).ok()
    }
}

fn parse_criterion(s: &str) -> Result<Criterion, String> {
    s.parse::<Criterion>().map_err(|e| e.to_string())
}

struct CriterionKey(Criterion);

impl FromStr for CriterionKey {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        parse_criterion(s).map(CriterionKey)
    }
}

impl ExperimentConfig {
    /// Parses and validates a TOML document, reporting every violation.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigErrors> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| ConfigErrors(vec![e.to_string()]))?;
        Self::from_table(&table)
    }

    pub fn from_table(table: &Table) -> Result<Self, ConfigErrors> {
        let mut errors = Vec::new();
        let mut r = Reader {
            table,
            prefix: "",
            errors: &mut errors,
        };
        r.unknown_keys(&TOP_KEYS);
        let dataset: Option<DatasetId> = r.parsed("dataset", true);
        let pipeline: Option<Pipeline> = r.parsed("pipeline", false);
        let criterion = r.parsed::<CriterionKey>("criterion", true).map(|c| c.0);

        let lambdas: Option<Vec<f64>> = if table.contains_key("lambdas") {
            r.array("lambdas").map(|a| {
                a.iter()
                    .filter_map(|v| match v {
                        Value::Float(x) => Some(*x),
                        Value::Integer(x) => Some(*x as f64),
                        other => {
                            r.errors.push(format!("`lambdas` entries must be numbers, got {}", other.type_str()));
                            None
                        }
                    })
                    .collect()
            })
        } else {
            r.errors.push("missing required key `lambdas`".into());
            None
        };
        let seeds: Option<Vec<u64>> = if table.contains_key("seeds") {
            r.array("seeds").map(|a| {
                a.iter()
                    .filter_map(|v| match v {
                        Value::Integer(x) if *x >= 0 => Some(*x as u64),
                        other => {
                            r.errors.push(format!("`seeds` entries must be nonnegative integers, got {other}"));
                            None
                        }
                    })
                    .collect()
            })
        } else {
            r.errors.push("missing required key `seeds`".into());
            None
        };
        let k = r.count("k", 1);
        let out = r.string("out");
        if !table.contains_key("out") {
            r.errors.push("missing required key `out`".into());
        }
        let data_dir = r.string("data_dir").unwrap_or_else(|| "data".into());
        let samples = r.count("samples", 4);
        let smoothing = r.float("smoothing").unwrap_or(0.0);
        let neighbors = r.count("neighbors", 1).unwrap_or(fairhgr::metrics::DEFAULT_NEIGHBORS);
        let train_table = r.sub_table("train").cloned();
        let few_table = r.sub_table("few_shot").cloned();

        let mut train = TrainConfig::default();
        if let Some(t) = &train_table {
            let mut tr = Reader {
                table: t,
                prefix: "train",
                errors: &mut errors,
            };
            tr.unknown_keys(&TRAIN_KEYS);
            if let Some(v) = tr.count("epochs", 1) {
                train.epochs = v;
            }
            if let Some(v) = tr.count("batch_size", 2) {
                train.batch_size = v;
            }
            if let Some(v) = tr.float("lr_model") {
                train.lr_model = v;
            }
            if let Some(v) = tr.float("lr_critic") {
                train.lr_critic = v;
            }
            if let Some(v) = tr.count("critic_steps", 1) {
                train.critic_steps = v;
            }
            if let Some(v) = tr.count("hidden", 1) {
                train.hidden = v;
            }
            if let Some(v) = tr.count("feature_dim", 1) {
                train.feature_dim = v;
            }
            if let Some(v) = tr.count("critic_hidden", 1) {
                train.critic_hidden = v;
            }
            if let Some(v) = tr.float("momentum") {
                train.momentum = v;
            }
        }
        if let Some(k) = k {
            train.k = k;
        }
        if let Err(e) = train.validate() {
            errors.push(format!("train: {e}"));
        }

        let mut few_shot = FewShotSettings::default();
        if let Some(t) = &few_table {
            let mut fr = Reader {
                table: t,
                prefix: "few_shot",
                errors: &mut errors,
            };
            fr.unknown_keys(&FEW_SHOT_KEYS);
            if let Some(v) = fr.count("size", 2) {
                few_shot.size = v;
            }
            if let Some(v) = fr.count("steps", 0) {
                few_shot.adapt.steps = v;
            }
            if let Some(v) = fr.float("lr_model") {
                few_shot.adapt.lr_model = v;
            }
            if let Some(v) = fr.float("lr_critic") {
                few_shot.adapt.lr_critic = v;
            }
            if let Some(v) = fr.count("critic_steps", 1) {
                few_shot.adapt.critic_steps = v;
            }
            if let Some(v) = fr.count("critic_warmup", 0) {
                few_shot.adapt.critic_warmup = v;
            }
        }
        for (name, v) in [
            ("few_shot.lr_model", few_shot.adapt.lr_model),
            ("few_shot.lr_critic", few_shot.adapt.lr_critic),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                errors.push(format!("`{name}` must be a nonnegative number"));
            }
        }
        if !(smoothing.is_finite() && smoothing >= 0.0) {
            errors.push(format!("`smoothing` must be a nonnegative number, got {smoothing}"));
        }

        let pipeline = match (dataset, pipeline) {
            (Some(d), Some(p)) if d.pipeline() != p => {
                errors.push(format!(
                    "dataset `{d}` belongs to the {} pipeline, not {}",
                    d.pipeline().as_str(),
                    p.as_str()
                ));
                None
            }
            (Some(d), _) => Some(d.pipeline()),
            (None, p) => p,
        };
        if let (Some(d), Some(_)) = (dataset, samples) {
            if !d.is_synthetic() {
                errors.push(format!("`samples` only applies to synthetic datasets, not `{d}`"));
            }
        }
        if dataset == Some(DatasetId::SynthCoins) && samples.is_some_and(|n| n % 4 != 0) {
            errors.push("`samples` must be divisible by 4 for synth-coins".into());
        }

        if let Some(l) = &lambdas {
            if l.is_empty() {
                errors.push("`lambdas` must not be empty".into());
            }
            if let Some(v) = l.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                errors.push(format!("`lambdas` entries must be nonnegative, got {v}"));
            }
            if l.windows(2).any(|w| w[0] >= w[1]) {
                errors.push("`lambdas` must be strictly ascending".into());
            }
            if criterion == Some(Criterion::Separation) && pipeline == Some(Pipeline::Discrete) {
                if let Some(v) = l.iter().find(|v| **v >= 1.0) {
                    errors.push(format!(
                        "separation on the discrete pipeline restricts lambda to [0, 1), got {v}"
                    ));
                }
            }
        }
        if let Some(s) = &seeds {
            if s.is_empty() {
                errors.push("`seeds` must not be empty".into());
            }
            if s.windows(2).any(|w| w[0] >= w[1]) {
                errors.push("`seeds` must be strictly ascending".into());
            }
        }

        if !errors.is_empty() {
            return Err(ConfigErrors(errors));
        }
        let (Some(dataset), Some(pipeline), Some(criterion), Some(lambdas), Some(seeds), Some(out)) =
            (dataset, pipeline, criterion, lambdas, seeds, out)
        else {
            unreachable!("missing values were reported as errors");
        };
        Ok(Self {
            dataset,
            pipeline,
            criterion,
            lambdas,
            seeds,
            k,
            out: PathBuf::from(out),
            data_dir: PathBuf::from(data_dir),
            samples,
            smoothing,
            neighbors,
            train,
            few_shot,
        })
    }

    /// Canonical table form; parsing it back yields an identical config.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new();
        t.insert("dataset".into(), self.dataset.as_str().into());
        t.insert("pipeline".into(), self.pipeline.as_str().into());
        t.insert("criterion".into(), self.criterion.as_str().into());
        t.insert(
            "lambdas".into(),
            Value::Array(self.lambdas.iter().map(|&v| Value::Float(v)).collect()),
        );
        t.insert(
            "seeds".into(),
            Value::Array(self.seeds.iter().map(|&v| Value::Integer(v as i64)).collect()),
        );
        if let Some(k) = self.k {
            t.insert("k".into(), Value::Integer(k as i64));
        }
        t.insert("out".into(), self.out.to_string_lossy().into_owned().into());
        t.insert("data_dir".into(), self.data_dir.to_string_lossy().into_owned().into());
        if let Some(n) = self.samples {
            t.insert("samples".into(), Value::Integer(n as i64));
        }
        t.insert("smoothing".into(), Value::Float(self.smoothing));
        t.insert("neighbors".into(), Value::Integer(self.neighbors as i64));

        let c = &self.train;
        let mut train = Table::new();
        train.insert("epochs".into(), Value::Integer(c.epochs as i64));
        train.insert("batch_size".into(), Value::Integer(c.batch_size as i64));
        train.insert("lr_model".into(), Value::Float(c.lr_model));
        train.insert("lr_critic".into(), Value::Float(c.lr_critic));
        train.insert("critic_steps".into(), Value::Integer(c.critic_steps as i64));
        train.insert("hidden".into(), Value::Integer(c.hidden as i64));
        train.insert("feature_dim".into(), Value::Integer(c.feature_dim as i64));
        train.insert("critic_hidden".into(), Value::Integer(c.critic_hidden as i64));
        train.insert("momentum".into(), Value::Float(c.momentum));
        t.insert("train".into(), Value::Table(train));

        let f = &self.few_shot;
        let mut few = Table::new();
        few.insert("size".into(), Value::Integer(f.size as i64));
        few.insert("steps".into(), Value::Integer(f.adapt.steps as i64));
        few.insert("lr_model".into(), Value::Float(f.adapt.lr_model));
        few.insert("lr_critic".into(), Value::Float(f.adapt.lr_critic));
        few.insert("critic_steps".into(), Value::Integer(f.adapt.critic_steps as i64));
        few.insert("critic_warmup".into(), Value::Integer(f.adapt.critic_warmup as i64));
        t.insert("few_shot".into(), Value::Table(few));
        t
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_table()).expect("tables always serialize")
    }

    /// Path of a file next to the output CSV, e.g. `<out>.meta.json`.
    pub fn sidecar(&self, suffix: &str) -> PathBuf {
        let mut s = self.out.as_os_str().to_owned();
        s.push(".");
        s.push(suffix);
        PathBuf::from(s)
    }
}

/// Reads a config file and validates it.
pub fn validate_config(path: impl AsRef<std::path::Path>) -> Result<ExperimentConfig, ConfigErrors> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigErrors(vec![format!("cannot read {}: {e}", path.display())]))?;
    ExperimentConfig::from_toml_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
dataset = "compas"
criterion = "independence"
lambdas = [0.0, 1.0]
seeds = [0]
out = "o.csv"
"#;

    #[test]
    fn minimal_config_round_trips() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.pipeline, Pipeline::Discrete);
        assert_eq!(cfg.data_dir, PathBuf::from("data"));
        let echo = cfg.to_toml();
        assert_eq!(ExperimentConfig::from_toml_str(&echo).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_toml_str(&echo).unwrap().to_toml(), echo);
    }

    #[test]
    fn discrete_separation_rejects_lambda_one() {
        let text = MINIMAL.replace("independence", "separation");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert_eq!(err.0.len(), 1);
        assert!(err.0[0].contains("[0, 1)"), "{err}");
        let cts = text.replace("compas", "cc");
        assert!(ExperimentConfig::from_toml_str(&cts).is_ok());
    }

    #[test]
    fn reports_every_problem() {
        let text = r#"
dataset = "mnist"
criterion = "sufficiency"
lambdas = []
seeds = [3, 1]
colour = "red"
[train]
critic_steps = 0
lr = 1.0
"#;
        let err = ExperimentConfig::from_toml_str(text).unwrap_err();
        let all = err.to_string();
        for needle in [
            "unknown dataset",
            "criterion",
            "`lambdas` must not be empty",
            "`seeds` must be strictly ascending",
            "unknown key `colour`",
            "unknown key `train.lr`",
            "train.critic_steps",
            "missing required key `out`",
        ] {
            assert!(all.contains(needle), "missing `{needle}` in:\n{all}");
        }
    }

    #[test]
    fn pipeline_must_match_dataset() {
        let text = format!("{MINIMAL}pipeline = \"continuous\"\n");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(err.0[0].contains("discrete pipeline"));
    }

    #[test]
    fn lambdas_must_ascend() {
        let text = MINIMAL.replace("[0.0, 1.0]", "[1.0, 0.5]");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let text = MINIMAL.replace("[0.0, 1.0]", "[-1.0]");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn overrides_reach_train_config() {
        let text = MINIMAL.replace("compas", "cc")
            + "k = 2\n[train]\nepochs = 3\nmomentum = 0.9\n[few_shot]\nsteps = 0\n";
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.k, 2);
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.few_shot.adapt.steps, 0);
        assert_eq!(ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn dataset_ids_parse_back() {
        for d in DatasetId::ALL {
            assert_eq!(d.as_str().parse::<DatasetId>().unwrap(), d);
        }
    }
}
