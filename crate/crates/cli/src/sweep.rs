//! λ-sweeps and the few-shot experiment.

use std::fmt;
use std::fs;
use std::time::Instant;

use fairhgr::datasets::{
    load_adult, load_cc, load_compas, split_continuous, split_discrete, synth_continuous, synth_discrete, CompasOptions,
    ContinuousDataset, ContinuousSynth, DiscreteDataset, DiscreteSynth, SplitSpec, Standardization,
};
use fairhgr::discrete_fair::{argmax_lowest, feature_correlation, fit_from_joints, DiscreteJoints, FitConfig};
use fairhgr::probability::estimate_joint_from;
use fairhgr::metrics::{self, column};
use fairhgr::soft_hgr::{few_shot_adapt, train, ContinuousFairModel, FewShotConfig, TrainConfig};
use fairhgr::{Criterion, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{DatasetId, ExperimentConfig, Pipeline};
use crate::format::fmt_g;

/// Fraction of rows used for training on the discrete datasets.
pub const DISCRETE_TRAIN_FRACTION: f64 = 0.8;
/// Held-out rows for Communities & Crime.
pub const CC_TEST_ROWS: usize = 200;
/// Seed offset for separately generated synthetic test sets.
const TEST_SEED_OFFSET: u64 = 0x7e57;
const FEW_SHOT_STREAM: u64 = 4;

pub const SYNTH_BIAS: DiscreteSynth = DiscreteSynth::PlantedBias {
    card_a: 4,
    card_b: 4,
    bias: 0.8,
};
pub const SYNTH_CTS_BIAS: ContinuousSynth = ContinuousSynth::PlantedBias {
    dim: 5,
    noise: 0.3,
    strength: 1.0,
};

/// Failure that prevents a run from producing any rows.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}")]
    Config(String),
    #[error("cannot load dataset: {0}")]
    Ingestion(Error),
    #[error("cannot write output: {0}")]
    Output(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteMeasures {
    pub k: usize,
    pub auc: f64,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    /// `inf` when some group never receives a positive prediction.
    pub j: f64,
    pub deo: f64,
    /// Maximal correlation between the score `P(Y=1 | x)` and `D` on the test set.
    pub hgr_d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuousMeasures {
    pub mse: f64,
    pub mi: f64,
    pub cmi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Measures {
    Discrete(DiscreteMeasures),
    Continuous(ContinuousMeasures),
}

/// One `(λ, seed)` point of a tradeoff curve.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffPoint {
    pub lambda: f64,
    pub seed: u64,
    pub criterion: Criterion,
    pub measures: Result<Measures, String>,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pre,
    Post,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pre => "pre",
            Phase::Post => "post",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotPoint {
    pub lambda: f64,
    pub seed: u64,
    pub criterion: Criterion,
    pub phase: Phase,
    pub measures: Result<ContinuousMeasures, String>,
}

pub const DISCRETE_HEADER: [&str; 11] = [
    "lambda",
    "seed",
    "criterion",
    "k",
    "auc",
    "accuracy",
    "balanced_accuracy",
    "j",
    "deo",
    "hgr_d",
    "status",
];
pub const CONTINUOUS_HEADER: [&str; 7] = ["lambda", "seed", "criterion", "mse", "mi", "cmi", "status"];
pub const FEW_SHOT_HEADER: [&str; 8] = ["lambda", "seed", "criterion", "phase", "mse", "mi", "cmi", "status"];

fn status(r: &Result<impl Sized, String>) -> String {
    match r {
        Ok(_) => "ok".into(),
        Err(e) => format!("error: {e}"),
    }
}

fn blanks(n: usize) -> impl Iterator<Item = String> {
    std::iter::repeat_n(String::new(), n)
}

fn continuous_fields(m: &Result<ContinuousMeasures, String>) -> Vec<String> {
    match m {
        Ok(c) => vec![fmt_g(c.mse), fmt_g(c.mi), fmt_g(c.cmi)],
        Err(_) => blanks(3).collect(),
    }
}

/// Rows of a sweep, sorted by `(λ, seed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub pipeline: Pipeline,
    pub points: Vec<TradeoffPoint>,
}

impl SweepOutput {
    pub fn failures(&self) -> usize {
        self.points.iter().filter(|p| p.measures.is_err()).count()
    }

    pub fn header(&self) -> &'static [&'static str] {
        match self.pipeline {
            Pipeline::Discrete => &DISCRETE_HEADER,
            Pipeline::Continuous => &CONTINUOUS_HEADER,
        }
    }

    pub fn records(&self) -> Vec<Vec<String>> {
        self.points
            .iter()
            .map(|p| {
                let mut row = vec![fmt_g(p.lambda), p.seed.to_string(), p.criterion.to_string()];
                match (&p.measures, self.pipeline) {
                    (Ok(Measures::Discrete(m)), _) => row.extend([
                        m.k.to_string(),
                        fmt_g(m.auc),
                        fmt_g(m.accuracy),
                        fmt_g(m.balanced_accuracy),
                        fmt_g(m.j),
                        fmt_g(m.deo),
                        fmt_g(m.hgr_d),
                    ]),
                    (Ok(Measures::Continuous(m)), _) => row.extend(continuous_fields(&Ok(*m))),
                    (Err(_), Pipeline::Discrete) => row.extend(blanks(7)),
                    (Err(_), Pipeline::Continuous) => row.extend(blanks(3)),
                }
                row.push(status(&p.measures));
                row
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        to_csv(self.header(), &self.records())
    }

    /// Wall time of each point; kept apart from the main CSV so that stays reproducible.
    pub fn timings_csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .points
            .iter()
            .map(|p| vec![fmt_g(p.lambda), p.seed.to_string(), format!("{:.3}", p.wall_time_ms)])
            .collect();
        to_csv(&["lambda", "seed", "wall_time_ms"], &rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotOutput {
    pub points: Vec<FewShotPoint>,
}

impl FewShotOutput {
    pub fn failures(&self) -> usize {
        self.points.iter().filter(|p| p.measures.is_err()).count()
    }

    pub fn records(&self) -> Vec<Vec<String>> {
        self.points
            .iter()
            .map(|p| {
                let mut row = vec![
                    fmt_g(p.lambda),
                    p.seed.to_string(),
                    p.criterion.to_string(),
                    p.phase.to_string(),
                ];
                row.extend(continuous_fields(&p.measures));
                row.push(status(&p.measures));
                row
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        to_csv(&FEW_SHOT_HEADER, &self.records())
    }
}

fn to_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// Data for one seed: training and held-out parts.
enum Split {
    Discrete(DiscreteDataset, DiscreteDataset),
    Continuous(ContinuousDataset, ContinuousDataset),
}

/// The loaded real dataset, shared by every seed.
enum Base {
    Discrete(DiscreteDataset),
    Continuous(ContinuousDataset),
    Synthetic,
}

fn load_base(cfg: &ExperimentConfig) -> Result<Base, RunError> {
    let Some(name) = cfg.dataset.file_name() else {
        return Ok(Base::Synthetic);
    };
    let path = cfg.data_dir.join(name);
    let base = match cfg.dataset {
        DatasetId::Compas => Base::Discrete(load_compas(&path, CompasOptions::default()).map_err(RunError::Ingestion)?),
        DatasetId::Adult => Base::Discrete(load_adult(&path).map_err(RunError::Ingestion)?),
        DatasetId::CommunitiesCrime => Base::Continuous(load_cc(&path).map_err(RunError::Ingestion)?.data),
        _ => unreachable!("synthetic datasets have no file"),
    };
    Ok(base)
}

fn make_split(cfg: &ExperimentConfig, base: &Base, seed: u64) -> fairhgr::Result<Split> {
    let n = cfg.samples.unwrap_or_else(|| cfg.dataset.default_samples());
    let test_seed = seed.wrapping_add(TEST_SEED_OFFSET);
    match (base, cfg.dataset) {
        (Base::Discrete(data), _) => {
            let (a, b) = split_discrete(data, &SplitSpec::fraction(DISCRETE_TRAIN_FRACTION, seed))?;
            Ok(Split::Discrete(a, b))
        }
        (Base::Continuous(data), _) => {
            let (a, b) = split_continuous(data, &SplitSpec::test_count(CC_TEST_ROWS, seed))?;
            Ok(Split::Continuous(a, b))
        }
        (Base::Synthetic, DatasetId::SynthCoins) => {
            let spec = DiscreteSynth::Coins { balanced: true };
            let test_n = (n / 4).div_ceil(4) * 4;
            Ok(Split::Discrete(
                synth_discrete(&spec, n, seed)?,
                synth_discrete(&spec, test_n, test_seed)?,
            ))
        }
        (Base::Synthetic, DatasetId::SynthBias) => Ok(Split::Discrete(
            synth_discrete(&SYNTH_BIAS, n, seed)?,
            synth_discrete(&SYNTH_BIAS, (n / 4).max(4), test_seed)?,
        )),
        (Base::Synthetic, DatasetId::SynthContinuousBias) => {
            let train = synth_continuous(&SYNTH_CTS_BIAS, n, seed)?;
            let test = synth_continuous(&SYNTH_CTS_BIAS, (n / 4).max(4), test_seed)?;
            let stats = Standardization::fit(&train.x);
            Ok(Split::Continuous(
                train.standardized_with(&stats),
                test.standardized_with(&stats),
            ))
        }
        (Base::Synthetic, d) => unreachable!("{d} is not synthetic"),
    }
}

fn discrete_point(
    cfg: &ExperimentConfig,
    joints: &DiscreteJoints,
    train: &DiscreteDataset,
    test: &DiscreteDataset,
    lambda: f64,
) -> fairhgr::Result<DiscreteMeasures> {
    let cards = train.cardinalities();
    let mut fit_cfg = FitConfig::new(cfg.criterion, lambda);
    fit_cfg.smoothing = cfg.smoothing;
    if let Some(k) = cfg.k {
        fit_cfg = fit_cfg.with_k(k);
    }
    let model = fit_from_joints(joints, cards, &fit_cfg)?;
    let table = model.posterior_table();
    let positive = if cards.y == 2 { 1 } else { cards.y - 1 };
    let scores: Vec<f64> = test.x.iter().map(|&x| table[x][positive]).collect();
    let preds: Vec<usize> = test.x.iter().map(|&x| argmax_lowest(&table[x])).collect();
    let j = match metrics::discrimination_j(&preds, &test.d) {
        Err(Error::InfiniteDiscrimination { .. }) => Ok(f64::INFINITY),
        other => other,
    };
    let score_table: Vec<f64> = table.iter().map(|p| p[positive]).collect();
    let hgr_d = estimate_joint_from(&test.x, &test.d, cards.x, cards.d, 0.0)
        .and_then(|joint| feature_correlation(&score_table, &joint));
    let or_nan = |r: fairhgr::Result<f64>| r.unwrap_or(f64::NAN);
    Ok(DiscreteMeasures {
        k: model.k,
        auc: or_nan(metrics::auc(&scores, &test.y)),
        accuracy: metrics::accuracy(&preds, &test.y)?,
        balanced_accuracy: or_nan(metrics::balanced_accuracy(&preds, &test.y)),
        j: or_nan(j),
        deo: or_nan(metrics::deo(&preds, &test.y, &test.d)),
        hgr_d: or_nan(hgr_d),
    })
}

/// Test-set MSE and dependence of predictions on the sensitive attribute.
pub fn evaluate_continuous(
    model: &ContinuousFairModel,
    test: &ContinuousDataset,
    neighbors: usize,
) -> fairhgr::Result<ContinuousMeasures> {
    let pred = model.predict(&test.x)?;
    let p = column(pred.as_slice());
    let y = column(test.y.as_slice());
    Ok(ContinuousMeasures {
        mse: metrics::mse(pred.as_slice(), test.y.as_slice())?,
        mi: metrics::knn_mi(&p, &test.d, neighbors)?,
        cmi: metrics::knn_cmi(&p, &test.d, &y, neighbors)?,
    })
}

fn train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.train.clone()
    }
}

fn continuous_point(
    cfg: &ExperimentConfig,
    train_set: &ContinuousDataset,
    test: &ContinuousDataset,
    lambda: f64,
    seed: u64,
) -> fairhgr::Result<ContinuousMeasures> {
    let (model, _) = train(train_set, cfg.criterion, lambda, &train_config(cfg, seed))?.into_result()?;
    evaluate_continuous(&model, test, cfg.neighbors)
}

fn prepare_splits(cfg: &ExperimentConfig) -> Result<Vec<(u64, Result<Split, String>)>, RunError> {
    let base = load_base(cfg)?;
    Ok(cfg
        .seeds
        .iter()
        .map(|&s| (s, make_split(cfg, &base, s).map_err(|e| e.to_string())))
        .collect())
}

/// Fits and evaluates every `(λ, seed)` point. Points run in parallel; the
/// output order is always `(λ, seed)` ascending.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutput, RunError> {
    let splits = prepare_splits(cfg)?;
    let joints: Vec<Option<Result<DiscreteJoints, String>>> = splits
        .iter()
        .map(|(_, s)| match s {
            Ok(Split::Discrete(tr, _)) => Some(
                DiscreteJoints::estimate(&tr.x, &tr.y, &tr.d, tr.cardinalities(), cfg.smoothing).map_err(|e| e.to_string()),
            ),
            _ => None,
        })
        .collect();
    let jobs: Vec<(f64, usize)> = cfg
        .lambdas
        .iter()
        .flat_map(|&l| (0..splits.len()).map(move |i| (l, i)))
        .collect();
    let points = jobs
        .par_iter()
        .map(|&(lambda, i)| {
            let started = Instant::now();
            let (seed, split) = &splits[i];
            let measures = match split {
                Err(e) => Err(e.clone()),
                Ok(Split::Discrete(tr, te)) => match joints[i].as_ref().expect("estimated for discrete splits") {
                    Err(e) => Err(e.clone()),
                    Ok(j) => discrete_point(cfg, j, tr, te, lambda)
                        .map(Measures::Discrete)
                        .map_err(|e| e.to_string()),
                },
                Ok(Split::Continuous(tr, te)) => continuous_point(cfg, tr, te, lambda, *seed)
                    .map(Measures::Continuous)
                    .map_err(|e| e.to_string()),
            };
            if let Err(e) = &measures {
                log::warn!("lambda {lambda}, seed {seed}: {e}");
            }
            TradeoffPoint {
                lambda,
                seed: *seed,
                criterion: cfg.criterion,
                measures,
                wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
            }
        })
        .collect();
    Ok(SweepOutput {
        pipeline: cfg.pipeline,
        points,
    })
}

/// Trains an unregularized model per seed, adapts it with a few
/// sensitive-labeled training samples for every λ, and reports held-out
/// measures before and after adaptation.
pub fn run_few_shot(cfg: &ExperimentConfig) -> Result<FewShotOutput, RunError> {
    if cfg.pipeline != Pipeline::Continuous {
        return Err(RunError::Config(format!(
            "few-shot adaptation needs a continuous dataset, `{}` is discrete",
            cfg.dataset
        )));
    }
    let splits = prepare_splits(cfg)?;
    let per_seed: Vec<Vec<FewShotPoint>> = splits
        .par_iter()
        .map(|(seed, split)| {
            let seed = *seed;
            let run = || -> fairhgr::Result<Vec<FewShotPoint>> {
                let Ok(Split::Continuous(tr, te)) = split else {
                    return Err(Error::Input(match split {
                        Err(e) => e.clone(),
                        Ok(_) => "expected continuous data".into(),
                    }));
                };
                let (baseline, _) = train(tr, cfg.criterion, 0.0, &train_config(cfg, seed))?.into_result()?;
                let pre = evaluate_continuous(&baseline, te, cfg.neighbors)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(FEW_SHOT_STREAM);
                let mut idx = rand::seq::index::sample(&mut rng, tr.len(), cfg.few_shot.size.min(tr.len())).into_vec();
                idx.sort_unstable();
                let few = tr.select(&idx);
                let adapt = FewShotConfig {
                    seed,
                    ..cfg.few_shot.adapt.clone()
                };
                let mut rows = Vec::new();
                for &lambda in &cfg.lambdas {
                    let post = few_shot_adapt(&baseline, &few, cfg.criterion, lambda, &adapt, &train_config(cfg, seed))
                        .and_then(|m| evaluate_continuous(&m, te, cfg.neighbors))
                        .map_err(|e| e.to_string());
                    for (phase, measures) in [(Phase::Pre, Ok(pre)), (Phase::Post, post)] {
                        rows.push(FewShotPoint {
                            lambda,
                            seed,
                            criterion: cfg.criterion,
                            phase,
                            measures,
                        });
                    }
                }
                Ok(rows)
            };
            run().unwrap_or_else(|e| {
                log::warn!("seed {seed}: {e}");
                cfg.lambdas
                    .iter()
                    .flat_map(|&lambda| {
                        [Phase::Pre, Phase::Post].map(|phase| FewShotPoint {
                            lambda,
                            seed,
                            criterion: cfg.criterion,
                            phase,
                            measures: Err(e.to_string()),
                        })
                    })
                    .collect()
            })
        })
        .collect();
    let mut points: Vec<FewShotPoint> = per_seed.into_iter().flatten().collect();
    points.sort_by(|a, b| {
        a.lambda
            .total_cmp(&b.lambda)
            .then(a.seed.cmp(&b.seed))
            .then((a.phase == Phase::Post).cmp(&(b.phase == Phase::Post)))
    });
    Ok(FewShotOutput { points })
}

fn write(path: &std::path::Path, text: &str) -> Result<(), RunError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| RunError::Output(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| RunError::Output(format!("{}: {e}", path.display())))
}

fn meta_json(cfg: &ExperimentConfig, mode: &str, rows: usize, failures: usize) -> String {
    let meta = serde_json::json!({
        "mode": mode,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg.to_toml(),
        "rows": rows,
        "failures": failures,
    });
    serde_json::to_string_pretty(&meta).expect("json values serialize") + "\n"
}

/// Writes the CSV plus `<out>.timings.csv` and `<out>.meta.json`.
pub fn write_sweep(cfg: &ExperimentConfig, out: &SweepOutput) -> Result<(), RunError> {
    write(&cfg.out, &out.to_csv())?;
    write(&cfg.sidecar("timings.csv"), &out.timings_csv())?;
    write(
        &cfg.sidecar("meta.json"),
        &meta_json(cfg, "sweep", out.points.len(), out.failures()),
    )
}

/// Writes the CSV plus `<out>.meta.json`.
pub fn write_few_shot(cfg: &ExperimentConfig, out: &FewShotOutput) -> Result<(), RunError> {
    write(&cfg.out, &out.to_csv())?;
    write(
        &cfg.sidecar("meta.json"),
        &meta_json(cfg, "few_shot", out.points.len(), out.failures()),
    )
}
