//! Dataset ingestion, encoding, splitting and synthetic generators.
//!
//! Loaders accept plain or gzip-compressed CSV (detected by a `.gz` suffix).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::discrete_fair::Cardinalities;
use crate::encoding::CategoryEncoder;
use crate::error::{input, Error, Result};
use crate::probability::{perturbed_joint, JointPmf};

/// Discrete samples: `x` is the joint encoding of all decision variables.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDataset {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
    pub d: Vec<usize>,
    pub x_encoder: CategoryEncoder,
    pub y_encoder: CategoryEncoder,
    pub d_encoder: CategoryEncoder,
}

impl DiscreteDataset {
    pub fn new(
        x: Vec<usize>,
        y: Vec<usize>,
        d: Vec<usize>,
        x_encoder: CategoryEncoder,
        y_encoder: CategoryEncoder,
        d_encoder: CategoryEncoder,
    ) -> Result<Self> {
        if x.len() != y.len() || x.len() != d.len() {
            return input(format!("column lengths differ: {} {} {}", x.len(), y.len(), d.len()));
        }
        for (name, col, enc) in [("x", &x, &x_encoder), ("y", &y, &y_encoder), ("d", &d, &d_encoder)] {
            if let Some(&bad) = col.iter().find(|&&v| v >= enc.len()) {
                return input(format!("{name} index {bad} outside alphabet of size {}", enc.len()));
            }
        }
        Ok(Self {
            x,
            y,
            d,
            x_encoder,
            y_encoder,
            d_encoder,
        })
    }

    /// Dataset over `0..card` alphabets with numeric category names.
    pub fn from_indices(x: Vec<usize>, y: Vec<usize>, d: Vec<usize>, cards: Cardinalities) -> Result<Self> {
        let names = |n: usize| CategoryEncoder::new((0..n).map(|i| i.to_string())).expect("distinct");
        Self::new(x, y, d, names(cards.x), names(cards.y), names(cards.d))
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn cardinalities(&self) -> Cardinalities {
        Cardinalities {
            x: self.x_encoder.len(),
            y: self.y_encoder.len(),
            d: self.d_encoder.len(),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let pick = |v: &[usize]| idx.iter().map(|&i| v[i]).collect();
        Self {
            x: pick(&self.x),
            y: pick(&self.y),
            d: pick(&self.d),
            ..self.clone()
        }
    }

    /// Writes `x,y,d` index columns plus decoded labels, and the encoders to
    /// `<path>.encoders.json`.
    pub fn export_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["x", "y", "d", "x_label", "y_label", "d_label"])
            .map_err(|e| csv_error(path, e))?;
        for i in 0..self.len() {
            let (x, y, d) = (self.x[i], self.y[i], self.d[i]);
            w.write_record([
                x.to_string().as_str(),
                &y.to_string(),
                &d.to_string(),
                self.x_encoder.decode(x).unwrap_or(""),
                self.y_encoder.decode(y).unwrap_or(""),
                self.d_encoder.decode(d).unwrap_or(""),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush()?;
        let sidecar = serde_json::json!({
            "x": self.x_encoder,
            "y": self.y_encoder,
            "d": self.d_encoder,
        });
        let mut f = File::create(sidecar_path(path, "encoders.json"))?;
        serde_json::to_writer_pretty(&mut f, &sidecar)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// Per-column affine standardization `(v − mean) / sd`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardization {
    /// Population statistics of each column; constant columns keep `sd = 1`.
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut sd = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            mean.push(m);
            sd.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Self { mean, sd }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.mean[j]) / self.sd[j])
    }
}

/// Continuous samples with a real-valued target and sensitive attribute(s).
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousDataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// `n × q`; a single column for every dataset shipped here.
    pub d: DMatrix<f64>,
    pub feature_names: Vec<String>,
    /// Statistics already applied to `x`, if any.
    pub standardization: Option<Standardization>,
}

impl ContinuousDataset {
    pub fn from_parts(x: DMatrix<f64>, y: DVector<f64>, d: DMatrix<f64>) -> Self {
        let feature_names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        Self {
            x,
            y,
            d,
            feature_names,
            standardization: None,
        }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i])),
            d: self.d.select_rows(idx),
            feature_names: self.feature_names.clone(),
            standardization: self.standardization.clone(),
        }
    }

    /// First sensitive column as a vector.
    pub fn d_column(&self) -> DVector<f64> {
        self.d.column(0).into_owned()
    }

    pub fn standardized_with(&self, s: &Standardization) -> Self {
        Self {
            x: s.apply(&self.x),
            standardization: Some(s.clone()),
            ..self.clone()
        }
    }

    /// Writes features, `y` and `d` with a header row.
    pub fn export_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header: Vec<String> = self.feature_names.clone();
        header.push("y".into());
        header.extend((0..self.d.ncols()).map(|j| if j == 0 { "d".to_string() } else { format!("d{j}") }));
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.x.row(i).iter().map(|v| format!("{v:.17e}")).collect();
            row.push(format!("{:.17e}", self.y[i]));
            row.extend(self.d.row(i).iter().map(|v| format!("{v:.17e}")));
            w.write_record(&row).map_err(|e| csv_error(path, e))?;
        }
        w.flush()?;
        if let Some(s) = &self.standardization {
            let f = File::create(sidecar_path(path, "standardization.json"))?;
            serde_json::to_writer_pretty(f, s)?;
        }
        Ok(())
    }
}

fn sidecar_path(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// How to partition a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    TrainFraction(f64),
    /// Exactly this many test rows; the rest train.
    TestCount(usize),
    /// Exact sizes; must add up to the dataset size.
    Counts { train: usize, test: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub rule: SplitRule,
    pub seed: u64,
}

impl SplitSpec {
    pub fn fraction(train_fraction: f64, seed: u64) -> Self {
        Self {
            rule: SplitRule::TrainFraction(train_fraction),
            seed,
        }
    }

    pub fn test_count(test: usize, seed: u64) -> Self {
        Self {
            rule: SplitRule::TestCount(test),
            seed,
        }
    }

    pub fn counts(train: usize, test: usize, seed: u64) -> Self {
        Self {
            rule: SplitRule::Counts { train, test },
            seed,
        }
    }

    /// Seeded shuffle of `0..n` cut into (train, test) index lists.
    pub fn indices(&self, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let n_train = match self.rule {
            SplitRule::TrainFraction(f) => {
                if !(f > 0.0 && f < 1.0) {
                    return input(format!("train fraction must be in (0, 1), got {f}"));
                }
                (f * n as f64).round() as usize
            }
            SplitRule::TestCount(t) => {
                if t >= n {
                    return input(format!("test count {t} leaves no training rows out of {n}"));
                }
                n - t
            }
            SplitRule::Counts { train, test } => {
                if train + test != n {
                    return input(format!("split {train}+{test} does not cover {n} rows"));
                }
                train
            }
        };
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let test = order.split_off(n_train);
        Ok((order, test))
    }
}

pub fn split_discrete(data: &DiscreteDataset, spec: &SplitSpec) -> Result<(DiscreteDataset, DiscreteDataset)> {
    let (tr, te) = spec.indices(data.len())?;
    Ok((data.select(&tr), data.select(&te)))
}

/// Splits and standardizes `x` with statistics of the training rows only.
pub fn split_continuous(data: &ContinuousDataset, spec: &SplitSpec) -> Result<(ContinuousDataset, ContinuousDataset)> {
    let (tr, te) = spec.indices(data.len())?;
    let train = data.select(&tr);
    let test = data.select(&te);
    let stats = Standardization::fit(&train.x);
    Ok((train.standardized_with(&stats), test.standardized_with(&stats)))
}

fn ingestion(path: &Path, message: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    ingestion(path, e.to_string())
}

/// Opens a file, decompressing transparently when the name ends in `.gz`.
fn open_text(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|e| ingestion(path, e.to_string()))?;
    let gz = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    Ok(if gz {
        Box::new(flate2::read::GzDecoder::new(BufReader::new(file)))
    } else {
        Box::new(BufReader::new(file))
    })
}

fn csv_reader(path: &Path, has_headers: bool) -> Result<csv::Reader<Box<dyn Read>>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(has_headers)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'|'))
        .from_reader(open_text(path)?))
}

/// Header lookup keeping the first occurrence of duplicated names.
struct Columns {
    index: HashMap<String, usize>,
}

impl Columns {
    fn new(headers: &csv::StringRecord) -> Self {
        let mut index = HashMap::new();
        for (i, h) in headers.iter().enumerate() {
            index.entry(h.to_string()).or_insert(i);
        }
        Self { index }
    }

    fn find(&self, names: &[&str]) -> Option<usize> {
        names.iter().find_map(|n| self.index.get(*n).copied())
    }

    fn require(&self, path: &Path, names: &[&str]) -> Result<usize> {
        self.find(names)
            .ok_or_else(|| ingestion(path, format!("missing required column {:?}", names[0])))
    }
}

fn field<'r>(rec: &'r csv::StringRecord, col: usize, row: usize, path: &Path) -> Result<&'r str> {
    rec.get(col)
        .ok_or_else(|| ingestion(path, format!("row {row} has no column {col}")))
}

fn parse_num(s: &str, row: usize, column: &str, path: &Path) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| ingestion(path, format!("row {row}, column {column}: malformed number {s:?}")))
}

pub const COMPAS_CHARGES: [&str; 2] = ["F", "M"];
pub const COMPAS_PRIORS: [&str; 3] = ["0", "1-3", ">3"];
pub const COMPAS_AGES: [&str; 3] = ["Less than 25", "25 - 45", "Greater than 45"];
pub const COMPAS_RACES: [&str; 2] = ["African-American", "Caucasian"];

pub fn priors_bin(count: u32) -> usize {
    match count {
        0 => 0,
        1..=3 => 1,
        _ => 2,
    }
}

/// Joint index of (charge degree, priors bin, age category).
pub fn compas_x(charge: usize, priors: usize, age: usize) -> usize {
    (charge * COMPAS_PRIORS.len() + priors) * COMPAS_AGES.len() + age
}

fn compas_x_encoder() -> CategoryEncoder {
    let mut names = Vec::new();
    for c in COMPAS_CHARGES {
        for p in COMPAS_PRIORS {
            for a in COMPAS_AGES {
                names.push(format!("{c}|{p}|{a}"));
            }
        }
    }
    CategoryEncoder::new(names).expect("distinct")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompasOptions {
    /// Apply the customary screening filters (charge within 30 days of
    /// screening, valid recidivism flag, no ordinary traffic offenses, scored
    /// assessments only).
    pub screening_filters: bool,
}

impl Default for CompasOptions {
    fn default() -> Self {
        Self {
            screening_filters: true,
        }
    }
}

/// COMPAS two-year recidivism: X = (charge degree, priors bin, age category),
/// Y = two-year recidivism, D = race (African-American or Caucasian only).
pub fn load_compas(path: impl AsRef<Path>, opts: CompasOptions) -> Result<DiscreteDataset> {
    let path = path.as_ref();
    let mut rdr = csv_reader(path, true)?;
    let cols = Columns::new(rdr.headers().map_err(|e| csv_error(path, e))?);
    let c_race = cols.require(path, &["race"])?;
    let c_charge = cols.require(path, &["c_charge_degree"])?;
    let c_priors = cols.require(path, &["priors_count"])?;
    let c_age = cols.require(path, &["age_cat"])?;
    let c_y = cols.require(path, &["two_year_recid"])?;
    let filter_cols = if opts.screening_filters {
        Some((
            cols.require(path, &["days_b_screening_arrest"])?,
            cols.require(path, &["is_recid"])?,
            cols.require(path, &["score_text"])?,
        ))
    } else {
        None
    };

    let (mut xs, mut ys, mut ds) = (Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let race = field(&rec, c_race, row, path)?;
        let Some(d) = COMPAS_RACES.iter().position(|r| *r == race) else {
            continue;
        };
        let charge = field(&rec, c_charge, row, path)?;
        if let Some((c_days, c_recid, c_score)) = filter_cols {
            let days = field(&rec, c_days, row, path)?;
            if days.is_empty() || parse_num(days, row, "days_b_screening_arrest", path)?.abs() > 30.0 {
                continue;
            }
            if field(&rec, c_recid, row, path)? == "-1" || charge == "O" || field(&rec, c_score, row, path)? == "N/A" {
                continue;
            }
        }
        let Some(charge) = COMPAS_CHARGES.iter().position(|c| *c == charge) else {
            continue;
        };
        let priors = parse_num(field(&rec, c_priors, row, path)?, row, "priors_count", path)?;
        let age_text = field(&rec, c_age, row, path)?;
        let age = COMPAS_AGES
            .iter()
            .position(|a| *a == age_text)
            .ok_or_else(|| ingestion(path, format!("row {row}: unknown age category {age_text:?}")))?;
        let y = match field(&rec, c_y, row, path)? {
            "0" => 0,
            "1" => 1,
            other => return Err(ingestion(path, format!("row {row}: two_year_recid {other:?}"))),
        };
        xs.push(compas_x(charge, priors_bin(priors.max(0.0) as u32), age));
        ys.push(y);
        ds.push(d);
    }
    if xs.is_empty() {
        return Err(ingestion(path, "no rows left after filtering"));
    }
    DiscreteDataset::new(
        xs,
        ys,
        ds,
        compas_x_encoder(),
        CategoryEncoder::new(["0", "1"]).expect("distinct"),
        CategoryEncoder::new(COMPAS_RACES).expect("distinct"),
    )
}

pub const ADULT_DECADES: usize = 9;
pub const ADULT_EDUCATION_YEARS: usize = 16;

/// Age decade `floor(age / 10)` clamped to `1..=9`.
pub fn age_decade(age: f64) -> usize {
    ((age / 10.0).floor() as i64).clamp(1, ADULT_DECADES as i64) as usize
}

pub fn adult_x(decade: usize, education_years: usize) -> usize {
    (decade - 1) * ADULT_EDUCATION_YEARS + (education_years - 1)
}

fn adult_x_encoder() -> CategoryEncoder {
    let names = (1..=ADULT_DECADES)
        .flat_map(|dec| (1..=ADULT_EDUCATION_YEARS).map(move |e| format!("age{dec}0|edu{e}")));
    CategoryEncoder::new(names).expect("distinct")
}

/// Income above 50K, accepting the `.`-suffixed labels of the UCI test file.
fn adult_income(label: &str) -> Option<usize> {
    match label.trim_end_matches('.') {
        ">50K" => Some(1),
        "<=50K" => Some(0),
        _ => None,
    }
}

/// Adult census income: X = (age decade, education years), Y = income > 50K,
/// D = sex. Reads both the raw 15-column UCI format and headered one-hot exports.
pub fn load_adult(path: impl AsRef<Path>) -> Result<DiscreteDataset> {
    let path = path.as_ref();
    let mut probe = csv_reader(path, false)?;
    let first = probe
        .records()
        .next()
        .ok_or_else(|| ingestion(path, "empty file"))?
        .map_err(|e| csv_error(path, e))?;
    let headerless = first.get(0).is_some_and(|s| s.parse::<f64>().is_ok());

    let mut rows: Vec<(f64, f64, usize, usize)> = Vec::new();
    if headerless {
        let mut rdr = csv_reader(path, false)?;
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| csv_error(path, e))?;
            if rec.len() == 1 && rec[0].is_empty() {
                continue;
            }
            if rec.len() < 15 {
                return Err(ingestion(path, format!("row {row} has {} fields, expected 15", rec.len())));
            }
            let sex = match &rec[9] {
                "Female" => 0,
                "Male" => 1,
                other => return Err(ingestion(path, format!("row {row}: sex {other:?}"))),
            };
            let y = adult_income(&rec[14])
                .ok_or_else(|| ingestion(path, format!("row {row}: income {:?}", &rec[14])))?;
            rows.push((
                parse_num(&rec[0], row, "age", path)?,
                parse_num(&rec[4], row, "education-num", path)?,
                y,
                sex,
            ));
        }
    } else {
        let mut rdr = csv_reader(path, true)?;
        let cols = Columns::new(rdr.headers().map_err(|e| csv_error(path, e))?);
        let c_age = cols.require(path, &["age"])?;
        let c_edu = cols.require(path, &["education-num", "education_num", "educational-num"])?;
        let sex_onehot = cols.find(&["sex_Male"]);
        let c_sex = match sex_onehot {
            Some(c) => c,
            None => cols.require(path, &["sex", "gender"])?,
        };
        let income_onehot = cols.find(&["salary_>50K", "income_>50K"]);
        let c_income = match income_onehot {
            Some(c) => c,
            None => cols.require(path, &["income", "salary", "class"])?,
        };
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2;
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let sex_text = field(&rec, c_sex, row, path)?;
            let sex = match (sex_onehot.is_some(), sex_text) {
                (true, "1") | (false, "Male") => 1,
                (true, "0") | (false, "Female") => 0,
                (_, other) => return Err(ingestion(path, format!("row {row}: sex {other:?}"))),
            };
            let inc = field(&rec, c_income, row, path)?;
            let y = if income_onehot.is_some() {
                match inc {
                    "1" => Some(1),
                    "0" => Some(0),
                    _ => None,
                }
            } else {
                adult_income(inc)
            }
            .ok_or_else(|| ingestion(path, format!("row {row}: income {inc:?}")))?;
            rows.push((
                parse_num(field(&rec, c_age, row, path)?, row, "age", path)?,
                parse_num(field(&rec, c_edu, row, path)?, row, "education-num", path)?,
                y,
                sex,
            ));
        }
    }

    let (mut xs, mut ys, mut ds) = (Vec::new(), Vec::new(), Vec::new());
    for (i, (age, edu, y, d)) in rows.into_iter().enumerate() {
        let e = edu.round() as i64;
        if !(1..=ADULT_EDUCATION_YEARS as i64).contains(&e) {
            return Err(ingestion(path, format!("record {}: education-num {edu} outside 1..=16", i + 1)));
        }
        xs.push(adult_x(age_decade(age), e as usize));
        ys.push(y);
        ds.push(d);
    }
    DiscreteDataset::new(
        xs,
        ys,
        ds,
        adult_x_encoder(),
        CategoryEncoder::new(["<=50K", ">50K"]).expect("distinct"),
        CategoryEncoder::new(["Female", "Male"]).expect("distinct"),
    )
}

/// Non-predictive columns of the Communities and Crime file.
const CC_IDENTIFIERS: [&str; 5] = ["state", "county", "community", "communityname", "fold"];
pub const CC_SENSITIVE: &str = "racepctblack";
pub const CC_TARGET: &str = "ViolentCrimesPerPop";

/// Communities and Crime with the columns that were removed along the way.
#[derive(Debug, Clone)]
pub struct CcData {
    pub data: ContinuousDataset,
    /// Columns dropped because they contain missing markers.
    pub dropped_missing: Vec<String>,
    /// Identifier and derived columns that are never used as features.
    pub dropped_other: Vec<String>,
}

impl CcData {
    pub fn feature_count(&self) -> usize {
        self.data.x.ncols()
    }
}

fn is_derived_cc_column(name: &str) -> bool {
    CC_IDENTIFIERS.contains(&name) || name.starts_with("state_") || name == ">0.06black" || name == "high_crime"
}

/// Communities and Crime from a headered CSV. Returns raw (unstandardized)
/// features; [`split_continuous`] standardizes with training statistics.
pub fn load_cc(path: impl AsRef<Path>) -> Result<CcData> {
    let path = path.as_ref();
    let mut rdr = csv_reader(path, true)?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let records: Vec<csv::StringRecord> = rdr
        .records()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_error(path, e))?;
    cc_from_records(path, &headers, &records)
}

/// Communities and Crime from the headerless UCI data file and its names
/// file (`@attribute <name> <type>` lines).
pub fn load_cc_with_names(data_path: impl AsRef<Path>, names_path: impl AsRef<Path>) -> Result<CcData> {
    let (data_path, names_path) = (data_path.as_ref(), names_path.as_ref());
    let mut text = String::new();
    open_text(names_path)?.read_to_string(&mut text)?;
    let headers: Vec<String> = text
        .lines()
        .filter_map(|l| {
            let mut parts = l.split_whitespace();
            match parts.next() {
                Some(tag) if tag.eq_ignore_ascii_case("@attribute") => parts.next().map(str::to_string),
                _ => None,
            }
        })
        .collect();
    if headers.is_empty() {
        return Err(ingestion(names_path, "no @attribute lines"));
    }
    let mut rdr = csv_reader(data_path, false)?;
    let records: Vec<csv::StringRecord> = rdr
        .records()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_error(data_path, e))?;
    cc_from_records(data_path, &headers, &records)
}

fn cc_from_records(path: &Path, headers: &[String], records: &[csv::StringRecord]) -> Result<CcData> {
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ingestion(path, format!("missing required column {name:?}")))
    };
    let c_d = find(CC_SENSITIVE)?;
    let c_y = find(CC_TARGET)?;
    if records.is_empty() {
        return Err(ingestion(path, "no data rows"));
    }
    for (i, rec) in records.iter().enumerate() {
        if rec.len() != headers.len() {
            return Err(ingestion(
                path,
                format!("row {} has {} fields, header has {}", i + 1, rec.len(), headers.len()),
            ));
        }
    }
    let missing = |j: usize| records.iter().any(|r| matches!(&r[j], "?" | ""));

    let mut dropped_missing = Vec::new();
    let mut dropped_other = Vec::new();
    let mut feature_cols = Vec::new();
    for (j, name) in headers.iter().enumerate() {
        if j == c_d || j == c_y {
            continue;
        }
        if is_derived_cc_column(name) {
            dropped_other.push(name.clone());
        } else if missing(j) {
            dropped_missing.push(name.clone());
        } else {
            feature_cols.push(j);
        }
    }
    for (j, name) in [(c_d, CC_SENSITIVE), (c_y, CC_TARGET)] {
        if missing(j) {
            return Err(ingestion(path, format!("column {name} has missing values")));
        }
    }

    let n = records.len();
    let cell = |i: usize, j: usize| parse_num(&records[i][j], i + 1, &headers[j], path);
    let mut x = DMatrix::zeros(n, feature_cols.len());
    let mut y = DVector::zeros(n);
    let mut d = DMatrix::zeros(n, 1);
    for i in 0..n {
        for (k, &j) in feature_cols.iter().enumerate() {
            x[(i, k)] = cell(i, j)?;
        }
        y[i] = cell(i, c_y)?;
        d[(i, 0)] = cell(i, c_d)?;
    }
    Ok(CcData {
        data: ContinuousDataset {
            x,
            y,
            d,
            feature_names: feature_cols.iter().map(|&j| headers[j].clone()).collect(),
            standardization: None,
        },
        dropped_missing,
        dropped_other,
    })
}

/// Planted structures for discrete test data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiscreteSynth {
    /// Y depends on X through a noisy channel, D is independent of X and Y.
    Independent { card_x: usize, card_y: usize, card_d: usize },
    /// Y depends on X and D equals Y.
    Confounded { card_x: usize, card_y: usize },
    /// X = (Y, D) for independent fair coins, `x = 2y + d`. With `balanced`
    /// the four cells appear exactly `n / 4` times each.
    Coins { balanced: bool },
    /// X = (A, B) with Y driven by A and D driven by B; `bias` in `[0, 1]`
    /// sets how strongly B tracks D and Y.
    PlantedBias { card_a: usize, card_b: usize, bias: f64 },
    /// Y first, then X and D drawn independently given Y.
    ConditionallyIndependent { card_x: usize, card_y: usize, card_d: usize },
}

/// Random conditional table `rows × cols`, each row a probability vector.
fn random_channel(rows: usize, cols: usize, rng: &mut ChaCha8Rng, sharpness: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let w: Vec<f64> = (0..cols).map(|_| rng.random::<f64>().powf(sharpness) + 1e-3).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

fn draw(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

pub fn synth_discrete(spec: &DiscreteSynth, n: usize, seed: u64) -> Result<DiscreteDataset> {
    if n == 0 {
        return input("sample size must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let check = |c: &[usize]| -> Result<()> {
        if c.iter().any(|&v| v < 2) {
            return input(format!("alphabet sizes must be at least 2, got {c:?}"));
        }
        Ok(())
    };
    let (mut xs, mut ys, mut ds) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let cards = match *spec {
        DiscreteSynth::Independent { card_x, card_y, card_d } => {
            check(&[card_x, card_y, card_d])?;
            let chan = random_channel(card_x, card_y, &mut rng, 3.0);
            for _ in 0..n {
                let x = rng.random_range(0..card_x);
                xs.push(x);
                ys.push(draw(&chan[x], &mut rng));
                ds.push(rng.random_range(0..card_d));
            }
            Cardinalities { x: card_x, y: card_y, d: card_d }
        }
        DiscreteSynth::Confounded { card_x, card_y } => {
            check(&[card_x, card_y])?;
            let chan = random_channel(card_x, card_y, &mut rng, 3.0);
            for _ in 0..n {
                let x = rng.random_range(0..card_x);
                let y = draw(&chan[x], &mut rng);
                xs.push(x);
                ys.push(y);
                ds.push(y);
            }
            Cardinalities { x: card_x, y: card_y, d: card_y }
        }
        DiscreteSynth::Coins { balanced } => {
            if balanced {
                if n % 4 != 0 {
                    return input(format!("balanced coins need n divisible by 4, got {n}"));
                }
                for cell in 0..4 {
                    for _ in 0..n / 4 {
                        xs.push(cell);
                        ys.push(cell / 2);
                        ds.push(cell % 2);
                    }
                }
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                xs = order.iter().map(|&i| xs[i]).collect();
                ys = order.iter().map(|&i| ys[i]).collect();
                ds = order.iter().map(|&i| ds[i]).collect();
            } else {
                for _ in 0..n {
                    let (y, d) = (rng.random_range(0..2), rng.random_range(0..2));
                    xs.push(2 * y + d);
                    ys.push(y);
                    ds.push(d);
                }
            }
            Cardinalities { x: 4, y: 2, d: 2 }
        }
        DiscreteSynth::PlantedBias { card_a, card_b, bias } => {
            check(&[card_a, card_b])?;
            if !(0.0..=1.0).contains(&bias) {
                return input(format!("bias must be in [0, 1], got {bias}"));
            }
            for _ in 0..n {
                let d = rng.random_range(0..2);
                let a = rng.random_range(0..card_a);
                // B leans towards the top or bottom of its range according to D
                let b = if rng.random_bool(bias) {
                    if d == 1 {
                        rng.random_range(card_b / 2..card_b)
                    } else {
                        rng.random_range(0..card_b.div_ceil(2))
                    }
                } else {
                    rng.random_range(0..card_b)
                };
                let score = (a as f64 + 0.5) / card_a as f64 * 0.7 + (b as f64 + 0.5) / card_b as f64 * 0.3;
                let y = usize::from(rng.random_bool(score.clamp(0.02, 0.98)));
                xs.push(a * card_b + b);
                ys.push(y);
                ds.push(d);
            }
            Cardinalities { x: card_a * card_b, y: 2, d: 2 }
        }
        DiscreteSynth::ConditionallyIndependent { card_x, card_y, card_d } => {
            check(&[card_x, card_y, card_d])?;
            let x_given_y = random_channel(card_y, card_x, &mut rng, 2.0);
            let d_given_y = random_channel(card_y, card_d, &mut rng, 2.0);
            for _ in 0..n {
                let y = rng.random_range(0..card_y);
                xs.push(draw(&x_given_y[y], &mut rng));
                ys.push(y);
                ds.push(draw(&d_given_y[y], &mut rng));
            }
            Cardinalities { x: card_x, y: card_y, d: card_d }
        }
    };
    DiscreteDataset::from_indices(xs, ys, ds, cards)
}

/// Joint `P_A P_B (1 + a E)` whose χ²-divergence from the product of its
/// marginals equals `eps`, with a random marginal-preserving direction `E`.
pub fn eps_dependent_joint(pa: &[f64], pb: &[f64], eps: f64, seed: u64) -> Result<JointPmf> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return input(format!("eps must be nonnegative, got {eps}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = DMatrix::from_fn(pa.len(), pb.len(), |_, _| StandardNormal.sample(&mut rng));
    let e = crate::probability::centered_direction(pa, pb, &raw)?;
    let norm2: f64 = (0..pa.len())
        .flat_map(|i| (0..pb.len()).map(move |j| (i, j)))
        .map(|(i, j)| pa[i] * pb[j] * e[(i, j)].powi(2))
        .sum();
    if norm2 <= 0.0 {
        return input("degenerate perturbation direction");
    }
    perturbed_joint(pa, pb, &e, (eps / norm2).sqrt())
}

/// i.i.d. samples `(a, b)` from a joint table.
pub fn sample_joint(joint: &JointPmf, n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: Vec<f64> = joint.rows().into_iter().flatten().collect();
    let b = joint.card_b();
    (0..n)
        .map(|_| {
            let k = draw(&flat, &mut rng);
            (k / b, k % b)
        })
        .collect()
}

/// Planted structures for continuous test data. Every variant has `dim`
/// features (at least 2), standard-normal unless stated otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContinuousSynth {
    /// `y = x₁ + noise·ε`, `d = x₂`.
    Independent { dim: usize, noise: f64 },
    /// `y = x₁ + noise·ε`, `d = y`.
    Confounded { dim: usize, noise: f64 },
    /// `y ~ N(0,1)`, `x₁ = y + noise·ε₁`, `d = y + noise·ε₂`, so `d ⊥ x | y`.
    ConditionallyIndependent { dim: usize, noise: f64 },
    /// Latent `z, d ~ N(0,1)`, `x₁ = z + ε₁`, `x₂ = d + noise·ε₂`,
    /// `y = z + strength·d + noise·ε₃`. Because `x₁` only proxies `z`, the best
    /// predictor leans on `x₂` and depends on `d` even given `y`.
    PlantedBias { dim: usize, noise: f64, strength: f64 },
}

pub fn synth_continuous(spec: &ContinuousSynth, n: usize, seed: u64) -> Result<ContinuousDataset> {
    let dim = match *spec {
        ContinuousSynth::Independent { dim, .. }
        | ContinuousSynth::Confounded { dim, .. }
        | ContinuousSynth::ConditionallyIndependent { dim, .. }
        | ContinuousSynth::PlantedBias { dim, .. } => dim,
    };
    if dim < 2 || n < 2 {
        return input(format!("need dim >= 2 and n >= 2, got dim {dim}, n {n}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
    let mut x = DMatrix::from_fn(n, dim, |_, _| normal());
    let mut y = DVector::zeros(n);
    let mut d = DMatrix::zeros(n, 1);
    for i in 0..n {
        match *spec {
            ContinuousSynth::Independent { noise, .. } => {
                y[i] = x[(i, 0)] + noise * normal();
                d[(i, 0)] = x[(i, 1)];
            }
            ContinuousSynth::Confounded { noise, .. } => {
                y[i] = x[(i, 0)] + noise * normal();
                d[(i, 0)] = y[i];
            }
            ContinuousSynth::ConditionallyIndependent { noise, .. } => {
                y[i] = normal();
                x[(i, 0)] = y[i] + noise * normal();
                d[(i, 0)] = y[i] + noise * normal();
            }
            ContinuousSynth::PlantedBias { noise, strength, .. } => {
                let (z, di) = (x[(i, 0)], normal());
                x[(i, 0)] = z + normal();
                x[(i, 1)] = di + noise * normal();
                y[i] = z + strength * di + noise * normal();
                d[(i, 0)] = di;
            }
        }
    }
    Ok(ContinuousDataset::from_parts(x, y, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discrete_fair::hgr_k;
    use crate::probability::estimate_joint_from;

    fn fixture(name: &str) -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
    }

    #[test]
    fn compas_fixture() {
        let ds = load_compas(fixture("compas_tiny.csv"), CompasOptions::default()).unwrap();
        assert_eq!(ds.cardinalities(), Cardinalities { x: 18, y: 2, d: 2 });
        // first kept row: F, 5 priors, 25 - 45, African-American, recid 1
        assert_eq!(ds.x[0], compas_x(0, 2, 1));
        assert_eq!(ds.x_encoder.decode(ds.x[0]), Some("F|>3|25 - 45"));
        assert_eq!((ds.y[0], ds.d[0]), (1, 0));
        // Hispanic, far-screened, traffic and unscored rows are excluded
        assert_eq!(ds.len(), 4);
        let unfiltered = load_compas(fixture("compas_tiny.csv"), CompasOptions { screening_filters: false }).unwrap();
        assert_eq!(unfiltered.len(), 8);
    }

    #[test]
    fn compas_missing_column() {
        let err = load_compas(fixture("adult_tiny.data"), CompasOptions::default()).unwrap_err();
        assert!(err.to_string().contains("race"), "{err}");
    }

    #[test]
    fn adult_binning() {
        assert_eq!(age_decade(37.0), 3);
        assert_eq!(age_decade(17.0), 1);
        assert_eq!(age_decade(90.0), 9);
        assert_eq!(age_decade(99.0), 9);
    }

    #[test]
    fn adult_raw_and_headered_agree() {
        let raw = load_adult(fixture("adult_tiny.data")).unwrap();
        let headered = load_adult(fixture("adult_tiny_onehot.csv.gz")).unwrap();
        assert_eq!(raw.x, headered.x);
        assert_eq!(raw.y, headered.y);
        assert_eq!(raw.d, headered.d);
        assert_eq!(raw.cardinalities(), Cardinalities { x: 144, y: 2, d: 2 });
        // 39, 13 years, Male, <=50K
        assert_eq!(raw.x[0], adult_x(3, 13));
        assert_eq!((raw.y[0], raw.d[0]), (0, 1));
        // ">50K." test-file label
        assert_eq!(raw.y[3], 1);
    }

    #[test]
    fn cc_fixture_drops_missing_columns() {
        let cc = load_cc(fixture("cc_tiny.csv")).unwrap();
        assert_eq!(cc.dropped_missing, vec!["OtherPerCap".to_string()]);
        assert!(cc.dropped_other.contains(&"communityname".to_string()));
        assert_eq!(cc.data.feature_names, vec!["population", "householdsize", "medIncome"]);
        assert_eq!(cc.data.d[(1, 0)], 0.5);
        assert_eq!(cc.data.y[2], 0.3);

        let names = load_cc_with_names(fixture("cc_tiny.data"), fixture("cc_tiny.names")).unwrap();
        assert_eq!(names.data.x, cc.data.x);
        assert_eq!(names.data.y, cc.data.y);
    }

    #[test]
    fn cc_malformed_cell_reports_location() {
        let err = load_cc(fixture("cc_bad.csv")).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("householdsize"), "{err}");
    }

    #[test]
    fn split_sizes_and_determinism() {
        let (tr, te) = SplitSpec::fraction(0.8, 3).indices(100).unwrap();
        assert_eq!((tr.len(), te.len()), (80, 20));
        assert_eq!(SplitSpec::fraction(0.8, 3).indices(100).unwrap(), (tr.clone(), te.clone()));
        let mut all: Vec<usize> = tr.into_iter().chain(te).collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());

        let (tr, te) = SplitSpec::counts(1794, 200, 0).indices(1994).unwrap();
        assert_eq!((tr.len(), te.len()), (1794, 200));
        assert!(SplitSpec::counts(1794, 200, 0).indices(1993).is_err());
        assert!(SplitSpec::fraction(1.0, 0).indices(10).is_err());
        assert!(SplitSpec::fraction(0.0, 0).indices(10).is_err());
    }

    #[test]
    fn standardization_uses_train_rows_only() {
        let data = synth_continuous(&ContinuousSynth::Independent { dim: 3, noise: 0.1 }, 200, 4).unwrap();
        let (train, test) = split_continuous(&data, &SplitSpec::fraction(0.8, 5)).unwrap();
        for col in train.x.column_iter() {
            let m = col.mean();
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-6);
        }
        // perturbing test rows leaves the training statistics alone
        let (tr_idx, te_idx) = SplitSpec::fraction(0.8, 5).indices(200).unwrap();
        let mut shifted = data.clone();
        for &i in &te_idx {
            shifted.x[(i, 0)] += 100.0;
        }
        let (train2, _) = split_continuous(&shifted, &SplitSpec::fraction(0.8, 5)).unwrap();
        assert_eq!(train2.standardization, train.standardization);
        assert_eq!(tr_idx.len(), train.len());
        assert_eq!(test.len(), 40);
    }

    #[test]
    fn independent_generator_has_no_dependence() {
        let spec = DiscreteSynth::Independent { card_x: 4, card_y: 2, card_d: 2 };
        let ds = synth_discrete(&spec, 100_000, 6).unwrap();
        let j = estimate_joint_from(&ds.x, &ds.d, 4, 2, 0.0).unwrap();
        assert!(hgr_k(&j, 1).unwrap() < 0.02);
    }

    #[test]
    fn eps_dependence_has_requested_divergence() {
        let pa = [0.2, 0.3, 0.5];
        let pb = [0.4, 0.6];
        let j = eps_dependent_joint(&pa, &pb, 0.05, 7).unwrap();
        assert!((j.chi_square_divergence() - 0.05).abs() < 1e-12);
        let samples = sample_joint(&j, 200_000, 8);
        let est = crate::probability::estimate_joint(&samples, 3, 2, 0.0).unwrap();
        assert!((est.chi_square_divergence() - 0.05).abs() < 0.2 * 0.05);
    }

    #[test]
    fn coins_are_balanced() {
        let ds = synth_discrete(&DiscreteSynth::Coins { balanced: true }, 40, 9).unwrap();
        for cell in 0..4 {
            assert_eq!(ds.x.iter().filter(|&&x| x == cell).count(), 10);
        }
        assert!(ds.x.iter().zip(&ds.y).zip(&ds.d).all(|((x, y), d)| *x == 2 * y + d));
        assert!(synth_discrete(&DiscreteSynth::Coins { balanced: true }, 42, 9).is_err());
    }

    #[test]
    fn generator_spec_errors() {
        assert!(synth_discrete(&DiscreteSynth::Confounded { card_x: 1, card_y: 2 }, 10, 0).is_err());
        assert!(synth_discrete(&DiscreteSynth::PlantedBias { card_a: 3, card_b: 3, bias: 2.0 }, 10, 0).is_err());
        assert!(synth_continuous(&ContinuousSynth::Independent { dim: 1, noise: 0.1 }, 10, 0).is_err());
    }

    #[test]
    fn export_round_trips_through_csv() {
        let ds = synth_discrete(&DiscreteSynth::Coins { balanced: false }, 20, 10).unwrap();
        let dir = std::env::temp_dir().join(format!("fairhgr-export-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("coins.csv");
        ds.export_csv(&path).unwrap();
        let mut rdr = csv::Reader::from_path(&path).unwrap();
        assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), ["x", "y", "d", "x_label", "y_label", "d_label"]);
        let xs: Vec<usize> = rdr.records().map(|r| r.unwrap()[0].parse().unwrap()).collect();
        assert_eq!(xs, ds.x);
        let enc: serde_json::Value =
            serde_json::from_reader(File::open(dir.join("coins.csv.encoders.json")).unwrap()).unwrap();
        assert_eq!(enc["x"].as_array().unwrap().len(), 4);

        let cds = synth_continuous(&ContinuousSynth::Confounded { dim: 2, noise: 0.5 }, 5, 11).unwrap();
        let cpath = dir.join("cont.csv");
        cds.export_csv(&cpath).unwrap();
        let mut rdr = csv::Reader::from_path(&cpath).unwrap();
        let first = rdr.records().next().unwrap().unwrap();
        assert_eq!(first[2].parse::<f64>().unwrap(), cds.y[0]);
        std::fs::remove_dir_all(&dir).ok();
    }
}
