//! Soft-HGR penalty and the alternating minimax training loops for continuous data.
//!
//! A model is a feature net `f: x ↦ R^m` followed by a linear-ish head `T`.
//! Critic pairs `(g, h)` estimate the dependence between `f(x)` and the
//! sensitive side by ascending the Soft-HGR objective; the model descends
//! `MSE + λ · penalty` with the critics frozen.

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::ContinuousDataset;
use crate::error::{input, Error, Result};
use crate::nn::{GradientTape, Mlp, Sgd};
use crate::Criterion;

const STREAM_MODEL: u64 = 0;
const STREAM_CRITIC: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_FEW_SHOT_CRITIC: u64 = 3;

fn centered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = m.clone();
    for mut col in c.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    c
}

/// Soft-HGR value together with its gradients with respect to `g_out` and `h_out`.
pub fn soft_hgr_with_grad(g_out: &DMatrix<f64>, h_out: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    let n = g_out.nrows();
    if h_out.nrows() != n || g_out.ncols() != h_out.ncols() {
        return input(format!(
            "critic outputs have shapes {:?} and {:?}",
            g_out.shape(),
            h_out.shape()
        ));
    }
    if n < 2 {
        return input(format!("soft-HGR needs at least 2 samples, got {n}"));
    }
    let scale = 1.0 / (n as f64 - 1.0);
    let gc = centered(g_out);
    let hc = centered(h_out);
    let cov_g = gc.transpose() * &gc * scale;
    let cov_h = hc.transpose() * &hc * scale;
    let cross = gc.dot(&hc) * scale;
    let value = cross - 0.5 * (&cov_g * &cov_h).trace();
    let d_g = (&hc - &gc * &cov_h) * scale;
    let d_h = (&gc - &hc * &cov_g) * scale;
    Ok((value, d_g, d_h))
}

/// `Ê[gᵀh] − ½ tr(cov(g) cov(h))` on centered columns with `1/(n−1)` normalization.
pub fn soft_hgr_value(g_out: &DMatrix<f64>, h_out: &DMatrix<f64>) -> Result<f64> {
    soft_hgr_with_grad(g_out, h_out).map(|(v, _, _)| v)
}

/// Critic networks `g` (on model features) and `h` (on the sensitive side).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticPair {
    pub g: Mlp,
    pub h: Mlp,
}

impl CriticPair {
    pub fn new(feature_dim: usize, sensitive_dim: usize, hidden: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            g: Mlp::new(&[feature_dim, hidden, k], rng)?,
            h: Mlp::new(&[sensitive_dim, hidden, k], rng)?,
        })
    }

    pub fn value(&self, features: &DMatrix<f64>, sensitive: &DMatrix<f64>) -> Result<f64> {
        soft_hgr_value(&self.g.forward(features)?, &self.h.forward(sensitive)?)
    }

    /// Gradient tapes for both critics plus the gradient flowing back into `features`.
    fn gradients(
        &self,
        features: &DMatrix<f64>,
        sensitive: &DMatrix<f64>,
    ) -> Result<(f64, GradientTape, GradientTape)> {
        let g_trace = self.g.forward_traced(features)?;
        let h_trace = self.h.forward_traced(sensitive)?;
        let (v, d_g, d_h) = soft_hgr_with_grad(g_trace.output(), h_trace.output())?;
        Ok((v, self.g.backward_traced(&g_trace, &d_g)?, self.h.backward_traced(&h_trace, &d_h)?))
    }

    /// One gradient-ascent step on the Soft-HGR objective; returns the value
    /// before the step.
    pub fn ascend(&mut self, features: &DMatrix<f64>, sensitive: &DMatrix<f64>, opt: &mut CriticOptim) -> Result<f64> {
        let (v, mut tg, mut th) = self.gradients(features, sensitive)?;
        tg.scale(-1.0);
        th.scale(-1.0);
        opt.g.step(&mut self.g, &tg);
        opt.h.step(&mut self.h, &th);
        Ok(v)
    }

    /// Full-batch ascent on fixed inputs; returns the final value.
    pub fn fit(&mut self, features: &DMatrix<f64>, sensitive: &DMatrix<f64>, steps: usize, lr: f64, momentum: f64) -> Result<f64> {
        let mut opt = CriticOptim::new(lr, momentum);
        for _ in 0..steps {
            self.ascend(features, sensitive, &mut opt)?;
        }
        self.value(features, sensitive)
    }
}

/// Optimizer state for one critic pair.
#[derive(Debug, Clone)]
pub struct CriticOptim {
    g: Sgd,
    h: Sgd,
}

impl CriticOptim {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            g: Sgd::new(lr, momentum),
            h: Sgd::new(lr, momentum),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_model: f64,
    pub lr_critic: f64,
    pub critic_steps: usize,
    /// Output dimension of the critics.
    pub k: usize,
    pub seed: u64,
    pub hidden: usize,
    /// Width `m` of the learned representation `f(x)`.
    pub feature_dim: usize,
    pub critic_hidden: usize,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr_model: 1e-3,
            lr_critic: 1e-2,
            critic_steps: 5,
            k: 1,
            seed: 0,
            hidden: 50,
            feature_dim: 8,
            critic_hidden: 16,
            momentum: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.critic_steps == 0 {
            problems.push("critic_steps must be at least 1".to_string());
        }
        if self.batch_size < 2 {
            problems.push("batch_size must be at least 2".to_string());
        }
        for (name, v) in [("lr_model", self.lr_model), ("lr_critic", self.lr_critic)] {
            if !(v.is_finite() && v >= 0.0) {
                problems.push(format!("{name} must be a nonnegative number"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push("momentum must be in [0, 1)".to_string());
        }
        if self.k == 0 || self.hidden == 0 || self.feature_dim == 0 || self.critic_hidden == 0 {
            problems.push("network widths and k must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            input(problems.join("; "))
        }
    }
}

/// Feature net `f` and prediction head `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousFairModel {
    pub feature_net: Mlp,
    pub head: Mlp,
    pub lambda: f64,
    pub criterion: Criterion,
}

impl ContinuousFairModel {
    pub fn new(input_dim: usize, cfg: &TrainConfig, lambda: f64, criterion: Criterion) -> Result<Self> {
        let mut rng = stream(cfg.seed, STREAM_MODEL);
        Ok(Self {
            feature_net: Mlp::new(&[input_dim, cfg.hidden, cfg.feature_dim], &mut rng)?,
            head: Mlp::new(&[cfg.feature_dim, 1], &mut rng)?,
            lambda,
            criterion,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_net.output_dim()
    }

    pub fn features(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.feature_net.forward(x)
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        let out = self.head.forward(&self.features(x)?)?;
        Ok(out.column(0).into_owned())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }

    fn is_finite(&self) -> bool {
        self.feature_net.is_finite() && self.head.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mse: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Mean change of the Soft-HGR term across each critic ascent step, per epoch.
    pub critic_gain: Vec<f64>,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Output of a training run. `aborted` is set when a non-finite loss stopped
/// training; `history` then holds the completed epochs.
#[derive(Debug)]
pub struct Trained {
    pub model: ContinuousFairModel,
    pub critics: Vec<CriticPair>,
    pub history: History,
    pub aborted: Option<Error>,
}

impl Trained {
    pub fn into_result(self) -> Result<(ContinuousFairModel, History)> {
        match self.aborted {
            Some(e) => Err(e),
            None => Ok((self.model, self.history)),
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Sensitive-side critic inputs for each penalty term, with the sign of the term.
fn sensitive_inputs(criterion: Criterion, d: &DMatrix<f64>, y: &DVector<f64>) -> Vec<(DMatrix<f64>, f64)> {
    let y_col = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
    match criterion {
        Criterion::Independence => vec![(d.clone(), 1.0)],
        Criterion::Separation => {
            let mut dy = DMatrix::zeros(d.nrows(), d.ncols() + 1);
            dy.columns_mut(0, d.ncols()).copy_from(d);
            dy.set_column(d.ncols(), y);
            vec![(dy, 1.0), (y_col, -1.0)]
        }
    }
}

fn new_critics(criterion: Criterion, data_d_dim: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<CriticPair>> {
    let dims: Vec<usize> = match criterion {
        Criterion::Independence => vec![data_d_dim],
        Criterion::Separation => vec![data_d_dim + 1, 1],
    };
    dims.into_iter()
        .map(|q| CriticPair::new(cfg.feature_dim, q, cfg.critic_hidden, cfg.k, rng))
        .collect()
}

/// Batch index sets of roughly `batch_size`; a trailing batch of one row is
/// merged into its predecessor so covariances stay defined.
fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().expect("checked");
        out.last_mut().expect("checked").extend(tail);
    }
    out
}

fn mse(pred: &DVector<f64>, y: &DVector<f64>) -> f64 {
    (pred - y).norm_squared() / y.len() as f64
}

/// Penalty `Σ sign · softHGR` on a fixed representation.
fn penalty_value(critics: &[CriticPair], fx: &DMatrix<f64>, sides: &[(DMatrix<f64>, f64)]) -> Result<f64> {
    let mut total = 0.0;
    for (pair, (s, sign)) in critics.iter().zip(sides) {
        total += sign * pair.value(fx, s)?;
    }
    Ok(total)
}

struct Step {
    critic_gain: f64,
}

/// Mutable training state shared by the full training loop and few-shot adaptation.
struct Minimax<'a> {
    model: &'a mut ContinuousFairModel,
    critics: &'a mut [CriticPair],
    critic_opt: Vec<CriticOptim>,
    f_opt: Sgd,
    t_opt: Sgd,
    lambda: f64,
    critic_steps: usize,
}

impl Minimax<'_> {
    /// `critic_steps` ascent steps for every critic pair, then one descent
    /// step of `MSE + λ · penalty` for `f` and `T`.
    fn step(&mut self, x: &DMatrix<f64>, y: &DVector<f64>, sides: &[(DMatrix<f64>, f64)]) -> Result<Step> {
        let n = x.nrows() as f64;
        let f_trace = self.model.feature_net.forward_traced(x)?;
        let fx = f_trace.output();

        let mut gain = 0.0;
        for ((pair, opt), (s, _)) in self.critics.iter_mut().zip(&mut self.critic_opt).zip(sides) {
            let mut prev = pair.ascend(fx, s, opt)?;
            for _ in 1..self.critic_steps {
                let v = pair.ascend(fx, s, opt)?;
                gain += v - prev;
                prev = v;
            }
            gain += pair.value(fx, s)? - prev;
        }
        gain /= (self.critic_steps * self.critics.len().max(1)) as f64;

        let t_trace = self.model.head.forward_traced(fx)?;
        let pred = t_trace.output();
        let resid = DMatrix::from_fn(pred.nrows(), 1, |i, _| pred[(i, 0)] - y[i]);
        let batch_mse = resid.norm_squared() / n;
        let t_tape = self.model.head.backward_traced(&t_trace, &(&resid * (2.0 / n)))?;
        let mut d_fx = t_tape.input.clone();

        let mut penalty = 0.0;
        for (pair, (s, sign)) in self.critics.iter().zip(sides) {
            let (v, g_tape, _) = pair.gradients(fx, s)?;
            penalty += sign * v;
            if self.lambda != 0.0 {
                d_fx += &g_tape.input * (self.lambda * sign);
            }
        }
        let f_tape = self.model.feature_net.backward_traced(&f_trace, &d_fx)?;
        if !(batch_mse.is_finite() && penalty.is_finite() && f_tape.is_finite() && t_tape.is_finite()) {
            return Err(Error::Computation(format!(
                "non-finite objective (mse {batch_mse}, penalty {penalty})"
            )));
        }
        self.t_opt.step(&mut self.model.head, &t_tape);
        self.f_opt.step(&mut self.model.feature_net, &f_tape);
        Ok(Step { critic_gain: gain })
    }
}

fn check_data(data: &ContinuousDataset) -> Result<()> {
    let n = data.x.nrows();
    if n < 2 || data.y.len() != n || data.d.nrows() != n {
        return input(format!(
            "dataset needs matching rows and n >= 2 (x {}, y {}, d {})",
            n,
            data.y.len(),
            data.d.nrows()
        ));
    }
    Ok(())
}

/// Minimax training of `MSE(T(f(x)), y) + λ · penalty`.
pub fn train(data: &ContinuousDataset, criterion: Criterion, lambda: f64, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    check_data(data)?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return input(format!("lambda must be >= 0, got {lambda}"));
    }
    let mut model = ContinuousFairModel::new(data.x.ncols(), cfg, lambda, criterion)?;
    let mut critics = new_critics(criterion, data.d.ncols(), cfg, &mut stream(cfg.seed, STREAM_CRITIC))?;
    let mut shuffle_rng = stream(cfg.seed, STREAM_SHUFFLE);
    let all_sides = sensitive_inputs(criterion, &data.d, &data.y);

    let mut history = History::default();
    let mut aborted = None;
    let mut order: Vec<usize> = (0..data.x.nrows()).collect();
    {
        let mut mm = Minimax {
            model: &mut model,
            critics: &mut critics,
            critic_opt: (0..all_sides.len()).map(|_| CriticOptim::new(cfg.lr_critic, cfg.momentum)).collect(),
            f_opt: Sgd::new(cfg.lr_model, cfg.momentum),
            t_opt: Sgd::new(cfg.lr_model, cfg.momentum),
            lambda,
            critic_steps: cfg.critic_steps,
        };
        'epochs: for epoch in 0..cfg.epochs {
            order.shuffle(&mut shuffle_rng);
            let mut gain = 0.0;
            let parts = batches(&order, cfg.batch_size);
            for idx in &parts {
                let sub = data.select(idx);
                let sides = sensitive_inputs(criterion, &sub.d, &sub.y);
                match mm.step(&sub.x, &sub.y, &sides) {
                    Ok(s) => gain += s.critic_gain,
                    Err(e) => {
                        aborted = Some(Error::Diverged {
                            epoch,
                            message: e.to_string(),
                        });
                        break 'epochs;
                    }
                }
            }
            if !mm.model.is_finite() {
                aborted = Some(Error::Diverged {
                    epoch,
                    message: "parameters became non-finite".into(),
                });
                break;
            }
            let fx = mm.model.features(&data.x)?;
            let pred = mm.model.head.forward(&fx)?.column(0).into_owned();
            let record = EpochRecord {
                epoch,
                mse: mse(&pred, &data.y),
                penalty: penalty_value(mm.critics, &fx, &all_sides)?,
            };
            if !(record.mse.is_finite() && record.penalty.is_finite()) {
                aborted = Some(Error::Diverged {
                    epoch,
                    message: format!("non-finite epoch loss (mse {}, penalty {})", record.mse, record.penalty),
                });
                break;
            }
            debug!("epoch {epoch}: mse {:.6} penalty {:.6}", record.mse, record.penalty);
            history.epochs.push(record);
            history.critic_gain.push(gain / parts.len() as f64);
        }
    }
    Ok(Trained {
        model,
        critics,
        history,
        aborted,
    })
}

pub fn train_independence(data: &ContinuousDataset, lambda: f64, cfg: &TrainConfig) -> Result<Trained> {
    train(data, Criterion::Independence, lambda, cfg)
}

pub fn train_separation(data: &ContinuousDataset, lambda: f64, cfg: &TrainConfig) -> Result<Trained> {
    train(data, Criterion::Separation, lambda, cfg)
}

/// Unregularized baseline: the same loop and seed streams with `λ = 0`.
pub fn train_mse(data: &ContinuousDataset, cfg: &TrainConfig) -> Result<Trained> {
    train(data, Criterion::Independence, 0.0, cfg)
}

/// Settings for post-hoc adaptation with a handful of sensitive-labeled samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FewShotConfig {
    pub steps: usize,
    pub lr_model: f64,
    pub lr_critic: f64,
    pub critic_steps: usize,
    /// Critic pretraining steps on the few-shot batch before the first model update.
    pub critic_warmup: usize,
    pub seed: u64,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            lr_model: 1e-2,
            lr_critic: 5e-2,
            critic_steps: 5,
            critic_warmup: 200,
            seed: 0,
        }
    }
}

/// Runs exactly `steps` regularized updates of a pretrained model using only
/// `few`. Critics start fresh; `steps = 0` returns the model unchanged.
pub fn few_shot_adapt(
    model: &ContinuousFairModel,
    few: &ContinuousDataset,
    criterion: Criterion,
    lambda: f64,
    cfg: &FewShotConfig,
    critic_cfg: &TrainConfig,
) -> Result<ContinuousFairModel> {
    if few.x.nrows() == 0 {
        return input("few-shot set is empty");
    }
    check_data(few)?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return input(format!("lambda must be >= 0, got {lambda}"));
    }
    let mut adapted = model.clone();
    adapted.lambda = lambda;
    adapted.criterion = criterion;
    if cfg.steps == 0 {
        return Ok(model.clone());
    }
    let critic_shape = TrainConfig {
        feature_dim: model.feature_dim(),
        ..critic_cfg.clone()
    };
    let mut critics = new_critics(
        criterion,
        few.d.ncols(),
        &critic_shape,
        &mut stream(cfg.seed, STREAM_FEW_SHOT_CRITIC),
    )?;
    let sides = sensitive_inputs(criterion, &few.d, &few.y);
    let fx = model.features(&few.x)?;
    for (pair, (s, _)) in critics.iter_mut().zip(&sides) {
        pair.fit(&fx, s, cfg.critic_warmup, cfg.lr_critic, 0.0)?;
    }
    let mut mm = Minimax {
        model: &mut adapted,
        critics: &mut critics,
        critic_opt: (0..sides.len()).map(|_| CriticOptim::new(cfg.lr_critic, 0.0)).collect(),
        f_opt: Sgd::new(cfg.lr_model, 0.0),
        t_opt: Sgd::new(cfg.lr_model, 0.0),
        lambda,
        critic_steps: cfg.critic_steps.max(1),
    };
    for i in 0..cfg.steps {
        mm.step(&few.x, &few.y, &sides).map_err(|e| Error::Diverged {
            epoch: i,
            message: e.to_string(),
        })?;
    }
    Ok(adapted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn standardized(v: &[f64]) -> DMatrix<f64> {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        DMatrix::from_iterator(v.len(), 1, v.iter().map(|x| (x - mean) / sd))
    }

    #[test]
    fn identical_standardized_columns() {
        let g = standardized(&normals(500, 1));
        assert!((soft_hgr_value(&g, &g).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn independent_columns_near_minus_half() {
        let g = standardized(&normals(20_000, 2));
        let h = standardized(&normals(20_000, 3));
        let v = soft_hgr_value(&g, &h).unwrap();
        assert!((v + 0.5).abs() < 0.05, "{v}");
    }

    #[test]
    fn constant_side_gives_zero() {
        let g = standardized(&normals(50, 4));
        let h = DMatrix::from_element(50, 1, 3.0);
        assert_eq!(soft_hgr_value(&g, &h).unwrap(), 0.0);
        assert!(soft_hgr_value(&g.rows(0, 1).into_owned(), &h.rows(0, 1).into_owned()).is_err());
    }

    #[test]
    fn shift_and_scale_behaviour() {
        let g = DMatrix::from_column_slice(40, 2, &normals(80, 5));
        let h = DMatrix::from_column_slice(40, 2, &normals(80, 6));
        let base = soft_hgr_value(&g, &h).unwrap();
        let shifted = soft_hgr_value(&g.add_scalar(4.0), &h.add_scalar(-2.0)).unwrap();
        assert!((base - shifted).abs() < 1e-12);

        let gc = centered(&g);
        let hc = centered(&h);
        let cross = gc.dot(&hc) / 39.0;
        let trace_term = base - cross;
        let scaled = soft_hgr_value(&(&g * 2.0), &(&h * 2.0)).unwrap();
        assert!((scaled - (4.0 * cross + 16.0 * trace_term)).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let g = DMatrix::from_column_slice(7, 2, &normals(14, 7));
        let h = DMatrix::from_column_slice(7, 2, &normals(14, 8));
        let (_, dg, dh) = soft_hgr_with_grad(&g, &h).unwrap();
        let eps = 1e-6;
        for i in 0..7 {
            for j in 0..2 {
                let mut p = g.clone();
                p[(i, j)] += eps;
                let mut m = g.clone();
                m[(i, j)] -= eps;
                let fd = (soft_hgr_value(&p, &h).unwrap() - soft_hgr_value(&m, &h).unwrap()) / (2.0 * eps);
                assert!((fd - dg[(i, j)]).abs() < 1e-8);
                let mut p = h.clone();
                p[(i, j)] += eps;
                let mut m = h.clone();
                m[(i, j)] -= eps;
                let fd = (soft_hgr_value(&g, &p).unwrap() - soft_hgr_value(&g, &m).unwrap()) / (2.0 * eps);
                assert!((fd - dh[(i, j)]).abs() < 1e-8);
            }
        }
    }

    /// Binary symmetric pair with crossover 0.2 coded as ±1.
    fn bsc_samples(n: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = DMatrix::zeros(n, 1);
        let mut b = DMatrix::zeros(n, 1);
        for i in 0..n {
            let x: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            a[(i, 0)] = x;
            b[(i, 0)] = if rng.random_bool(0.2) { -x } else { x };
        }
        (a, b)
    }

    #[test]
    fn trained_critics_reach_half_sigma_squared() {
        let (a, b) = bsc_samples(4000, 9);
        let mut pair = CriticPair::new(1, 1, 16, 1, &mut stream(3, STREAM_CRITIC)).unwrap();
        let v = pair.fit(&a, &b, 1500, 0.05, 0.9).unwrap();
        assert!((v - 0.18).abs() < 0.04, "{v}");
    }

    fn toy(n: usize, seed: u64, make: impl Fn(f64, f64, f64) -> (f64, f64)) -> ContinuousDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DMatrix::zeros(n, 2);
        let mut y = DVector::zeros(n);
        let mut d = DMatrix::zeros(n, 1);
        for i in 0..n {
            let x1: f64 = StandardNormal.sample(&mut rng);
            let x2: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            let (yi, di) = make(x1, x2, e);
            x[(i, 0)] = x1;
            x[(i, 1)] = x2;
            y[i] = yi;
            d[(i, 0)] = di;
        }
        ContinuousDataset::from_parts(x, y, d)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr_model: 0.05,
            lr_critic: 0.05,
            hidden: 12,
            feature_dim: 4,
            critic_hidden: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lambda_matches_plain_training() {
        let data = toy(300, 10, |x1, x2, e| (x1 + 0.1 * e, x2));
        let cfg = quick();
        let a = train_independence(&data, 0.0, &cfg).unwrap();
        let b = train_mse(&data, &cfg).unwrap();
        let c = train_separation(&data, 0.0, &cfg).unwrap();
        assert_eq!(a.model.feature_net, b.model.feature_net);
        assert_eq!(a.model.head, c.model.head);
        let mse_a: Vec<f64> = a.history.epochs.iter().map(|r| r.mse).collect();
        let mse_c: Vec<f64> = c.history.epochs.iter().map(|r| r.mse).collect();
        assert_eq!(mse_a, mse_c);
    }

    #[test]
    fn runs_are_deterministic() {
        let data = toy(200, 11, |x1, x2, e| (x1 + x2 + 0.1 * e, x2));
        let cfg = TrainConfig { epochs: 5, ..quick() };
        let a = train_separation(&data, 1.0, &cfg).unwrap();
        let b = train_separation(&data, 1.0, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn achievable_fairness_costs_little() {
        let data = toy(600, 12, |x1, x2, e| (x1 + 0.1 * e, x2));
        let cfg = TrainConfig { epochs: 60, ..quick() };
        let base = train_mse(&data, &cfg).unwrap().into_result().unwrap().1;
        let fair = train_independence(&data, 1.0, &cfg).unwrap().into_result().unwrap().1;
        let (b, f) = (base.last().unwrap(), fair.last().unwrap());
        assert!(f.mse <= 1.1 * b.mse + 0.01, "{} vs {}", f.mse, b.mse);
        assert!(f.penalty.abs() < 0.1, "{}", f.penalty);
    }

    #[test]
    fn target_equal_to_sensitive_forces_constant() {
        let data = toy(500, 13, |x1, _x2, _e| (x1, x1));
        let cfg = TrainConfig { epochs: 60, ..quick() };
        let fair = train_independence(&data, 20.0, &cfg).unwrap().into_result().unwrap().1;
        let var_y = {
            let m = data.y.mean();
            data.y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / data.y.len() as f64
        };
        let base = train_mse(&data, &cfg).unwrap().into_result().unwrap().1;
        let last = fair.last().unwrap().mse;
        assert!(last > 0.7 * var_y, "{last} vs var {var_y}");
        assert!(base.last().unwrap().mse < 0.2 * var_y);
    }

    #[test]
    fn separation_with_label_as_sensitive_has_small_penalty() {
        let data = toy(500, 14, |x1, _x2, e| (x1 + 0.3 * e, x1 + 0.3 * e));
        let cfg = TrainConfig { epochs: 40, ..quick() };
        let t = train_separation(&data, 1.0, &cfg).unwrap();
        let p = t.history.last().unwrap().penalty;
        assert!(p.abs() < 0.05, "{p}");
    }

    #[test]
    fn critic_steps_do_not_lose_ground() {
        let data = toy(400, 15, |x1, x2, e| (x1 + x2 + 0.2 * e, x1));
        let cfg = TrainConfig { epochs: 10, lr_critic: 0.01, ..quick() };
        let t = train_independence(&data, 1.0, &cfg).unwrap();
        for g in &t.history.critic_gain {
            assert!(*g > -1e-6, "{g}");
        }
    }

    #[test]
    fn divergence_keeps_partial_history() {
        let data = toy(100, 16, |x1, x2, _| (1e200 * x1, x2));
        let cfg = TrainConfig { epochs: 5, lr_model: 1e10, ..quick() };
        let t = train_independence(&data, 1.0, &cfg).unwrap();
        assert!(matches!(t.aborted, Some(Error::Diverged { .. })));
        assert!(t.history.epochs.len() < 5);
    }

    #[test]
    fn few_shot_zero_steps_is_identity() {
        let data = toy(200, 17, |x1, x2, e| (x1 + 0.1 * e, x2));
        let cfg = TrainConfig { epochs: 5, ..quick() };
        let (model, _) = train_mse(&data, &cfg).unwrap().into_result().unwrap();
        let few = data.select(&(0..10).collect::<Vec<_>>());
        let fcfg = FewShotConfig {
            steps: 0,
            ..FewShotConfig::default()
        };
        let same = few_shot_adapt(&model, &few, Criterion::Separation, 5.0, &fcfg, &cfg).unwrap();
        assert_eq!(same, model);
        let empty = data.select(&[]);
        assert!(few_shot_adapt(&model, &empty, Criterion::Separation, 5.0, &fcfg, &cfg).is_err());
    }

    #[test]
    fn config_validation_collects_problems() {
        let bad = TrainConfig {
            critic_steps: 0,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("critic_steps") && msg.contains("batch_size"));
    }

    #[test]
    fn batching_merges_singletons() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].len(), 5);
    }
}
