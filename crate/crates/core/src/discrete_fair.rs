//! Fair feature extraction for discrete data via divergence transfer matrices.
//!
//! The pipeline is
//!
//! 1. estimate `P(x, d, y)` and build the target DTM `B_{Y,X}` and the
//!    sensitive DTM (`B_{D,X}` for independence, `B_{D⊗Y,X}` for separation),
//! 2. take the top eigenvectors of `B_Yᵀ B_Y − λ B_Sᵀ B_S` on the orthogonal
//!    complement of `√P_X` ([`solve_fair_features`]),
//! 3. rescale them into zero-mean, unit-variance features ([`normalize_features`]),
//! 4. recover the target-side functions with one conditional-expectation step
//!    followed by whitening ([`ace_step_g`]),
//! 5. predict with the truncated posterior expansion ([`posterior`], [`predict_map`]).

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::encoding::CategoryEncoder;
use crate::error::{input, Error, Result};
use crate::linalg::{canonical_sign, complement_basis, sorted_symmetric_eigen};
use crate::probability::{estimate_joint_from, Dtm, JointPmf, ProductEncoding};
use crate::Criterion;

const SVD_EPS: f64 = 1e-15;
const SVD_MAX_ITER: usize = 10_000;
/// Marginals of the two DTMs handed to the solver must agree to this precision.
const MARGINAL_TOL: f64 = 1e-10;
/// Default cap on the number of feature functions.
pub const MAX_DEFAULT_K: usize = 10;

/// Full singular value decomposition of a DTM.
///
/// Column 0 is always the trivial triple `(1, √P_X, √P_Y)`; the remaining
/// columns come from the DTM restricted to the orthogonal complements.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub sigmas: Vec<f64>,
    /// `|X| × K` right singular vectors.
    pub psi_x: DMatrix<f64>,
    /// `|Y| × K` left singular vectors.
    pub psi_y: DMatrix<f64>,
}

pub fn dtm_svd(dtm: &Dtm) -> Result<SvdResult> {
    let b = dtm.matrix();
    let (ny, nx) = (b.nrows(), b.ncols());
    let k_full = nx.min(ny);
    let qx = dtm.sqrt_marginal_a();
    let qy = dtm.sqrt_marginal_b();

    let ux = complement_basis(qx, &(0..nx).collect::<Vec<_>>());
    let uy = complement_basis(qy, &(0..ny).collect::<Vec<_>>());
    let reduced = uy.transpose() * b * &ux;

    let mut sigmas = vec![qy.dot(&(b * qx))];
    let mut psi_x = DMatrix::zeros(nx, k_full);
    let mut psi_y = DMatrix::zeros(ny, k_full);
    psi_x.set_column(0, qx);
    psi_y.set_column(0, qy);

    if k_full > 1 {
        let svd = reduced
            .try_svd(true, true, SVD_EPS, SVD_MAX_ITER)
            .ok_or_else(|| Error::Computation("DTM singular value decomposition did not converge".into()))?;
        let u = svd.u.as_ref().expect("u requested");
        let v_t = svd.v_t.as_ref().expect("v_t requested");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &c| svd.singular_values[c].total_cmp(&svd.singular_values[a]));
        for (slot, &i) in order.iter().take(k_full - 1).enumerate() {
            let vx: DVector<f64> = &ux * v_t.row(i).transpose();
            let vy: DVector<f64> = &uy * u.column(i);
            let s = canonical_sign(vx.as_slice());
            psi_x.set_column(slot + 1, &(vx * s));
            psi_y.set_column(slot + 1, &(vy * s));
            sigmas.push(svd.singular_values[i]);
        }
    }
    Ok(SvdResult {
        sigmas,
        psi_x,
        psi_y,
    })
}

/// Sum of the top-`k` nontrivial maximal correlations between the two variables
/// of `joint`.
pub fn hgr_k(joint: &JointPmf, k: usize) -> Result<f64> {
    let kmax = joint.card_a().min(joint.card_b()).saturating_sub(1);
    if k == 0 || k > kmax {
        return input(format!("k = {k} outside 1..={kmax}"));
    }
    let svd = dtm_svd(&Dtm::from_joint(joint))?;
    Ok(svd.sigmas[1..=k].iter().sum())
}

/// Maximal correlation of a fixed feature `f` of the first variable with any
/// function of the second: `sqrt(Σ_b P_B(b) E[f(A) | B = b]²)` after
/// standardizing `f` under `P_A`.
pub fn feature_correlation(f: &[f64], joint: &JointPmf) -> Result<f64> {
    if f.len() != joint.card_a() {
        return input(format!("feature has {} entries, alphabet has {}", f.len(), joint.card_a()));
    }
    let pa = joint.marginal_a();
    let mean: f64 = f.iter().zip(pa).map(|(v, p)| v * p).sum();
    let var: f64 = f.iter().zip(pa).map(|(v, p)| p * (v - mean).powi(2)).sum();
    if var <= 0.0 {
        return Ok(0.0);
    }
    let sd = var.sqrt();
    let mut total = 0.0;
    for b in 0..joint.card_b() {
        let pb = joint.marginal_b()[b];
        if pb <= 0.0 {
            continue;
        }
        let cond: f64 = (0..joint.card_a())
            .map(|a| joint.prob(a, b) * (f[a] - mean) / sd)
            .sum::<f64>()
            / pb;
        total += pb * cond * cond;
    }
    Ok(total.sqrt())
}

/// Orthonormal solution of the regularized Frobenius objective.
#[derive(Debug, Clone)]
pub struct FairFeatures {
    /// `|X| × (k+1)` with column 0 equal to `√P_X`.
    pub phi: DMatrix<f64>,
    /// Rayleigh quotients `φ_iᵀ M φ_i`, index-aligned with the columns of `phi`.
    pub eigenvalues: Vec<f64>,
}

/// Maximizes `‖B_T Φ‖_F² − λ ‖B_S Φ‖_F²` over `|X| × (k+1)` orthonormal `Φ` whose
/// first column is `√P_X`.
///
/// The eigenproblem is solved on the complement of `√P_X` within the support
/// of `P_X`, so unseen symbols never carry feature mass.
pub fn solve_fair_features(b_target: &Dtm, b_sensitive: &Dtm, lambda: f64, k: usize) -> Result<FairFeatures> {
    let nx = b_target.matrix().ncols();
    if b_sensitive.matrix().ncols() != nx {
        return input(format!(
            "DTMs disagree on |X|: {} vs {}",
            nx,
            b_sensitive.matrix().ncols()
        ));
    }
    let q = b_target.sqrt_marginal_a();
    if (q - b_sensitive.sqrt_marginal_a()).amax() > MARGINAL_TOL {
        return input("target and sensitive DTMs have different P_X marginals");
    }
    if !lambda.is_finite() {
        return input(format!("lambda must be finite, got {lambda}"));
    }
    let support: Vec<usize> = (0..nx).filter(|&x| q[x] > 0.0).collect();
    if k + 1 > support.len() {
        return input(format!(
            "k = {k} needs at least {} observed symbols, found {}",
            k + 1,
            support.len()
        ));
    }

    let bt = b_target.matrix();
    let bs = b_sensitive.matrix();
    let m = bt.transpose() * bt - (bs.transpose() * bs) * lambda;
    let basis = complement_basis(q, &support);
    let reduced = basis.transpose() * &m * &basis;
    let (values, vectors) = sorted_symmetric_eigen(&reduced)?;

    let mut phi = DMatrix::zeros(nx, k + 1);
    phi.set_column(0, q);
    let mut eigenvalues = vec![q.dot(&(&m * q))];
    for i in 0..k {
        let v: DVector<f64> = &basis * vectors.column(i);
        let s = canonical_sign(v.as_slice());
        phi.set_column(i + 1, &(v * s));
        eigenvalues.push(values[i]);
    }
    Ok(FairFeatures { phi, eigenvalues })
}

/// Turns orthonormal columns `φ_1..φ_k` into features `f_i(x) = φ_i(x) / √P_X(x)`.
///
/// Column 0 of `phi` is the trivial direction and is skipped. Symbols with
/// zero probability get feature value 0.
pub fn normalize_features(phi: &DMatrix<f64>, sqrt_px: &DVector<f64>) -> DMatrix<f64> {
    let k = phi.ncols().saturating_sub(1);
    DMatrix::from_fn(phi.nrows(), k, |x, i| {
        if sqrt_px[x] > 0.0 {
            phi[(x, i + 1)] / sqrt_px[x]
        } else {
            0.0
        }
    })
}

/// Output of the conditional-expectation step.
#[derive(Debug, Clone)]
pub struct AceResult {
    /// `|Y| × k` whitened target functions.
    pub g_table: DMatrix<f64>,
    pub sigma: Vec<f64>,
    /// Columns whose conditional expectation had zero variance.
    pub degenerate: Vec<usize>,
}

/// Whitening is applied on eigen-directions of the covariance above this
/// fraction of its trace.
const WHITEN_TOL: f64 = 1e-12;

/// One alternating-conditional-expectations step from `f` to `g`.
///
/// `ĝ_i(y) = E[f_i(X) | Y = y]`, then `g = ĝ C^{-1/2}` with `C = E[ĝ ĝᵀ]`
/// (pseudo-inverse on a rank-deficient `C`), and `σ_i = E[f_i(X) g_i(Y)]`
/// clipped to `[0, 1]`.
pub fn ace_step_g(f_table: &DMatrix<f64>, joint_xy: &JointPmf) -> Result<AceResult> {
    let (nx, ny, k) = (joint_xy.card_a(), joint_xy.card_b(), f_table.ncols());
    if f_table.nrows() != nx {
        return input(format!("f_table has {} rows, |X| = {nx}", f_table.nrows()));
    }
    let py = joint_xy.marginal_b();
    let mut g_raw = DMatrix::zeros(ny, k);
    for y in 0..ny {
        if py[y] <= 0.0 {
            continue;
        }
        for i in 0..k {
            let s: f64 = (0..nx).map(|x| joint_xy.prob(x, y) * f_table[(x, i)]).sum();
            g_raw[(y, i)] = s / py[y];
        }
    }
    let weighted = DMatrix::from_fn(ny, k, |y, i| py[y] * g_raw[(y, i)]);
    let cov = g_raw.transpose() * &weighted;
    let scale = cov.trace().max(f64::MIN_POSITIVE);

    let mut degenerate = Vec::new();
    for i in 0..k {
        if cov[(i, i)] <= WHITEN_TOL * scale || cov[(i, i)] <= f64::MIN_POSITIVE {
            degenerate.push(i);
        }
    }

    let (values, vectors) = sorted_symmetric_eigen(&cov)?;
    let mut whiten = DMatrix::zeros(k, k);
    for (j, &lam) in values.iter().enumerate() {
        if lam > WHITEN_TOL * scale && lam > 0.0 {
            let u = vectors.column(j);
            whiten += (u * u.transpose()) / lam.sqrt();
        }
    }
    let mut g_table = &g_raw * whiten;
    for &i in &degenerate {
        warn!("conditional expectation of feature {i} has zero variance; dropping it");
        g_table.column_mut(i).fill(0.0);
    }

    let mut sigma = vec![0.0; k];
    for i in 0..k {
        if degenerate.contains(&i) {
            continue;
        }
        let s: f64 = (0..ny).map(|y| py[y] * g_raw[(y, i)] * g_table[(y, i)]).sum();
        sigma[i] = s.clamp(0.0, 1.0);
    }
    Ok(AceResult {
        g_table,
        sigma,
        degenerate,
    })
}

/// Alphabet sizes of the three discrete variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cardinalities {
    pub x: usize,
    pub y: usize,
    pub d: usize,
}

/// Hyperparameters for [`fit_discrete`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub criterion: Criterion,
    pub lambda: f64,
    /// Number of feature functions; `None` picks `min(|X|, |Y|) − 1` capped at 10.
    pub k: Option<usize>,
    pub smoothing: f64,
}

impl FitConfig {
    pub fn new(criterion: Criterion, lambda: f64) -> Self {
        Self {
            criterion,
            lambda,
            k: None,
            smoothing: 0.0,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = Some(k);
        self
    }
}

/// Checks the admissible range of `lambda` for a criterion.
pub fn check_lambda(criterion: Criterion, lambda: f64) -> Result<()> {
    match criterion {
        Criterion::Independence if !(lambda >= 0.0 && lambda.is_finite()) => {
            input(format!("independence requires lambda >= 0, got {lambda}"))
        }
        Criterion::Separation if !(0.0..1.0).contains(&lambda) => input(format!(
            "separation requires lambda in [0, 1), got {lambda}"
        )),
        _ => Ok(()),
    }
}

pub fn default_k(cards: Cardinalities) -> usize {
    (cards.x.min(cards.y).saturating_sub(1)).clamp(1, MAX_DEFAULT_K)
}

/// Learned feature tables and everything needed to evaluate the posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteFairModel {
    pub criterion: Criterion,
    pub lambda: f64,
    pub k: usize,
    pub cardinalities: Cardinalities,
    /// `|X|` rows of `k` feature values.
    pub f_table: Vec<Vec<f64>>,
    /// `|Y|` rows of `k` values.
    pub g_table: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    pub prior_y: Vec<f64>,
    /// Eigenvalues of the regularized objective for the selected features.
    pub eigenvalues: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_encoder: Option<CategoryEncoder>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_encoder: Option<CategoryEncoder>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_encoder: Option<CategoryEncoder>,
}

impl DiscreteFairModel {
    pub fn with_encoders(mut self, x: CategoryEncoder, y: CategoryEncoder, d: CategoryEncoder) -> Self {
        self.x_encoder = Some(x);
        self.y_encoder = Some(y);
        self.d_encoder = Some(d);
        self
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }

    /// Feature function `i` as a column over the X alphabet.
    pub fn feature(&self, i: usize) -> Vec<f64> {
        self.f_table.iter().map(|row| row[i]).collect()
    }

    /// Posterior over Y for every symbol of the X alphabet.
    pub fn posterior_table(&self) -> Vec<Vec<f64>> {
        (0..self.cardinalities.x)
            .map(|x| posterior(self, x).expect("x within alphabet"))
            .collect()
    }
}

/// Approximate posterior `P_Y(y) [1 + Σ_i σ_i f_i(x) g_i(y)]`, clamped at zero
/// and renormalized. Falls back to the prior when every score clamps to zero.
pub fn posterior(model: &DiscreteFairModel, x: usize) -> Result<Vec<f64>> {
    if x >= model.cardinalities.x {
        return input(format!("x = {x} outside alphabet of size {}", model.cardinalities.x));
    }
    let f = &model.f_table[x];
    let scores: Vec<f64> = model
        .prior_y
        .iter()
        .zip(&model.g_table)
        .map(|(&p, g)| {
            let corr: f64 = (0..model.k).map(|i| model.sigma[i] * f[i] * g[i]).sum();
            (p * (1.0 + corr)).max(0.0)
        })
        .collect();
    let total: f64 = scores.iter().sum();
    if total > 0.0 && total.is_finite() {
        Ok(scores.into_iter().map(|s| s / total).collect())
    } else {
        Ok(model.prior_y.clone())
    }
}

/// Argmax of a probability vector, lowest index on ties.
pub fn argmax_lowest(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// MAP prediction for symbol `x`.
pub fn predict_map(model: &DiscreteFairModel, x: usize) -> Result<usize> {
    Ok(argmax_lowest(&posterior(model, x)?))
}

/// Target and sensitive joint distributions derived from one smoothed estimate
/// of `P(x, d⊗y)`, so that every table shares the same `P_X`.
#[derive(Debug, Clone)]
pub struct DiscreteJoints {
    pub xy: JointPmf,
    pub xd: JointPmf,
    pub x_dy: JointPmf,
}

impl DiscreteJoints {
    pub fn estimate(x: &[usize], y: &[usize], d: &[usize], cards: Cardinalities, smoothing: f64) -> Result<Self> {
        if x.len() != y.len() || x.len() != d.len() {
            return input(format!(
                "sequence lengths differ: x={}, y={}, d={}",
                x.len(),
                y.len(),
                d.len()
            ));
        }
        let enc = ProductEncoding::new(cards.d, cards.y)?;
        let z = crate::probability::product_variable(d, y, cards.d, cards.y)?;
        let x_dy = estimate_joint_from(x, &z, cards.x, enc.cardinality(), smoothing)?;
        let mut xy = vec![vec![0.0; cards.y]; cards.x];
        let mut xd = vec![vec![0.0; cards.d]; cards.x];
        for xi in 0..cards.x {
            for zi in 0..enc.cardinality() {
                let (di, yi) = enc.decode(zi);
                let p = x_dy.prob(xi, zi);
                xy[xi][yi] += p;
                xd[xi][di] += p;
            }
        }
        Ok(Self {
            xy: JointPmf::from_table(&xy)?,
            xd: JointPmf::from_table(&xd)?,
            x_dy,
        })
    }
}

/// Fits a fair discrete model end to end.
pub fn fit_discrete(
    x: &[usize],
    y: &[usize],
    d: &[usize],
    cards: Cardinalities,
    cfg: &FitConfig,
) -> Result<DiscreteFairModel> {
    check_lambda(cfg.criterion, cfg.lambda)?;
    let joints = DiscreteJoints::estimate(x, y, d, cards, cfg.smoothing)?;
    fit_from_joints(&joints, cards, cfg)
}

/// Same as [`fit_discrete`] but starting from already estimated joints.
pub fn fit_from_joints(joints: &DiscreteJoints, cards: Cardinalities, cfg: &FitConfig) -> Result<DiscreteFairModel> {
    check_lambda(cfg.criterion, cfg.lambda)?;
    let k = cfg.k.unwrap_or_else(|| default_k(cards));
    if k == 0 {
        return input("k must be at least 1");
    }
    let b_target = Dtm::from_joint(&joints.xy);
    let b_sensitive = match cfg.criterion {
        Criterion::Independence => Dtm::from_joint(&joints.xd),
        Criterion::Separation => Dtm::from_joint(&joints.x_dy),
    };
    let sol = solve_fair_features(&b_target, &b_sensitive, cfg.lambda, k)?;
    let f = normalize_features(&sol.phi, b_target.sqrt_marginal_a());
    let ace = ace_step_g(&f, &joints.xy)?;
    Ok(DiscreteFairModel {
        criterion: cfg.criterion,
        lambda: cfg.lambda,
        k,
        cardinalities: cards,
        f_table: rows_of(&f),
        g_table: rows_of(&ace.g_table),
        sigma: ace.sigma,
        prior_y: joints.xy.marginal_b().to_vec(),
        eigenvalues: sol.eigenvalues[1..].to_vec(),
        x_encoder: None,
        y_encoder: None,
        d_encoder: None,
    })
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}
