//! Evaluation measures for predictive performance and fairness.
//!
//! Information quantities are in nats.

use log::warn;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{input, Error, Result};

/// Default neighbor count for the kNN estimators.
pub const DEFAULT_NEIGHBORS: usize = 3;
/// Tie-breaking noise, relative to each column's standard deviation.
const JITTER: f64 = 1e-10;
const JITTER_SEED: u64 = 0x5eed;

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return input(format!("{what}: lengths differ ({a} vs {b})"));
    }
    if a == 0 {
        return input(format!("{what}: empty input"));
    }
    Ok(())
}

/// Ranks starting at 1 with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve as a rank statistic; tied scores count ½.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check_len(scores.len(), labels.len(), "auc")?;
    if labels.iter().any(|&l| l > 1) {
        return input("auc needs binary labels");
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("auc needs both classes".into()));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Positive-prediction rate of every group index `0..=max(groups)`; `None`
/// for groups with no samples.
pub fn positive_rates(preds: &[usize], groups: &[usize]) -> Result<Vec<Option<f64>>> {
    check_len(preds.len(), groups.len(), "positive_rates")?;
    let g = groups.iter().max().map_or(0, |m| m + 1);
    let mut pos = vec![0usize; g];
    let mut tot = vec![0usize; g];
    for (&p, &d) in preds.iter().zip(groups) {
        tot[d] += 1;
        pos[d] += usize::from(p == 1);
    }
    Ok(pos
        .iter()
        .zip(&tot)
        .map(|(&p, &t)| (t > 0).then(|| p as f64 / t as f64))
        .collect())
}

/// `max_{d, d'} |P(Ŷ=1 | d) / P(Ŷ=1 | d') − 1|` over the groups present.
pub fn discrimination_j(preds: &[usize], groups: &[usize]) -> Result<f64> {
    let rates: Vec<(usize, f64)> = positive_rates(preds, groups)?
        .into_iter()
        .enumerate()
        .filter_map(|(g, r)| r.map(|r| (g, r)))
        .collect();
    if rates.len() < 2 {
        return Err(Error::UndefinedMetric("discrimination needs at least two groups".into()));
    }
    if let Some(&(group, _)) = rates.iter().find(|(_, r)| *r == 0.0) {
        return Err(Error::InfiniteDiscrimination { group });
    }
    let max = rates.iter().map(|r| r.1).fold(f64::MIN, f64::max);
    let min = rates.iter().map(|r| r.1).fold(f64::MAX, f64::min);
    Ok(max / min - 1.0)
}

/// `P(Ŷ=1 | D=1, Y=1) − P(Ŷ=1 | D=0, Y=1)`.
pub fn deo(preds: &[usize], labels: &[usize], groups: &[usize]) -> Result<f64> {
    check_len(preds.len(), labels.len(), "deo")?;
    check_len(preds.len(), groups.len(), "deo")?;
    let mut hit = [0usize; 2];
    let mut tot = [0usize; 2];
    for i in 0..preds.len() {
        if labels[i] != 1 {
            continue;
        }
        let g = groups[i];
        if g > 1 {
            return input(format!("deo needs binary groups, found {g}"));
        }
        tot[g] += 1;
        hit[g] += usize::from(preds[i] == 1);
    }
    if tot.contains(&0) {
        return Err(Error::UndefinedMetric("deo needs positive samples in both groups".into()));
    }
    Ok(hit[1] as f64 / tot[1] as f64 - hit[0] as f64 / tot[0] as f64)
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_len(preds.len(), labels.len(), "accuracy")?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean per-class recall over the classes present in `labels`.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_len(preds.len(), labels.len(), "balanced_accuracy")?;
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut hit = vec![0usize; k];
    let mut tot = vec![0usize; k];
    for (&p, &l) in preds.iter().zip(labels) {
        tot[l] += 1;
        hit[l] += usize::from(p == l);
    }
    let recalls: Vec<f64> = hit
        .iter()
        .zip(&tot)
        .filter(|(_, &t)| t > 0)
        .map(|(&h, &t)| h as f64 / t as f64)
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

pub fn mse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_len(preds.len(), targets.len(), "mse")?;
    Ok(preds.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / preds.len() as f64)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len(), "spearman")?;
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::UndefinedMetric("spearman of a constant sequence".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// `ψ(m)` for `m = 1..=n` via harmonic numbers: `ψ(m) = −γ + Σ_{j<m} 1/j`.
fn digamma_table(n: usize) -> Vec<f64> {
    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
    let mut t = vec![f64::NAN; n + 1];
    let mut acc = -EULER_GAMMA;
    for (m, slot) in t.iter_mut().enumerate().skip(1) {
        *slot = acc;
        acc += 1.0 / m as f64;
    }
    t
}

/// Columns with tiny deterministic noise added; `None` if every row is identical.
fn jittered(m: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    let mut out = m.clone();
    let mut any_spread = false;
    for mut col in out.column_iter_mut() {
        let mean = col.mean();
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        if sd > 0.0 {
            any_spread = true;
            for v in col.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += JITTER * sd * z;
            }
        }
    }
    any_spread.then_some(out)
}

/// Row-major copy for cache-friendly distance loops.
struct Rows {
    data: Vec<f64>,
    dim: usize,
}

impl Rows {
    fn new(m: &DMatrix<f64>) -> Self {
        let dim = m.ncols();
        let data = (0..m.nrows()).flat_map(|i| (0..dim).map(move |c| (i, c))).map(|(i, c)| m[(i, c)]).collect();
        Self { data, dim }
    }

    fn dist(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (&self.data[i * self.dim..(i + 1) * self.dim], &self.data[j * self.dim..(j + 1) * self.dim]);
        a.iter().zip(b).fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
    }
}

/// Distance from each point to its `k`-th nearest neighbor under the max norm
/// over the concatenation of `parts`.
fn kth_neighbor_radius(parts: &[&Rows], n: usize, k: usize) -> Vec<f64> {
    let mut dists = vec![0.0; n - 1];
    (0..n)
        .map(|i| {
            let mut t = 0;
            for j in 0..n {
                if j != i {
                    dists[t] = parts.iter().fold(0.0f64, |acc, p| acc.max(p.dist(i, j)));
                    t += 1;
                }
            }
            let (_, kth, _) = dists.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

/// Number of other points strictly within `radius[i]` of point `i` in the joint space of `parts`.
fn count_within(parts: &[&Rows], n: usize, radius: &[f64]) -> Vec<usize> {
    (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && parts.iter().all(|p| p.dist(i, j) < radius[i]))
                .count()
        })
        .collect()
}

fn check_knn(n: usize, others: &[usize], k: usize) -> Result<()> {
    if others.iter().any(|&m| m != n) {
        return input(format!("sample counts differ: {n} vs {others:?}"));
    }
    if k == 0 || n < k + 2 {
        return input(format!("need n > k + 1 (n = {n}, k = {k})"));
    }
    Ok(())
}

/// Kraskov–Stögbauer–Grassberger estimate of `I(A; B)` (first variant, max norm).
pub fn knn_mi(a: &DMatrix<f64>, b: &DMatrix<f64>, k: usize) -> Result<f64> {
    let n = a.nrows();
    check_knn(n, &[b.nrows()], k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(JITTER_SEED);
    let (Some(a), Some(b)) = (jittered(a, &mut rng), jittered(b, &mut rng)) else {
        warn!("mutual information with a constant variable; returning 0");
        return Ok(0.0);
    };
    let (ra, rb) = (Rows::new(&a), Rows::new(&b));
    let eps = kth_neighbor_radius(&[&ra, &rb], n, k);
    let na = count_within(&[&ra], n, &eps);
    let nb = count_within(&[&rb], n, &eps);
    let psi = digamma_table(n + 1);
    let avg: f64 = na.iter().zip(&nb).map(|(&x, &y)| psi[x + 1] + psi[y + 1]).sum::<f64>() / n as f64;
    Ok(psi[k] + psi[n] - avg)
}

/// Conditional mutual information `I(A; B | C)` with the conditional kNN
/// neighborhood construction. A constant `C` reduces to [`knn_mi`].
pub fn knn_cmi(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, k: usize) -> Result<f64> {
    let n = a.nrows();
    check_knn(n, &[b.nrows(), c.nrows()], k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(JITTER_SEED);
    let (Some(a), Some(b)) = (jittered(a, &mut rng), jittered(b, &mut rng)) else {
        warn!("conditional mutual information with a constant variable; returning 0");
        return Ok(0.0);
    };
    let c = jittered(c, &mut rng).unwrap_or_else(|| c.clone());
    let (ra, rb, rc) = (Rows::new(&a), Rows::new(&b), Rows::new(&c));
    let eps = kth_neighbor_radius(&[&ra, &rb, &rc], n, k);
    let nac = count_within(&[&ra, &rc], n, &eps);
    let nbc = count_within(&[&rb, &rc], n, &eps);
    let nc = count_within(&[&rc], n, &eps);
    let psi = digamma_table(n + 1);
    let avg: f64 = (0..n)
        .map(|i| psi[nac[i] + 1] + psi[nbc[i] + 1] - psi[nc[i] + 1])
        .sum::<f64>()
        / n as f64;
    Ok(psi[k] - avg)
}

/// Column matrix from a slice.
pub fn column(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v)
}

/// Scores, hard predictions, labels and groups of one evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedPredictions {
    pub scores: Vec<f64>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
}

impl GroupedPredictions {
    pub fn new(scores: Vec<f64>, predictions: Vec<usize>, labels: Vec<usize>, groups: Vec<usize>) -> Result<Self> {
        let n = scores.len();
        if predictions.len() != n || labels.len() != n || groups.len() != n {
            return input("grouped predictions need equal lengths");
        }
        Ok(Self {
            scores,
            predictions,
            labels,
            groups,
        })
    }

    pub fn auc(&self) -> Result<f64> {
        auc(&self.scores, &self.labels)
    }

    pub fn accuracy(&self) -> Result<f64> {
        accuracy(&self.predictions, &self.labels)
    }

    pub fn balanced_accuracy(&self) -> Result<f64> {
        balanced_accuracy(&self.predictions, &self.labels)
    }

    pub fn discrimination_j(&self) -> Result<f64> {
        discrimination_j(&self.predictions, &self.groups)
    }

    pub fn deo(&self) -> Result<f64> {
        deo(&self.predictions, &self.labels, &self.groups)
    }
}
