//! Empirical joint distributions over finite alphabets and their divergence
//! transfer matrices.
//!
//! Alphabets are dense `0..card` index spaces. A [`JointPmf`] is stored
//! row-major with the first variable indexing rows.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{input, Result};

/// Tolerance used when checking that a user-supplied table sums to one.
const SUM_TOL: f64 = 1e-9;

/// Joint probability table over two finite alphabets, with cached marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPmf {
    card_a: usize,
    card_b: usize,
    probs: Vec<f64>,
    marginal_a: Vec<f64>,
    marginal_b: Vec<f64>,
}

impl JointPmf {
    /// Builds a pmf from a `card_a × card_b` table. The table must be
    /// nonnegative and sum to one (within `1e-9`); it is renormalized exactly.
    pub fn from_table(rows: &[Vec<f64>]) -> Result<Self> {
        let card_a = rows.len();
        if card_a == 0 {
            return input("joint table has no rows");
        }
        let card_b = rows[0].len();
        if card_b == 0 {
            return input("joint table has no columns");
        }
        let mut probs = Vec::with_capacity(card_a * card_b);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != card_b {
                return input(format!("row {i} has {} entries, expected {card_b}", row.len()));
            }
            for &p in row {
                if !p.is_finite() || p < 0.0 {
                    return input(format!("row {i} contains invalid probability {p}"));
                }
                probs.push(p);
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return input(format!("joint table sums to {total}, expected 1"));
        }
        probs.iter_mut().for_each(|p| *p /= total);
        Ok(Self::with_marginals(card_a, card_b, probs))
    }

    /// Product distribution `P_A ⊗ P_B`.
    pub fn product(pa: &[f64], pb: &[f64]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = pa
            .iter()
            .map(|&a| pb.iter().map(|&b| a * b).collect())
            .collect();
        Self::from_table(&rows)
    }

    fn with_marginals(card_a: usize, card_b: usize, probs: Vec<f64>) -> Self {
        let mut marginal_a = vec![0.0; card_a];
        let mut marginal_b = vec![0.0; card_b];
        for i in 0..card_a {
            for j in 0..card_b {
                let p = probs[i * card_b + j];
                marginal_a[i] += p;
                marginal_b[j] += p;
            }
        }
        Self {
            card_a,
            card_b,
            probs,
            marginal_a,
            marginal_b,
        }
    }

    pub fn card_a(&self) -> usize {
        self.card_a
    }

    pub fn card_b(&self) -> usize {
        self.card_b
    }

    #[inline]
    pub fn prob(&self, a: usize, b: usize) -> f64 {
        self.probs[a * self.card_b + b]
    }

    pub fn marginal_a(&self) -> &[f64] {
        &self.marginal_a
    }

    pub fn marginal_b(&self) -> &[f64] {
        &self.marginal_b
    }

    /// Table as a `card_a × card_b` matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.card_a, self.card_b, &self.probs)
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.probs.chunks(self.card_b).map(|r| r.to_vec()).collect()
    }

    /// The same distribution with the roles of the two variables swapped.
    pub fn transpose(&self) -> Self {
        let mut probs = Vec::with_capacity(self.probs.len());
        for j in 0..self.card_b {
            for i in 0..self.card_a {
                probs.push(self.prob(i, j));
            }
        }
        Self {
            card_a: self.card_b,
            card_b: self.card_a,
            probs,
            marginal_a: self.marginal_b.clone(),
            marginal_b: self.marginal_a.clone(),
        }
    }

    /// Mutual information `I(A;B)` in nats.
    pub fn mutual_information(&self) -> f64 {
        let mut mi = 0.0;
        for i in 0..self.card_a {
            for j in 0..self.card_b {
                let p = self.prob(i, j);
                if p > 0.0 {
                    mi += p * (p / (self.marginal_a[i] * self.marginal_b[j])).ln();
                }
            }
        }
        mi
    }

    /// χ²-divergence between the joint and the product of its marginals.
    pub fn chi_square_divergence(&self) -> f64 {
        let mut chi2 = 0.0;
        for i in 0..self.card_a {
            for j in 0..self.card_b {
                let q = self.marginal_a[i] * self.marginal_b[j];
                if q > 0.0 {
                    let d = self.prob(i, j) - q;
                    chi2 += d * d / q;
                }
            }
        }
        chi2
    }

    /// Conditional distribution of B given `A = a`, or `None` when `P_A(a) = 0`.
    pub fn conditional_b_given_a(&self, a: usize) -> Option<Vec<f64>> {
        let pa = self.marginal_a[a];
        (pa > 0.0).then(|| (0..self.card_b).map(|j| self.prob(a, j) / pa).collect())
    }
}

/// Empirical joint distribution of `(a, b)` index pairs with additive smoothing:
/// `P(i, j) = (count(i, j) + smoothing) / (n + smoothing · card_a · card_b)`.
pub fn estimate_joint(
    pairs: &[(usize, usize)],
    card_a: usize,
    card_b: usize,
    smoothing: f64,
) -> Result<JointPmf> {
    if card_a == 0 || card_b == 0 {
        return input("alphabet sizes must be positive");
    }
    if pairs.is_empty() {
        return input("cannot estimate a joint distribution from zero samples");
    }
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return input(format!("smoothing must be a nonnegative finite number, got {smoothing}"));
    }
    let mut counts = vec![0u64; card_a * card_b];
    for (idx, &(a, b)) in pairs.iter().enumerate() {
        if a >= card_a || b >= card_b {
            return input(format!(
                "sample {idx} = ({a}, {b}) outside alphabet {card_a}x{card_b}"
            ));
        }
        counts[a * card_b + b] += 1;
    }
    let denom = pairs.len() as f64 + smoothing * (card_a * card_b) as f64;
    let probs = counts
        .into_iter()
        .map(|c| (c as f64 + smoothing) / denom)
        .collect();
    Ok(JointPmf::with_marginals(card_a, card_b, probs))
}

/// Convenience wrapper over [`estimate_joint`] for two parallel index sequences.
pub fn estimate_joint_from(
    a: &[usize],
    b: &[usize],
    card_a: usize,
    card_b: usize,
    smoothing: f64,
) -> Result<JointPmf> {
    if a.len() != b.len() {
        return input(format!("sequence lengths differ: {} vs {}", a.len(), b.len()));
    }
    let pairs: Vec<(usize, usize)> = a.iter().copied().zip(b.iter().copied()).collect();
    estimate_joint(&pairs, card_a, card_b, smoothing)
}

/// Divergence transfer matrix `B(b, a) = P(a, b) / (√P_A(a) √P_B(b))`.
///
/// Rows index the second variable, columns the first. Entries whose marginals
/// vanish are zero so that shapes stay fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct Dtm {
    matrix: DMatrix<f64>,
    sqrt_marginal_a: DVector<f64>,
    sqrt_marginal_b: DVector<f64>,
}

impl Dtm {
    pub fn from_joint(joint: &JointPmf) -> Self {
        let sqrt_a = DVector::from_iterator(
            joint.card_a(),
            joint.marginal_a().iter().map(|p| p.sqrt()),
        );
        let sqrt_b = DVector::from_iterator(
            joint.card_b(),
            joint.marginal_b().iter().map(|p| p.sqrt()),
        );
        let matrix = DMatrix::from_fn(joint.card_b(), joint.card_a(), |y, x| {
            let denom = sqrt_a[x] * sqrt_b[y];
            if denom > 0.0 {
                joint.prob(x, y) / denom
            } else {
                0.0
            }
        });
        Self {
            matrix,
            sqrt_marginal_a: sqrt_a,
            sqrt_marginal_b: sqrt_b,
        }
    }

    /// `card_b × card_a` matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn sqrt_marginal_a(&self) -> &DVector<f64> {
        &self.sqrt_marginal_a
    }

    pub fn sqrt_marginal_b(&self) -> &DVector<f64> {
        &self.sqrt_marginal_b
    }

    /// `‖B Φ‖_F²` for a `card_a × m` matrix `Φ`.
    pub fn frobenius_objective(&self, phi: &DMatrix<f64>) -> f64 {
        (&self.matrix * phi).norm_squared()
    }
}

/// Same as [`Dtm::from_joint`].
pub fn build_dtm(joint: &JointPmf) -> Dtm {
    Dtm::from_joint(joint)
}

/// Dense encoding of the Cartesian product of two finite alphabets:
/// `index(d, y) = d · card_y + y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductEncoding {
    pub card_d: usize,
    pub card_y: usize,
}

impl ProductEncoding {
    pub fn new(card_d: usize, card_y: usize) -> Result<Self> {
        if card_d == 0 || card_y == 0 {
            return input("product alphabet sizes must be positive");
        }
        Ok(Self { card_d, card_y })
    }

    pub fn cardinality(&self) -> usize {
        self.card_d * self.card_y
    }

    pub fn index(&self, d: usize, y: usize) -> Result<usize> {
        if d >= self.card_d || y >= self.card_y {
            return input(format!(
                "pair ({d}, {y}) outside product alphabet {}x{}",
                self.card_d, self.card_y
            ));
        }
        Ok(d * self.card_y + y)
    }

    pub fn decode(&self, index: usize) -> (usize, usize) {
        (index / self.card_y, index % self.card_y)
    }
}

/// Element-wise product-variable encoding of two index sequences.
pub fn product_variable(d: &[usize], y: &[usize], card_d: usize, card_y: usize) -> Result<Vec<usize>> {
    if d.len() != y.len() {
        return input(format!("sequence lengths differ: {} vs {}", d.len(), y.len()));
    }
    let enc = ProductEncoding::new(card_d, card_y)?;
    d.iter().zip(y).map(|(&di, &yi)| enc.index(di, yi)).collect()
}

/// `P(a, b) = P_A(a) P_B(b) (1 + amplitude · E(a, b))` where `E` is `direction`
/// projected so that both marginals are preserved.
///
/// Fails if the perturbed table would contain negative entries.
pub fn perturbed_joint(
    pa: &[f64],
    pb: &[f64],
    direction: &DMatrix<f64>,
    amplitude: f64,
) -> Result<JointPmf> {
    let e = centered_direction(pa, pb, direction)?;
    let mut rows = vec![vec![0.0; pb.len()]; pa.len()];
    for i in 0..pa.len() {
        for j in 0..pb.len() {
            let p = pa[i] * pb[j] * (1.0 + amplitude * e[(i, j)]);
            if p < 0.0 {
                return input(format!(
                    "amplitude {amplitude} makes entry ({i}, {j}) negative"
                ));
            }
            rows[i][j] = p;
        }
    }
    JointPmf::from_table(&rows)
}

/// Removes the weighted row and column means of `direction`, so that
/// `Σ_a P_A(a) E(a, b) = 0` and `Σ_b P_B(b) E(a, b) = 0`.
pub fn centered_direction(pa: &[f64], pb: &[f64], direction: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if direction.nrows() != pa.len() || direction.ncols() != pb.len() {
        return input(format!(
            "direction is {}x{}, marginals are {}x{}",
            direction.nrows(),
            direction.ncols(),
            pa.len(),
            pb.len()
        ));
    }
    let row_mean: Vec<f64> = (0..pa.len())
        .map(|i| (0..pb.len()).map(|j| pb[j] * direction[(i, j)]).sum())
        .collect();
    let col_mean: Vec<f64> = (0..pb.len())
        .map(|j| (0..pa.len()).map(|i| pa[i] * direction[(i, j)]).sum())
        .collect();
    let grand: f64 = (0..pa.len()).map(|i| pa[i] * row_mean[i]).sum();
    Ok(DMatrix::from_fn(pa.len(), pb.len(), |i, j| {
        direction[(i, j)] - row_mean[i] - col_mean[j] + grand
    }))
}
