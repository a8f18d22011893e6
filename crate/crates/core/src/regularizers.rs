//! The three increment regularizers: norm-variance with a lower bound,
//! directional diversity, and a KL information bottleneck, plus the
//! log-sum-exp variant of the variance term.
//!
//! Each loss exists twice: a plain function over an [`IncrementTensor`]
//! serving as the oracle, and a tape construction used in training. Tests
//! pin the two against each other and against closed-form values.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, VarId};
use crate::error::{Error, Result};
use crate::increments::{IncrementTensor, Side};
use crate::matrix::{dot, l2_norm, Matrix, DELTA_NORM};

/// Variance floor for the KL term; zero spread along a dimension would
/// otherwise send `log s^2` to negative infinity.
pub const KL_VARIANCE_FLOOR: f64 = 1e-8;

/// How batch variances are normalized.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceEstimator {
    #[default]
    Population,
    Sample,
}

impl VarianceEstimator {
    fn correction(self, n: usize) -> f64 {
        match self {
            VarianceEstimator::Population => 1.0,
            VarianceEstimator::Sample if n > 1 => n as f64 / (n - 1) as f64,
            VarianceEstimator::Sample => 1.0,
        }
    }
}

/// Weights and shape parameters of the regularizer stack.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerConfig {
    /// Lower bound on the (negated) norm-variance objective.
    pub lambda: f64,
    /// Sharpness of the directional-diversity kernel.
    pub sigma: f64,
    pub w_ib: f64,
    pub w_eps: f64,
    pub w_dir: f64,
    /// Which modality's items anchor the KL batch statistics.
    pub ib_anchor_side: Side,
    pub variance_estimator: VarianceEstimator,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            lambda: 0.5,
            sigma: 2.0,
            w_ib: 1.0,
            w_eps: 1.0,
            w_dir: 1.0,
            ib_anchor_side: Side::Video,
            variance_estimator: VarianceEstimator::Population,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        for (name, w) in [("w_ib", self.w_ib), ("w_eps", self.w_eps), ("w_dir", self.w_dir)] {
            if !(w >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be non-negative, got {w}"
                )));
            }
        }
        Ok(())
    }
}

fn variance(values: impl Iterator<Item = f64> + Clone, n: usize) -> f64 {
    let mu = values.clone().sum::<f64>() / n as f64;
    values.map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64
}

/// Negated mean per-anchor variance of increment norms, clamped below at
/// `-lambda`. Encourages spread-out norms; the clamp keeps the term from
/// dominating once enough spread exists.
pub fn variance_loss(
    delta: &IncrementTensor,
    lambda: f64,
    estimator: VarianceEstimator,
) -> f64 {
    let b = delta.batch();
    let correction = estimator.correction(b);
    let mean_neg_var = -(0..b)
        .map(|i| correction * variance((0..b).map(|j| delta.norm(i, j)), b))
        .sum::<f64>()
        / b as f64;
    mean_neg_var.max(-lambda)
}

/// Smooth variance objective: per anchor,
/// `log(1 + mean_j exp(-(eps_ij - mean_eps_i)^2))`, averaged over anchors.
pub fn variance_loss_lse(delta: &IncrementTensor) -> f64 {
    let b = delta.batch();
    (0..b)
        .map(|i| {
            let mean = (0..b).map(|j| delta.norm(i, j)).sum::<f64>() / b as f64;
            let inner = (0..b)
                .map(|j| {
                    let dev = delta.norm(i, j) - mean;
                    (-(dev * dev)).exp()
                })
                .sum::<f64>()
                / b as f64;
            (1.0 + inner).ln()
        })
        .sum::<f64>()
        / b as f64
}

fn unit_directions(delta: &IncrementTensor, anchor: usize) -> Vec<Vec<f64>> {
    let b = delta.batch();
    (0..b)
        .filter(|&j| delta.norm(anchor, j) > DELTA_NORM)
        .map(|j| {
            let norm = delta.norm(anchor, j);
            delta.row(anchor, j).iter().map(|&x| x / norm).collect()
        })
        .collect()
}

/// Directional diversity: per anchor, the log of the mean over ordered
/// pairs `j != k` of `exp(-sigma * (1 - <z_ij, z_ik>))` on unit-normalized
/// increments, averaged over all B anchors. Increments with norm at or
/// below the floor are excluded; an anchor with fewer than two valid
/// directions contributes zero while still counting in the denominator.
pub fn direction_loss(delta: &IncrementTensor, sigma: f64) -> f64 {
    let b = delta.batch();
    let mut total = 0.0;
    for i in 0..b {
        let dirs = unit_directions(delta, i);
        let m = dirs.len();
        if m < 2 {
            continue;
        }
        let mut sum = 0.0;
        for j in 0..m {
            for k in 0..m {
                if j != k {
                    sum += (-sigma * (1.0 - dot(&dirs[j], &dirs[k]))).exp();
                }
            }
        }
        total += (sum / (m * (m - 1)) as f64).ln();
    }
    total / b as f64
}

fn ib_rows(delta: &IncrementTensor, anchor: usize, side: Side) -> Vec<usize> {
    let b = delta.batch();
    match side {
        Side::Video => (0..b).map(|i| i * b + anchor).collect(),
        Side::Text => (0..b).map(|j| anchor * b + j).collect(),
    }
}

/// KL divergence between the batch distribution of increments around each
/// anchor and a standard normal, with diagonal covariance:
/// `0.5 * sum_d (mu_d^2 + s_d^2 - log s_d^2 - 1)`, averaged over anchors.
/// Per-dimension variances are population estimates floored at
/// [`KL_VARIANCE_FLOOR`]; use [`count_floored_variances`] to see how many
/// dimensions hit the floor.
pub fn kl_ib_loss(delta: &IncrementTensor, side: Side) -> f64 {
    let b = delta.batch();
    let d = delta.dim();
    (0..b)
        .map(|a| {
            let rows = ib_rows(delta, a, side);
            let mut kl = 0.0;
            for dim in 0..d {
                let column = || rows.iter().map(|&p| delta.matrix().row(p)[dim]);
                let mu = column().sum::<f64>() / b as f64;
                let s2 = variance(column(), b).max(KL_VARIANCE_FLOOR);
                kl += mu * mu + s2 - s2.ln() - 1.0;
            }
            0.5 * kl
        })
        .sum::<f64>()
        / b as f64
}

/// Number of (anchor, dimension) cells whose batch variance fell at or
/// below the KL floor.
pub fn count_floored_variances(delta: &IncrementTensor, side: Side) -> usize {
    let b = delta.batch();
    let d = delta.dim();
    let mut floored = 0;
    for a in 0..b {
        let rows = ib_rows(delta, a, side);
        for dim in 0..d {
            let column = || rows.iter().map(|&p| delta.matrix().row(p)[dim]);
            if variance(column(), b) <= KL_VARIANCE_FLOOR {
                floored += 1;
            }
        }
    }
    floored
}

/// Tape counterpart of [`variance_loss`].
pub fn variance_loss_on_tape(
    tape: &mut Tape,
    delta: VarId,
    batch: usize,
    lambda: f64,
    estimator: VarianceEstimator,
) -> Result<VarId> {
    let eps = tape.l2_norm_rows(delta);
    let grid = tape.reshape(eps, batch, batch)?;
    let var = tape.variance_rows(grid);
    let corrected = tape.scalar_mul(var, estimator.correction(batch));
    let neg = tape.negate(corrected);
    let mean = tape.mean(neg);
    Ok(tape.clamp_min(mean, -lambda))
}

/// Tape counterpart of [`variance_loss_lse`].
pub fn variance_loss_lse_on_tape(tape: &mut Tape, delta: VarId, batch: usize) -> Result<VarId> {
    let eps = tape.l2_norm_rows(delta);
    let grid = tape.reshape(eps, batch, batch)?;
    let avg_weights = tape.constant(Matrix::filled(batch, 1, 1.0 / batch as f64));
    let mean_col = tape.matmul(grid, avg_weights)?;
    let spread = tape.constant(Matrix::filled(1, batch, 1.0));
    let mean_grid = tape.matmul(mean_col, spread)?;
    let dev = tape.sub(grid, mean_grid)?;
    let sq = tape.square(dev);
    let neg = tape.negate(sq);
    let ex = tape.exp(neg);
    let inner = tape.matmul(ex, avg_weights)?;
    let one = tape.constant(Matrix::filled(batch, 1, 1.0));
    let shifted = tape.add(inner, one)?;
    let lg = tape.log(shifted);
    Ok(tape.mean(lg))
}

/// Tape counterpart of [`direction_loss`]. The valid-pair sets are read
/// from the tape's current values, mirroring the plain exclusion rule.
pub fn direction_loss_on_tape(
    tape: &mut Tape,
    delta: VarId,
    batch: usize,
    sigma: f64,
) -> Result<VarId> {
    let norms: Vec<f64> = (0..batch * batch)
        .map(|p| l2_norm(tape.value(delta).row(p)))
        .collect();
    let z = tape.normalize_rows(delta);
    let mut per_anchor: Vec<VarId> = Vec::new();
    for i in 0..batch {
        let valid: Vec<usize> = (0..batch)
            .map(|j| i * batch + j)
            .filter(|&p| norms[p] > DELTA_NORM)
            .collect();
        let m = valid.len();
        if m < 2 {
            continue;
        }
        let dirs = tape.gather_rows(z, &valid)?;
        let dirs_t = tape.transpose(dirs);
        let gram = tape.matmul(dirs, dirs_t)?;
        let scaled = tape.scalar_mul(gram, sigma);
        let shift = tape.constant(Matrix::filled(m, m, sigma));
        let arg = tape.sub(scaled, shift)?;
        let kernel = tape.exp(arg);
        let mut mask = Matrix::filled(m, m, 1.0);
        for k in 0..m {
            mask.set(k, k, 0.0);
        }
        let mask = tape.constant(mask);
        let off_diag = tape.mul(kernel, mask)?;
        let col = tape.constant(Matrix::filled(m, 1, 1.0));
        let row = tape.constant(Matrix::filled(1, m, 1.0));
        let summed_cols = tape.matmul(off_diag, col)?;
        let summed = tape.matmul(row, summed_cols)?;
        let mean_pairs = tape.scalar_mul(summed, 1.0 / (m * (m - 1)) as f64);
        per_anchor.push(tape.log(mean_pairs));
    }
    let total = match per_anchor.into_iter().reduce(|a, b| {
        tape.add(a, b).expect("per-anchor scalars share shape")
    }) {
        Some(sum) => tape.scalar_mul(sum, 1.0 / batch as f64),
        None => tape.constant(Matrix::scalar(0.0)),
    };
    Ok(total)
}

/// Tape counterpart of [`kl_ib_loss`].
pub fn kl_ib_loss_on_tape(
    tape: &mut Tape,
    delta: VarId,
    batch: usize,
    side: Side,
) -> Result<VarId> {
    let d = tape.value(delta).cols();
    let avg_row = tape.constant(Matrix::filled(1, batch, 1.0 / batch as f64));
    let spread_col = tape.constant(Matrix::filled(batch, 1, 1.0));
    let sum_dims = tape.constant(Matrix::filled(d, 1, 1.0));
    let ones_1d = tape.constant(Matrix::filled(1, d, 1.0));
    let mut per_anchor: Vec<VarId> = Vec::new();
    for a in 0..batch {
        let rows: Vec<usize> = match side {
            Side::Video => (0..batch).map(|i| i * batch + a).collect(),
            Side::Text => (0..batch).map(|j| a * batch + j).collect(),
        };
        let x = tape.gather_rows(delta, &rows)?;
        let mu = tape.matmul(avg_row, x)?;
        let mu_grid = tape.matmul(spread_col, mu)?;
        let dev = tape.sub(x, mu_grid)?;
        let sq = tape.square(dev);
        let s2 = tape.matmul(avg_row, sq)?;
        let s2f = tape.clamp_min(s2, KL_VARIANCE_FLOOR);
        let mu_sq = tape.square(mu);
        let log_s2 = tape.log(s2f);
        let quad = tape.add(mu_sq, s2f)?;
        let with_log = tape.sub(quad, log_s2)?;
        let centered = tape.sub(with_log, ones_1d)?;
        let summed = tape.matmul(centered, sum_dims)?;
        per_anchor.push(tape.scalar_mul(summed, 0.5));
    }
    let sum = per_anchor
        .into_iter()
        .reduce(|a, b| tape.add(a, b).expect("per-anchor scalars share shape"))
        .expect("batch >= 1");
    Ok(tape.scalar_mul(sum, 1.0 / batch as f64))
}
