//! InfoNCE losses over increment-adjusted similarities, with closed-form
//! gradients kept as an independent oracle.
//!
//! The similarity of pair `(i, j)` is `cos(t_i + delta[i][j], v_j)` under
//! text-side injection (or the mirrored form for video-side). Per-anchor
//! InfoNCE compares the positive against the whole row at temperature tau;
//! the symmetric loss averages the text-to-video and video-to-text
//! directions.
//!
//! The hand-derived gradient functions carry the `1/tau` softmax chain
//! factor so they equal the true derivative of the loss as implemented;
//! finite-difference certification depends on that factor whenever
//! `tau != 1`.

use crate::autograd::{logsumexp, softmax_into, Tape, VarId};
use crate::error::{Error, Result};
use crate::gradcheck::relative_error;
use crate::increments::{apply_increments, pair_item_indices, IncrementTensor, Side};
use crate::matrix::{dot, l2_norm, Matrix, DELTA_NORM};
use crate::par;

/// Similarity grid of one batch, with the temperature it will be scored at.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    s: Matrix,
    tau: f64,
}

impl SimilarityMatrix {
    pub fn new(s: Matrix, tau: f64) -> Result<Self> {
        if s.rows() != s.cols() {
            return Err(Error::shape(
                "similarity-matrix",
                format!("{}x{} is not square", s.rows(), s.cols()),
            ));
        }
        if !(tau > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        Ok(SimilarityMatrix { s, tau })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.s
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn batch(&self) -> usize {
        self.s.rows()
    }
}

/// Builds the `B x B` similarity grid, optionally perturbed by increments
/// on the given side. Work is O(B^2 D), parallel over anchor rows.
pub fn pairwise_similarity(
    t: &Matrix,
    v: &Matrix,
    delta: Option<&IncrementTensor>,
    side: Side,
    tau: f64,
) -> Result<SimilarityMatrix> {
    if t.shape() != v.shape() {
        return Err(Error::shape(
            "pairwise-similarity",
            format!("T {:?} vs V {:?}", t.shape(), v.shape()),
        ));
    }
    if let Some(inc) = delta {
        if inc.batch() != t.rows() || inc.dim() != t.cols() {
            return Err(Error::shape(
                "pairwise-similarity",
                format!(
                    "increments are batch {} dim {}, embeddings {:?}",
                    inc.batch(),
                    inc.dim(),
                    t.shape()
                ),
            ));
        }
    }
    let (b, d) = t.shape();
    let rows: Vec<Result<Vec<f64>>> = par::map_indexed(b, |i| {
        let mut row = Vec::with_capacity(b);
        let mut anchor = vec![0.0; d];
        let mut candidate = vec![0.0; d];
        for j in 0..b {
            anchor.copy_from_slice(t.row(i));
            candidate.copy_from_slice(v.row(j));
            if let Some(inc) = delta {
                let target = match side {
                    Side::Text => &mut anchor,
                    Side::Video => &mut candidate,
                };
                for (o, &dv) in target.iter_mut().zip(inc.row(i, j)) {
                    *o += dv;
                }
            }
            let (na, nc) = (l2_norm(&anchor), l2_norm(&candidate));
            let norm = na.min(nc);
            if norm <= DELTA_NORM {
                return Err(Error::DegeneratePair {
                    i,
                    j,
                    norm,
                    floor: DELTA_NORM,
                });
            }
            row.push(dot(&anchor, &candidate) / (na * nc));
        }
        Ok(row)
    });
    let mut s = Matrix::zeros(b, b);
    for (i, row) in rows.into_iter().enumerate() {
        s.row_mut(i).copy_from_slice(&row?);
    }
    SimilarityMatrix::new(s, tau)
}

/// Row-wise (text-to-video) softmax probabilities of `s / tau`.
pub fn prob_rows(sim: &SimilarityMatrix) -> Matrix {
    let b = sim.batch();
    let mut p = Matrix::zeros(b, b);
    for i in 0..b {
        let z: Vec<f64> = sim.s.row(i).iter().map(|&x| x / sim.tau).collect();
        softmax_into(&z, p.row_mut(i));
    }
    p
}

/// Column-wise (video-to-text) softmax probabilities of `s / tau`.
pub fn prob_cols(sim: &SimilarityMatrix) -> Matrix {
    let b = sim.batch();
    let st = sim.s.transpose();
    let mut pt = Matrix::zeros(b, b);
    for j in 0..b {
        let z: Vec<f64> = st.row(j).iter().map(|&x| x / sim.tau).collect();
        softmax_into(&z, pt.row_mut(j));
    }
    pt.transpose()
}

/// Per-anchor InfoNCE: `-log(exp(s_pos/tau) / sum_k exp(s_k/tau))`,
/// computed in max-shifted form.
pub fn infonce_anchor(s_row: &[f64], positive: usize, tau: f64) -> f64 {
    debug_assert!(positive < s_row.len());
    let z: Vec<f64> = s_row.iter().map(|&x| x / tau).collect();
    logsumexp(&z) - z[positive]
}

/// Mean anchor loss over rows (text-to-video direction).
pub fn infonce_t2v(sim: &SimilarityMatrix) -> f64 {
    let b = sim.batch();
    (0..b)
        .map(|i| infonce_anchor(sim.s.row(i), i, sim.tau))
        .sum::<f64>()
        / b as f64
}

/// Mean anchor loss over columns (video-to-text direction).
pub fn infonce_v2t(sim: &SimilarityMatrix) -> f64 {
    let b = sim.batch();
    let st = sim.s.transpose();
    (0..b)
        .map(|j| infonce_anchor(st.row(j), j, sim.tau))
        .sum::<f64>()
        / b as f64
}

/// Symmetric InfoNCE: the mean of the two directional losses.
pub fn infonce_symmetric(sim: &SimilarityMatrix) -> f64 {
    0.5 * (infonce_t2v(sim) + infonce_v2t(sim))
}

fn similarity_bracket(anchor: &[f64], candidate: &[f64], context: &str) -> Result<Vec<f64>> {
    let na = l2_norm(anchor);
    let nc = l2_norm(candidate);
    let norm = na.min(nc);
    if norm <= DELTA_NORM {
        return Err(Error::DegenerateNorm {
            context: context.into(),
            norm,
            floor: DELTA_NORM,
        });
    }
    let cos = dot(anchor, candidate) / (na * nc);
    Ok(anchor
        .iter()
        .zip(candidate)
        .map(|(&a, &c)| c / (na * nc) - cos * a / (na * na))
        .collect())
}

/// Closed-form gradient of the per-anchor InfoNCE loss with respect to the
/// unperturbed anchor `t_i`:
/// `(1/tau) * sum_j (p_ij - y_ij) * [v_j/(|t||v_j|) - cos(t, v_j) * t/|t|^2]`.
pub fn grad_anchor_analytic(
    t_i: &[f64],
    v: &Matrix,
    p_row: &[f64],
    y_row: &[f64],
    tau: f64,
) -> Result<Vec<f64>> {
    if p_row.len() != v.rows() || y_row.len() != v.rows() || t_i.len() != v.cols() {
        return Err(Error::shape(
            "grad-anchor",
            format!(
                "t has {} dims, V is {:?}, p/y have {}/{} entries",
                t_i.len(),
                v.shape(),
                p_row.len(),
                y_row.len()
            ),
        ));
    }
    let mut grad = vec![0.0; t_i.len()];
    for j in 0..v.rows() {
        let coeff = (p_row[j] - y_row[j]) / tau;
        if coeff == 0.0 {
            continue;
        }
        let bracket = similarity_bracket(t_i, v.row(j), "grad-anchor")?;
        for (g, b) in grad.iter_mut().zip(bracket) {
            *g += coeff * b;
        }
    }
    Ok(grad)
}

/// Closed-form gradient of the per-anchor loss with respect to one
/// perturbed anchor `t_delta[i][j]`:
/// `((p_ij - y_ij)/tau) * [v_j/(|t_d||v_j|) - cos(t_d, v_j) * t_d/|t_d|^2]`.
pub fn grad_perturbed_anchor(
    t_delta: &[f64],
    v_j: &[f64],
    p_ij: f64,
    y_ij: f64,
    tau: f64,
) -> Result<Vec<f64>> {
    let coeff = (p_ij - y_ij) / tau;
    if coeff == 0.0 {
        return Ok(vec![0.0; t_delta.len()]);
    }
    let bracket = similarity_bracket(t_delta, v_j, "grad-perturbed-anchor")?;
    Ok(bracket.into_iter().map(|b| coeff * b).collect())
}

/// Reshapes row-wise cosine of two `(B*B) x D` pair-row matrices into the
/// `B x B` similarity grid, on the tape.
pub fn similarity_grid_on_tape(
    tape: &mut Tape,
    anchor_rows: VarId,
    candidate_rows: VarId,
    batch: usize,
) -> Result<VarId> {
    let cos = tape.cosine_rows(anchor_rows, candidate_rows)?;
    tape.reshape(cos, batch, batch)
}

/// Mean anchor loss over the rows of the grid, on the tape. The diagonal is
/// extracted with a constant identity mask so everything stays inside the
/// recorded operation set.
pub fn infonce_rows_on_tape(tape: &mut Tape, grid: VarId, tau: f64) -> Result<VarId> {
    let b = tape.value(grid).rows();
    if tape.value(grid).cols() != b {
        return Err(Error::shape(
            "infonce-rows",
            format!("{:?} grid is not square", tape.value(grid).shape()),
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let z = tape.scalar_mul(grid, 1.0 / tau);
    let lse = tape.logsumexp_rows(z);
    let eye = tape.constant(Matrix::identity(b));
    let masked = tape.mul(z, eye)?;
    let ones = tape.constant(Matrix::filled(b, 1, 1.0));
    let diag = tape.matmul(masked, ones)?;
    let per_anchor = tape.sub(lse, diag)?;
    Ok(tape.mean(per_anchor))
}

/// Symmetric InfoNCE on the tape: mean of the row-direction loss on the
/// grid and on its transpose.
pub fn infonce_symmetric_on_tape(tape: &mut Tape, grid: VarId, tau: f64) -> Result<VarId> {
    let t2v = infonce_rows_on_tape(tape, grid, tau)?;
    let flipped = tape.transpose(grid);
    let v2t = infonce_rows_on_tape(tape, flipped, tau)?;
    let sum = tape.add(t2v, v2t)?;
    Ok(tape.scalar_mul(sum, 0.5))
}

/// Maximum absolute deviations between autograd leaves and the closed-form
/// per-pair gradients, for the text-to-video mean loss.
#[derive(Debug, Clone, Copy)]
pub struct GradientFlowReport {
    /// `max_i | d L / d t_i  -  sum_j g_ij |` (anchor gradient vs the sum of
    /// its per-pair gradients).
    pub anchor_deviation: f64,
    /// `max_ij | d L / d delta_ij  -  g_ij |` (increment gradient vs the
    /// perturbed-anchor gradient).
    pub increment_deviation: f64,
}

impl GradientFlowReport {
    pub fn max_deviation(&self) -> f64 {
        self.anchor_deviation.max(self.increment_deviation)
    }
}

/// Differentiates the text-to-video mean loss twice over: once with
/// autograd through the pair expansion, once with the closed-form
/// perturbed-anchor formula, and reports how far apart they are.
pub fn check_gradient_flow(
    t: &Matrix,
    v: &Matrix,
    delta: &IncrementTensor,
    tau: f64,
) -> Result<GradientFlowReport> {
    let b = t.rows();
    let mut tape = Tape::new();
    let tv = tape.param(t.clone());
    let dv = tape.param(delta.matrix().clone());
    let vv = tape.constant(v.clone());
    let (anchor_idx, candidate_idx) = pair_item_indices(b);
    let t_rows = tape.gather_rows(tv, &anchor_idx)?;
    let perturbed = tape.add(t_rows, dv)?;
    let v_rows = tape.gather_rows(vv, &candidate_idx)?;
    let grid = similarity_grid_on_tape(&mut tape, perturbed, v_rows, b)?;
    let loss = infonce_rows_on_tape(&mut tape, grid, tau)?;
    let grads = tape.backward(loss)?;
    let d_anchor = grads.get_or_zeros(tv, &tape);
    let d_delta = grads.get_or_zeros(dv, &tape);

    let sim = pairwise_similarity(t, v, Some(delta), Side::Text, tau)?;
    let p = prob_rows(&sim);
    let (anchors, _) = apply_increments(t, v, delta, Side::Text)?;
    let scale = 1.0 / b as f64;

    let mut anchor_dev = 0.0f64;
    let mut increment_dev = 0.0f64;
    for i in 0..b {
        let mut pair_sum = vec![0.0; t.cols()];
        for j in 0..b {
            let pidx = i * b + j;
            let y = if i == j { 1.0 } else { 0.0 };
            let g =
                grad_perturbed_anchor(anchors.row(pidx), v.row(j), p.get(i, j), y, tau)?;
            for (k, &gk) in g.iter().enumerate() {
                let expected = scale * gk;
                pair_sum[k] += expected;
                increment_dev = increment_dev.max((d_delta.get(pidx, k) - expected).abs());
            }
        }
        for (k, &sum) in pair_sum.iter().enumerate() {
            anchor_dev = anchor_dev.max((d_anchor.get(i, k) - sum).abs());
        }
    }
    Ok(GradientFlowReport {
        anchor_deviation: anchor_dev,
        increment_deviation: increment_dev,
    })
}

/// Worst relative disagreement between the plain similarity grid and the
/// tape-recorded one, used by composition tests.
pub fn grid_consistency(sim: &SimilarityMatrix, tape_grid: &Matrix) -> Result<f64> {
    if sim.matrix().shape() != tape_grid.shape() {
        return Err(Error::shape(
            "grid-consistency",
            format!("{:?} vs {:?}", sim.matrix().shape(), tape_grid.shape()),
        ));
    }
    Ok(sim
        .matrix()
        .data()
        .iter()
        .zip(tape_grid.data())
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max))
}
