//! Closed-form trust-region optimization of the increments.
//!
//! Working loss: the sum over text anchors of their InfoNCE row losses,
//! with every pair carrying its own increment. Around a coupled state
//! `delta0` the loss is linear in each increment, so the best update inside
//! the radius-epsilon ball has a closed form: step along the negative
//! normalized gradient until the ball boundary, with the step size from the
//! quadratic feasibility condition. All pairs step simultaneously from one
//! frozen gradient snapshot; probabilities are recomputed every step.
//!
//! This optimizer is both a standalone solver and the oracle that training
//! runs of the learned predictor are compared against.

use std::io::Write;

use crate::contrastive::{
    grad_perturbed_anchor, infonce_anchor, pairwise_similarity, prob_rows,
};
use crate::error::{Error, Result};
use crate::increments::{apply_increments, IncrementTensor, Side};
use crate::matrix::{dot, l2_norm, Matrix};
use crate::par;

/// Default radius: this fraction of the mean anchor norm.
pub const DEFAULT_EPSILON_FRACTION: f64 = 0.05;

/// `0.05 * mean_i ||t_i||`, the radius used when none is configured.
pub fn default_epsilon(t: &Matrix) -> f64 {
    let b = t.rows();
    let mean_norm = (0..b).map(|i| l2_norm(t.row(i))).sum::<f64>() / b as f64;
    DEFAULT_EPSILON_FRACTION * mean_norm
}

/// Sum over anchors of the per-anchor row loss at the coupled state.
pub fn coupled_loss(t: &Matrix, v: &Matrix, delta: &IncrementTensor, tau: f64) -> Result<f64> {
    let sim = pairwise_similarity(t, v, Some(delta), Side::Text, tau)?;
    let b = sim.batch();
    Ok((0..b)
        .map(|i| infonce_anchor(sim.matrix().row(i), i, tau))
        .sum())
}

/// Gradient of [`coupled_loss`] with respect to every increment, as a
/// `(B*B) x D` matrix. Row `i*B + j` holds `d L_i / d delta_ij` at the
/// given coupled state.
pub fn pair_gradients(
    t: &Matrix,
    v: &Matrix,
    delta: &IncrementTensor,
    tau: f64,
) -> Result<Matrix> {
    let b = t.rows();
    let d = t.cols();
    let sim = pairwise_similarity(t, v, Some(delta), Side::Text, tau)?;
    let p = prob_rows(&sim);
    let (anchors, _) = apply_increments(t, v, delta, Side::Text)?;
    let rows: Vec<Result<Vec<f64>>> = par::map_indexed(b * b, |pair| {
        let (i, j) = (pair / b, pair % b);
        let y = if i == j { 1.0 } else { 0.0 };
        grad_perturbed_anchor(anchors.row(pair), v.row(j), p.get(i, j), y, tau)
    });
    let mut g = Matrix::zeros(b * b, d);
    for (pair, row) in rows.into_iter().enumerate() {
        g.row_mut(pair).copy_from_slice(&row?);
    }
    Ok(g)
}

/// First-order model of [`coupled_loss`] expanded at `delta0`, evaluated
/// at `delta`: `L(delta0) + sum_ij <g_ij, delta_ij - delta0_ij>`.
pub fn linearized_loss(
    t: &Matrix,
    v: &Matrix,
    delta0: &IncrementTensor,
    delta: &IncrementTensor,
    tau: f64,
) -> Result<f64> {
    if delta0.batch() != delta.batch() || delta0.dim() != delta.dim() {
        return Err(Error::shape(
            "linearized-loss",
            format!(
                "expansion state batch {} dim {}, query batch {} dim {}",
                delta0.batch(),
                delta0.dim(),
                delta.batch(),
                delta.dim()
            ),
        ));
    }
    let base = coupled_loss(t, v, delta0, tau)?;
    let g = pair_gradients(t, v, delta0, tau)?;
    let mut correction = 0.0;
    for pair in 0..g.rows() {
        for ((&gk, &dk), &d0k) in g
            .row(pair)
            .iter()
            .zip(delta.matrix().row(pair))
            .zip(delta0.matrix().row(pair))
        {
            correction += gk * (dk - d0k);
        }
    }
    Ok(base + correction)
}

/// Largest feasible step along the unit direction `g_hat` from `delta_t`
/// that stays inside the radius-epsilon ball:
/// `alpha = <delta_t, g_hat> + sqrt(<delta_t, g_hat>^2 - ||delta_t||^2 + epsilon^2)`.
/// Real and non-negative whenever `||delta_t|| <= epsilon`.
pub fn step_size_alpha(delta_t: &[f64], g_hat: &[f64], epsilon: f64) -> Result<f64> {
    let inner = dot(delta_t, g_hat);
    let norm_sq = delta_t.iter().map(|x| x * x).sum::<f64>();
    let disc = inner * inner - norm_sq + epsilon * epsilon;
    if disc < -1e-12 {
        return Err(Error::NegativeDiscriminant { value: disc });
    }
    Ok(inner + disc.max(0.0).sqrt())
}

/// One-shot solution of the linearized problem at `delta = 0`:
/// `delta_ij = -epsilon * g_ij / ||g_ij||`, with zero-gradient pairs
/// keeping the zero increment.
pub fn noniterative_step(
    t: &Matrix,
    v: &Matrix,
    epsilon: f64,
    tau: f64,
) -> Result<IncrementTensor> {
    let b = t.rows();
    let zero = IncrementTensor::zeros(b, t.cols());
    let g = pair_gradients(t, v, &zero, tau)?;
    let mut delta = Matrix::zeros(b * b, t.cols());
    for pair in 0..b * b {
        let gn = l2_norm(g.row(pair));
        if gn == 0.0 {
            continue;
        }
        for (o, &gk) in delta.row_mut(pair).iter_mut().zip(g.row(pair)) {
            *o = -epsilon * gk / gn;
        }
    }
    IncrementTensor::new(delta, b)
}

/// One row of the optimization trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub step: usize,
    /// Coupled loss actually attained at this state.
    pub true_loss: f64,
    /// What the linear model (expanded at the previous state) predicted
    /// for this state; equals `true_loss` on the initial row.
    pub linear_loss: f64,
    pub max_delta_norm: f64,
    pub mean_delta_norm: f64,
}

/// Coupled increments plus the log of their optimization so far.
#[derive(Debug, Clone)]
pub struct TrustRegionState {
    delta: IncrementTensor,
    epsilon: f64,
    iteration: usize,
    trajectory: Vec<TrajectoryPoint>,
}

impl TrustRegionState {
    /// Fresh state at `delta = 0`.
    pub fn new(batch: usize, dim: usize, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "trust-region radius must be positive, got {epsilon}"
            )));
        }
        Ok(TrustRegionState {
            delta: IncrementTensor::zeros(batch, dim),
            epsilon,
            iteration: 0,
            trajectory: Vec::new(),
        })
    }

    pub fn delta(&self) -> &IncrementTensor {
        &self.delta
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn trajectory(&self) -> &[TrajectoryPoint] {
        &self.trajectory
    }

    fn norms_summary(&self) -> (f64, f64) {
        let norms = self.delta.norms();
        let max = norms.iter().copied().fold(0.0, f64::max);
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        (max, mean)
    }

    /// Writes the trajectory as CSV with a header row.
    pub fn write_trajectory_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "step,true_loss,linear_loss,max_delta_norm,mean_delta_norm")?;
        for p in &self.trajectory {
            writeln!(
                w,
                "{},{},{},{},{}",
                p.step, p.true_loss, p.linear_loss, p.max_delta_norm, p.mean_delta_norm
            )?;
        }
        Ok(())
    }
}

/// Runs `steps` simultaneous trust-region updates. Every step freezes the
/// gradient snapshot at the current coupled state, moves each pair by its
/// own closed-form step size, then recomputes probabilities for the next
/// snapshot. True and model losses are logged per step; an initial row is
/// logged the first time a state is iterated (even for zero steps).
pub fn iterate_coupled(
    t: &Matrix,
    v: &Matrix,
    mut state: TrustRegionState,
    steps: usize,
    tau: f64,
) -> Result<TrustRegionState> {
    if state.trajectory.is_empty() {
        let loss = coupled_loss(t, v, &state.delta, tau)?;
        let (max_norm, mean_norm) = state.norms_summary();
        state.trajectory.push(TrajectoryPoint {
            step: state.iteration,
            true_loss: loss,
            linear_loss: loss,
            max_delta_norm: max_norm,
            mean_delta_norm: mean_norm,
        });
    }
    let b = state.delta.batch();
    let d = state.delta.dim();
    for _ in 0..steps {
        let g = pair_gradients(t, v, &state.delta, tau)?;
        let mut base = coupled_loss(t, v, &state.delta, tau)?;
        let mut next = Matrix::zeros(b * b, d);
        for pair in 0..b * b {
            let current = state.delta.matrix().row(pair);
            let gn = l2_norm(g.row(pair));
            if gn == 0.0 {
                next.row_mut(pair).copy_from_slice(current);
                continue;
            }
            let g_hat: Vec<f64> = g.row(pair).iter().map(|&x| x / gn).collect();
            let alpha = step_size_alpha(current, &g_hat, state.epsilon)?;
            for ((o, &c), &gh) in next.row_mut(pair).iter_mut().zip(current).zip(&g_hat) {
                *o = c - alpha * gh;
            }
            // The model moves by <g, -alpha * g_hat> = -alpha * ||g||.
            base -= alpha * gn;
        }
        state.delta = IncrementTensor::new(next, b)?;
        state.iteration += 1;
        let true_loss = coupled_loss(t, v, &state.delta, tau)?;
        let (max_norm, mean_norm) = state.norms_summary();
        state.trajectory.push(TrajectoryPoint {
            step: state.iteration,
            true_loss,
            linear_loss: base,
            max_delta_norm: max_norm,
            mean_delta_norm: mean_norm,
        });
    }
    Ok(state)
}
