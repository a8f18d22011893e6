//! Central finite-difference certification of gradients.
//!
//! Every analytic gradient in the toolkit, hand-derived or tape-produced,
//! is checked against `(f(x + h e) - f(x - h e)) / 2h` entry by entry.
//! Relative error uses a floored denominator so near-zero entries compare
//! absolutely instead of blowing up.
//!
//! [`certification_suite`] bundles the per-module checks into a runnable
//! report for the command-line `gradcheck` entry point.

use std::fmt;

use crate::autograd::Tape;
use crate::contrastive::{
    grad_anchor_analytic, grad_perturbed_anchor, infonce_anchor, infonce_symmetric,
    infonce_symmetric_on_tape, pairwise_similarity, prob_rows, SimilarityMatrix,
};
use crate::error::{Error, Result};
use crate::increments::{IncrementTensor, PsiParams, Side, TokenTensor};
use crate::matrix::Matrix;
use crate::regularizers::{
    direction_loss, direction_loss_on_tape, kl_ib_loss, kl_ib_loss_on_tape, variance_loss,
    variance_loss_lse, variance_loss_lse_on_tape, variance_loss_on_tape, VarianceEstimator,
};
use crate::rng::{streams, RngStream};
use crate::synthdata::PairedBatch;
use crate::trainer::{total_loss, TrainConfig};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Central finite-difference gradient of a scalar function at `x`.
pub fn finite_difference<F>(mut f: F, x: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for k in 0..x.data().len() {
        let orig = x.data()[k];
        probe.data_mut()[k] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[k] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[k] = orig;
        grad.data_mut()[k] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Largest entry-wise relative error between two same-shaped matrices.
pub fn max_rel_error(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "max_rel_error",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max))
}

/// Largest entry deviation relative to the largest entry of either
/// gradient. The vector-level scale keeps finite-difference roundoff on
/// near-zero entries from registering as gradient error; entry-wise
/// comparison at matched scales is [`max_rel_error`].
pub fn norm_rel_mismatch(got: &Matrix, fd: &Matrix) -> f64 {
    let scale = got
        .data()
        .iter()
        .chain(fd.data())
        .fold(0.0f64, |m, &x| m.max(x.abs()))
        .max(REL_ERR_FLOOR);
    got.data()
        .iter()
        .zip(fd.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Which family of backward rules a certification check covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckModule {
    Contrastive,
    Regularizers,
    Psi,
}

impl CheckModule {
    pub const ALL: [CheckModule; 3] = [
        CheckModule::Contrastive,
        CheckModule::Regularizers,
        CheckModule::Psi,
    ];
}

impl fmt::Display for CheckModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckModule::Contrastive => "contrastive",
            CheckModule::Regularizers => "regularizers",
            CheckModule::Psi => "psi",
        })
    }
}

impl std::str::FromStr for CheckModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<CheckModule> {
        match s {
            "contrastive" => Ok(CheckModule::Contrastive),
            "regularizers" => Ok(CheckModule::Regularizers),
            "psi" => Ok(CheckModule::Psi),
            other => Err(Error::InvalidConfig(format!(
                "unknown check module {other:?} (expected contrastive, regularizers, or psi)"
            ))),
        }
    }
}

/// Pass threshold for every certification check.
pub const CHECK_TOLERANCE: f64 = 1e-5;

/// Per-check instance count in [`certification_suite`].
const CHECK_INSTANCES: usize = 12;

/// Temperature for the certified losses. The gradient formulas are
/// scale-free in the temperature, but saturated softmaxes push the true
/// gradients below what central differences can resolve, so the suite
/// certifies at a benign value.
const CHECK_TAU: f64 = 0.5;

/// Worst relative mismatch of one backward rule over sampled instances.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub module: CheckModule,
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
    pub threshold: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst < self.threshold
    }
}

/// Biases one gradient entry by a fraction of the gradient scale, far
/// above [`CHECK_TOLERANCE`]. Fault injection is the suite's negative
/// control: a harness that cannot flag a broken backward rule certifies
/// nothing.
fn inject_fault(got: &mut Matrix) {
    let scale = got
        .data()
        .iter()
        .fold(0.0f64, |m, &x| m.max(x.abs()))
        .max(1.0);
    got.data_mut()[0] += 1e-3 * scale;
}

fn row_cosines(t_i: &[f64], v: &Matrix) -> Result<Vec<f64>> {
    (0..v.rows())
        .map(|j| crate::matrix::cosine(t_i, v.row(j)))
        .collect()
}

fn random_pair(rng: &mut RngStream) -> (Matrix, Matrix) {
    let b = 2 + rng.below(7);
    let d = 2 + rng.below(15);
    (
        rng.gaussian_matrix(b, d, 0.0, 1.0),
        rng.gaussian_matrix(b, d, 0.0, 1.0),
    )
}

/// Pair increments with gaussian body and a per-anchor parity offset. The
/// offset keeps each anchor's increment statistics spread out, so the
/// variance and KL objectives are probed away from the flat or stiff
/// configurations where finite differences lose accuracy.
fn spread_increments(rng: &mut RngStream, b: usize, d: usize) -> Matrix {
    let mut delta = rng.gaussian_matrix(b * b, d, 0.0, 0.8);
    for i in 0..b {
        let offset = if i % 2 == 0 { 1.2 } else { -1.2 };
        for j in 0..b {
            for x in delta.row_mut(i * b + j) {
                *x += offset;
            }
        }
    }
    delta
}

fn check_anchor_gradient(rng: &mut RngStream, fault: bool) -> Result<f64> {
    let (t, v) = random_pair(rng);
    let (b, d) = t.shape();
    let sim = pairwise_similarity(&t, &v, None, Side::Text, CHECK_TAU)?;
    let p = prob_rows(&sim);
    let i = rng.below(b);
    let mut y_row = vec![0.0; b];
    y_row[i] = 1.0;
    let analytic = grad_anchor_analytic(t.row(i), &v, p.row(i), &y_row, CHECK_TAU)?;
    let mut analytic = Matrix::from_vec(1, d, analytic)?;
    if fault {
        inject_fault(&mut analytic);
    }
    let t_i = Matrix::from_vec(1, d, t.row(i).to_vec())?;
    let fd = finite_difference(
        |m| Ok(infonce_anchor(&row_cosines(m.row(0), &v)?, i, CHECK_TAU)),
        &t_i,
        FD_STEP,
    )?;
    Ok(norm_rel_mismatch(&analytic, &fd))
}

fn check_perturbed_anchor_gradient(rng: &mut RngStream, fault: bool) -> Result<f64> {
    let (t, v) = random_pair(rng);
    let (b, d) = t.shape();
    let i = rng.below(b);
    let j = rng.below(b);
    let delta_row = rng.gaussian_matrix(1, d, 0.0, 0.3);
    let scores_at = |delta: &Matrix| -> Result<Vec<f64>> {
        let shifted: Vec<f64> = t
            .row(i)
            .iter()
            .zip(delta.row(0))
            .map(|(a, b)| a + b)
            .collect();
        let mut s = row_cosines(t.row(i), &v)?;
        s[j] = crate::matrix::cosine(&shifted, v.row(j))?;
        Ok(s)
    };
    let s = scores_at(&delta_row)?;
    let probs = softmax(&s, CHECK_TAU);
    let shifted: Vec<f64> = t
        .row(i)
        .iter()
        .zip(delta_row.row(0))
        .map(|(a, b)| a + b)
        .collect();
    let y_ij = if i == j { 1.0 } else { 0.0 };
    let analytic = grad_perturbed_anchor(&shifted, v.row(j), probs[j], y_ij, CHECK_TAU)?;
    let mut analytic = Matrix::from_vec(1, d, analytic)?;
    if fault {
        inject_fault(&mut analytic);
    }
    let fd = finite_difference(
        |m| Ok(infonce_anchor(&scores_at(m)?, i, CHECK_TAU)),
        &delta_row,
        FD_STEP,
    )?;
    Ok(norm_rel_mismatch(&analytic, &fd))
}

fn softmax(scores: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = scores.iter().map(|s| s / tau).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn check_symmetric_infonce(rng: &mut RngStream, fault: bool) -> Result<f64> {
    let b = 2 + rng.below(7);
    let grid = rng.gaussian_matrix(b, b, 0.0, 0.5);
    let mut tape = Tape::new();
    let grid_id = tape.param(grid.clone());
    let root = infonce_symmetric_on_tape(&mut tape, grid_id, CHECK_TAU)?;
    let grads = tape.backward(root)?;
    let mut got = grads.get_or_zeros(grid_id, &tape);
    if fault {
        inject_fault(&mut got);
    }
    let fd = finite_difference(
        |m| Ok(infonce_symmetric(&SimilarityMatrix::new(m.clone(), CHECK_TAU)?)),
        &grid,
        FD_STEP,
    )?;
    Ok(norm_rel_mismatch(&got, &fd))
}

/// Shared shape of the four regularizer checks: tape gradient at the
/// increment leaf against finite differences of the plain evaluator.
fn check_regularizer<R, O>(
    rng: &mut RngStream,
    fault: bool,
    on_tape: R,
    oracle: O,
) -> Result<f64>
where
    R: Fn(&mut Tape, crate::autograd::VarId, usize) -> Result<crate::autograd::VarId>,
    O: Fn(&IncrementTensor) -> f64,
{
    let b = 2 + rng.below(5);
    let d = 2 + rng.below(7);
    let delta = spread_increments(rng, b, d);
    let mut tape = Tape::new();
    let delta_id = tape.param(delta.clone());
    let root = on_tape(&mut tape, delta_id, b)?;
    let grads = tape.backward(root)?;
    let mut got = grads.get_or_zeros(delta_id, &tape);
    if fault {
        inject_fault(&mut got);
    }
    let fd = finite_difference(
        |m| Ok(oracle(&IncrementTensor::new(m.clone(), b)?)),
        &delta,
        FD_STEP,
    )?;
    Ok(norm_rel_mismatch(&got, &fd))
}

/// The variance floor is certified away from its kink: a large floor
/// exercises the smooth branch, a tiny one the flat clamped branch.
fn check_variance_floor(rng: &mut RngStream, fault: bool) -> Result<f64> {
    let lambda = if rng.below(2) == 0 { 10.0 } else { 1e-3 };
    check_regularizer(
        rng,
        fault,
        |tape, id, b| variance_loss_on_tape(tape, id, b, lambda, VarianceEstimator::Population),
        |delta| variance_loss(delta, lambda, VarianceEstimator::Population),
    )
}

fn check_variance_lse(rng: &mut RngStream, fault: bool) -> Result<f64> {
    check_regularizer(rng, fault, variance_loss_lse_on_tape, variance_loss_lse)
}

fn check_direction_spread(rng: &mut RngStream, fault: bool) -> Result<f64> {
    let sigma = 2.0;
    check_regularizer(
        rng,
        fault,
        |tape, id, b| direction_loss_on_tape(tape, id, b, sigma),
        |delta| direction_loss(delta, sigma),
    )
}

fn check_kl_bottleneck(rng: &mut RngStream, fault: bool) -> Result<f64> {
    check_regularizer(
        rng,
        fault,
        |tape, id, b| kl_ib_loss_on_tape(tape, id, b, Side::Video),
        |delta| kl_ib_loss(delta, Side::Video),
    )
}

fn token_batch(rng: &mut RngStream, b: usize, d: usize) -> Result<PairedBatch> {
    let text = TokenTensor::new(rng.gaussian_matrix(b * 3, d, 0.0, 1.0), b, 3)?;
    let video = TokenTensor::new(rng.gaussian_matrix(b * 4, d, 0.0, 1.0), b, 4)?;
    Ok(PairedBatch {
        pooled_text: text.pooled(),
        pooled_video: video.pooled(),
        text,
        video,
        labels: (0..b).collect(),
        mask: vec![false; b * b],
    })
}

/// Certifies the total-objective gradient through the attention predictor
/// at every one of its four weight matrices.
fn check_attention_weights(rng: &mut RngStream, fault: bool) -> Result<f64> {
    let b = 3 + rng.below(2);
    let d = 3 + rng.below(4);
    let batch = token_batch(rng, b, d)?;
    let mut params = PsiParams::init(d, rng.next_u64());
    params.w_o = rng.gaussian_matrix(d, d, 0.0, 0.5);
    let mut cfg = TrainConfig {
        tau: CHECK_TAU,
        batch_size: 2,
        ..TrainConfig::default()
    };
    cfg.regularizers.w_ib = 0.01;
    cfg.regularizers.w_eps = 0.1;
    cfg.regularizers.w_dir = 0.1;
    let total_of = |p: &PsiParams| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = p.on_tape(&mut tape);
        Ok(total_loss(&mut tape, &batch, Some(&vars), &cfg)?.breakdown.total)
    };
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape);
    let pass = total_loss(&mut tape, &batch, Some(&vars), &cfg)?;
    let grads = tape.backward(pass.root)?;
    let mut worst: f64 = 0.0;
    for (slot, id) in vars.ids().into_iter().enumerate() {
        let mut got = grads.get_or_zeros(id, &tape);
        if fault && slot == 0 {
            inject_fault(&mut got);
        }
        let base = [&params.w_q, &params.w_k, &params.w_v, &params.w_o][slot].clone();
        let fd = finite_difference(
            |m| {
                let mut probe = params.clone();
                *match slot {
                    0 => &mut probe.w_q,
                    1 => &mut probe.w_k,
                    2 => &mut probe.w_v,
                    _ => &mut probe.w_o,
                } = m.clone();
                total_of(&probe)
            },
            &base,
            FD_STEP,
        )?;
        worst = worst.max(norm_rel_mismatch(&got, &fd));
    }
    Ok(worst)
}

type CheckFn = fn(&mut RngStream, bool) -> Result<f64>;

const CHECKS: [(CheckModule, &str, CheckFn); 8] = [
    (CheckModule::Contrastive, "anchor-gradient", check_anchor_gradient),
    (
        CheckModule::Contrastive,
        "perturbed-anchor-gradient",
        check_perturbed_anchor_gradient,
    ),
    (CheckModule::Contrastive, "symmetric-infonce", check_symmetric_infonce),
    (CheckModule::Regularizers, "variance-floor", check_variance_floor),
    (CheckModule::Regularizers, "variance-lse", check_variance_lse),
    (CheckModule::Regularizers, "direction-spread", check_direction_spread),
    (CheckModule::Regularizers, "kl-batch-bottleneck", check_kl_bottleneck),
    (CheckModule::Psi, "attention-weights", check_attention_weights),
];

/// Runs every check of the selected modules and reports each one's worst
/// relative mismatch. `fault` names a check whose analytic gradient is
/// deliberately biased on its first instance; passing an unknown name is
/// an error so negative controls cannot silently test nothing.
pub fn certification_suite(
    modules: &[CheckModule],
    seed: u64,
    fault: Option<&str>,
) -> Result<Vec<CheckReport>> {
    if let Some(name) = fault {
        if !CHECKS.iter().any(|(_, n, _)| *n == name) {
            return Err(Error::InvalidConfig(format!(
                "unknown fault-injection target {name:?}"
            )));
        }
    }
    let mut reports = Vec::new();
    for (idx, (module, name, check)) in CHECKS.iter().enumerate() {
        if !modules.contains(module) {
            continue;
        }
        let mut rng = RngStream::new(
            seed.wrapping_mul(CHECKS.len() as u64).wrapping_add(idx as u64),
            streams::GRADCHECK,
        );
        let mut worst: f64 = 0.0;
        for instance in 0..CHECK_INSTANCES {
            let faulted = fault == Some(name) && instance == 0;
            worst = worst.max(check(&mut rng, faulted)?);
        }
        reports.push(CheckReport {
            module: *module,
            name,
            instances: CHECK_INSTANCES,
            worst,
            threshold: CHECK_TOLERANCE,
        });
    }
    Ok(reports)
}
