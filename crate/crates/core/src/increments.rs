//! Pair-specific increments and the cross-attention predictor that learns
//! them.
//!
//! For a batch of B anchors and B candidates there are B*B increments
//! `delta[i][j]`, stored row-major as a `(B*B) x D` matrix at index
//! `i*B + j`. The predictor psi maps the signed semantic gap
//! `eta * (v_j - t_i)` plus the token sequence of a context item to each
//! increment through one head of scaled dot-product attention:
//! query `q = g W_q`, keys and values projected from the L context tokens,
//! output through `W_o`. `W_o` starts at zero, so an untrained model scores
//! pairs exactly like the increment-free baseline.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, VarId};
use crate::error::{Error, Result};
use crate::matrix::{l2_norm, Matrix};
use crate::rng::{streams, RngStream};

/// Which modality a computation attaches to.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Text,
    Video,
}

/// Configuration of the increment predictor's inputs.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncrementConfig {
    /// Sign applied to the semantic gap, +1 or -1.
    pub eta: f64,
    /// Modality whose token sequence provides attention keys and values.
    pub context_side: Side,
    /// Modality that receives the increment before scoring.
    pub injection_side: Side,
}

impl Default for IncrementConfig {
    fn default() -> Self {
        IncrementConfig {
            eta: 1.0,
            context_side: Side::Video,
            injection_side: Side::Text,
        }
    }
}

impl IncrementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta != 1.0 && self.eta != -1.0 {
            return Err(Error::InvalidConfig(format!(
                "eta must be +1 or -1, got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

/// Token sequences for a batch: `len` tokens of dimension D per item,
/// stacked row-major into a `(batch * len) x D` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTensor {
    tokens: Matrix,
    batch: usize,
    len: usize,
}

impl TokenTensor {
    pub fn new(tokens: Matrix, batch: usize, len: usize) -> Result<Self> {
        if tokens.rows() != batch * len || len == 0 {
            return Err(Error::shape(
                "token-tensor",
                format!(
                    "{} rows for batch {batch} with {len} tokens per item",
                    tokens.rows()
                ),
            ));
        }
        Ok(TokenTensor { tokens, batch, len })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.tokens
    }

    /// Token `l` of item `item`.
    pub fn token(&self, item: usize, l: usize) -> &[f64] {
        self.tokens.row(item * self.len + l)
    }

    /// Mean of each item's tokens, one row per item.
    pub fn pooled(&self) -> Matrix {
        let mut out = Matrix::zeros(self.batch, self.dim());
        for item in 0..self.batch {
            for l in 0..self.len {
                let tok = self.token(item, l);
                for (o, &v) in out.row_mut(item).iter_mut().zip(tok) {
                    *o += v / self.len as f64;
                }
            }
        }
        out
    }

    /// Keeps only the listed items, in the given order.
    pub fn select_items(&self, items: &[usize]) -> Result<TokenTensor> {
        let mut data = Vec::with_capacity(items.len() * self.len * self.dim());
        for &item in items {
            if item >= self.batch {
                return Err(Error::shape(
                    "token-tensor select",
                    format!("item {item} out of range for batch {}", self.batch),
                ));
            }
            for l in 0..self.len {
                data.extend_from_slice(self.token(item, l));
            }
        }
        let tokens = Matrix::from_vec(items.len() * self.len, self.dim(), data)?;
        TokenTensor::new(tokens, items.len(), self.len)
    }
}

/// The four trainable projection matrices of psi.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

/// Current version of the psi checkpoint format.
pub const PSI_CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PsiHeader {
    d: usize,
    version: u32,
}

impl PsiParams {
    /// Gaussian init with std `1/sqrt(D)` for the projections and an all-zero
    /// output matrix, so the initial model reduces to the baseline.
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = RngStream::new(seed, streams::PSI_INIT);
        let std = 1.0 / (dim as f64).sqrt();
        PsiParams {
            w_q: rng.gaussian_matrix(dim, dim, 0.0, std),
            w_k: rng.gaussian_matrix(dim, dim, 0.0, std),
            w_v: rng.gaussian_matrix(dim, dim, 0.0, std),
            w_o: Matrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.w_q.rows();
        for (name, m) in self.matrices() {
            if m.shape() != (d, d) {
                return Err(Error::shape(
                    "psi-params",
                    format!("{name} is {:?}, expected {d}x{d}", m.shape()),
                ));
            }
            if !m.all_finite() {
                return Err(Error::InvalidConfig(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }

    pub fn matrices(&self) -> [(&'static str, &Matrix); 4] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ]
    }

    /// Registers all four matrices as trainable leaves.
    pub fn on_tape(&self, tape: &mut Tape) -> PsiVars {
        PsiVars {
            w_q: tape.param(self.w_q.clone()),
            w_k: tape.param(self.w_k.clone()),
            w_v: tape.param(self.w_v.clone()),
            w_o: tape.param(self.w_o.clone()),
        }
    }

    /// Checkpoint format: one JSON header line `{d, version}`, then the four
    /// matrices in the flat binary format, in order W_q, W_k, W_v, W_o.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header = PsiHeader {
            d: self.dim(),
            version: PSI_CHECKPOINT_VERSION,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for (_, m) in self.matrices() {
            m.write_bin(&mut w)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PsiParams> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: PsiHeader = serde_json::from_str(line.trim_end())?;
        if header.version != PSI_CHECKPOINT_VERSION {
            return Err(Error::BadFormat(format!(
                "unsupported psi checkpoint version {}",
                header.version
            )));
        }
        let params = PsiParams {
            w_q: read_square(&mut r, header.d)?,
            w_k: read_square(&mut r, header.d)?,
            w_v: read_square(&mut r, header.d)?,
            w_o: read_square(&mut r, header.d)?,
        };
        params.validate()?;
        Ok(params)
    }
}

fn read_square<R: Read>(r: &mut R, d: usize) -> Result<Matrix> {
    let m = Matrix::read_bin(r)?;
    if m.shape() != (d, d) {
        return Err(Error::BadFormat(format!(
            "checkpoint matrix is {:?}, header says {d}x{d}",
            m.shape()
        )));
    }
    Ok(m)
}

/// Tape handles of the four psi parameters.
#[derive(Copy, Clone, Debug)]
pub struct PsiVars {
    pub w_q: VarId,
    pub w_k: VarId,
    pub w_v: VarId,
    pub w_o: VarId,
}

impl PsiVars {
    pub fn ids(&self) -> [VarId; 4] {
        [self.w_q, self.w_k, self.w_v, self.w_o]
    }

    /// Reads the current tape values back into a parameter struct.
    pub fn snapshot(&self, tape: &Tape) -> PsiParams {
        PsiParams {
            w_q: tape.value(self.w_q).clone(),
            w_k: tape.value(self.w_k).clone(),
            w_v: tape.value(self.w_v).clone(),
            w_o: tape.value(self.w_o).clone(),
        }
    }
}

/// All B*B increments of one batch with their norms cached.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementTensor {
    delta: Matrix,
    norms: Vec<f64>,
    batch: usize,
}

impl IncrementTensor {
    pub fn new(delta: Matrix, batch: usize) -> Result<Self> {
        if delta.rows() != batch * batch {
            return Err(Error::shape(
                "increment-tensor",
                format!("{} rows for batch {batch}", delta.rows()),
            ));
        }
        let norms = (0..delta.rows()).map(|p| l2_norm(delta.row(p))).collect();
        Ok(IncrementTensor {
            delta,
            norms,
            batch,
        })
    }

    pub fn zeros(batch: usize, dim: usize) -> Self {
        IncrementTensor {
            delta: Matrix::zeros(batch * batch, dim),
            norms: vec![0.0; batch * batch],
            batch,
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn dim(&self) -> usize {
        self.delta.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.delta
    }

    pub fn into_matrix(self) -> Matrix {
        self.delta
    }

    /// Row index of pair `(i, j)`.
    pub fn pair_index(&self, i: usize, j: usize) -> usize {
        i * self.batch + j
    }

    pub fn row(&self, i: usize, j: usize) -> &[f64] {
        self.delta.row(self.pair_index(i, j))
    }

    /// Cached norm `||delta[i][j]||`.
    pub fn norm(&self, i: usize, j: usize) -> f64 {
        self.norms[self.pair_index(i, j)]
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }
}

/// Anchor and candidate item indices for every pair row `p = i*B + j`:
/// the first vector maps `p` to `i`, the second to `j`.
pub fn pair_item_indices(batch: usize) -> (Vec<usize>, Vec<usize>) {
    let mut anchors = Vec::with_capacity(batch * batch);
    let mut candidates = Vec::with_capacity(batch * batch);
    for i in 0..batch {
        for j in 0..batch {
            anchors.push(i);
            candidates.push(j);
        }
    }
    (anchors, candidates)
}

/// Runs psi for every pair on the tape and returns the `(B*B) x D`
/// increment node.
///
/// `t` and `v` are the pooled `B x D` embeddings already on the tape;
/// `context` supplies the token sequences named by `cfg.context_side`.
/// The construction uses only gathers and dense products on `(B*B)`-row
/// matrices, so one forward costs O(B^2 L D) like the similarity pass.
pub fn psi_forward(
    tape: &mut Tape,
    t: VarId,
    v: VarId,
    context: &TokenTensor,
    cfg: &IncrementConfig,
    vars: &PsiVars,
) -> Result<VarId> {
    cfg.validate()?;
    let (b_t, d) = tape.value(t).shape();
    let (b_v, d_v) = tape.value(v).shape();
    if b_t != b_v || d != d_v {
        return Err(Error::shape(
            "psi-forward",
            format!("pooled shapes {b_t}x{d} vs {b_v}x{d_v}"),
        ));
    }
    if context.batch() != b_t || context.dim() != d {
        return Err(Error::shape(
            "psi-forward",
            format!(
                "context is batch {} dim {}, embeddings are batch {b_t} dim {d}",
                context.batch(),
                context.dim()
            ),
        ));
    }
    let b = b_t;
    let l = context.len();
    let (anchor_idx, candidate_idx) = pair_item_indices(b);
    let context_items = match cfg.context_side {
        Side::Text => &anchor_idx,
        Side::Video => &candidate_idx,
    };

    let t_rows = tape.gather_rows(t, &anchor_idx)?;
    let v_rows = tape.gather_rows(v, &candidate_idx)?;
    let gap = tape.sub(v_rows, t_rows)?;
    let signed_gap = tape.scalar_mul(gap, cfg.eta);
    let queries = tape.matmul(signed_gap, vars.w_q)?;

    let tokens = tape.constant(context.matrix().clone());
    let keys = tape.matmul(tokens, vars.w_k)?;
    let values = tape.matmul(tokens, vars.w_v)?;

    let pairs = b * b;
    let ones_d = tape.constant(Matrix::filled(d, 1, 1.0));
    let token_rows: Vec<Vec<usize>> = (0..l)
        .map(|tok| context_items.iter().map(|&item| item * l + tok).collect())
        .collect();

    let mut score_grid: Option<VarId> = None;
    for (tok, rows) in token_rows.iter().enumerate() {
        let key_rows = tape.gather_rows(keys, rows)?;
        let qk = tape.mul(queries, key_rows)?;
        let score_col = tape.matmul(qk, ones_d)?;
        let mut one_hot = Matrix::zeros(1, l);
        one_hot.set(0, tok, 1.0);
        let slot = tape.constant(one_hot);
        let placed = tape.matmul(score_col, slot)?;
        score_grid = Some(match score_grid {
            Some(acc) => tape.add(acc, placed)?,
            None => placed,
        });
    }
    let scores = score_grid.expect("L >= 1 by TokenTensor invariant");
    let scaled = tape.scalar_mul(scores, 1.0 / (d as f64).sqrt());
    let attn = tape.row_softmax(scaled);
    debug_assert_eq!(tape.value(attn).shape(), (pairs, l));

    let ones_row_d = tape.constant(Matrix::filled(1, d, 1.0));
    let mut attended: Option<VarId> = None;
    for (tok, rows) in token_rows.iter().enumerate() {
        let mut pick = Matrix::zeros(l, 1);
        pick.set(tok, 0, 1.0);
        let col_sel = tape.constant(pick);
        let weight_col = tape.matmul(attn, col_sel)?;
        let weight_full = tape.matmul(weight_col, ones_row_d)?;
        let value_rows = tape.gather_rows(values, rows)?;
        let term = tape.mul(weight_full, value_rows)?;
        attended = Some(match attended {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let out = attended.expect("L >= 1 by TokenTensor invariant");
    tape.matmul(out, vars.w_o)
}

/// Convenience evaluation of psi outside training: runs one throwaway tape
/// with constant leaves and wraps the result.
pub fn psi_predict(
    params: &PsiParams,
    t: &Matrix,
    v: &Matrix,
    context: &TokenTensor,
    cfg: &IncrementConfig,
) -> Result<IncrementTensor> {
    params.validate()?;
    let mut tape = Tape::new();
    let tv = tape.constant(t.clone());
    let vv = tape.constant(v.clone());
    let vars = PsiVars {
        w_q: tape.constant(params.w_q.clone()),
        w_k: tape.constant(params.w_k.clone()),
        w_v: tape.constant(params.w_v.clone()),
        w_o: tape.constant(params.w_o.clone()),
    };
    let delta = psi_forward(&mut tape, tv, vv, context, cfg, &vars)?;
    IncrementTensor::new(tape.value(delta).clone(), t.rows())
}

/// Expands the batch to pair rows and injects the increments on the
/// configured side. Returns `(anchor_rows, candidate_rows)`, each
/// `(B*B) x D`, ready for row-wise similarity.
pub fn apply_increments(
    t: &Matrix,
    v: &Matrix,
    delta: &IncrementTensor,
    injection_side: Side,
) -> Result<(Matrix, Matrix)> {
    let b = delta.batch();
    if t.rows() != b || v.rows() != b || t.cols() != delta.dim() || v.cols() != delta.dim() {
        return Err(Error::shape(
            "apply-increments",
            format!(
                "T {:?}, V {:?}, delta batch {b} dim {}",
                t.shape(),
                v.shape(),
                delta.dim()
            ),
        ));
    }
    let d = delta.dim();
    let mut anchor_rows = Matrix::zeros(b * b, d);
    let mut candidate_rows = Matrix::zeros(b * b, d);
    for i in 0..b {
        for j in 0..b {
            let p = i * b + j;
            anchor_rows.row_mut(p).copy_from_slice(t.row(i));
            candidate_rows.row_mut(p).copy_from_slice(v.row(j));
            let target = match injection_side {
                Side::Text => anchor_rows.row_mut(p),
                Side::Video => candidate_rows.row_mut(p),
            };
            for (o, &dv) in target.iter_mut().zip(delta.row(i, j)) {
                *o += dv;
            }
        }
    }
    Ok((anchor_rows, candidate_rows))
}

/// Tape counterpart of [`apply_increments`].
pub fn apply_increments_on_tape(
    tape: &mut Tape,
    t: VarId,
    v: VarId,
    delta: VarId,
    injection_side: Side,
) -> Result<(VarId, VarId)> {
    let b = tape.value(t).rows();
    let pairs = tape.value(delta).rows();
    if pairs != b * b || tape.value(v).rows() != b {
        return Err(Error::shape(
            "apply-increments",
            format!("{pairs} increment rows for batch {b}"),
        ));
    }
    let (anchor_idx, candidate_idx) = pair_item_indices(b);
    let t_rows = tape.gather_rows(t, &anchor_idx)?;
    let v_rows = tape.gather_rows(v, &candidate_idx)?;
    Ok(match injection_side {
        Side::Text => (tape.add(t_rows, delta)?, v_rows),
        Side::Video => (t_rows, tape.add(v_rows, delta)?),
    })
}
