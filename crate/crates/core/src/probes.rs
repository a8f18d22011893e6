//! Geometry probes: per-pair angles, norms, and distances of the shifted
//! anchors, plus hypersphere alignment/uniformity metrics.
//!
//! The per-pair records answer the questions the increments raise: where
//! does Δ point relative to the gap vector `v_j - t_i`, how far does the
//! shifted anchor `t_i + Δ_ij` move, and does it approach or leave the
//! candidate. Aggregates are computed from the records themselves, never
//! from a second pass over the embeddings.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::increments::IncrementTensor;
use crate::matrix::{cosine, l2_norm, Matrix, DELTA_NORM};

/// Histogram resolution for the aggregate report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub histogram_bins: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { histogram_bins: 64 }
    }
}

/// Angle between two vectors in radians, in `[0, pi]`. Degenerate inputs
/// are an error, matching [`cosine`].
pub fn angle(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(cosine(a, b)?.clamp(-1.0, 1.0).acos())
}

/// Everything measured for one `(i, j)` pair. Angle fields are `None`
/// when the increment (or the gap vector) is too short to orient.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub i: usize,
    pub j: usize,
    pub is_positive: bool,
    pub is_false_negative: bool,
    /// Angle between `delta_ij` and the gap vector `v_j - t_i`.
    pub angle_delta_gap: Option<f64>,
    /// Angle between `delta_ij` and the anchor `t_i`.
    pub angle_delta_anchor: Option<f64>,
    pub anchor_norm: f64,
    pub shifted_anchor_norm: f64,
    pub pair_distance: f64,
    pub shifted_distance: f64,
    pub shifted_cosine: f64,
}

/// Fixed-range histogram over one record field.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

/// Mean, population std, and histogram of one field over the pairs where
/// it is defined.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSummary {
    pub field: &'static str,
    pub defined: usize,
    pub mean: f64,
    pub std: f64,
    pub histogram: Histogram,
}

/// Per-pair records plus aggregates derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryReport {
    batch: usize,
    records: Vec<PairRecord>,
    summaries: Vec<FieldSummary>,
}

const FIELDS: [&str; 7] = [
    "angle_delta_gap",
    "angle_delta_anchor",
    "anchor_norm",
    "shifted_anchor_norm",
    "pair_distance",
    "shifted_distance",
    "shifted_cosine",
];

fn field_value(record: &PairRecord, field: &str) -> Option<f64> {
    match field {
        "angle_delta_gap" => record.angle_delta_gap,
        "angle_delta_anchor" => record.angle_delta_anchor,
        "anchor_norm" => Some(record.anchor_norm),
        "shifted_anchor_norm" => Some(record.shifted_anchor_norm),
        "pair_distance" => Some(record.pair_distance),
        "shifted_distance" => Some(record.shifted_distance),
        "shifted_cosine" => Some(record.shifted_cosine),
        _ => unreachable!("unknown probe field {field}"),
    }
}

fn summarize(field: &'static str, records: &[PairRecord], bins: usize) -> FieldSummary {
    let values: Vec<f64> = records.iter().filter_map(|r| field_value(r, field)).collect();
    let n = values.len();
    if n == 0 {
        return FieldSummary {
            field,
            defined: 0,
            mean: f64::NAN,
            std: f64::NAN,
            histogram: Histogram {
                lo: f64::NAN,
                hi: f64::NAN,
                counts: vec![0; bins],
            },
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0; bins];
    for &v in &values {
        let bin = if hi > lo {
            (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
        } else {
            0
        };
        counts[bin] += 1;
    }
    FieldSummary {
        field,
        defined: n,
        mean,
        std: var.sqrt(),
        histogram: Histogram { lo, hi, counts },
    }
}

/// Measures every pair of the batch under the given increments. The mask,
/// when present, is the row-major B*B false-negative indicator.
pub fn geometry_snapshot(
    t: &Matrix,
    v: &Matrix,
    delta: &IncrementTensor,
    mask: Option<&[bool]>,
    cfg: &ProbeConfig,
) -> Result<GeometryReport> {
    let b = t.rows();
    let d = t.cols();
    if v.shape() != (b, d) || delta.batch() != b || delta.dim() != d {
        return Err(Error::shape(
            "geometry-snapshot",
            format!(
                "text {}x{}, video {}x{}, increments batch {} dim {}",
                b,
                d,
                v.rows(),
                v.cols(),
                delta.batch(),
                delta.dim()
            ),
        ));
    }
    if let Some(m) = mask {
        if m.len() != b * b {
            return Err(Error::shape(
                "geometry-snapshot",
                format!("mask has {} entries, want {}", m.len(), b * b),
            ));
        }
    }
    if cfg.histogram_bins == 0 {
        return Err(Error::InvalidConfig("histogram_bins must be positive".into()));
    }
    let mut records = Vec::with_capacity(b * b);
    let mut gap = vec![0.0; d];
    let mut shifted = vec![0.0; d];
    for i in 0..b {
        let anchor = t.row(i);
        let anchor_norm = l2_norm(anchor);
        for j in 0..b {
            let candidate = v.row(j);
            let inc = delta.row(i, j);
            for k in 0..d {
                gap[k] = candidate[k] - anchor[k];
                shifted[k] = anchor[k] + inc[k];
            }
            let inc_norm = delta.norm(i, j);
            let orientable = |other: &[f64]| {
                if inc_norm > DELTA_NORM && l2_norm(other) > DELTA_NORM {
                    angle(inc, other).ok()
                } else {
                    None
                }
            };
            records.push(PairRecord {
                i,
                j,
                is_positive: i == j,
                is_false_negative: mask.is_some_and(|m| m[i * b + j]),
                angle_delta_gap: orientable(&gap),
                angle_delta_anchor: orientable(anchor),
                anchor_norm,
                shifted_anchor_norm: l2_norm(&shifted),
                pair_distance: l2_norm(&gap),
                shifted_distance: shifted
                    .iter()
                    .zip(candidate)
                    .map(|(s, c)| (s - c) * (s - c))
                    .sum::<f64>()
                    .sqrt(),
                shifted_cosine: cosine(&shifted, candidate)?,
            });
        }
    }
    let summaries = FIELDS
        .iter()
        .map(|f| summarize(f, &records, cfg.histogram_bins))
        .collect();
    Ok(GeometryReport {
        batch: b,
        records,
        summaries,
    })
}

impl GeometryReport {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn records(&self) -> &[PairRecord] {
        &self.records
    }

    pub fn summaries(&self) -> &[FieldSummary] {
        &self.summaries
    }

    pub fn summary(&self, field: &str) -> Option<&FieldSummary> {
        self.summaries.iter().find(|s| s.field == field)
    }

    /// Mean of a field over the pairs where it is defined; `None` when it
    /// is defined nowhere.
    pub fn mean(&self, field: &str) -> Option<f64> {
        let s = self.summary(field)?;
        (s.defined > 0).then_some(s.mean)
    }

    /// One row per pair; undefined angles serialize as empty cells.
    pub fn write_pairs_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(
            w,
            "i,j,is_positive,is_false_negative,angle_delta_gap,angle_delta_anchor,\
             anchor_norm,shifted_anchor_norm,pair_distance,shifted_distance,shifted_cosine"
        )?;
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.i,
                r.j,
                r.is_positive,
                r.is_false_negative,
                cell(r.angle_delta_gap),
                cell(r.angle_delta_anchor),
                r.anchor_norm,
                r.shifted_anchor_norm,
                r.pair_distance,
                r.shifted_distance,
                r.shifted_cosine
            )?;
        }
        Ok(())
    }

    /// One row per field; histogram bin counts are `;`-joined in the last
    /// column.
    pub fn write_aggregates_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "field,defined,mean,std,histogram_lo,histogram_hi,bin_counts")?;
        for s in &self.summaries {
            let counts: Vec<String> =
                s.histogram.counts.iter().map(|c| c.to_string()).collect();
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                s.field,
                s.defined,
                s.mean,
                s.std,
                s.histogram.lo,
                s.histogram.hi,
                counts.join(";")
            )?;
        }
        Ok(())
    }
}

/// Alignment and uniformity of one batch on the unit hypersphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypersphereMetrics {
    /// Mean squared distance between normalized matched pairs; 0 is best.
    pub alignment: f64,
    /// `log mean exp(-2 d^2)` over all ordered pairs (self-pairs
    /// included) of the pooled text and video embeddings; 0 is worst.
    pub uniformity: f64,
}

/// Computes both hypersphere metrics on L2-normalized embeddings.
pub fn alignment_uniformity(t: &Matrix, v: &Matrix) -> Result<HypersphereMetrics> {
    let b = t.rows();
    if v.shape() != t.shape() {
        return Err(Error::shape(
            "alignment-uniformity",
            format!(
                "text {}x{} vs video {}x{}",
                t.rows(),
                t.cols(),
                v.rows(),
                v.cols()
            ),
        ));
    }
    if b < 2 {
        return Err(Error::InvalidConfig(format!(
            "alignment/uniformity need at least 2 items, got {b}"
        )));
    }
    let normalize = |m: &Matrix, side: &str| -> Result<Vec<Vec<f64>>> {
        (0..b)
            .map(|i| {
                let row = m.row(i);
                let norm = l2_norm(row);
                if norm <= DELTA_NORM {
                    return Err(Error::DegenerateNorm {
                        context: format!("{side} row {i} in alignment/uniformity"),
                        norm,
                        floor: DELTA_NORM,
                    });
                }
                Ok(row.iter().map(|&x| x / norm).collect())
            })
            .collect()
    };
    let mut points = normalize(t, "text")?;
    points.extend(normalize(v, "video")?);
    let sq_dist = |a: &[f64], c: &[f64]| {
        a.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
    };
    let alignment = (0..b).map(|i| sq_dist(&points[i], &points[b + i])).sum::<f64>() / b as f64;
    let m = points.len();
    let mut total = 0.0;
    for a in &points {
        for c in &points {
            total += (-2.0 * sq_dist(a, c)).exp();
        }
    }
    let uniformity = (total / (m * m) as f64).ln();
    Ok(HypersphereMetrics {
        alignment,
        uniformity,
    })
}
