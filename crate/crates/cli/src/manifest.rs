//! Run manifests and the CSV views of a finished run.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use gare_core::synthdata::RetrievalReport;
use gare_core::trainer::{GeometrySummary, LossBreakdown};

use crate::config::RunConfigFile;
use crate::CliError;

/// Everything a finished training run records. Wall time lives in the
/// separate [`Timing`] file so that rerunning a config produces a
/// byte-identical manifest. `per_epoch` holds the held-out retrieval
/// metrics before training (index 0) and after every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config: RunConfigFile,
    pub seed: u64,
    pub epochs: usize,
    pub dataset_hash: String,
    pub strategy: String,
    pub per_epoch: Vec<RetrievalReport>,
    pub final_loss: LossBreakdown,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunManifest, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("manifest {}: {e}", path.display())))
    }
}

/// Wall clock of one command, kept out of the manifest so timing noise
/// never breaks manifest reproducibility.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Timing {
    pub wall_seconds: f64,
}

/// Writes the per-epoch retrieval table, both directions, as CSV.
pub fn write_metrics_csv<W: Write>(
    reports: &[RetrievalReport],
    w: &mut W,
) -> Result<(), CliError> {
    writeln!(
        w,
        "epoch,t2v_r1,t2v_r5,t2v_r10,t2v_median_rank,t2v_mean_rank,\
         v2t_r1,v2t_r5,v2t_r10,v2t_median_rank,v2t_mean_rank"
    )?;
    for (epoch, r) in reports.iter().enumerate() {
        let t = &r.text_to_video;
        let v = &r.video_to_text;
        writeln!(
            w,
            "{epoch},{},{},{},{},{},{},{},{},{},{}",
            t.r1,
            t.r5,
            t.r10,
            t.median_rank,
            t.mean_rank,
            v.r1,
            v.r5,
            v.r10,
            v.median_rank,
            v.mean_rank
        )?;
    }
    Ok(())
}

/// Writes the per-epoch increment geometry aggregates as CSV. The angle
/// cell is empty on epochs where no increment was long enough to orient.
pub fn write_geometry_csv<W: Write>(
    rows: &[GeometrySummary],
    w: &mut W,
) -> Result<(), CliError> {
    writeln!(
        w,
        "epoch,mean_angle_delta_gap,mean_pair_distance,mean_shifted_distance,mean_increment_norm"
    )?;
    for g in rows {
        let angle = g
            .mean_angle_delta_gap
            .map(|a| a.to_string())
            .unwrap_or_default();
        writeln!(
            w,
            "{},{angle},{},{},{}",
            g.epoch, g.mean_pair_distance, g.mean_shifted_distance, g.mean_increment_norm
        )?;
    }
    Ok(())
}
