//! The five subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use gare_core::gradcheck::{certification_suite, CheckModule};
use gare_core::increments::{psi_predict, Side, TokenTensor};
use gare_core::probes::geometry_snapshot;
use gare_core::rng::{streams, RngStream};
use gare_core::synthdata::{dataset_hash, generate, Dataset, PairedBatch};
use gare_core::trainer::{run_experiment, write_loss_csv, Mode};
use gare_core::trustregion::{default_epsilon, iterate_coupled, TrustRegionState};

use crate::config::{load_config, RunConfigFile};
use crate::manifest::{write_geometry_csv, write_metrics_csv, RunManifest, Timing};
use crate::{CliError, CmdResult};

/// Creates the output directory if needed; refuses to write into a
/// non-empty one unless forced.
fn prepare_out_dir(path: &Path, force: bool) -> CmdResult {
    if path.exists() {
        if !path.is_dir() {
            return Err(CliError::config(format!(
                "{} exists and is not a directory",
                path.display()
            )));
        }
        if !force && fs::read_dir(path)?.next().is_some() {
            return Err(CliError::config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                path.display()
            )));
        }
    } else {
        fs::create_dir_all(path)?;
    }
    Ok(())
}

/// Loads the dataset directory and insists it matches the config's
/// dataset section, so a manifest never claims a recipe its data did not
/// follow.
fn load_dataset_checked(config: &RunConfigFile, data_dir: &Path) -> Result<Dataset, CliError> {
    let dataset = Dataset::load(data_dir)
        .map_err(|e| CliError::config(format!("cannot load dataset at {}: {e}", data_dir.display())))?;
    if dataset.spec() != &config.dataset {
        return Err(CliError::config(format!(
            "dataset at {} was generated from a different spec than the config's dataset section",
            data_dir.display()
        )));
    }
    Ok(dataset)
}

fn context_tokens(batch: &PairedBatch, side: Side) -> &TokenTensor {
    match side {
        Side::Text => &batch.text,
        Side::Video => &batch.video,
    }
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Baseline => "baseline",
        Mode::Gare => "gare",
    }
}

pub fn gen_data(config_path: &Path, out: &Path, force: bool) -> CmdResult {
    let config = load_config(config_path)?;
    let dataset = generate(&config.dataset)?;
    prepare_out_dir(out, force)?;
    dataset.save(out)?;
    let hash = dataset_hash(out)?;
    println!(
        "dataset: {} items, dim {}, {} clusters, hash {hash}",
        config.dataset.items, config.dataset.dim, config.dataset.clusters
    );
    Ok(())
}

pub fn train(
    config_path: &Path,
    data_dir: &Path,
    out: &Path,
    mode: Option<&str>,
    seed: Option<u64>,
    force: bool,
) -> CmdResult {
    let mut config = load_config(config_path)?;
    if let Some(mode) = mode {
        config.train.mode = mode.parse()?;
    }
    if let Some(seed) = seed {
        config.train.seed = seed;
    }
    let dataset = load_dataset_checked(&config, data_dir)?;
    let hash = dataset_hash(data_dir)?;
    prepare_out_dir(out, force)?;

    let started = Instant::now();
    let record = run_experiment(&dataset, &config.train)?;
    let wall_seconds = started.elapsed().as_secs_f64();

    let mut loss = Vec::new();
    write_loss_csv(&record.steps, &mut loss)?;
    fs::write(out.join("loss.csv"), loss)?;
    let mut metrics = Vec::new();
    write_metrics_csv(&record.per_epoch, &mut metrics)?;
    fs::write(out.join("metrics.csv"), metrics)?;

    if let Some(psi) = &record.psi {
        psi.save(&out.join("psi.bin"))?;
        let mut geometry = Vec::new();
        write_geometry_csv(&record.geometry, &mut geometry)?;
        fs::write(out.join("geometry.csv"), geometry)?;

        let test = dataset.batch(&dataset.test_items())?;
        let increments = &config.train.increments;
        let delta = psi_predict(
            psi,
            &test.pooled_text,
            &test.pooled_video,
            context_tokens(&test, increments.context_side),
            increments,
        )?;
        let report = geometry_snapshot(
            &test.pooled_text,
            &test.pooled_video,
            &delta,
            Some(&test.mask),
            &config.probes,
        )?;
        let mut pairs = Vec::new();
        report.write_pairs_csv(&mut pairs)?;
        fs::write(out.join("pairs.csv"), pairs)?;
        let mut aggregates = Vec::new();
        report.write_aggregates_csv(&mut aggregates)?;
        fs::write(out.join("aggregates.csv"), aggregates)?;
    }

    let manifest = RunManifest {
        seed: config.train.seed,
        epochs: config.train.epochs,
        dataset_hash: hash,
        strategy: gare_core::par::strategy().to_string(),
        per_epoch: record.per_epoch,
        final_loss: record.final_loss,
        config,
    };
    manifest.save(&out.join("manifest.json"))?;
    fs::write(
        out.join("timing.json"),
        serde_json::to_string_pretty(&Timing { wall_seconds })? + "\n",
    )?;

    let last = manifest
        .per_epoch
        .last()
        .expect("per_epoch holds at least the initial evaluation");
    println!(
        "trained {} seed {}: t2v R@1 {:.2}, contrastive loss {:.4} ({} epochs, {:.1}s)",
        mode_name(manifest.config.train.mode),
        manifest.seed,
        last.text_to_video.r1,
        manifest.final_loss.l_info,
        manifest.epochs,
        wall_seconds
    );
    Ok(())
}

/// Descent census over the sampled batches, alongside the per-batch
/// trajectory CSVs.
#[derive(Debug, Serialize)]
struct Census {
    batches: usize,
    steps: usize,
    improved: usize,
    mean_loss_drop: f64,
}

pub fn oracle(
    config_path: &Path,
    data_dir: &Path,
    steps: usize,
    epsilon: Option<f64>,
    batches: usize,
    out: &Path,
    force: bool,
) -> CmdResult {
    if let Some(e) = epsilon {
        if !e.is_finite() || e <= 0.0 {
            return Err(CliError::config(format!(
                "epsilon must be positive and finite, got {e}"
            )));
        }
    }
    if batches == 0 {
        return Err(CliError::config("batches must be at least 1"));
    }
    let config = load_config(config_path)?;
    let dataset = load_dataset_checked(&config, data_dir)?;
    let size = config.train.batch_size;
    let mut order = dataset.train_items();
    if size > order.len() {
        return Err(CliError::config(format!(
            "batch_size {} exceeds the {} training items",
            size,
            order.len()
        )));
    }
    prepare_out_dir(out, force)?;
    let mut rng = RngStream::new(config.train.seed, streams::SHUFFLE);
    rng.shuffle(&mut order);
    let n = batches.min(order.len() / size);

    let mut improved = 0usize;
    let mut drops = Vec::new();
    for (k, chunk) in order.chunks_exact(size).take(n).enumerate() {
        let batch = dataset.batch(chunk)?;
        let t = &batch.pooled_text;
        let v = &batch.pooled_video;
        let eps = epsilon.unwrap_or_else(|| default_epsilon(t));
        let state = TrustRegionState::new(size, t.cols(), eps)?;
        let state = iterate_coupled(t, v, state, steps, config.train.tau)?;
        let trajectory = state.trajectory();
        let first = trajectory.first().expect("trajectory logs an initial row");
        let last = trajectory.last().expect("trajectory logs an initial row");
        if last.true_loss < first.true_loss {
            improved += 1;
        }
        drops.push(first.true_loss - last.true_loss);
        let mut csv = Vec::new();
        state.write_trajectory_csv(&mut csv)?;
        fs::write(out.join(format!("batch_{k:03}.csv")), csv)?;
    }
    let mean_loss_drop = drops.iter().sum::<f64>() / drops.len() as f64;
    let census = Census {
        batches: n,
        steps,
        improved,
        mean_loss_drop,
    };
    fs::write(
        out.join("census.json"),
        serde_json::to_string_pretty(&census)? + "\n",
    )?;
    println!(
        "oracle census: {improved}/{n} batches improved after {steps} steps \
         (mean loss drop {mean_loss_drop:.4})"
    );
    Ok(())
}

pub fn gradcheck(module: &str, seed: u64, inject_fault: Option<&str>) -> CmdResult {
    let modules: Vec<CheckModule> = if module == "all" {
        CheckModule::ALL.to_vec()
    } else {
        vec![module.parse()?]
    };
    let reports = certification_suite(&modules, seed, inject_fault)?;
    let mut failures = Vec::new();
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "check {}/{}: worst rel err {:.3e} over {} instances (threshold {:.0e}) {status}",
            r.module, r.name, r.worst, r.instances, r.threshold
        );
        if !r.passed() {
            failures.push(r.name);
        }
    }
    if failures.is_empty() {
        println!("all {} checks passed", reports.len());
        Ok(())
    } else {
        Err(CliError::check(format!(
            "{} of {} checks failed: {}",
            failures.len(),
            reports.len(),
            failures.join(", ")
        )))
    }
}

const METRICS: [&str; 15] = [
    "t2v_r1",
    "t2v_r5",
    "t2v_r10",
    "t2v_median_rank",
    "t2v_mean_rank",
    "v2t_r1",
    "v2t_r5",
    "v2t_r10",
    "v2t_median_rank",
    "v2t_mean_rank",
    "l_info",
    "l_ib",
    "l_eps",
    "l_dir",
    "l_total",
];

/// Final-epoch retrieval metrics and final loss terms, in [`METRICS`]
/// order.
fn metric_values(m: &RunManifest) -> Vec<f64> {
    let r = m
        .per_epoch
        .last()
        .expect("manifests record at least the initial evaluation");
    let l = &m.final_loss;
    vec![
        r.text_to_video.r1,
        r.text_to_video.r5,
        r.text_to_video.r10,
        r.text_to_video.median_rank,
        r.text_to_video.mean_rank,
        r.video_to_text.r1,
        r.video_to_text.r5,
        r.video_to_text.r10,
        r.video_to_text.median_rank,
        r.video_to_text.mean_rank,
        l.l_info,
        l.l_ib,
        l.l_eps,
        l.l_dir,
        l.total,
    ]
}

struct ModeStats {
    count: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
    by_seed: BTreeMap<u64, Vec<f64>>,
}

fn mode_stats(manifests: &[&RunManifest]) -> Option<ModeStats> {
    if manifests.is_empty() {
        return None;
    }
    let rows: Vec<Vec<f64>> = manifests.iter().map(|m| metric_values(m)).collect();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; METRICS.len()];
    for row in &rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; METRICS.len()];
    for row in &rows {
        for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in &mut std {
        *s = s.sqrt();
    }
    let by_seed = manifests
        .iter()
        .zip(rows)
        .map(|(m, row)| (m.seed, row))
        .collect();
    Some(ModeStats {
        count: manifests.len(),
        mean,
        std,
        by_seed,
    })
}

/// Per-seed mean of (gare - baseline) over the seeds both modes ran.
fn paired_diffs(base: &ModeStats, gare: &ModeStats) -> Option<Vec<f64>> {
    let shared: Vec<u64> = base
        .by_seed
        .keys()
        .filter(|s| gare.by_seed.contains_key(s))
        .copied()
        .collect();
    if shared.is_empty() {
        return None;
    }
    let mut diffs = vec![0.0; METRICS.len()];
    for seed in &shared {
        let b = &base.by_seed[seed];
        let g = &gare.by_seed[seed];
        for (d, (gv, bv)) in diffs.iter_mut().zip(g.iter().zip(b)) {
            *d += (gv - bv) / shared.len() as f64;
        }
    }
    Some(diffs)
}

fn stat_cell(stats: Option<&ModeStats>, idx: usize) -> (String, String) {
    match stats {
        Some(s) => (s.mean[idx].to_string(), s.std[idx].to_string()),
        None => (String::new(), String::new()),
    }
}

pub fn compare(runs: &[PathBuf], out: &Path, force: bool) -> CmdResult {
    if runs.len() < 2 {
        return Err(CliError::config("compare needs at least two run manifests"));
    }
    let manifests: Vec<RunManifest> = runs
        .iter()
        .map(|p| RunManifest::load(p))
        .collect::<Result<_, _>>()?;
    let hash = &manifests[0].dataset_hash;
    for (path, m) in runs.iter().zip(&manifests).skip(1) {
        if &m.dataset_hash != hash {
            return Err(CliError::config(format!(
                "{} was trained on dataset {} but {} expects {}; \
                 comparisons must stay within one dataset",
                path.display(),
                &m.dataset_hash[..12],
                runs[0].display(),
                &hash[..12]
            )));
        }
    }
    prepare_out_dir(out, force)?;

    let by_mode = |mode: Mode| -> Vec<&RunManifest> {
        manifests
            .iter()
            .filter(|m| m.config.train.mode == mode)
            .collect()
    };
    let base = mode_stats(&by_mode(Mode::Baseline));
    let gare = mode_stats(&by_mode(Mode::Gare));
    let diffs = match (&base, &gare) {
        (Some(b), Some(g)) => paired_diffs(b, g),
        _ => None,
    };

    let mut csv = String::from(
        "metric,baseline_mean,baseline_std,gare_mean,gare_std,paired_diff_mean\n",
    );
    for (idx, name) in METRICS.iter().enumerate() {
        let (bm, bs) = stat_cell(base.as_ref(), idx);
        let (gm, gs) = stat_cell(gare.as_ref(), idx);
        let diff = diffs
            .as_ref()
            .map(|d| d[idx].to_string())
            .unwrap_or_default();
        csv.push_str(&format!("{name},{bm},{bs},{gm},{gs},{diff}\n"));
    }
    fs::write(out.join("compare.csv"), &csv)?;

    println!("comparing {} runs on dataset {}", manifests.len(), &hash[..12]);
    let header_cell = |stats: Option<&ModeStats>, name: &str| match stats {
        Some(s) => format!("{name} (n={})", s.count),
        None => format!("{name} (none)"),
    };
    println!(
        "{:<18}{:<24}{:<24}gare - baseline",
        "metric",
        header_cell(base.as_ref(), "baseline"),
        header_cell(gare.as_ref(), "gare"),
    );
    for (idx, name) in METRICS.iter().enumerate() {
        let fmt = |stats: Option<&ModeStats>| match stats {
            Some(s) => format!("{:.4} \u{b1} {:.4}", s.mean[idx], s.std[idx]),
            None => "-".to_string(),
        };
        let diff = diffs
            .as_ref()
            .map(|d| format!("{:+.4}", d[idx]))
            .unwrap_or_else(|| "-".to_string());
        println!(
            "{:<18}{:<24}{:<24}{}",
            name,
            fmt(base.as_ref()),
            fmt(gare.as_ref()),
            diff
        );
    }
    Ok(())
}
