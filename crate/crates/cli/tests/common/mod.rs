//! Shared helpers for driving the compiled binary.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gare_core::synthdata::SyntheticDatasetSpec;
use gare_core::trainer::{Mode, TrainConfig};
use tempfile::TempDir;

pub fn gare() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gare"))
}

pub fn run(args: &[&str]) -> Output {
    gare().args(args).output().expect("binary runs")
}

#[track_caller]
pub fn assert_exit(output: &Output, code: i32) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout(output),
        stderr(output)
    );
}

pub fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

pub fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("temp paths are valid UTF-8")
}

pub fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[track_caller]
pub fn assert_same_bytes(a: &Path, b: &Path) {
    assert_eq!(
        read(a),
        read(b),
        "{} and {} differ",
        a.display(),
        b.display()
    );
}

pub fn write_json(path: &Path, value: &serde_json::Value) {
    fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

pub fn config_json(dataset: &SyntheticDatasetSpec, train: &TrainConfig) -> serde_json::Value {
    serde_json::json!({
        "dataset": dataset,
        "train": train,
    })
}

pub fn small_dataset_spec() -> SyntheticDatasetSpec {
    SyntheticDatasetSpec {
        items: 40,
        dim: 8,
        text_len: 3,
        video_len: 2,
        clusters: 10,
        gap_offset: 2.0,
        cluster_spread: 0.1,
        noise_std: 0.05,
        false_negative_rate: 0.2,
        seed: 7,
    }
}

/// A forty-item experiment that trains in well under a second.
pub fn small_config() -> serde_json::Value {
    let train = TrainConfig {
        mode: Mode::Gare,
        tau: 0.05,
        learning_rate: 3e-4,
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    config_json(&small_dataset_spec(), &train)
}

/// A temp directory holding a config file and the dataset it describes.
pub struct Workspace {
    pub dir: TempDir,
    pub config: PathBuf,
    pub data: PathBuf,
}

impl Workspace {
    pub fn new(config: &serde_json::Value) -> Workspace {
        let dir = tempfile::tempdir().unwrap();
        let config_path = dir.path().join("config.json");
        write_json(&config_path, config);
        let data = dir.path().join("data");
        let out = run(&[
            "gen-data",
            "--config",
            path_str(&config_path),
            "--out",
            path_str(&data),
        ]);
        assert_exit(&out, 0);
        Workspace {
            dir,
            config: config_path,
            data,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Trains into `<name>/` with optional mode and seed overrides,
    /// expecting success, and returns the run directory.
    pub fn train(&self, name: &str, mode: Option<&str>, seed: Option<u64>) -> PathBuf {
        let out_dir = self.path(name);
        let seed_text = seed.map(|s| s.to_string());
        let mut args = vec![
            "train",
            "--config",
            path_str(&self.config),
            "--data",
            path_str(&self.data),
            "--out",
            path_str(&out_dir),
        ];
        if let Some(mode) = mode {
            args.extend(["--mode", mode]);
        }
        if let Some(seed) = &seed_text {
            args.extend(["--seed", seed]);
        }
        let out = run(&args);
        assert_exit(&out, 0);
        out_dir
    }
}

pub fn manifest_value(run_dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&read(&run_dir.join("manifest.json"))).unwrap()
}

/// Parses `compare.csv` into (metric, cells) rows, cells in file order:
/// baseline mean and std, gare mean and std, paired diff. Empty cells
/// parse to None.
pub fn parse_compare_csv(path: &Path) -> Vec<(String, Vec<Option<f64>>)> {
    let text = String::from_utf8(read(path)).unwrap();
    text.lines()
        .skip(1)
        .map(|line| {
            let mut cells = line.split(',');
            let metric = cells.next().unwrap().to_string();
            let values = cells
                .map(|c| {
                    if c.is_empty() {
                        None
                    } else {
                        Some(c.parse::<f64>().unwrap())
                    }
                })
                .collect();
            (metric, values)
        })
        .collect()
}

pub fn compare_row<'a>(
    rows: &'a [(String, Vec<Option<f64>>)],
    metric: &str,
) -> &'a Vec<Option<f64>> {
    &rows
        .iter()
        .find(|(name, _)| name == metric)
        .unwrap_or_else(|| panic!("metric {metric} missing from compare table"))
        .1
}
