//! Grids of training runs over loss variants and clip counts.

use std::fmt::Write as _;

use super::config::{parse_key_values, CameraLoss, ContrastiveVariant, TrainConfig};
use crate::datagen::{generate, GenConfig};
use crate::error::{Error, Result};
use crate::eval::{fmt_sig, EpochMetrics};
use crate::exec::Exec;

/// One grid cell. `n_clips == 1` trains on whole tracklets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AblationCell {
    pub camera_loss: CameraLoss,
    pub contrastive: ContrastiveVariant,
    pub n_clips: usize,
    pub frames_per_sample: usize,
}

impl AblationCell {
    pub fn apply(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            camera_loss: self.camera_loss,
            contrastive: self.contrastive,
            clips: self.n_clips > 1,
            n_clips: self.n_clips.max(1),
            frames_per_sample: self.frames_per_sample,
            seed,
            ..base.clone()
        }
    }

    /// Stable textual key, `camera_loss/contrastive/n_clips/frames`.
    pub fn key(&self) -> String {
        format!(
            "{}/{}/{}/{}",
            self.camera_loss, self.contrastive, self.n_clips, self.frames_per_sample
        )
    }

    fn csv_prefix(&self) -> String {
        format!(
            "{},{},{},{}",
            self.camera_loss, self.contrastive, self.n_clips, self.frames_per_sample
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub base: TrainConfig,
    pub data: GenConfig,
    pub camera_losses: Vec<CameraLoss>,
    pub contrastives: Vec<ContrastiveVariant>,
    pub n_clips: Vec<usize>,
    pub frames_per_sample: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        let base = TrainConfig::default();
        Self {
            camera_losses: vec![base.camera_loss],
            contrastives: vec![base.contrastive],
            n_clips: vec![base.effective_clips()],
            frames_per_sample: vec![base.frames_per_sample],
            seeds: vec![0],
            data: GenConfig::default(),
            base,
        }
    }
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::BadConfig(format!("bad value `{s}` in `{key}`")))
        })
        .collect()
}

impl SuiteConfig {
    /// Parses a suite file. Grid axes are comma lists under `grid.*`,
    /// generator keys are prefixed `gen.`, `preset` picks the generator
    /// preset, and every other key is a training key.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut suite = Self::default();
        let pairs = parse_key_values(text, source)?;
        if let Some((_, v, _)) = pairs.iter().find(|(k, _, _)| k == "preset") {
            suite.data = GenConfig::preset(v)?;
        }
        let mut clips_axis = None;
        let mut frames_axis = None;
        for (k, v, line) in &pairs {
            let at = |e: Error| match e {
                Error::BadConfig(msg) => Error::BadConfig(format!("{source}:{line}: {msg}")),
                other => other,
            };
            match k.as_str() {
                "preset" => {}
                "seeds" => suite.seeds = list(k, v).map_err(at)?,
                "grid.camera_loss" => suite.camera_losses = list(k, v).map_err(at)?,
                "grid.contrastive" => suite.contrastives = list(k, v).map_err(at)?,
                "grid.n_clips" => clips_axis = Some(list(k, v).map_err(at)?),
                "grid.frames_per_sample" => frames_axis = Some(list(k, v).map_err(at)?),
                _ => match k.strip_prefix("gen.") {
                    Some(g) => suite.data.set(g, v).map_err(at)?,
                    None => suite.base.set(k, v).map_err(at)?,
                },
            }
        }
        suite.n_clips = clips_axis.unwrap_or_else(|| vec![suite.base.effective_clips()]);
        suite.frames_per_sample = frames_axis.unwrap_or_else(|| vec![suite.base.frames_per_sample]);
        suite.validate()?;
        Ok(suite)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells().is_empty() || self.seeds.is_empty() {
            return Err(Error::BadConfig("ablation grid is empty".into()));
        }
        if self.n_clips.contains(&0) || self.frames_per_sample.contains(&0) {
            return Err(Error::BadConfig(
                "n_clips and frames_per_sample values must be >= 1".into(),
            ));
        }
        self.base.validate()?;
        self.data.validate()
    }

    /// Grid cells in camera-loss, contrastive, clip, frame-count order.
    pub fn cells(&self) -> Vec<AblationCell> {
        let mut out = Vec::new();
        for &camera_loss in &self.camera_losses {
            for &contrastive in &self.contrastives {
                for &n_clips in &self.n_clips {
                    for &frames_per_sample in &self.frames_per_sample {
                        out.push(AblationCell {
                            camera_loss,
                            contrastive,
                            n_clips,
                            frames_per_sample,
                        });
                    }
                }
            }
        }
        out
    }

    /// The generator configuration used for `seed`.
    pub fn data_for(&self, seed: u64) -> GenConfig {
        GenConfig {
            seed,
            ..self.data.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub seed: u64,
    /// Metrics after the final epoch.
    pub metrics: EpochMetrics,
}

/// Trains one cell for one seed. The seed drives both the generator and
/// training.
pub fn run_cell(suite: &SuiteConfig, cell: AblationCell, seed: u64) -> Result<AblationRow> {
    let data = generate(&suite.data_for(seed))?;
    let (_, history) = super::train(data, cell.apply(&suite.base, seed))?;
    Ok(AblationRow {
        cell,
        seed,
        metrics: history.last().cloned().expect("epoch-0 row always present"),
    })
}

/// Every (cell, seed) pair, cells outer and seeds inner.
pub fn run_ablation(suite: &SuiteConfig) -> Result<Vec<AblationRow>> {
    run_ablation_with(suite, Exec::default())
}

pub fn run_ablation_with(suite: &SuiteConfig, exec: Exec) -> Result<Vec<AblationRow>> {
    suite.validate()?;
    let jobs: Vec<(AblationCell, u64)> = suite
        .cells()
        .into_iter()
        .flat_map(|c| suite.seeds.iter().map(move |&s| (c, s)))
        .collect();
    exec.map(jobs.len(), |i| run_cell(suite, jobs[i].0, jobs[i].1))
        .into_iter()
        .collect()
}

pub const ABLATION_HEADER: &str = "camera_loss,contrastive,n_clips,frames_per_sample,seed,epoch,rank1,rank5,rank10,mAP,\
camera_probe_acc,loss_ce,loss_cam,loss_contr,rank1_std,rank5_std,rank10_std,mAP_std,camera_probe_acc_std";

/// One (cell, seed) row; the trailing std columns stay empty.
pub fn row_csv(row: &AblationRow) -> String {
    format!(
        "{},{},{},,,,,",
        row.cell.csv_prefix(),
        row.seed,
        row.metrics.csv_row()
    )
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let mean = crate::diffcore::mean(values);
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = crate::diffcore::ksum(values.iter().map(|v| (v - mean) * (v - mean)))
        / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

/// One `mean` row per cell, in first-appearance order: metric and loss
/// means over seeds, then sample standard deviations of the metrics.
pub fn summary_csv(rows: &[AblationRow]) -> Vec<String> {
    let mut cells: Vec<AblationCell> = Vec::new();
    for r in rows {
        if !cells.contains(&r.cell) {
            cells.push(r.cell);
        }
    }
    cells
        .into_iter()
        .map(|c| {
            let of: Vec<&AblationRow> = rows.iter().filter(|r| r.cell == c).collect();
            let col = |f: fn(&EpochMetrics) -> f64| {
                mean_std(&of.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>())
            };
            let metrics: [fn(&EpochMetrics) -> f64; 5] = [
                |m| m.report.rank1,
                |m| m.report.rank5,
                |m| m.report.rank10,
                |m| m.report.map,
                |m| m.report.camera_probe_accuracy,
            ];
            let losses: [fn(&EpochMetrics) -> f64; 3] =
                [|m| m.losses.ce, |m| m.losses.cam, |m| m.losses.contr];
            let mut line = format!(
                "{},mean,{}",
                c.csv_prefix(),
                fmt_sig(col(|m| m.epoch as f64).0)
            );
            for f in metrics.iter().chain(&losses) {
                let _ = write!(line, ",{}", fmt_sig(col(*f).0));
            }
            for f in &metrics {
                let _ = write!(line, ",{}", fmt_sig(col(*f).1));
            }
            line
        })
        .collect()
}

/// Header, one row per (cell, seed), then one summary row per cell.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for line in rows.iter().map(row_csv).chain(summary_csv(rows)) {
        out.push_str(&line);
        out.push('\n');
    }
    out
}
