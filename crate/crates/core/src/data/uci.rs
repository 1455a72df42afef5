//! Converter for the public UCI "Localization Data for Person Activity" corpus.
//!
//! Input rows (no header):
//! `sequence,tag,timestamp_ticks,date,x,y,z,activity`.
//!
//! Choices made by this converter (all configurable through [`UciConfig`]):
//! - features are `tag_index * 3 + coordinate` over four sensor tags (12 total);
//! - timestamps (100 ns ticks) are made relative to the first row of each
//!   sequence and rounded to `tick_resolution` ticks; rows that land on the same
//!   rounded time share one step, later rows overwriting earlier ones;
//! - the eleven raw activities are folded into seven classes;
//! - each sequence is cut into windows of `window` consecutive steps every
//!   `stride` steps; a trailing window shorter than `window` is dropped.
//!
//! Steps only exist where at least one tag reported, so every window is fully
//! packed with observed steps.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::events::{DatasetManifest, DatasetSplits};
use super::series::{IrregularSeries, Label, Observation, Task, TimeStep};
use super::split::split_dataset;
use crate::error::{Result, TadaError};

pub const TAGS: [&str; 4] = [
    "010-000-024-033",
    "010-000-030-096",
    "020-000-033-111",
    "020-000-032-221",
];

/// Raw activity name to class id.
pub fn activity_class(name: &str) -> Option<usize> {
    Some(match name.trim() {
        "walking" => 0,
        "falling" => 1,
        "lying" | "lying down" => 2,
        "sitting" | "sitting down" => 3,
        "standing up from lying"
        | "standing up from sitting"
        | "standing up from sitting on the ground" => 4,
        "on all fours" => 5,
        "sitting on the ground" => 6,
        _ => return None,
    })
}

pub const N_CLASSES: usize = 7;
pub const N_FEATURES: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UciConfig {
    pub window: usize,
    pub stride: usize,
    pub tick_resolution: u64,
}

impl Default for UciConfig {
    fn default() -> Self {
        UciConfig {
            window: 50,
            stride: 25,
            tick_resolution: 100_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UciDataset {
    pub manifest: DatasetManifest,
    pub series: Vec<IrregularSeries>,
}

/// Conversion plus the train/validation/test partition written by `tada convert-uci`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UciJob {
    pub uci: UciConfig,
    pub split: [f64; 3],
    pub stratify: bool,
    pub seed: u64,
}

impl Default for UciJob {
    fn default() -> Self {
        UciJob {
            uci: UciConfig::default(),
            split: [0.8, 0.1, 0.1],
            stratify: false,
            seed: 0,
        }
    }
}

pub fn uci_splits(path: &Path, job: &UciJob) -> Result<DatasetSplits> {
    let ds = convert_uci_activity(path, &job.uci)?;
    let (train, val, test) = split_dataset(&ds.series, job.split, job.seed, job.stratify)?;
    Ok(DatasetSplits {
        manifest: ds.manifest,
        train,
        val,
        test,
    })
}

struct RawStep {
    values: BTreeMap<usize, f64>,
    label: usize,
}

pub fn convert_uci_activity(path: &Path, config: &UciConfig) -> Result<UciDataset> {
    let reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| TadaError::Schema(format!("cannot open {}: {e}", path.display())))?;
    convert_reader(reader, config)
}

pub fn convert_uci_str(text: &str, config: &UciConfig) -> Result<UciDataset> {
    let reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    convert_reader(reader, config)
}

fn convert_reader<R: std::io::Read>(
    mut reader: csv::Reader<R>,
    config: &UciConfig,
) -> Result<UciDataset> {
    if config.window == 0 || config.stride == 0 || config.tick_resolution == 0 {
        return Err(TadaError::Config(
            "window, stride and tick_resolution must be positive".into(),
        ));
    }
    // sequence name -> (first tick, rounded time -> step)
    let mut sequences: BTreeMap<String, (u64, BTreeMap<u64, RawStep>)> = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| TadaError::Parse {
            line,
            msg: e.to_string(),
        })?;
        if rec.len() < 8 {
            return Err(TadaError::Schema(format!(
                "line {line}: expected 8 columns, found {}",
                rec.len()
            )));
        }
        let seq = rec[0].trim().to_string();
        let tag = TAGS
            .iter()
            .position(|t| *t == rec[1].trim())
            .ok_or_else(|| TadaError::Schema(format!("line {line}: unknown tag `{}`", &rec[1])))?;
        let tick: u64 = rec[2].trim().parse().map_err(|_| TadaError::Parse {
            line,
            msg: format!("bad timestamp `{}`", &rec[2]),
        })?;
        let mut coords = [0.0; 3];
        for (k, c) in coords.iter_mut().enumerate() {
            *c = rec[4 + k].trim().parse().map_err(|_| TadaError::Parse {
                line,
                msg: format!("bad coordinate `{}`", &rec[4 + k]),
            })?;
        }
        let label = activity_class(&rec[7]).ok_or_else(|| {
            TadaError::Schema(format!("line {line}: unknown activity `{}`", &rec[7]))
        })?;
        let entry = sequences
            .entry(seq)
            .or_insert_with(|| (tick, BTreeMap::new()));
        let rel = tick.saturating_sub(entry.0);
        let key = (rel + config.tick_resolution / 2) / config.tick_resolution;
        let step = entry.1.entry(key).or_insert_with(|| RawStep {
            values: BTreeMap::new(),
            label,
        });
        step.label = label;
        for (k, c) in coords.iter().enumerate() {
            step.values.insert(tag * 3 + k, *c);
        }
    }

    let mut series = Vec::new();
    for (name, (_, steps)) in sequences {
        let steps: Vec<(u64, RawStep)> = steps.into_iter().collect();
        let mut start = 0;
        while start + config.window <= steps.len() {
            let chunk = &steps[start..start + config.window];
            let time_steps = chunk
                .iter()
                .map(|(t, s)| TimeStep {
                    time: *t as f64,
                    observations: s
                        .values
                        .iter()
                        .map(|(&feature, &value)| Observation { feature, value })
                        .collect(),
                })
                .collect();
            series.push(IrregularSeries {
                id: format!("{name}-{start:06}"),
                steps: time_steps,
                label: Label::Step(chunk.iter().map(|(_, s)| s.label).collect()),
            });
            start += config.stride;
        }
    }
    Ok(UciDataset {
        manifest: DatasetManifest {
            d: N_FEATURES,
            task: Task::Step,
            n_classes: N_CLASSES,
        },
        series,
    })
}
