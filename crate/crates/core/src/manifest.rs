//! Multi-seed protocol runs and their manifests.
//!
//! A manifest holds only values that are a pure function of the config, seeds
//! and data, so repeating a run reproduces it byte for byte. Wall-clock timing
//! goes to a separate `run_timing.json`.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::events::{serialize_series, DatasetManifest, DatasetSplits};
use crate::error::{Result, TadaError};
use crate::metrics::{Aggregate, MeanStd, MetricsReport};
use crate::model::{prepare_all, TadaModel};
use crate::modelio::encode_model;
use crate::train::{check_dataset, evaluate_prepared, train_prepared, EpochRecord, RunConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_FILE: &str = "run_timing.json";
pub const METRICS_CSV_FILE: &str = "metrics.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRun {
    pub seed: u64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub val: MetricsReport,
    pub test: MetricsReport,
    /// Learned window radius per feature, absent when the DLA stage is ablated.
    pub radii: Option<Vec<f64>>,
    pub model_file: String,
    pub model_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config: RunConfig,
    pub config_sha256: String,
    pub ablations: Vec<String>,
    pub dataset: DatasetManifest,
    pub data_sha256: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedRun>,
    /// Test metrics, mean ± sample std across seeds.
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub total_seconds: f64,
    pub per_seed_seconds: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub manifest: RunManifest,
    pub models: Vec<TadaModel>,
    pub timing: RunTiming,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON form of `config` with the seed cleared.
pub fn config_hash(config: &RunConfig) -> String {
    let mut c = config.clone();
    c.seed = 0;
    sha256_hex(
        serde_json::to_string(&c)
            .expect("config serializes")
            .as_bytes(),
    )
}

/// Hash of the dataset manifest and every split in event-file form.
pub fn data_hash(splits: &DatasetSplits) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(&splits.manifest).expect("manifest serializes"));
    for (name, set) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        h.update(format!("\n#{name}\n"));
        for s in set {
            h.update(serialize_series(s));
            h.update("\n");
        }
    }
    hex::encode(h.finalize())
}

pub fn model_file_name(seeds: &[u64], seed: u64) -> String {
    if seeds.len() == 1 {
        "model.bin".to_string()
    } else {
        format!("model_seed{seed}.bin")
    }
}

/// Trains one model per seed (overriding `config.seed`) and scores it on the test split.
pub fn run_protocol(
    config: &RunConfig,
    seeds: &[u64],
    splits: &DatasetSplits,
) -> Result<ProtocolRun> {
    config.validate()?;
    if seeds.is_empty() {
        return Err(TadaError::Config("at least one seed is required".into()));
    }
    let m = &splits.manifest;
    if splits.train.is_empty() || splits.val.is_empty() || splits.test.is_empty() {
        return Err(TadaError::Data(
            "train, val and test splits must be non-empty".into(),
        ));
    }
    check_dataset(m, &splits.train, "train")?;
    check_dataset(m, &splits.val, "validation")?;
    check_dataset(m, &splits.test, "test")?;
    let train_p = prepare_all(&splits.train, m.d)?;
    let val_p = prepare_all(&splits.val, m.d)?;
    let test_p = prepare_all(&splits.test, m.d)?;

    let start = Instant::now();
    let mut runs = Vec::new();
    let mut models = Vec::new();
    let mut per_seed = Vec::new();
    for &seed in seeds {
        let t0 = Instant::now();
        let mut cfg = config.clone();
        cfg.seed = seed;
        log::info!("training seed {seed}");
        let out = train_prepared(&cfg, m, &train_p, &val_p)?;
        let val = out
            .history
            .get(out.best_epoch.saturating_sub(1))
            .map(|r| r.val.clone())
            .ok_or_else(|| TadaError::Training {
                epoch: out.history.len(),
                msg: "no epoch improved on the initial score".into(),
            })?;
        let test = evaluate_prepared(&out.model, &test_p)?;
        runs.push(SeedRun {
            seed,
            best_epoch: out.best_epoch,
            history: out.history,
            val,
            test,
            radii: out.model.radii(),
            model_file: model_file_name(seeds, seed),
            model_sha256: sha256_hex(&encode_model(&out.model)),
        });
        models.push(out.model);
        per_seed.push(t0.elapsed().as_secs_f64());
    }
    let tests: Vec<MetricsReport> = runs.iter().map(|r| r.test.clone()).collect();
    let manifest = RunManifest {
        config: config.clone(),
        config_sha256: config_hash(config),
        ablations: config
            .model
            .ablations
            .names()
            .iter()
            .map(|s| s.to_string())
            .collect(),
        dataset: *m,
        data_sha256: data_hash(splits),
        seeds: seeds.to_vec(),
        runs,
        aggregate: Aggregate::of(&tests),
    };
    Ok(ProtocolRun {
        manifest,
        models,
        timing: RunTiming {
            total_seconds: start.elapsed().as_secs_f64(),
            per_seed_seconds: per_seed,
        },
    })
}

/// Re-runs the protocol recorded in `manifest` and checks every recorded value.
pub fn reproduce(manifest: &RunManifest, splits: &DatasetSplits) -> Result<ProtocolRun> {
    let hash = data_hash(splits);
    if hash != manifest.data_sha256 {
        return Err(TadaError::Data(format!(
            "dataset hash {hash} does not match the manifest's {}",
            manifest.data_sha256
        )));
    }
    let run = run_protocol(&manifest.config, &manifest.seeds, splits)?;
    if run.manifest != *manifest {
        return Err(TadaError::Verification(
            "re-run differs from the recorded manifest".into(),
        ));
    }
    Ok(run)
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub const CSV_HEADER: &'static str = "config_sha256,variant,n_seeds,auroc_mean,auroc_std,auprc_mean,auprc_std,accuracy_mean,accuracy_std";

    /// One CSV data line with the aggregated test metrics.
    pub fn csv_line(&self) -> String {
        let pair =
            |m: Option<MeanStd>| m.map_or(",".to_string(), |m| format!("{},{}", m.mean, m.std));
        let variant = if self.ablations.is_empty() {
            "full".to_string()
        } else {
            self.ablations.join("+")
        };
        format!(
            "{},{},{},{},{},{}",
            self.config_sha256,
            variant,
            self.seeds.len(),
            pair(self.aggregate.auroc),
            pair(self.aggregate.auprc),
            pair(self.aggregate.accuracy)
        )
    }
}

/// Writes the manifest, the metrics CSV, the timing sidecar and one model file per seed.
pub fn write_run(dir: &Path, run: &ProtocolRun) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST_FILE), run.manifest.to_json())?;
    fs::write(
        dir.join(METRICS_CSV_FILE),
        format!("{}\n{}\n", RunManifest::CSV_HEADER, run.manifest.csv_line()),
    )?;
    let mut timing = serde_json::to_string_pretty(&run.timing)?;
    timing.push('\n');
    fs::write(dir.join(TIMING_FILE), timing)?;
    for (r, model) in run.manifest.runs.iter().zip(&run.models) {
        fs::write(dir.join(&r.model_file), encode_model(model))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split::split_dataset;
    use crate::data::synth::{synth_generate, SynthConfig};
    use crate::data::Task;

    fn splits(n: usize) -> DatasetSplits {
        let ds = synth_generate(&SynthConfig {
            n_samples: n,
            ..SynthConfig::default()
        })
        .unwrap();
        let (train, val, test) = split_dataset(&ds.series, [0.5, 0.25, 0.25], 0, true).unwrap();
        DatasetSplits {
            manifest: DatasetManifest {
                d: 4,
                task: Task::Sequence,
                n_classes: 2,
            },
            train,
            val,
            test,
        }
    }

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.te.d_g = 4;
        cfg.model.te.d_embed = 4;
        cfg.model.dla.l = 4;
        cfg.model.dla.d_proj = 4;
        cfg.model.dla.d_patch = 4;
        cfg.model.mixer.p = 2;
        cfg.train.max_epochs = 2;
        cfg.train.batch_size = 4;
        cfg
    }

    #[test]
    fn records_every_seed_and_round_trips() {
        let sp = splits(16);
        let seeds = [0, 1, 2, 3, 4];
        let run = run_protocol(&tiny(), &seeds, &sp).unwrap();
        let m = &run.manifest;
        assert_eq!(m.seeds, seeds);
        assert_eq!(m.runs.iter().map(|r| r.seed).collect::<Vec<_>>(), seeds);
        assert_eq!(m.runs[3].model_file, "model_seed3.bin");
        assert_eq!(m.runs[0].radii.as_ref().unwrap().len(), 4);
        assert_eq!(m.aggregate.accuracy.unwrap().n, 5);
        let back = RunManifest::from_json(&m.to_json()).unwrap();
        assert_eq!(&back, m);
        for (a, b) in back.runs.iter().zip(&m.runs) {
            assert_eq!(a.test, b.test);
        }
        assert_eq!(
            m.csv_line().split(',').count(),
            RunManifest::CSV_HEADER.split(',').count()
        );
    }

    #[test]
    fn reproduce_matches_and_detects_changes() {
        let sp = splits(12);
        let run = run_protocol(&tiny(), &[7], &sp).unwrap();
        assert_eq!(run.manifest.runs[0].model_file, "model.bin");
        reproduce(&run.manifest, &sp).unwrap();
        let mut edited = run.manifest.clone();
        edited.runs[0].test.accuracy += 1e-9;
        assert!(matches!(
            reproduce(&edited, &sp),
            Err(TadaError::Verification(_))
        ));
        let mut other = sp.clone();
        other.test.pop();
        assert!(matches!(
            reproduce(&run.manifest, &other),
            Err(TadaError::Data(_))
        ));
    }

    #[test]
    fn ablation_flagged_and_hash_ignores_seed() {
        let mut cfg = tiny();
        cfg.model.ablations.no_dla = true;
        let run = run_protocol(&cfg, &[1], &splits(12)).unwrap();
        assert_eq!(run.manifest.ablations, vec!["no_dla"]);
        assert!(run.manifest.runs[0].radii.is_none());
        assert!(run.manifest.csv_line().contains(",no_dla,"));
        let mut c2 = cfg.clone();
        c2.seed = 99;
        assert_eq!(config_hash(&cfg), config_hash(&c2));
        c2.train.patience += 1;
        assert_ne!(config_hash(&cfg), config_hash(&c2));
    }
}
