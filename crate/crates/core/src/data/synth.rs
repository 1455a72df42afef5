//! Synthetic frequency-discrimination task with per-feature sampling rates.
//!
//! Class `c` fixes a latent sinusoid frequency `f_c`. Feature `d` is observed
//! at Poisson times with rate `rates[d]` and records
//! `sin(2π f_c t) + offset_d + noise · N(0, 1)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use super::events::{DatasetManifest, DatasetSplits};
use super::series::{IrregularSeries, Label, Observation, Task, TimeStep};
use super::split::split_dataset;
use crate::error::{Result, TadaError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_samples: usize,
    #[serde(rename = "D")]
    pub d: usize,
    /// Events per unit time for each feature.
    pub rate_per_feature: Vec<f64>,
    pub classes: usize,
    /// Per-class frequencies; empty means `f_c = 2c + 1`.
    pub frequencies: Vec<f64>,
    pub noise: f64,
    pub seed: u64,
    /// Length of the observation window in raw time units.
    pub horizon: f64,
    /// Event times are rounded to this grid so features can share steps; 0 disables.
    pub time_resolution: f64,
    /// Added to feature `d`: `offset_step * d`.
    pub offset_step: f64,
    pub task: Task,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 700,
            d: 4,
            rate_per_feature: vec![2.0, 4.0, 8.0, 16.0],
            classes: 2,
            frequencies: Vec::new(),
            noise: 0.1,
            seed: 0,
            horizon: 1.0,
            time_resolution: 0.01,
            offset_step: 0.5,
            task: Task::Sequence,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(TadaError::Config(format!(
                "synthetic D must be >= 2, got {}",
                self.d
            )));
        }
        if self.rate_per_feature.len() != self.d {
            return Err(TadaError::Config(format!(
                "{} rates for D={}",
                self.rate_per_feature.len(),
                self.d
            )));
        }
        if let Some(r) = self
            .rate_per_feature
            .iter()
            .find(|r| !(**r > 0.0) || !r.is_finite())
        {
            return Err(TadaError::Config(format!("rate {r} must be positive")));
        }
        if self.classes < 2 {
            return Err(TadaError::Config("need at least 2 classes".into()));
        }
        if !self.frequencies.is_empty() && self.frequencies.len() != self.classes {
            return Err(TadaError::Config(format!(
                "{} frequencies for {} classes",
                self.frequencies.len(),
                self.classes
            )));
        }
        if self.n_samples == 0 || !(self.horizon > 0.0) || !(self.noise >= 0.0) {
            return Err(TadaError::Config(
                "n_samples, horizon must be positive and noise non-negative".into(),
            ));
        }
        if !(self.time_resolution >= 0.0) {
            return Err(TadaError::Config("time_resolution must be >= 0".into()));
        }
        Ok(())
    }

    pub fn frequency(&self, class: usize) -> f64 {
        if self.frequencies.is_empty() {
            2.0 * class as f64 + 1.0
        } else {
            self.frequencies[class]
        }
    }
}

/// Ground truth recorded alongside each generated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub id: String,
    /// Latent frequency per segment (one segment for sequence tasks).
    pub frequencies: Vec<f64>,
    /// Segment start times (raw units); the first is always 0.
    pub segment_starts: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub series: Vec<IrregularSeries>,
    pub meta: Vec<SynthMeta>,
}

pub fn synth_generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut series = Vec::with_capacity(config.n_samples);
    let mut meta = Vec::with_capacity(config.n_samples);
    for i in 0..config.n_samples {
        let id = format!("synth-{i:05}");
        let first = i % config.classes;
        let (classes, starts) = match config.task {
            Task::Sequence => (vec![first], vec![0.0]),
            Task::Step => {
                let shift = rng.random_range(1..config.classes);
                let second = (first + shift) % config.classes;
                let cut = config.horizon * rng.random_range(0.3..0.7);
                (vec![first, second], vec![0.0, cut])
            }
        };
        let segment_of = |t: f64| starts.iter().rposition(|&s| t >= s).unwrap_or(0);
        let steps = loop {
            let steps = draw_steps(config, &mut rng, |t| {
                config.frequency(classes[segment_of(t)])
            });
            if !steps.is_empty() {
                break steps;
            }
        };
        let label = match config.task {
            Task::Sequence => Label::Sequence(first),
            Task::Step => Label::Step(steps.iter().map(|s| classes[segment_of(s.time)]).collect()),
        };
        meta.push(SynthMeta {
            id: id.clone(),
            frequencies: classes.iter().map(|&c| config.frequency(c)).collect(),
            segment_starts: starts.clone(),
        });
        series.push(IrregularSeries { id, steps, label });
    }
    Ok(SynthDataset { series, meta })
}

fn draw_steps(
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
    freq_at: impl Fn(f64) -> f64,
) -> Vec<TimeStep> {
    let mut events: Vec<(f64, usize, f64)> = Vec::new();
    for (d, &rate) in config.rate_per_feature.iter().enumerate() {
        let gap = Exp::new(rate).expect("positive rate");
        let mut t = gap.sample(rng);
        while t < config.horizon {
            let tq = if config.time_resolution > 0.0 {
                (t / config.time_resolution).round() * config.time_resolution
            } else {
                t
            };
            let noise: f64 = StandardNormal.sample(rng);
            let value = (2.0 * std::f64::consts::PI * freq_at(tq) * tq).sin()
                + config.offset_step * d as f64
                + config.noise * noise;
            events.push((tq, d, value));
            t += gap.sample(rng);
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut steps: Vec<TimeStep> = Vec::new();
    for (t, f, v) in events {
        match steps.last_mut() {
            Some(s) if s.time == t => match s.observations.last_mut() {
                Some(o) if o.feature == f => o.value = v,
                _ => s.observations.push(Observation {
                    feature: f,
                    value: v,
                }),
            },
            _ => steps.push(TimeStep {
                time: t,
                observations: vec![Observation {
                    feature: f,
                    value: v,
                }],
            }),
        }
    }
    steps
}

/// Generation plus the train/validation/test partition written by `tada synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthJob {
    pub synth: SynthConfig,
    pub split: [f64; 3],
    pub stratify: bool,
}

impl Default for SynthJob {
    fn default() -> Self {
        SynthJob {
            synth: SynthConfig::default(),
            split: [0.8, 0.1, 0.1],
            stratify: true,
        }
    }
}

/// Generates the dataset and splits it with the generator seed.
pub fn synth_splits(job: &SynthJob) -> Result<DatasetSplits> {
    let ds = synth_generate(&job.synth)?;
    let (train, val, test) = split_dataset(&ds.series, job.split, job.synth.seed, job.stratify)?;
    Ok(DatasetSplits {
        manifest: DatasetManifest {
            d: job.synth.d,
            task: job.synth.task,
            n_classes: job.synth.classes,
        },
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let cfg = SynthConfig {
            n_samples: 20,
            ..SynthConfig::default()
        };
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a.series, b.series);
        let c = synth_generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.series, c.series);
    }

    #[test]
    fn balanced_and_valid() {
        let cfg = SynthConfig {
            n_samples: 50,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&cfg).unwrap();
        let pos = ds
            .series
            .iter()
            .filter(|s| s.label == Label::Sequence(1))
            .count();
        assert_eq!(pos, 25);
        for s in &ds.series {
            s.validate(cfg.d).unwrap();
        }
    }

    #[test]
    fn frequency_metadata_separates_classes() {
        let cfg = SynthConfig {
            n_samples: 40,
            noise: 0.0,
            frequencies: vec![1.0, 3.0],
            ..SynthConfig::default()
        };
        let ds = synth_generate(&cfg).unwrap();
        for (s, m) in ds.series.iter().zip(&ds.meta) {
            // probe: f > 2 <=> class 1
            let predicted = usize::from(m.frequencies[0] > 2.0);
            assert_eq!(s.label, Label::Sequence(predicted));
        }
        // noise-free values equal the latent signal
        let s = &ds.series[1];
        for step in &s.steps {
            for o in &step.observations {
                let expect =
                    (2.0 * std::f64::consts::PI * 3.0 * step.time).sin() + 0.5 * o.feature as f64;
                assert!((o.value - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn high_rate_gives_dense_series() {
        let cfg = SynthConfig {
            n_samples: 3,
            d: 2,
            rate_per_feature: vec![2000.0, 2000.0],
            noise: 0.0,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&cfg).unwrap();
        for s in &ds.series {
            // every grid point on [0, 1) is hit by both features
            assert!(s.len() >= 99, "{}", s.len());
            assert!(
                s.steps
                    .iter()
                    .filter(|st| st.observations.len() == 2)
                    .count()
                    >= 95
            );
        }
    }

    #[test]
    fn config_errors() {
        let bad = SynthConfig {
            d: 1,
            rate_per_feature: vec![1.0],
            ..SynthConfig::default()
        };
        assert!(matches!(synth_generate(&bad), Err(TadaError::Config(_))));
        let bad = SynthConfig {
            rate_per_feature: vec![1.0, 0.0, 1.0, 1.0],
            ..SynthConfig::default()
        };
        assert!(matches!(synth_generate(&bad), Err(TadaError::Config(_))));
    }

    #[test]
    fn step_task_labels_follow_segments() {
        let cfg = SynthConfig {
            n_samples: 10,
            task: Task::Step,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&cfg).unwrap();
        for (s, m) in ds.series.iter().zip(&ds.meta) {
            s.validate(cfg.d).unwrap();
            let Label::Step(labels) = &s.label else {
                panic!()
            };
            for (step, &l) in s.steps.iter().zip(labels) {
                let seg = usize::from(step.time >= m.segment_starts[1]);
                assert_eq!(cfg.frequency(l), m.frequencies[seg]);
            }
        }
    }

    #[test]
    fn job_split_sizes() {
        let job = SynthJob {
            synth: SynthConfig {
                n_samples: 600,
                ..SynthConfig::default()
            },
            ..SynthJob::default()
        };
        let sp = synth_splits(&job).unwrap();
        assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (480, 60, 60));
        assert_eq!(sp.manifest.d, 4);
    }
}
