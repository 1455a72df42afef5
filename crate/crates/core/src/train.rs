//! Seeded mini-batch training with early stopping, and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::events::DatasetManifest;
use crate::data::series::{IrregularSeries, Task};
use crate::error::{Result, TadaError};
use crate::metrics::MetricsReport;
use crate::model::{prepare_all, ModelConfig, Prepared, TadaModel};
use crate::optim::{AdamConfig, AdamState};

/// Validation quantity used to keep the best parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// AUPRC for binary sequence tasks, accuracy otherwise.
    Auto,
    Auprc,
    Accuracy,
    Loss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub selection: Selection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            selection: Selection::Auto,
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.max_epochs == 0 {
            return Err(TadaError::Config(
                "train.batch_size and train.max_epochs must be >= 1".into(),
            ));
        }
        let a = &t.adam;
        let ok = a.lr > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0;
        if !ok {
            return Err(TadaError::Config(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: MetricsReport,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TadaModel,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

fn resolve(selection: Selection, task: Task, n_classes: usize) -> Selection {
    match selection {
        Selection::Auto if task == Task::Sequence && n_classes == 2 => Selection::Auprc,
        Selection::Auto => Selection::Accuracy,
        s => s,
    }
}

/// Larger is better; validation loss breaks ties.
fn score(report: &MetricsReport, selection: Selection) -> (f64, f64) {
    let primary = match selection {
        Selection::Auprc => report.auprc.unwrap_or(f64::NEG_INFINITY),
        Selection::Accuracy => report.accuracy,
        Selection::Loss | Selection::Auto => -report.loss,
    };
    (primary, -report.loss)
}

fn better(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 > b.1)
}

pub fn check_dataset(
    manifest: &DatasetManifest,
    series: &[IrregularSeries],
    split: &str,
) -> Result<()> {
    for s in series {
        s.validate(manifest.d)?;
        if s.task() != manifest.task {
            return Err(TadaError::Config(format!(
                "{split} sample `{}` does not match the {:?} task",
                s.id, manifest.task
            )));
        }
        if let Some(&c) = s.targets().iter().find(|&&c| c >= manifest.n_classes) {
            return Err(TadaError::Data(format!(
                "{split} sample `{}` has label {c} for {} classes",
                s.id, manifest.n_classes
            )));
        }
    }
    Ok(())
}

pub fn train(
    config: &RunConfig,
    manifest: &DatasetManifest,
    train_set: &[IrregularSeries],
    val_set: &[IrregularSeries],
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TadaError::Data(
            "training and validation sets must be non-empty".into(),
        ));
    }
    check_dataset(manifest, train_set, "train")?;
    check_dataset(manifest, val_set, "validation")?;
    let train_p = prepare_all(train_set, manifest.d)?;
    let val_p = prepare_all(val_set, manifest.d)?;
    train_prepared(config, manifest, &train_p, &val_p)
}

pub fn train_prepared(
    config: &RunConfig,
    manifest: &DatasetManifest,
    train_set: &[Prepared],
    val_set: &[Prepared],
) -> Result<TrainOutcome> {
    let mut model = TadaModel::new(
        &config.model,
        manifest.d,
        manifest.n_classes,
        manifest.task,
        config.seed,
    )?;
    let mut adam = AdamState::new(&model.params, config.train.adam);
    let selection = resolve(config.train.selection, manifest.task, manifest.n_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best_params = model.params.clone();
    let mut best_score = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut best_epoch = 0;
    let mut stale = 0;
    for epoch in 1..=config.train.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.train.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = model.arch.batch_loss(&model.params, &batch)?;
            if !loss.is_finite() {
                return Err(TadaError::Training {
                    epoch,
                    msg: format!("loss became {loss}"),
                });
            }
            adam.step(&mut model.params, &grads)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let val = evaluate_prepared(&model, val_set)?;
        if !val.loss.is_finite() {
            return Err(TadaError::Training {
                epoch,
                msg: format!("validation loss became {}", val.loss),
            });
        }
        let s = score(&val, selection);
        let improved = better(s, best_score);
        if improved {
            best_score = s;
            best_params = model.params.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
        }
        log::info!(
            "epoch {epoch}: train loss {:.5}, val loss {:.5}, val acc {:.4}{}",
            loss_sum / train_set.len() as f64,
            val.loss,
            val.accuracy,
            if improved { " *" } else { "" }
        );
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val,
            improved,
        });
        if stale >= config.train.patience {
            break;
        }
    }
    model.params = best_params;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

/// Per-sample class probabilities and losses, in input order.
pub fn predict_all(model: &TadaModel, samples: &[Prepared]) -> Result<Vec<(Vec<Vec<f64>>, f64)>> {
    samples.par_iter().map(|s| model.predict(s)).collect()
}

pub fn evaluate(model: &TadaModel, test_set: &[IrregularSeries]) -> Result<MetricsReport> {
    if test_set.is_empty() {
        return Err(TadaError::Evaluation("empty evaluation set".into()));
    }
    let prepared = prepare_all(test_set, model.arch.n_features)?;
    evaluate_prepared(model, &prepared)
}

/// Sequence tasks score one row per sample; step tasks pool every step of every sample.
pub fn evaluate_prepared(model: &TadaModel, samples: &[Prepared]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(TadaError::Evaluation("empty evaluation set".into()));
    }
    let preds = predict_all(model, samples)?;
    let mut probs = Vec::new();
    let mut targets = Vec::new();
    let mut loss = 0.0;
    for (s, (p, l)) in samples.iter().zip(preds) {
        probs.extend(p);
        targets.extend_from_slice(&s.targets);
        loss += l;
    }
    MetricsReport::from_predictions(
        &probs,
        &targets,
        model.arch.n_classes,
        loss / samples.len() as f64,
        samples.len(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_generate, SynthConfig};

    fn tiny_run() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.te.d_g = 8;
        cfg.model.te.d_embed = 8;
        cfg.model.dla.l = 8;
        cfg.model.dla.d_proj = 8;
        cfg.model.dla.d_patch = 8;
        cfg.model.mixer.p = 2;
        cfg.train.max_epochs = 3;
        cfg.train.batch_size = 8;
        cfg.train.adam.lr = 1e-2;
        cfg
    }

    fn data(n: usize) -> (DatasetManifest, Vec<IrregularSeries>) {
        let ds = synth_generate(&SynthConfig {
            n_samples: n,
            ..SynthConfig::default()
        })
        .unwrap();
        let m = DatasetManifest {
            d: 4,
            task: Task::Sequence,
            n_classes: 2,
        };
        (m, ds.series)
    }

    #[test]
    fn same_seed_same_history() {
        let (m, s) = data(24);
        let cfg = tiny_run();
        let a = train(&cfg, &m, &s[..16], &s[16..]).unwrap();
        let b = train(&cfg, &m, &s[..16], &s[16..]).unwrap();
        assert_eq!(a.history, b.history);
        for ((_, _, x), (_, _, y)) in a.model.params.iter().zip(b.model.params.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn empty_sets_rejected() {
        let (m, s) = data(4);
        let cfg = tiny_run();
        assert!(matches!(train(&cfg, &m, &s, &[]), Err(TadaError::Data(_))));
        let model = TadaModel::new(&cfg.model, 4, 2, Task::Sequence, 0).unwrap();
        assert!(matches!(
            evaluate(&model, &[]),
            Err(TadaError::Evaluation(_))
        ));
    }

    #[test]
    fn early_stopping_respects_patience() {
        let (m, s) = data(24);
        let mut cfg = tiny_run();
        cfg.train.max_epochs = 50;
        cfg.train.patience = 2;
        cfg.train.adam.lr = 1e-300;
        let out = train(&cfg, &m, &s[..16], &s[16..]).unwrap();
        assert!(out.history.len() < 50);
        let last_best = out.history.iter().rposition(|r| r.improved).unwrap();
        assert_eq!(out.history.len() - 1 - last_best, 2);
        assert_eq!(out.best_epoch, last_best + 1);
    }

    #[test]
    fn diverging_learning_rate_reports_epoch() {
        let (m, s) = data(16);
        let mut cfg = tiny_run();
        cfg.train.adam.lr = 1e300;
        match train(&cfg, &m, &s[..8], &s[8..]) {
            Err(e) => assert!(e.is_numerical(), "{e}"),
            Ok(_) => panic!("expected divergence"),
        }
    }

    #[test]
    fn report_in_unit_range() {
        let (m, s) = data(20);
        let out = train(&tiny_run(), &m, &s[..12], &s[12..]).unwrap();
        let r = evaluate(&out.model, &s[12..]).unwrap();
        for v in [r.auroc.unwrap(), r.auprc.unwrap(), r.accuracy] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
