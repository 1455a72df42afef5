//! Full model: temporal embedding, local attention grid, mixer hierarchy,
//! fusion and classifier, plus the batched loss used for training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::series::{build_value_mask, normalize_times, IrregularSeries, Task, ValueMask};
use crate::dla::{attention_maps, AttentionDump, DlaConfig, DlaInput, DlaOutput, DlaParams};
use crate::error::{Result, TadaError};
use crate::mixer::{MixerConfig, MixerParams, OutputHead};
use crate::params::{init_bias, init_uniform, Gradients, ParamId, ParamStore};
use crate::te::{TeConfig, TeParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Replace local attention by a linear map of the step embeddings,
    /// zero-padded or truncated to `L` rows.
    pub no_dla: bool,
    /// Attend over every step (no windows); the radii receive no gradient.
    pub no_learnable_range: bool,
    /// Feed the grid straight to fusion.
    pub no_mixer: bool,
}

impl Ablations {
    pub fn set(&mut self, name: &str) -> Result<()> {
        match name {
            "no_dla" => self.no_dla = true,
            "no_learnable_range" => self.no_learnable_range = true,
            "no_mixer" => self.no_mixer = true,
            other => return Err(TadaError::Config(format!("unknown ablation `{other}`"))),
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.no_dla {
            v.push("no_dla");
        }
        if self.no_learnable_range {
            v.push("no_learnable_range");
        }
        if self.no_mixer {
            v.push("no_mixer");
        }
        v
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub te: TeConfig,
    pub dla: DlaConfig,
    pub mixer: MixerConfig,
    pub ablations: Ablations,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.te.validate()?;
        self.dla.validate()?;
        if !self.ablations.no_mixer {
            self.mixer.validate(self.dla.l)?;
        } else if self.mixer.l_c == Some(0) || self.mixer.d_c == Some(0) {
            return Err(TadaError::Config(
                "mixer.l_c and mixer.d_c must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Token count of the deepest scale fed to fusion.
    pub fn deepest_tokens(&self) -> usize {
        if self.ablations.no_mixer {
            self.dla.l
        } else {
            let merges = self.mixer.m.pow(self.mixer.n_layers as u32 - 1);
            self.dla.l / merges
        }
    }
}

/// A sample with normalized times and its value/mask matrix.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub series: IrregularSeries,
    pub times: Vec<f64>,
    pub value_mask: ValueMask,
    pub targets: Vec<usize>,
}

pub fn prepare(series: &IrregularSeries, n_features: usize) -> Result<Prepared> {
    series.validate(n_features)?;
    let series = normalize_times(series);
    let times = series.times();
    let value_mask = build_value_mask(&series, n_features);
    let targets = series.targets();
    Ok(Prepared {
        series,
        times,
        value_mask,
        targets,
    })
}

pub fn prepare_all(series: &[IrregularSeries], n_features: usize) -> Result<Vec<Prepared>> {
    series.iter().map(|s| prepare(s, n_features)).collect()
}

#[derive(Debug, Clone)]
pub struct Bypass {
    pub w: ParamId,
    pub b: ParamId,
}

/// Parameter layout of a model; the values live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Architecture {
    pub config: ModelConfig,
    pub n_features: usize,
    pub n_classes: usize,
    pub task: Task,
    pub te: TeParams,
    pub dla: Option<DlaParams>,
    pub bypass: Option<Bypass>,
    pub mixer: Option<MixerParams>,
    pub head: OutputHead,
}

pub struct ForwardOutput {
    pub logits: Var,
    pub dla: Option<DlaOutput>,
}

impl Architecture {
    /// Declares all parameters in a fixed order, drawing initial values from `seed`.
    pub fn build(
        config: &ModelConfig,
        n_features: usize,
        n_classes: usize,
        task: Task,
        seed: u64,
    ) -> Result<(Architecture, ParamStore)> {
        config.validate()?;
        if n_features == 0 {
            return Err(TadaError::Config("D must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let te = TeParams::init(&mut store, &mut rng, n_features, &config.te)?;
        let width = config.te.out_width();
        let d = config.dla.d_patch;
        let (dla, bypass) = if config.ablations.no_dla {
            let bypass = Bypass {
                w: store.add("bypass.w", init_uniform(&mut rng, width, d)),
                b: store.add("bypass.b", init_bias(&mut rng, width, d)),
            };
            (None, Some(bypass))
        } else {
            let dla = DlaParams::init(&mut store, &mut rng, n_features, width, &config.dla)?;
            (Some(dla), None)
        };
        let mixer = if config.ablations.no_mixer {
            None
        } else {
            Some(MixerParams::init(
                &mut store,
                &mut rng,
                config.dla.l,
                d,
                &config.mixer,
            )?)
        };
        let n_inputs = mixer.as_ref().map_or(1, |m| m.layers.len());
        let l_c = config.mixer.l_c.unwrap_or_else(|| config.deepest_tokens());
        let d_c = config.mixer.d_c.unwrap_or(d);
        let head = OutputHead::init(
            &mut store,
            &mut rng,
            n_inputs,
            d,
            l_c,
            d_c,
            n_classes,
            config.mixer.fusion,
        )?;
        let arch = Architecture {
            config: config.clone(),
            n_features,
            n_classes,
            task,
            te,
            dla,
            bypass,
            mixer,
            head,
        };
        Ok((arch, store))
    }

    pub fn check_sample(&self, sample: &Prepared) -> Result<()> {
        let task = sample.series.task();
        if task != self.task {
            return Err(TadaError::Config(format!(
                "sample `{}` carries a {task:?} label but the model is built for {:?}",
                sample.series.id, self.task
            )));
        }
        if let Some(&bad) = sample.targets.iter().find(|&&c| c >= self.n_classes) {
            return Err(TadaError::Data(format!(
                "sample `{}` has label {bad} for {} classes",
                sample.series.id, self.n_classes
            )));
        }
        Ok(())
    }

    /// Logits for one sample: `1 × classes` or `T × classes`.
    pub fn forward(&self, g: &mut Graph, sample: &Prepared) -> Result<ForwardOutput> {
        let emb = self.te.forward(g, &sample.series)?;
        let l = self.config.dla.l;
        let (grid, dla_out) = match (&self.dla, &self.bypass) {
            (Some(dla), _) => {
                let input = DlaInput {
                    times: &sample.times,
                    value_mask: &sample.value_mask,
                };
                let out = dla.forward(g, emb, &input, self.config.ablations.no_learnable_range)?;
                (out.grid, Some(out))
            }
            (None, Some(bp)) => {
                let t = sample.times.len();
                let mut sel = vec![0.0; l * t];
                for k in 0..l.min(t) {
                    sel[k * t + k] = 1.0;
                }
                let sel = g.constant(Tensor::new(vec![l, t], sel)?);
                let rows = g.matmul(sel, emb)?;
                let w = g.param(bp.w);
                let b = g.param(bp.b);
                (g.linear(rows, w, Some(b))?, None)
            }
            (None, None) => unreachable!("either attention or bypass is built"),
        };
        let outputs = match &self.mixer {
            Some(m) => m.forward(g, grid)?,
            None => vec![grid],
        };
        let c = self.head.fuse(g, &outputs)?;
        let logits = self.head.classify(g, c, self.task, sample.times.len())?;
        Ok(ForwardOutput {
            logits,
            dla: dla_out,
        })
    }

    /// Mean cross-entropy of one sample and its gradients.
    pub fn sample_loss(&self, store: &ParamStore, sample: &Prepared) -> Result<(f64, Gradients)> {
        self.check_sample(sample)?;
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, sample)?;
        let loss = g.cross_entropy(out.logits, sample.targets.clone())?;
        let value = g.value(loss).item();
        Ok((value, g.backward(loss)?))
    }

    /// Mean per-sample loss over `batch` and its gradients. Samples run in
    /// parallel; results are summed in batch order.
    pub fn batch_loss(&self, store: &ParamStore, batch: &[&Prepared]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(TadaError::Data("empty batch".into()));
        }
        let parts: Vec<Result<(f64, Gradients)>> = batch
            .par_iter()
            .map(|s| self.sample_loss(store, s))
            .collect();
        let mut total = 0.0;
        let mut grads = Gradients::zeros_like(store);
        for part in parts {
            let (l, g) = part?;
            total += l;
            grads.accumulate(&g);
        }
        let scale = 1.0 / batch.len() as f64;
        grads.scale(scale);
        Ok((total * scale, grads))
    }

    /// Class probabilities per output row, plus the sample loss.
    pub fn predict(&self, store: &ParamStore, sample: &Prepared) -> Result<(Vec<Vec<f64>>, f64)> {
        self.check_sample(sample)?;
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, sample)?;
        let logits = g.value(out.logits);
        let (rows, _) = logits.dims2()?;
        let probs = (0..rows).map(|r| softmax(logits.row(r))).collect();
        let loss = g.cross_entropy(out.logits, sample.targets.clone())?;
        Ok((probs, g.value(loss).item()))
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Architecture together with its parameter values.
#[derive(Debug, Clone)]
pub struct TadaModel {
    pub arch: Architecture,
    pub params: ParamStore,
}

impl TadaModel {
    pub fn new(
        config: &ModelConfig,
        n_features: usize,
        n_classes: usize,
        task: Task,
        seed: u64,
    ) -> Result<Self> {
        let (arch, params) = Architecture::build(config, n_features, n_classes, task, seed)?;
        Ok(TadaModel { arch, params })
    }

    pub fn radii(&self) -> Option<Vec<f64>> {
        self.arch.dla.as_ref().map(|d| d.radii(&self.params))
    }

    pub fn predict(&self, sample: &Prepared) -> Result<(Vec<Vec<f64>>, f64)> {
        self.arch.predict(&self.params, sample)
    }

    /// Head-averaged local attention weights on one series.
    pub fn attention(&self, series: &IrregularSeries) -> Result<AttentionDump> {
        let dla = self.arch.dla.as_ref().ok_or_else(|| {
            TadaError::Export("model was built without the attention stage".into())
        })?;
        let sample = prepare(series, self.arch.n_features)?;
        let mut g = Graph::new(&self.params);
        let out = self.arch.forward(&mut g, &sample)?;
        let dla_out = out.dla.expect("attention stage ran");
        let maps = attention_maps(&g, &dla_out)?;
        AttentionDump::from_maps(
            dla_out.anchors.clone(),
            sample.times.clone(),
            &maps,
            dla.radii(&self.params),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_generate, SynthConfig};
    use crate::dla::WindowMode;

    fn small() -> ModelConfig {
        ModelConfig {
            te: TeConfig {
                d_g: 6,
                d_embed: 6,
                d_f: 2,
                ..TeConfig::default()
            },
            dla: DlaConfig {
                l: 8,
                d_proj: 4,
                d_patch: 5,
                heads: 2,
                ..DlaConfig::default()
            },
            mixer: MixerConfig {
                p: 2,
                m: 2,
                ..MixerConfig::default()
            },
            ablations: Ablations::default(),
        }
    }

    fn samples(task: Task, n: usize) -> Vec<Prepared> {
        let ds = synth_generate(&SynthConfig {
            n_samples: n,
            task,
            ..SynthConfig::default()
        })
        .unwrap();
        prepare_all(&ds.series, 4).unwrap()
    }

    #[test]
    fn shapes_for_tasks_and_ablations() {
        let seq = samples(Task::Sequence, 2);
        let step = samples(Task::Step, 2);
        let variants = [
            Ablations::default(),
            Ablations {
                no_dla: true,
                ..Ablations::default()
            },
            Ablations {
                no_mixer: true,
                ..Ablations::default()
            },
            Ablations {
                no_learnable_range: true,
                ..Ablations::default()
            },
        ];
        for ab in variants {
            let cfg = ModelConfig {
                ablations: ab.clone(),
                ..small()
            };
            let m = TadaModel::new(&cfg, 4, 2, Task::Sequence, 0).unwrap();
            let (p, loss) = m.predict(&seq[0]).unwrap();
            assert_eq!(p.len(), 1);
            assert!(loss.is_finite());
            let m = TadaModel::new(&cfg, 4, 2, Task::Step, 0).unwrap();
            let (p, _) = m.predict(&step[1]).unwrap();
            assert_eq!(p.len(), step[1].times.len());
            assert!((p[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_query_attention_export() {
        let ds = synth_generate(&SynthConfig {
            n_samples: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut cfg = small();
        cfg.dla.l = 1;
        cfg.ablations.no_mixer = true;
        let m = TadaModel::new(&cfg, 4, 2, Task::Sequence, 0).unwrap();
        let dump = m.attention(&ds.series[0]).unwrap();
        let t = ds.series[0].len();
        assert_eq!(dump.weights.shape(), &[4, 1, t]);
        let mut csv = Vec::new();
        dump.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 4 * t);
        cfg.ablations.no_dla = true;
        let m = TadaModel::new(&cfg, 4, 2, Task::Sequence, 0).unwrap();
        assert!(matches!(
            m.attention(&ds.series[0]),
            Err(TadaError::Export(_))
        ));
    }

    #[test]
    fn task_mismatch_is_config_error() {
        let step = samples(Task::Step, 1);
        let m = TadaModel::new(&small(), 4, 2, Task::Sequence, 0).unwrap();
        assert!(matches!(m.predict(&step[0]), Err(TadaError::Config(_))));
    }

    #[test]
    fn build_is_deterministic() {
        let a = TadaModel::new(&small(), 4, 2, Task::Sequence, 3).unwrap();
        let b = TadaModel::new(&small(), 4, 2, Task::Sequence, 3).unwrap();
        let names: Vec<&str> = a.params.iter().map(|(_, n, _)| n).collect();
        assert_eq!(names.first(), Some(&"te.emb"));
        for ((_, na, ta), (_, nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
        let r = a.radii().unwrap();
        assert!(r.iter().all(|&x| (x - 1.0 / 8.0).abs() < 1e-12));
    }

    #[test]
    fn global_windows_leave_rho_without_gradient() {
        let seq = samples(Task::Sequence, 3);
        let cfg = ModelConfig {
            ablations: Ablations {
                no_learnable_range: true,
                ..Ablations::default()
            },
            ..small()
        };
        let m = TadaModel::new(&cfg, 4, 2, Task::Sequence, 0).unwrap();
        let refs: Vec<&Prepared> = seq.iter().collect();
        let (_, g) = m.arch.batch_loss(&m.params, &refs).unwrap();
        let rho = m.arch.dla.as_ref().unwrap().rho;
        assert!(g.get(rho).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_loss_is_mean_of_samples() {
        let seq = samples(Task::Sequence, 3);
        let m = TadaModel::new(&small(), 4, 2, Task::Sequence, 0).unwrap();
        let refs: Vec<&Prepared> = seq.iter().collect();
        let (l, _) = m.arch.batch_loss(&m.params, &refs).unwrap();
        let each: f64 = seq
            .iter()
            .map(|s| m.arch.sample_loss(&m.params, s).unwrap().0)
            .sum();
        assert!((l - each / 3.0).abs() < 1e-15);
        let (l2, _) = m.arch.batch_loss(&m.params, &refs).unwrap();
        assert_eq!(l.to_bits(), l2.to_bits());
    }

    #[test]
    fn hard_windows_build() {
        let mut cfg = small();
        cfg.dla.window = WindowMode::Hard;
        assert!(TadaModel::new(&cfg, 4, 2, Task::Sequence, 0).is_ok());
        cfg.mixer.p = 3;
        assert!(matches!(
            TadaModel::new(&cfg, 4, 2, Task::Sequence, 0),
            Err(TadaError::Config(_))
        ));
    }
}
