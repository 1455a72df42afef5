//! Temporal embedding: one fixed-width vector per time step from its
//! variable-size observation set.
//!
//! For step `k` with observations `e_j`:
//! `s*_k = mean_j FiT(e_j)`, `K_j = [s*_k, e_j] U_k`,
//! `w = softmax_j(<u, K_j> / sqrt(d_embed))`, `z_k = [t_k, Σ_j w_j e_j U_v]`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::series::{IrregularSeries, TimeStep};
use crate::error::{Result, TadaError};
use crate::params::{init_bias, init_normal, init_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

/// How an observation's feature index enters the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureEncoding {
    /// `[v, Emb[m]]` with a learned table of width `d_f`.
    Embedding,
    /// `[v, m]` with the index as a real number.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeConfig {
    pub d_g: usize,
    pub d_embed: usize,
    pub d_f: usize,
    pub encoding: FeatureEncoding,
}

impl Default for TeConfig {
    fn default() -> Self {
        TeConfig {
            d_g: 32,
            d_embed: 32,
            d_f: 4,
            encoding: FeatureEncoding::Embedding,
        }
    }
}

impl TeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_g == 0 || self.d_embed == 0 {
            return Err(TadaError::Config(
                "te.d_g and te.d_embed must be >= 1".into(),
            ));
        }
        if self.encoding == FeatureEncoding::Embedding && self.d_f == 0 {
            return Err(TadaError::Config(
                "te.d_f must be >= 1 in embedding mode".into(),
            ));
        }
        Ok(())
    }

    /// Width of an encoded observation.
    pub fn enc_width(&self) -> usize {
        match self.encoding {
            FeatureEncoding::Embedding => 1 + self.d_f,
            FeatureEncoding::Literal => 2,
        }
    }

    /// Width of each output row (time prepended).
    pub fn out_width(&self) -> usize {
        self.d_embed + 1
    }
}

#[derive(Debug, Clone)]
pub struct TeParams {
    pub config: TeConfig,
    pub n_features: usize,
    pub emb: Option<ParamId>,
    pub fit_w1: ParamId,
    pub fit_b1: ParamId,
    pub fit_w2: ParamId,
    pub fit_b2: ParamId,
    pub u_k: ParamId,
    pub u_v: ParamId,
    pub u: ParamId,
}

impl TeParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        n_features: usize,
        config: &TeConfig,
    ) -> Result<Self> {
        config.validate()?;
        let enc = config.enc_width();
        let emb = match config.encoding {
            FeatureEncoding::Embedding => {
                Some(store.add("te.emb", init_normal(rng, &[n_features, config.d_f], 1.0)))
            }
            FeatureEncoding::Literal => None,
        };
        let fit_w1 = store.add("te.fit.w1", init_uniform(rng, enc, config.d_g));
        let fit_b1 = store.add("te.fit.b1", init_bias(rng, enc, config.d_g));
        let fit_w2 = store.add("te.fit.w2", init_uniform(rng, config.d_g, config.d_g));
        let fit_b2 = store.add("te.fit.b2", init_bias(rng, config.d_g, config.d_g));
        let u_k = store.add(
            "te.u_k",
            init_uniform(rng, config.d_g + enc, config.d_embed),
        );
        let u_v = store.add("te.u_v", init_uniform(rng, enc, config.d_embed));
        let u = store.add("te.u", init_normal(rng, &[config.d_embed, 1], 0.02));
        Ok(TeParams {
            config: config.clone(),
            n_features,
            emb,
            fit_w1,
            fit_b1,
            fit_w2,
            fit_b2,
            u_k,
            u_v,
            u,
        })
    }

    /// Encodes observations as rows `n × enc_width`.
    pub fn encode(&self, g: &mut Graph, features: &[usize], values: &[f64]) -> Result<Var> {
        if let Some(&f) = features.iter().find(|&&f| f >= self.n_features) {
            return Err(TadaError::Data(format!(
                "feature {f} out of range for D={}",
                self.n_features
            )));
        }
        let n = features.len();
        match self.emb {
            Some(emb) => {
                let v = g.constant(Tensor::new(vec![n, 1], values.to_vec())?);
                let table = g.param(emb);
                let e = g.gather_rows(table, features.to_vec())?;
                g.concat(&[v, e], 1)
            }
            None => {
                let data = values
                    .iter()
                    .zip(features)
                    .flat_map(|(&v, &f)| [v, f as f64])
                    .collect();
                Ok(g.constant(Tensor::new(vec![n, 2], data)?))
            }
        }
    }

    /// Feature-independent transformation applied row-wise: `n × enc` to `n × d_g`.
    pub fn fit(&self, g: &mut Graph, encoded: Var) -> Result<Var> {
        let w1 = g.param(self.fit_w1);
        let b1 = g.param(self.fit_b1);
        let w2 = g.param(self.fit_w2);
        let b2 = g.param(self.fit_b2);
        let h = g.linear(encoded, w1, Some(b1))?;
        let h = g.relu(h);
        g.linear(h, w2, Some(b2))
    }

    /// Embeds every step of `series`: `T × (d_embed + 1)`, row `k` starting with `t_k`.
    pub fn forward(&self, g: &mut Graph, series: &IrregularSeries) -> Result<Var> {
        self.forward_steps(g, &series.steps)
    }

    pub fn forward_steps(&self, g: &mut Graph, steps: &[TimeStep]) -> Result<Var> {
        let t = steps.len();
        if t == 0 {
            return Err(TadaError::Data("series has no steps".into()));
        }
        let mut features = Vec::new();
        let mut values = Vec::new();
        let mut step_of = Vec::new();
        for (k, s) in steps.iter().enumerate() {
            if s.observations.is_empty() {
                return Err(TadaError::Data(format!("step {k} has no observations")));
            }
            for o in &s.observations {
                features.push(o.feature);
                values.push(o.value);
                step_of.push(k);
            }
        }
        let n = features.len();

        let enc = self.encode(g, &features, &values)?;
        let h = self.fit(g, enc)?;

        // per-step mean of FiT outputs, then copied back to each observation
        let mut mean = vec![0.0; t * n];
        for (j, &k) in step_of.iter().enumerate() {
            mean[k * n + j] = 1.0 / steps[k].observations.len() as f64;
        }
        let mean = g.constant(Tensor::new(vec![t, n], mean)?);
        let summary = g.matmul(mean, h)?;
        let summary_obs = g.gather_rows(summary, step_of.clone())?;

        let u_k = g.param(self.u_k);
        let key_in = g.concat(&[summary_obs, enc], 1)?;
        let keys = g.matmul(key_in, u_k)?;
        let u = g.param(self.u);
        let scores = g.matmul(keys, u)?;
        let scores = g.scale(scores, 1.0 / (self.config.d_embed as f64).sqrt());
        let scores = g.reshape(scores, &[1, n])?;
        let scores = g.broadcast_rows(scores, t)?;
        let mut member = vec![false; t * n];
        for (j, &k) in step_of.iter().enumerate() {
            member[k * n + j] = true;
        }
        let weights = g.masked_softmax(scores, member)?;

        let u_v = g.param(self.u_v);
        let vals = g.matmul(enc, u_v)?;
        let attn = g.matmul(weights, vals)?;
        let times = g.constant(Tensor::new(
            vec![t, 1],
            steps.iter().map(|s| s.time).collect(),
        )?);
        g.concat(&[times, attn], 1)
    }
}

/// Plain-value encoding of one observation.
pub fn encode_observation(
    store: &ParamStore,
    params: &TeParams,
    feature: usize,
    value: f64,
) -> Result<Vec<f64>> {
    let mut g = Graph::new(store);
    let v = params.encode(&mut g, &[feature], &[value])?;
    Ok(g.value(v).data().to_vec())
}

/// Mean of the FiT outputs of one step's observations.
pub fn step_summary(store: &ParamStore, params: &TeParams, step: &TimeStep) -> Result<Vec<f64>> {
    if step.observations.is_empty() {
        return Err(TadaError::Data("step has no observations".into()));
    }
    let mut g = Graph::new(store);
    let feats: Vec<usize> = step.observations.iter().map(|o| o.feature).collect();
    let vals: Vec<f64> = step.observations.iter().map(|o| o.value).collect();
    let enc = params.encode(&mut g, &feats, &vals)?;
    let h = params.fit(&mut g, enc)?;
    let m = g.mean_axis(h, 0)?;
    Ok(g.value(m).data().to_vec())
}

/// Embedding `z_k` of a single step.
pub fn te_step(store: &ParamStore, params: &TeParams, step: &TimeStep) -> Result<Vec<f64>> {
    let mut g = Graph::new(store);
    let z = params.forward_steps(&mut g, std::slice::from_ref(step))?;
    Ok(g.value(z).data().to_vec())
}

/// Embeddings of all steps as a plain tensor.
pub fn te_series(
    store: &ParamStore,
    params: &TeParams,
    series: &IrregularSeries,
) -> Result<Tensor> {
    let mut g = Graph::new(store);
    let z = params.forward(&mut g, series)?;
    Ok(g.value(z).clone())
}
