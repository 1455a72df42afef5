//! Dynamic local attention: `L` learned queries placed at regular anchor times
//! attend, channel by channel, over the steps inside a learnable window around
//! their anchor. The result is a fixed `L × d_patch` grid per sample.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{gate_value, gated_softmax_row, inverse_softplus, GateMode, Graph, Var};
use crate::data::series::ValueMask;
use crate::error::{Result, TadaError};
use crate::params::{init_bias, init_normal, init_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowMode {
    Soft,
    Hard,
}

/// Where keys and values come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyValue {
    /// Keys from the temporal embedding, values from the masked raw matrix.
    Default,
    /// Keys and values both from the masked raw matrix.
    Setting1,
    /// Keys and values both from the temporal embedding.
    Setting2,
}

impl std::str::FromStr for KeyValue {
    type Err = TadaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(KeyValue::Default),
            "setting1" => Ok(KeyValue::Setting1),
            "setting2" => Ok(KeyValue::Setting2),
            other => Err(TadaError::Config(format!(
                "unknown key/value variant `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DlaConfig {
    /// Number of queries (grid rows).
    #[serde(rename = "L")]
    pub l: usize,
    pub d_proj: usize,
    pub d_patch: usize,
    pub heads: usize,
    pub window: WindowMode,
    pub tau: f64,
    pub keyvalue: KeyValue,
}

impl Default for DlaConfig {
    fn default() -> Self {
        DlaConfig {
            l: 16,
            d_proj: 16,
            d_patch: 16,
            heads: 2,
            window: WindowMode::Soft,
            tau: 0.05,
            keyvalue: KeyValue::Default,
        }
    }
}

impl DlaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l == 0 || self.d_proj == 0 || self.d_patch == 0 || self.heads == 0 {
            return Err(TadaError::Config(
                "dla.L, dla.d_proj, dla.d_patch and dla.heads must be >= 1".into(),
            ));
        }
        if self.window == WindowMode::Soft && !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(TadaError::Config(format!(
                "dla.tau must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }

    pub fn gate_mode(&self) -> GateMode {
        match self.window {
            WindowMode::Soft => GateMode::Soft { tau: self.tau },
            WindowMode::Hard => GateMode::Hard,
        }
    }
}

/// `t_i = i * t_T / L` for `i = 1..=L`.
pub fn anchor_times(l: usize, t_end: f64) -> Vec<f64> {
    (1..=l).map(|i| i as f64 * t_end / l as f64).collect()
}

/// Gate of every step time for one anchor and radius.
pub fn window_weights(
    anchor: f64,
    times: &[f64],
    radius: f64,
    horizon: f64,
    mode: GateMode,
) -> Vec<f64> {
    times
        .iter()
        .map(|&t| gate_value(t, anchor, radius, horizon, mode))
        .collect()
}

/// End of the anchor grid: the last normalized time, or 1 for a single-step sample.
pub fn horizon(times: &[f64]) -> f64 {
    match times.last() {
        Some(&t) if t > 0.0 => t,
        _ => 1.0,
    }
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
}

#[derive(Debug, Clone)]
pub struct DlaParams {
    pub config: DlaConfig,
    /// Width of keys and queries.
    pub key_width: usize,
    /// Channels attended independently (features, or embedding columns for setting2).
    pub channels: usize,
    pub q: ParamId,
    pub heads: Vec<HeadParams>,
    pub rho: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// Per-sample inputs besides the embeddings.
#[derive(Debug, Clone)]
pub struct DlaInput<'a> {
    pub times: &'a [f64],
    pub value_mask: &'a ValueMask,
}

#[derive(Debug, Clone)]
pub struct DlaOutput {
    /// `L × d_patch`.
    pub grid: Var,
    /// Per-head `L × T` scores.
    pub alphas: Vec<Var>,
    /// `C × L × T`.
    pub gates: Var,
    /// Row-major `T × C` observation mask used by every head.
    pub mask: Vec<bool>,
    pub anchors: Vec<f64>,
}

impl DlaParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        n_features: usize,
        embed_width: usize,
        config: &DlaConfig,
    ) -> Result<Self> {
        config.validate()?;
        let (key_width, channels) = match config.keyvalue {
            KeyValue::Default => (embed_width, n_features),
            KeyValue::Setting1 => (n_features, n_features),
            KeyValue::Setting2 => (embed_width, embed_width),
        };
        let q = store.add("dla.q", init_normal(rng, &[config.l, key_width], 0.02));
        let heads = (0..config.heads)
            .map(|h| HeadParams {
                w_q: store.add(
                    format!("dla.head{h}.w_q"),
                    init_uniform(rng, key_width, config.d_proj),
                ),
                w_k: store.add(
                    format!("dla.head{h}.w_k"),
                    init_uniform(rng, key_width, config.d_proj),
                ),
            })
            .collect();
        let rho0 = inverse_softplus(1.0 / config.l as f64);
        let rho = store.add("dla.rho", Tensor::full(&[channels], rho0));
        let out_w = store.add(
            "dla.out.w",
            init_uniform(rng, config.heads * channels, config.d_patch),
        );
        let out_b = store.add(
            "dla.out.b",
            init_bias(rng, config.heads * channels, config.d_patch),
        );
        Ok(DlaParams {
            config: config.clone(),
            key_width,
            channels,
            q,
            heads,
            rho,
            out_w,
            out_b,
        })
    }

    /// Current window radii `softplus(rho)`.
    pub fn radii(&self, store: &ParamStore) -> Vec<f64> {
        store
            .get(self.rho)
            .data()
            .iter()
            .map(|&r| crate::autograd::softplus_value(r))
            .collect()
    }

    /// Grid for one sample. `embeddings` is the `T × (d_embed + 1)` temporal
    /// embedding. With `global`, every step is inside every window.
    pub fn forward(
        &self,
        g: &mut Graph,
        embeddings: Var,
        input: &DlaInput,
        global: bool,
    ) -> Result<DlaOutput> {
        let times = input.times;
        let vm = input.value_mask;
        let t = times.len();
        if g.shape(embeddings)[0] != t || vm.steps != t {
            return Err(TadaError::dim(
                "dla_forward",
                format!(
                    "embeddings have {} rows, value matrix {} rows, {} times",
                    g.shape(embeddings)[0],
                    vm.steps,
                    t
                ),
            ));
        }
        let raw =
            || -> Result<Tensor> { Tensor::new(vec![vm.steps, vm.features], vm.values.clone()) };
        let (keys, values, mask) = match self.config.keyvalue {
            KeyValue::Default => (embeddings, g.constant(raw()?), vm.mask.clone()),
            KeyValue::Setting1 => {
                let v = g.constant(raw()?);
                (v, v, vm.mask.clone())
            }
            KeyValue::Setting2 => {
                let c = g.shape(embeddings)[1];
                (embeddings, embeddings, vec![true; t * c])
            }
        };
        let kw = g.shape(keys)[1];
        let vc = g.shape(values)[1];
        if kw != self.key_width || vc != self.channels {
            return Err(TadaError::dim(
                "dla_forward",
                format!(
                    "keys {t}×{kw}, values {t}×{vc}; parameters expect key width {} and {} channels",
                    self.key_width, self.channels
                ),
            ));
        }

        let t_end = horizon(times);
        let anchors = anchor_times(self.config.l, t_end);
        let gates = if global {
            g.constant(Tensor::full(&[self.channels, self.config.l, t], 1.0))
        } else {
            let rho = g.param(self.rho);
            let radius = g.softplus(rho);
            g.window_gates(radius, times, &anchors, t_end, self.config.gate_mode())?
        };

        let q = g.param(self.q);
        let scale = 1.0 / (self.config.d_proj as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut alphas = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let (o, alpha) = dla_head(g, q, keys, values, &mask, gates, head, scale)?;
            outs.push(o);
            alphas.push(alpha);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs, 1)?
        };
        let w = g.param(self.out_w);
        let b = g.param(self.out_b);
        let grid = g.linear(cat, w, Some(b))?;
        Ok(DlaOutput {
            grid,
            alphas,
            gates,
            mask,
            anchors,
        })
    }
}

/// One head: `alpha = (Q W_q)(K W_k)^T * scale` and the windowed attention of
/// `values` under `gates`. Returns the `L × C` output and `alpha`.
#[allow(clippy::too_many_arguments)]
pub fn dla_head(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    values: Var,
    mask: &[bool],
    gates: Var,
    head: &HeadParams,
    scale: f64,
) -> Result<(Var, Var)> {
    let w_q = g.param(head.w_q);
    let w_k = g.param(head.w_k);
    let qp = g.matmul(queries, w_q)?;
    let kp = g.matmul(keys, w_k)?;
    let kt = g.transpose(kp)?;
    let alpha = g.matmul(qp, kt)?;
    let alpha = g.scale(alpha, scale);
    let out = g.windowed_attention(alpha, gates, values, mask.to_vec())?;
    Ok((out, alpha))
}

/// Attention weights of every head as `C × L × T` tensors.
pub fn attention_maps(g: &Graph, out: &DlaOutput) -> Result<Vec<Tensor>> {
    let gates = g.value(out.gates);
    let (c, l, t) = match gates.shape() {
        &[c, l, t] => (c, l, t),
        s => return Err(TadaError::dim("attention_maps", format!("gates {s:?}"))),
    };
    let mut maps = Vec::with_capacity(out.alphas.len());
    for &alpha in &out.alphas {
        let a = g.value(alpha).data();
        let gd = gates.data();
        let mut w = vec![0.0; c * l * t];
        for ch in 0..c {
            for i in 0..l {
                let base = (ch * l + i) * t;
                gated_softmax_row(
                    a[i * t..(i + 1) * t].iter().copied(),
                    gd[base..base + t].iter().copied(),
                    (0..t).map(|j| out.mask[j * c + ch]),
                    &mut w[base..base + t],
                );
            }
        }
        maps.push(Tensor::new(vec![c, l, t], w)?);
    }
    Ok(maps)
}

/// Head-averaged attention weights of one sample for export.
#[derive(Debug, Clone)]
pub struct AttentionDump {
    pub anchors: Vec<f64>,
    pub times: Vec<f64>,
    /// `C × L × T`, averaged over heads.
    pub weights: Tensor,
    pub radii: Vec<f64>,
}

impl AttentionDump {
    pub fn from_maps(
        anchors: Vec<f64>,
        times: Vec<f64>,
        maps: &[Tensor],
        radii: Vec<f64>,
    ) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| TadaError::Export("no attention heads".into()))?;
        let mut avg = Tensor::zeros(first.shape());
        for m in maps {
            avg.add_assign(m);
        }
        avg.scale_assign(1.0 / maps.len() as f64);
        Ok(AttentionDump {
            anchors,
            times,
            weights: avg,
            radii,
        })
    }

    /// CSV with header
    /// `query_index,anchor_time,time_index,time,feature,weight,r_d`.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let io = |e: std::io::Error| TadaError::Export(e.to_string());
        let (c, l, t) = match self.weights.shape() {
            &[c, l, t] => (c, l, t),
            s => return Err(TadaError::Export(format!("weights have shape {s:?}"))),
        };
        writeln!(
            w,
            "query_index,anchor_time,time_index,time,feature,weight,r_d"
        )
        .map_err(io)?;
        let d = self.weights.data();
        for ch in 0..c {
            for i in 0..l {
                for j in 0..t {
                    writeln!(
                        w,
                        "{i},{},{j},{},{ch},{},{}",
                        self.anchors[i],
                        self.times[j],
                        d[(ch * l + i) * t + j],
                        self.radii[ch]
                    )
                    .map_err(io)?;
                }
            }
        }
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| TadaError::Export(format!("{}: {e}", path.display())))
    }
}
