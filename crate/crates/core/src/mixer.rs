//! Hierarchical MLP mixer over the regular grid, multiscale fusion and the
//! classifier head.
//!
//! Patches are held as rank-3 tensors `[patches, p, d]`. A block computes
//! `relu(β + W3(W2(W1 β)))` with `W1`, `W3` mixing channels and `W2` mixing
//! patches; a merge shrinks every patch from `p` to `p/m` rows with `W4` and
//! concatenates `m` adjacent shrunk patches back into one of length `p`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::series::Task;
use crate::error::{Result, TadaError};
use crate::params::{init_bias, init_uniform, ParamId, ParamStore};
use crate::tensor::adaptive_pool_matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Multiply,
    Add,
    Concat,
}

impl std::str::FromStr for FusionMode {
    type Err = TadaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiply" => Ok(FusionMode::Multiply),
            "add" => Ok(FusionMode::Add),
            "concat" => Ok(FusionMode::Concat),
            other => Err(TadaError::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixerConfig {
    /// Patch length.
    pub p: usize,
    /// Merge factor.
    pub m: usize,
    pub n_layers: usize,
    /// Row standardization before each block.
    pub layer_norm: bool,
    pub fusion: FusionMode,
    /// Pooled token count for fusion; `None` uses the deepest layer's token count.
    pub l_c: Option<usize>,
    /// Fusion MLP width; `None` uses `d_patch`.
    pub d_c: Option<usize>,
}

impl Default for MixerConfig {
    fn default() -> Self {
        MixerConfig {
            p: 4,
            m: 2,
            n_layers: 2,
            layer_norm: false,
            fusion: FusionMode::Multiply,
            l_c: None,
            d_c: None,
        }
    }
}

impl MixerConfig {
    /// Checks the patch bookkeeping for a grid of `l` rows.
    pub fn validate(&self, l: usize) -> Result<()> {
        if self.p == 0 || self.m == 0 || self.n_layers == 0 {
            return Err(TadaError::Config(
                "mixer.p, mixer.m and mixer.n_layers must be >= 1".into(),
            ));
        }
        if !l.is_multiple_of(self.p) {
            return Err(TadaError::Config(format!(
                "L={l} is not divisible by patch length p={}",
                self.p
            )));
        }
        if self.n_layers > 1 && !self.p.is_multiple_of(self.m) {
            return Err(TadaError::Config(format!(
                "patch length p={} is not divisible by merge factor m={}",
                self.p, self.m
            )));
        }
        let merges = self
            .m
            .checked_pow(self.n_layers as u32 - 1)
            .unwrap_or(usize::MAX);
        if !(l / self.p).is_multiple_of(merges) {
            return Err(TadaError::Config(format!(
                "{} patches cannot be merged by m={} across {} layers",
                l / self.p,
                self.m,
                self.n_layers
            )));
        }
        if self.l_c == Some(0) || self.d_c == Some(0) {
            return Err(TadaError::Config(
                "mixer.l_c and mixer.d_c must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Patch count entering each layer.
    pub fn patch_counts(&self, l: usize) -> Vec<usize> {
        let mut n = l / self.p;
        (0..self.n_layers)
            .map(|_| {
                let cur = n;
                n /= self.m;
                cur
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
    /// Present on every layer except the last.
    pub w4: Option<ParamId>,
}

#[derive(Debug, Clone)]
pub struct MixerParams {
    pub config: MixerConfig,
    pub d: usize,
    pub layers: Vec<LayerParams>,
}

impl MixerParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        l: usize,
        d: usize,
        config: &MixerConfig,
    ) -> Result<Self> {
        config.validate(l)?;
        let counts = config.patch_counts(l);
        let layers = counts
            .iter()
            .enumerate()
            .map(|(k, &n)| LayerParams {
                w1: store.add(format!("mixer.layer{k}.w1"), init_uniform(rng, d, d)),
                w2: store.add(format!("mixer.layer{k}.w2"), init_uniform(rng, n, n)),
                w3: store.add(format!("mixer.layer{k}.w3"), init_uniform(rng, d, d)),
                w4: (k + 1 < counts.len()).then(|| {
                    store.add(
                        format!("mixer.layer{k}.w4"),
                        init_uniform(rng, config.p, config.p / config.m),
                    )
                }),
            })
            .collect();
        Ok(MixerParams {
            config: config.clone(),
            d,
            layers,
        })
    }

    /// Runs every layer on the `L × d` grid; returns each block output `β̂^l`.
    pub fn forward(&self, g: &mut Graph, grid: Var) -> Result<Vec<Var>> {
        let mut beta = patchify(g, grid, self.config.p)?;
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let hat = mixer_block(g, beta, layer, self.config.layer_norm)?;
            outs.push(hat);
            if let Some(w4) = layer.w4 {
                beta = patch_merge(g, hat, self.config.m, w4)?;
            }
        }
        Ok(outs)
    }
}

/// `L × d` to `[L/p, p, d]`.
pub fn patchify(g: &mut Graph, grid: Var, p: usize) -> Result<Var> {
    let (l, d) = g.value(grid).dims2()?;
    if p == 0 || l % p != 0 {
        return Err(TadaError::Config(format!(
            "cannot split L={l} into patches of {p}"
        )));
    }
    g.reshape(grid, &[l / p, p, d])
}

fn dims3(g: &Graph, v: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match g.shape(v) {
        &[a, b, c] => Ok((a, b, c)),
        s => Err(TadaError::dim(op, format!("expected rank 3, got {s:?}"))),
    }
}

/// One mixing block on `[P, p, d]` patches.
pub fn mixer_block(g: &mut Graph, beta: Var, layer: &LayerParams, layer_norm: bool) -> Result<Var> {
    let (n, p, d) = dims3(g, beta, "mixer_block")?;
    let rows = g.reshape(beta, &[n * p, d])?;
    let x = if layer_norm {
        g.layer_norm_rows(rows)?
    } else {
        rows
    };
    let w1 = g.param(layer.w1);
    let h = g.matmul(x, w1)?;
    let h = g.reshape(h, &[n, p * d])?;
    let w2 = g.param(layer.w2);
    let h = g.matmul(w2, h)?;
    let h = g.reshape(h, &[n * p, d])?;
    let w3 = g.param(layer.w3);
    let h = g.matmul(h, w3)?;
    let y = g.add(rows, h)?;
    let y = g.relu(y);
    g.reshape(y, &[n, p, d])
}

/// Shrinks each patch from `p` to `p/m` rows and joins `m` adjacent patches.
pub fn patch_merge(g: &mut Graph, beta: Var, m: usize, w4: ParamId) -> Result<Var> {
    let (n, p, d) = dims3(g, beta, "patch_merge")?;
    if m == 0 || n % m != 0 || p % m != 0 {
        return Err(TadaError::Config(format!(
            "cannot merge {n} patches of length {p} by m={m}"
        )));
    }
    let w = g.param(w4);
    let q = p / m;
    let x = g.permute3(beta, [0, 2, 1])?;
    let x = g.reshape(x, &[n * d, p])?;
    let x = g.matmul(x, w)?;
    let x = g.reshape(x, &[n, d, q])?;
    let x = g.permute3(x, [0, 2, 1])?;
    g.reshape(x, &[n / m, p, d])
}

#[derive(Debug, Clone)]
pub struct OutputHead {
    pub fusion: FusionMode,
    pub l_c: usize,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
}

impl OutputHead {
    #[allow(clippy::too_many_arguments)]
    /// `n_inputs` per-scale outputs of width `d`, pooled to `l_c` tokens.
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        n_inputs: usize,
        d: usize,
        l_c: usize,
        d_c: usize,
        n_classes: usize,
        fusion: FusionMode,
    ) -> Result<Self> {
        if n_classes < 2 {
            return Err(TadaError::Config(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        let width = match fusion {
            FusionMode::Concat => n_inputs * d,
            _ => d,
        };
        Ok(OutputHead {
            fusion,
            l_c,
            fuse_w: store.add("fusion.w", init_uniform(rng, width, d_c)),
            fuse_b: store.add("fusion.b", init_bias(rng, width, d_c)),
            cls_w: store.add("classifier.w", init_uniform(rng, d_c, n_classes)),
            cls_b: store.add("classifier.b", init_bias(rng, d_c, n_classes)),
        })
    }

    /// Pools each output to `l_c` tokens, combines them and applies the fusion MLP.
    pub fn fuse(&self, g: &mut Graph, outputs: &[Var]) -> Result<Var> {
        let pooled = pool_all(g, outputs, self.l_c)?;
        let combined = combine(g, &pooled, self.fusion)?;
        let w = g.param(self.fuse_w);
        let b = g.param(self.fuse_b);
        let h = g.linear(combined, w, Some(b))?;
        Ok(g.relu(h))
    }

    /// Logits: `1 × n_classes` for a sequence task, `steps × n_classes` for a step task.
    pub fn classify(&self, g: &mut Graph, c: Var, task: Task, steps: usize) -> Result<Var> {
        let rows = g.shape(c)[0];
        let pooled = match task {
            Task::Sequence => g.mean_axis(c, 0)?,
            Task::Step => {
                let pm = g.constant(adaptive_pool_matrix(rows, steps));
                g.matmul(pm, c)?
            }
        };
        let w = g.param(self.cls_w);
        let b = g.param(self.cls_b);
        g.linear(pooled, w, Some(b))
    }
}

/// Flattens each `[P, p, d]` (or `L × d`) output to tokens and pools it to `l_c` rows.
pub fn pool_all(g: &mut Graph, outputs: &[Var], l_c: usize) -> Result<Vec<Var>> {
    if outputs.is_empty() {
        return Err(TadaError::dim("fuse", "no layer outputs"));
    }
    let mut pooled = Vec::with_capacity(outputs.len());
    for &o in outputs {
        let shape = g.shape(o).to_vec();
        let d = *shape.last().expect("non-scalar");
        let tokens = shape.iter().product::<usize>() / d;
        let flat = g.reshape(o, &[tokens, d])?;
        let pm = g.constant(adaptive_pool_matrix(tokens, l_c));
        pooled.push(g.matmul(pm, flat)?);
    }
    Ok(pooled)
}

pub fn combine(g: &mut Graph, pooled: &[Var], mode: FusionMode) -> Result<Var> {
    let mut acc = pooled[0];
    match mode {
        FusionMode::Multiply => {
            for &p in &pooled[1..] {
                acc = g.mul(acc, p)?;
            }
        }
        FusionMode::Add => {
            for &p in &pooled[1..] {
                acc = g.add(acc, p)?;
            }
        }
        FusionMode::Concat => {
            if pooled.len() > 1 {
                acc = g.concat(pooled, 1)?;
            }
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::params::random_tensor;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn patchify_shapes() {
        let mut g = Graph::detached();
        let a = g.constant(Tensor::new(vec![6, 3], (0..18).map(f64::from).collect()).unwrap());
        let b = patchify(&mut g, a, 2).unwrap();
        assert_eq!(g.shape(b), &[3, 2, 3]);
        // patch 1 holds rows 2 and 3
        assert_eq!(&g.value(b).data()[6..12], &[6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
        let c = patchify(&mut g, a, 6).unwrap();
        assert_eq!(g.shape(c), &[1, 6, 3]);
        let d = patchify(&mut g, a, 1).unwrap();
        assert_eq!(g.shape(d), &[6, 1, 3]);
        assert!(patchify(&mut g, a, 4).is_err());
    }

    #[test]
    fn validation_rules() {
        let c = MixerConfig::default();
        assert!(c.validate(16).is_ok());
        assert!(c.validate(12).is_err());
        let c3 = MixerConfig {
            n_layers: 3,
            ..MixerConfig::default()
        };
        assert!(c3.validate(8).is_err());
        assert!(c3.validate(16).is_ok());
        assert!(c3.validate(32).is_ok());
        let odd = MixerConfig {
            p: 3,
            m: 2,
            ..MixerConfig::default()
        };
        assert!(odd.validate(12).is_err());
        assert_eq!(c3.patch_counts(32), vec![8, 4, 2]);
    }

    fn zero_layer(store: &mut ParamStore, n: usize, d: usize) -> LayerParams {
        LayerParams {
            w1: store.add("w1", Tensor::zeros(&[d, d])),
            w2: store.add("w2", Tensor::zeros(&[n, n])),
            w3: store.add("w3", Tensor::zeros(&[d, d])),
            w4: None,
        }
    }

    #[test]
    fn zero_weights_are_identity_and_zero_maps_to_zero() {
        let mut store = ParamStore::new();
        let layer = zero_layer(&mut store, 3, 4);
        let x = random_tensor(&mut rng(), &[3, 2, 4], 0.0, 2.0);
        let mut g = Graph::new(&store);
        let b = g.constant(x.clone());
        let y = mixer_block(&mut g, b, &layer, false).unwrap();
        assert_eq!(g.value(y), &x);
        let z = g.constant(Tensor::zeros(&[3, 2, 4]));
        let y = mixer_block(&mut g, z, &layer, false).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn merge_shapes() {
        let mut store = ParamStore::new();
        let w4 = store.add("w4", Tensor::new(vec![2, 1], vec![1.0, 10.0]).unwrap());
        let w4_keep = store.add("w4k", Tensor::identity(2));
        let mut g = Graph::new(&store);
        // 4 patches of length 2, one channel
        let x = g.constant(Tensor::new(vec![4, 2, 1], (1..=8).map(f64::from).collect()).unwrap());
        let y = patch_merge(&mut g, x, 2, w4).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 1]);
        // patch k shrinks to row0 + 10*row1
        assert_eq!(g.value(y).data(), &[21.0, 43.0, 65.0, 87.0]);
        let y1 = patch_merge(&mut g, x, 1, w4_keep).unwrap();
        assert_eq!(g.value(y1), g.value(x));
    }

    #[test]
    fn merged_tokens_shrink_by_m() {
        let mut store = ParamStore::new();
        let cfg = MixerConfig {
            n_layers: 3,
            ..MixerConfig::default()
        };
        let params = MixerParams::init(&mut store, &mut rng(), 32, 3, &cfg).unwrap();
        let mut g = Graph::new(&store);
        let grid = g.constant(random_tensor(&mut rng(), &[32, 3], -1.0, 1.0));
        let outs = params.forward(&mut g, grid).unwrap();
        let tokens: Vec<usize> = outs
            .iter()
            .map(|&o| g.shape(o)[0] * g.shape(o)[1])
            .collect();
        assert_eq!(tokens, vec![32, 16, 8]);
    }

    #[test]
    fn fusion_modes() {
        let mut g = Graph::detached();
        let a = g.constant(random_tensor(&mut rng(), &[4, 3], -1.0, 1.0));
        let ones = g.constant(Tensor::full(&[4, 3], 1.0));
        let prod = combine(&mut g, &[a, ones], FusionMode::Multiply).unwrap();
        assert_eq!(g.value(prod), g.value(a));
        let sum = combine(&mut g, &[a, a], FusionMode::Add).unwrap();
        let mul = combine(&mut g, &[a, a], FusionMode::Multiply).unwrap();
        assert_eq!(g.shape(sum), g.shape(mul));
        assert_ne!(g.value(sum), g.value(mul));
        let cat = combine(&mut g, &[a, a], FusionMode::Concat).unwrap();
        assert_eq!(g.shape(cat), &[4, 6]);
        assert!("max".parse::<FusionMode>().is_err());
    }

    #[test]
    fn classifier_shapes_and_purity() {
        let mut store = ParamStore::new();
        let head =
            OutputHead::init(&mut store, &mut rng(), 1, 3, 4, 5, 7, FusionMode::Multiply).unwrap();
        let mut g = Graph::new(&store);
        let c = g.constant(random_tensor(&mut rng(), &[4, 5], -1.0, 1.0));
        let s = head.classify(&mut g, c, Task::Sequence, 9).unwrap();
        assert_eq!(g.shape(s), &[1, 7]);
        let st = head.classify(&mut g, c, Task::Step, 50).unwrap();
        assert_eq!(g.shape(st), &[50, 7]);
        let again = head.classify(&mut g, c, Task::Step, 50).unwrap();
        assert_eq!(g.value(st), g.value(again));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::detached();
        let l = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let ce = g.cross_entropy(l, vec![0]).unwrap();
        assert!((g.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let l = g.constant(Tensor::new(vec![1, 2], vec![20.0, -20.0]).unwrap());
        let ce = g.cross_entropy(l, vec![0]).unwrap();
        assert!(g.value(ce).item() < 1e-8);
        assert!(matches!(
            g.cross_entropy(l, vec![2]),
            Err(TadaError::Data(_))
        ));
    }

    #[test]
    fn block_gradients() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let layer = LayerParams {
            w1: store.add("w1", init_uniform(&mut r, 3, 3)),
            w2: store.add("w2", init_uniform(&mut r, 2, 2)),
            w3: store.add("w3", init_uniform(&mut r, 3, 3)),
            w4: None,
        };
        let x = random_tensor(&mut r, &[2, 2, 3], -1.0, 1.0);
        let report = grad_check(
            &store,
            1e-6,
            |_| true,
            |st| {
                let mut g = Graph::new(st);
                let b = g.constant(x.clone());
                let y = mixer_block(&mut g, b, &layer, false)?;
                let y = g.sigmoid(y);
                let loss = g.sum(y);
                Ok((g.value(loss).item(), g.backward(loss)?))
            },
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "{report:?}");
    }
}
