//! Siamese conv encoder with projector and predictor heads.
//!
//! The trunk is four `conv3×3(stride 2) → BN → ReLU` stages followed by a
//! global pooling step. Parameters live in a flat, name-ordered list so the
//! optimizer and the checkpoint format can treat them uniformly.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{BatchStats, Graph, Tensor, Var};
use crate::rng::{stream, Domain};
use crate::scalar::Scalar;

pub const MODEL_VERSION: u32 = 1;
const BN_EPS: f64 = 1e-5;
/// Running statistics keep this share of their previous value each step.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingMode {
    /// Spatial mean.
    Gap,
    /// Spatial max.
    Gmp,
    /// `(gap + gmp) / 2`
    GampMean,
    /// `gap − gmp`
    GampDiff,
}

impl PoolingMode {
    pub const ALL: [PoolingMode; 4] = [Self::Gap, Self::Gmp, Self::GampMean, Self::GampDiff];

    pub fn name(self) -> &'static str {
        match self {
            Self::Gap => "gap",
            Self::Gmp => "gmp",
            Self::GampMean => "gamp-mean",
            Self::GampDiff => "gamp-diff",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s || p.name().replace('-', "_") == s)
            .ok_or_else(|| Error::Config(format!("unknown pooling mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channel widths of the four trunk stages.
    pub widths: [usize; 4],
    pub embed_dim: usize,
    pub view_size: usize,
    pub pooling: PoolingMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: [32, 64, 128, 256],
            embed_dim: 128,
            view_size: 64,
            pooling: PoolingMode::Gap,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        if self.embed_dim < 4 || !self.embed_dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "embed_dim must be a positive multiple of 4, got {}",
                self.embed_dim
            )));
        }
        if self.view_size < 8 {
            return Err(Error::Config(format!("view_size must be at least 8, got {}", self.view_size)));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.widths[3]
    }
}

/// Train mode normalises with batch statistics; eval mode with running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Named<S> {
    pub name: String,
    pub value: Tensor<S>,
}

/// All weights and batch-norm buffers of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<S> {
    pub config: ModelConfig,
    pub version: u32,
    params: Vec<Named<S>>,
    buffers: Vec<Named<S>>,
    index: HashMap<String, usize>,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

enum Init {
    Kaiming(usize),
    Zeros,
    Ones,
}

fn layout(cfg: &ModelConfig) -> (Vec<Spec>, Vec<Spec>) {
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    let mut bn = |prefix: &str, c: usize, params: &mut Vec<Spec>| {
        params.push(Spec { name: format!("{prefix}.bn.weight"), shape: vec![c], init: Init::Ones });
        params.push(Spec { name: format!("{prefix}.bn.bias"), shape: vec![c], init: Init::Zeros });
        buffers.push(Spec { name: format!("{prefix}.bn.running_mean"), shape: vec![c], init: Init::Zeros });
        buffers.push(Spec { name: format!("{prefix}.bn.running_var"), shape: vec![c], init: Init::Ones });
    };
    let mut cin = 3;
    for (s, &w) in cfg.widths.iter().enumerate() {
        let prefix = format!("encoder.{s}");
        params.push(Spec {
            name: format!("{prefix}.conv.weight"),
            shape: vec![w, cin, 3, 3],
            init: Init::Kaiming(cin * 9),
        });
        bn(&prefix, w, &mut params);
        cin = w;
    }
    let f = cfg.feature_dim();
    let d = cfg.embed_dim;
    for (prefix, i, o, with_bn) in [
        ("projector.0", f, f, true),
        ("projector.1", f, d, true),
        ("predictor.0", d, d / 4, true),
        ("predictor.1", d / 4, d, false),
    ] {
        params.push(Spec { name: format!("{prefix}.fc.weight"), shape: vec![o, i], init: Init::Kaiming(i) });
        params.push(Spec { name: format!("{prefix}.fc.bias"), shape: vec![o], init: Init::Zeros });
        if with_bn {
            bn(prefix, o, &mut params);
        }
    }
    (params, buffers)
}

fn materialise<S: Scalar>(specs: Vec<Spec>, seed: u64, offset: usize) -> Vec<Named<S>> {
    specs
        .into_iter()
        .enumerate()
        .map(|(k, spec)| {
            let len: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zeros => vec![S::zero(); len],
                Init::Ones => vec![S::one(); len],
                Init::Kaiming(fan_in) => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let mut rng = stream(seed, Domain::Init, &[(offset + k) as u64]);
                    (0..len).map(|_| S::of(rng.random_range(-bound..bound))).collect()
                }
            };
            Named {
                name: spec.name,
                value: Tensor::new(spec.shape, data).expect("spec shape"),
            }
        })
        .collect()
}

impl<S: Scalar> ModelState<S> {
    /// Fresh network: Kaiming-uniform weights, zero biases, unit BN scale.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (p, b) = layout(&config);
        let params = materialise(p, seed, 0);
        let buffers = materialise(b, seed, 0);
        Ok(Self::assemble(config, params, buffers))
    }

    fn assemble(config: ModelConfig, params: Vec<Named<S>>, buffers: Vec<Named<S>>) -> Self {
        let index = params
            .iter()
            .chain(&buffers)
            .enumerate()
            .map(|(i, n)| (n.name.clone(), i))
            .collect();
        Self {
            config,
            version: MODEL_VERSION,
            params,
            buffers,
            index,
        }
    }

    /// Rebuild a state from named tensors, checking names and shapes against `config`.
    pub fn from_tensors(config: ModelConfig, mut tensors: HashMap<String, Tensor<S>>) -> Result<Self> {
        config.validate()?;
        let (p, b) = layout(&config);
        let mut take = |specs: Vec<Spec>| -> Result<Vec<Named<S>>> {
            specs
                .into_iter()
                .map(|spec| {
                    let value = tensors
                        .remove(&spec.name)
                        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", spec.name)))?;
                    if value.shape() != spec.shape.as_slice() {
                        return Err(Error::Checkpoint(format!(
                            "tensor {} has shape {:?}, config expects {:?}",
                            spec.name,
                            value.shape(),
                            spec.shape
                        )));
                    }
                    Ok(Named { name: spec.name, value })
                })
                .collect()
        };
        let params = take(p)?;
        let buffers = take(b)?;
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(Self::assemble(config, params, buffers))
    }

    pub fn params(&self) -> &[Named<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Named<S>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Named<S>] {
        &self.buffers
    }

    /// Parameters then buffers, in canonical order.
    pub fn tensors(&self) -> impl Iterator<Item = &Named<S>> {
        self.params.iter().chain(&self.buffers)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<S>> {
        let &i = self.index.get(name)?;
        Some(if i < self.params.len() {
            &self.params[i].value
        } else {
            &self.buffers[i - self.params.len()].value
        })
    }

    fn buffer_mut(&mut self, name: &str) -> &mut Tensor<S> {
        let i = self.index[name] - self.params.len();
        &mut self.buffers[i].value
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn encoder_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with("encoder."))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn all_finite(&self) -> std::result::Result<(), String> {
        match self.tensors().find(|t| !t.value.all_finite()) {
            Some(t) => Err(t.name.clone()),
            None => Ok(()),
        }
    }

    /// Put every parameter on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable))
            .collect();
        Bound { vars }
    }

    /// Fold batch statistics from a train-mode forward pass into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<S>)]) {
        let keep = S::of(BN_MOMENTUM);
        let new = S::one() - keep;
        for (prefix, st) in stats {
            for (suffix, batch) in [("running_mean", &st.mean), ("running_var", &st.var)] {
                let buf = self.buffer_mut(&format!("{prefix}.bn.{suffix}"));
                for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = keep * *r + new * b;
                }
            }
        }
    }
}

/// Graph handles of a bound [`ModelState`], one per parameter.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// One forward pass over a bound model.
pub struct Forward<'a, S: Scalar> {
    pub state: &'a ModelState<S>,
    pub bound: &'a Bound,
    pub mode: Mode,
    /// Batch statistics of every train-mode BN layer, keyed by layer prefix.
    pub stats: Vec<(String, BatchStats<S>)>,
}

impl<'a, S: Scalar> Forward<'a, S> {
    pub fn new(state: &'a ModelState<S>, bound: &'a Bound, mode: Mode) -> Self {
        Self {
            state,
            bound,
            mode,
            stats: Vec::new(),
        }
    }

    fn var(&self, name: &str) -> Var {
        self.bound.vars[self.state.index[name]]
    }

    fn check(&self, g: &Graph<S>, v: Var, layer: &str) -> Result<Var> {
        if g.value(v).all_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                location: format!("activations of {layer}"),
            })
        }
    }

    fn bn(&mut self, g: &mut Graph<S>, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.var(&format!("{prefix}.bn.weight"));
        let beta = self.var(&format!("{prefix}.bn.bias"));
        let eps = S::of(BN_EPS);
        match self.mode {
            Mode::Train => {
                let (y, st) = g.batch_norm(x, gamma, beta, eps)?;
                self.stats.push((prefix.to_string(), st));
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.state.tensor(&format!("{prefix}.bn.running_mean")).expect("buffer");
                let rv = self.state.tensor(&format!("{prefix}.bn.running_var")).expect("buffer");
                g.batch_norm_eval(x, gamma, beta, rm.data(), rv.data(), eps)
            }
        }
    }

    fn linear(&mut self, g: &mut Graph<S>, x: Var, prefix: &str) -> Result<Var> {
        let w = self.var(&format!("{prefix}.fc.weight"));
        let b = self.var(&format!("{prefix}.fc.bias"));
        let y = g.matmul_nt(x, w)?;
        g.add_bias(y, b)
    }

    /// Conv trunk output before pooling: `[M×F×h×w]`.
    pub fn trunk(&mut self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let s = self.state.config.view_size;
        let shape = g.value(x).shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::dim(
                "encode",
                format!("expected [M, 3, {s}, {s}] input, got {shape:?}"),
            ));
        }
        let mut h = x;
        for stage in 0..4 {
            let prefix = format!("encoder.{stage}");
            let k = self.var(&format!("{prefix}.conv.weight"));
            h = g.conv2d(h, k, 2, 1)?;
            h = self.bn(g, h, &prefix)?;
            h = g.relu(h);
            h = self.check(g, h, &prefix)?;
        }
        Ok(h)
    }

    /// Encoder features `[M×F]` under the configured pooling mode.
    pub fn encode(&mut self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let pooling = self.state.config.pooling;
        self.encode_with(g, x, pooling)
    }

    pub fn encode_with(&mut self, g: &mut Graph<S>, x: Var, pooling: PoolingMode) -> Result<Var> {
        let h = self.trunk(g, x)?;
        pool(g, h, pooling)
    }

    /// Projector output `z` (before normalisation).
    pub fn project(&mut self, g: &mut Graph<S>, f: Var) -> Result<Var> {
        let mut h = self.linear(g, f, "projector.0")?;
        h = self.bn(g, h, "projector.0")?;
        h = g.relu(h);
        h = self.linear(g, h, "projector.1")?;
        h = self.bn(g, h, "projector.1")?;
        self.check(g, h, "projector")
    }

    /// Predictor output `q`.
    pub fn predict(&mut self, g: &mut Graph<S>, z: Var) -> Result<Var> {
        let mut h = self.linear(g, z, "predictor.0")?;
        h = self.bn(g, h, "predictor.0")?;
        h = g.relu(h);
        h = self.linear(g, h, "predictor.1")?;
        self.check(g, h, "predictor")
    }
}

/// Apply a pooling mode to a `[M×C×h×w]` feature map.
pub fn pool<S: Scalar>(g: &mut Graph<S>, h: Var, pooling: PoolingMode) -> Result<Var> {
    Ok(match pooling {
        PoolingMode::Gap => g.global_avg_pool(h)?,
        PoolingMode::Gmp => g.global_max_pool(h)?,
        PoolingMode::GampMean => {
            let a = g.global_avg_pool(h)?;
            let m = g.global_max_pool(h)?;
            let s = g.add(a, m)?;
            g.scale(s, S::of(0.5))
        }
        PoolingMode::GampDiff => {
            let a = g.global_avg_pool(h)?;
            let m = g.global_max_pool(h)?;
            g.sub(a, m)?
        }
    })
}

/// Eval-mode features for a stack of images, computed in chunks without gradients.
pub fn extract_features<S: Scalar>(
    state: &ModelState<S>,
    images: &Tensor<S>,
    poolings: &[PoolingMode],
    chunk: usize,
) -> Result<Vec<Tensor<S>>> {
    let shape = images.shape().to_vec();
    let m = shape[0];
    let per = images.len() / m.max(1);
    let f = state.config.feature_dim();
    let mut out: Vec<Vec<S>> = vec![Vec::with_capacity(m * f); poolings.len()];
    for start in (0..m).step_by(chunk.max(1)) {
        let end = (start + chunk.max(1)).min(m);
        let mut g = Graph::new();
        let bound = state.bind(&mut g, false);
        let mut fw = Forward::new(state, &bound, Mode::Eval);
        let mut cshape = shape.clone();
        cshape[0] = end - start;
        let x = g.constant(Tensor::new(cshape, images.data()[start * per..end * per].to_vec())?);
        let h = fw.trunk(&mut g, x)?;
        for (k, &p) in poolings.iter().enumerate() {
            let v = pool(&mut g, h, p)?;
            out[k].extend_from_slice(g.value(v).data());
        }
    }
    out.into_iter().map(|d| Tensor::new([m, f], d)).collect()
}
