//! Linear probing of a frozen encoder and multi-label metrics.

mod metrics;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use metrics::{
    average_precision, compute_metrics, f1, multilabel_bce, prevalence_baseline, ClassCounts, MetricsReport,
    AP_VARIANT,
};

use crate::augment::{resize_crop, BlockRect, CropBox};
use crate::error::{Error, Result};
use crate::imaging::ImageSample;
use crate::model::{extract_features, ModelState, PoolingMode};
use crate::numcore::{sigmoid, Graph, Tensor};
use crate::rng::{stream, Domain};
use crate::scalar::Scalar;
use crate::train::cosine_lr;

/// Images pushed through the encoder per forward pass during extraction.
pub const EXTRACT_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Overrides the `10·B/256` rule when set.
    pub base_lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub pooling: PoolingMode,
    pub theta: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            base_lr: None,
            momentum: 0.9,
            weight_decay: 1e-4,
            pooling: PoolingMode::Gap,
            theta: 0.5,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("probe epochs and batch size must be positive".into()));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Config(format!("theta must lie in (0, 1), got {}", self.theta)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("probe momentum must be in [0, 1) and weight decay ≥ 0".into()));
        }
        if matches!(self.base_lr, Some(lr) if !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("probe learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr.unwrap_or(10.0 * self.batch_size as f64 / 256.0)
    }
}

/// A trained linear head over standardised pooled features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub pooling: PoolingMode,
    /// Per-feature shift and scale fitted on the training features.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `K×F`, applied as `x·Wᵀ + b`.
    pub weight: Tensor<f64>,
    pub bias: Tensor<f64>,
    /// Training BCE per epoch.
    pub losses: Vec<f64>,
}

impl LinearProbe {
    fn standardise(&self, features: &Tensor<f64>) -> Tensor<f64> {
        let f = self.mean.len();
        Tensor::from_fn(features.shape().to_vec(), |i| {
            (features.data()[i] - self.mean[i % f]) * self.scale[i % f]
        })
    }

    pub fn logits(&self, features: &Tensor<f64>) -> Result<Tensor<f64>> {
        if features.ndim() != 2 || features.shape()[1] != self.mean.len() {
            return Err(Error::dim(
                "linear_probe",
                format!("features {:?} for a head over {} inputs", features.shape(), self.mean.len()),
            ));
        }
        let mut g = Graph::new();
        let x = g.constant(self.standardise(features));
        let w = g.constant(self.weight.clone());
        let b = g.constant(self.bias.clone());
        let xw = g.matmul_nt(x, w)?;
        let out = g.add_bias(xw, b)?;
        Ok(g.value(out).clone())
    }

    /// Per-class probabilities.
    pub fn scores(&self, features: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(self.logits(features)?.map(sigmoid))
    }
}

/// Multi-hot `N×K` targets.
pub fn label_matrix(samples: &[ImageSample], num_classes: usize) -> Result<Tensor<f64>> {
    let mut t = Tensor::zeros([samples.len(), num_classes]);
    for (i, s) in samples.iter().enumerate() {
        for &c in &s.labels {
            if c >= num_classes {
                return Err(Error::Precondition {
                    op: "label_matrix",
                    detail: format!("image {} has label {c} but only {num_classes} classes", s.id),
                });
            }
            t.data_mut()[i * num_classes + c] = 1.0;
        }
    }
    Ok(t)
}

/// Whole images resampled to the encoder's input side, stacked `N×3×s×s`.
pub fn image_batch<S: Scalar>(samples: &[ImageSample], size: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(samples.len() * 3 * size * size);
    for s in samples {
        let (h, w) = (s.height(), s.width());
        let region = BlockRect { top: 0, left: 0, height: h, width: w };
        let crop = CropBox { top: 0.0, left: 0.0, height: h as f64, width: w as f64 };
        data.extend(resize_crop(&s.pixels, &region, &crop, size).into_iter().map(S::of));
    }
    Tensor::new([samples.len(), 3, size, size], data).expect("image batch size")
}

/// Pooled eval-mode features, one `N×F` tensor per pooling mode.
pub fn encode_samples<S: Scalar>(
    state: &ModelState<S>,
    samples: &[ImageSample],
    poolings: &[PoolingMode],
) -> Result<Vec<Tensor<f64>>> {
    let images = image_batch::<S>(samples, state.config.view_size);
    let feats = extract_features(state, &images, poolings, EXTRACT_CHUNK)?;
    Ok(feats.iter().map(|f| f.cast()).collect())
}

/// Train a linear head on fixed features with per-class sigmoid BCE.
pub fn train_probe(features: &Tensor<f64>, targets: &Tensor<f64>, cfg: &ProbeConfig) -> Result<LinearProbe> {
    cfg.validate()?;
    if features.ndim() != 2 || targets.ndim() != 2 || features.shape()[0] != targets.shape()[0] {
        return Err(Error::dim(
            "train_probe",
            format!("features {:?} and targets {:?}", features.shape(), targets.shape()),
        ));
    }
    if !features.all_finite() {
        return Err(Error::NonFinite { location: "probe features".into() });
    }
    let (n, f) = (features.shape()[0], features.shape()[1]);
    let k = targets.shape()[1];
    if n == 0 {
        return Err(Error::Precondition { op: "train_probe", detail: "no training examples".into() });
    }

    let mut mean = vec![0.0; f];
    let mut var = vec![0.0; f];
    for i in 0..n {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += features.at2(i, j) / n as f64;
        }
    }
    for i in 0..n {
        for (j, v) in var.iter_mut().enumerate() {
            *v += (features.at2(i, j) - mean[j]).powi(2) / n as f64;
        }
    }
    let scale = var.iter().map(|v| 1.0 / (v + 1e-6).sqrt()).collect();
    let mut probe = LinearProbe {
        pooling: cfg.pooling,
        mean,
        scale,
        weight: Tensor::zeros([k, f]),
        bias: Tensor::zeros([k]),
        losses: Vec::with_capacity(cfg.epochs),
    };
    let x = probe.standardise(features);

    let batch = cfg.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let total = (steps_per_epoch * cfg.epochs) as u64;
    let base_lr = cfg.base_lr();
    let mut vel_w = Tensor::<f64>::zeros([k, f]);
    let mut vel_b = Tensor::<f64>::zeros([k]);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(cfg.seed, Domain::Probe, &[epoch as u64]));
        let mut epoch_loss = 0.0;
        for idx in order.chunks(batch) {
            let xb = Tensor::from_fn([idx.len(), f], |p| x.data()[idx[p / f] * f + p % f]);
            let yb = Tensor::from_fn([idx.len(), k], |p| targets.data()[idx[p / k] * k + p % k]);
            let mut g = Graph::new();
            let xv = g.constant(xb);
            let w = g.param(probe.weight.clone());
            let b = g.param(probe.bias.clone());
            let xw = g.matmul_nt(xv, w)?;
            let logits = g.add_bias(xw, b)?;
            let loss = g.bce_with_logits(logits, &yb)?;
            g.backward(loss)?;
            epoch_loss += g.value(loss).item() * idx.len() as f64 / n as f64;

            let lr = cosine_lr(step, total, base_lr);
            let gw = g.grad(w).expect("head weight gradient");
            let gb = g.grad(b).expect("head bias gradient");
            for ((v, p), &d) in vel_w.data_mut().iter_mut().zip(probe.weight.data_mut()).zip(gw.data()) {
                *v = cfg.momentum * *v + d + cfg.weight_decay * *p;
                *p -= lr * *v;
            }
            for ((v, p), &d) in vel_b.data_mut().iter_mut().zip(probe.bias.data_mut()).zip(gb.data()) {
                *v = cfg.momentum * *v + d;
                *p -= lr * *v;
            }
            step += 1;
        }
        if !epoch_loss.is_finite() {
            return Err(Error::NonFinite { location: format!("probe loss at epoch {epoch}") });
        }
        probe.losses.push(epoch_loss);
    }
    Ok(probe)
}

/// Deterministic 80/20 split of `0..n` into (train, eval) indices.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Domain::Split, &[n as u64]));
    let cut = (n * 4).div_ceil(5).min(n);
    let (mut tr, mut ev) = (order[..cut].to_vec(), order[cut..].to_vec());
    tr.sort_unstable();
    ev.sort_unstable();
    (tr, ev)
}

/// Outcome of probing one pooling mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub pooling: PoolingMode,
    pub report: MetricsReport,
    pub train_loss: f64,
    pub prevalence_baseline: f64,
}

/// Probe a frozen encoder under several pooling modes.
///
/// Features are extracted once per split in eval mode; only the linear
/// heads are trained. `cfg.pooling` is ignored in favour of `poolings`.
pub fn probe_encoder<S: Scalar>(
    state: &ModelState<S>,
    train: &[ImageSample],
    eval: &[ImageSample],
    num_classes: usize,
    poolings: &[PoolingMode],
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeOutcome>> {
    cfg.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Precondition { op: "probe_encoder", detail: "empty train or eval split".into() });
    }
    for s in train.iter().chain(eval) {
        if s.height() < state.config.view_size || s.width() < state.config.view_size {
            return Err(Error::Precondition {
                op: "probe_encoder",
                detail: format!("image {} is smaller than the encoder input", s.id),
            });
        }
    }
    let ytr = label_matrix(train, num_classes)?;
    let yev = label_matrix(eval, num_classes)?;
    let ftr = encode_samples(state, train, poolings)?;
    let fev = encode_samples(state, eval, poolings)?;
    let baseline = prevalence_baseline(&yev);
    poolings
        .iter()
        .enumerate()
        .map(|(i, &pooling)| {
            let probe = train_probe(&ftr[i], &ytr, &ProbeConfig { pooling, ..cfg.clone() })?;
            let report = compute_metrics(&probe.scores(&fev[i])?, &yev, cfg.theta)?;
            Ok(ProbeOutcome {
                pooling,
                report,
                train_loss: probe.losses.last().copied().unwrap_or(f64::NAN),
                prevalence_baseline: baseline,
            })
        })
        .collect()
}

/// One line of the runs CSV.
pub const RUNS_HEADER: &str = "run_id,pool,theta,map,op,or,of1,cp,cr,cf1";

pub fn runs_csv_row(run_id: &str, pooling: PoolingMode, r: &MetricsReport) -> String {
    format!(
        "{run_id},{},{},{},{},{},{},{},{},{}",
        pooling.name(),
        r.theta,
        r.map,
        r.op,
        r.or,
        r.of1,
        r.cp,
        r.cr,
        r.cf1
    )
}
