//! Self-supervised pretraining: the step loop, optimizer, schedule and
//! checkpoints.

pub mod checkpoint;
mod optim;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use optim::{cosine_lr, decays, Sgd};

use crate::augment::{make_view_batch, AugmentConfig, ViewBatch};
use crate::error::{Error, Result};
use crate::imaging::ImageSample;
use crate::losses::{self, embedding_std, stacked_pairs, IaVariant, LossConfig};
use crate::model::{Forward, Mode, ModelConfig, ModelState, MODEL_VERSION};
use crate::numcore::{Graph, Tensor, EPS};
use crate::rng::{stream, Domain};
use crate::scalar::Scalar;

/// Consecutive low-spread epochs before a collapse warning.
const COLLAPSE_EPOCHS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Images per step.
    pub batch_size: usize,
    /// Overrides the `0.05 · B_effective / 256` rule when set.
    pub base_lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    /// End the run after the first epoch whose mean `L_sim` is at or below this.
    pub stop_at_l_sim: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            base_lr: None,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            stop_at_l_sim: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if let Some(lr) = self.base_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
            }
        }
        if self.model.view_size != self.augment.view_size {
            return Err(Error::Config(format!(
                "model view_size {} differs from augmentation view_size {}",
                self.model.view_size, self.augment.view_size
            )));
        }
        self.model.validate()?;
        self.augment.validate()?;
        self.loss.validate()
    }

    /// Batch size used by the learning-rate rule: view pairs per step.
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.augment.mode.pairs_per_image()
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr
            .unwrap_or(0.05 * self.effective_batch() as f64 / 256.0)
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        (dataset_len / self.batch_size) as u64
    }
}

/// Means over one epoch, one row of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_sim: f64,
    pub l_ia: f64,
    pub l_total: f64,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    pub z_std: f64,
}

pub const LOG_HEADER: &str = "epoch,l_sim,l_ia,l_total,lr,z_std";

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.epoch, r.l_sim, r.l_ia, r.l_total, r.lr, r.z_std);
    }
    out
}

pub fn read_log_csv(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let bad = |line: usize| Error::Load {
        path: path.to_path_buf(),
        detail: format!("malformed log row {line}"),
    };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(LOG_HEADER) {
        return Err(bad(1));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad(k + 2));
            }
            let num = |i: usize| f[i].trim().parse::<f64>().map_err(|_| bad(k + 2));
            Ok(EpochLog {
                epoch: f[0].trim().parse().map_err(|_| bad(k + 2))?,
                l_sim: num(1)?,
                l_ia: num(2)?,
                l_total: num(3)?,
                lr: num(4)?,
                z_std: num(5)?,
            })
        })
        .collect()
}

/// Running sums for the epoch in progress.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochAccumulator {
    pub steps: u64,
    pub l_sim: f64,
    pub l_ia: f64,
    pub l_total: f64,
    pub z_std: f64,
    pub first_lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub l_sim: f64,
    pub l_ia: f64,
    pub l_total: f64,
    pub lr: f64,
    pub z_std: f64,
}

/// Owns the model and optimizer for the length of a run.
pub struct Trainer<S: Scalar> {
    pub config: TrainConfig,
    pub state: ModelState<S>,
    pub optimizer: Sgd<S>,
    pub step: u64,
    pub history: Vec<EpochLog>,
    acc: EpochAccumulator,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = ModelState::new(config.model.clone(), config.seed)?;
        let optimizer = Sgd::new(&state, config.momentum, config.weight_decay);
        Ok(Self {
            config,
            state,
            optimizer,
            step: 0,
            history: Vec::new(),
            acc: EpochAccumulator::default(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint<S>) -> Result<Self> {
        let config = ckpt.meta.config;
        config.validate()?;
        if ckpt.meta.model_version != MODEL_VERSION {
            return Err(Error::Checkpoint(format!(
                "model version {} is not supported",
                ckpt.meta.model_version
            )));
        }
        let optimizer = Sgd {
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            velocity: ckpt.momentum,
        };
        Ok(Self {
            config,
            state: ckpt.state,
            optimizer,
            step: ckpt.meta.step,
            history: ckpt.meta.history,
            acc: ckpt.meta.partial_epoch,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<S> {
        Checkpoint {
            meta: CheckpointMeta {
                config: self.config.clone(),
                model_version: MODEL_VERSION,
                step: self.step,
                rng_seed: self.config.seed,
                rng_step: self.step,
                history: self.history.clone(),
                partial_epoch: self.acc.clone(),
            },
            state: self.state.clone(),
            momentum: self.optimizer.velocity.clone(),
        }
    }

    fn check_dataset(&self, images: &[ImageSample]) -> Result<u64> {
        if images.is_empty() {
            return Err(Error::Precondition {
                op: "pretrain",
                detail: "dataset is empty".into(),
            });
        }
        if self.config.batch_size > images.len() {
            return Err(Error::Precondition {
                op: "pretrain",
                detail: format!(
                    "batch_size {} exceeds dataset size {}",
                    self.config.batch_size,
                    images.len()
                ),
            });
        }
        Ok(self.config.steps_per_epoch(images.len()))
    }

    pub fn total_steps(&self, dataset_len: usize) -> u64 {
        self.config.epochs as u64 * self.config.steps_per_epoch(dataset_len)
    }

    /// Whether the run has used up its epochs or hit the `L_sim` target.
    pub fn finished(&self, dataset_len: usize) -> bool {
        if self.step >= self.total_steps(dataset_len) {
            return true;
        }
        match (self.config.stop_at_l_sim, self.history.last()) {
            (Some(t), Some(last)) => self.acc.steps == 0 && last.l_sim <= t,
            _ => false,
        }
    }

    /// Image indices of the batch for the current step.
    fn batch_indices(&self, n: usize, spe: u64) -> Vec<usize> {
        let epoch = self.step / spe;
        let within = (self.step % spe) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(self.config.seed, Domain::EpochOrder, &[epoch]));
        let b = self.config.batch_size;
        order[within * b..(within + 1) * b].to_vec()
    }

    /// One optimizer step on the next batch of the epoch schedule.
    pub fn train_step(&mut self, images: &[ImageSample]) -> Result<StepStats> {
        let spe = self.check_dataset(images)?;
        let total = self.total_steps(images.len());
        let batch: Vec<ImageSample> = self
            .batch_indices(images.len(), spe)
            .into_iter()
            .map(|i| images[i].clone())
            .collect();
        let views = make_view_batch(&batch, &self.config.augment, self.config.seed, self.step)?;
        let lr = cosine_lr(self.step, total, self.config.base_lr());
        let stats = self.optimize(&views, lr)?;

        if self.acc.steps == 0 {
            self.acc.first_lr = lr;
        }
        self.acc.steps += 1;
        self.acc.l_sim += stats.l_sim;
        self.acc.l_ia += stats.l_ia;
        self.acc.l_total += stats.l_total;
        self.acc.z_std += stats.z_std;
        self.step += 1;
        if self.step % spe == 0 {
            self.close_epoch();
        }
        Ok(stats)
    }

    fn close_epoch(&mut self) {
        let a = std::mem::take(&mut self.acc);
        let k = a.steps as f64;
        let row = EpochLog {
            epoch: self.history.len() + 1,
            l_sim: a.l_sim / k,
            l_ia: a.l_ia / k,
            l_total: a.l_total / k,
            lr: a.first_lr,
            z_std: a.z_std / k,
        };
        log::info!(
            "epoch {}: l_sim {:.4} l_ia {:.4} total {:.4} lr {:.5} z_std {:.4}",
            row.epoch,
            row.l_sim,
            row.l_ia,
            row.l_total,
            row.lr,
            row.z_std
        );
        self.history.push(row);
        if let Some(w) = collapse_warning(&self.history, self.config.model.embed_dim) {
            log::warn!("{w}");
        }
    }

    /// Forward both streams, compute the configured objective, backpropagate and update.
    pub fn optimize(&mut self, views: &ViewBatch, lr: f64) -> Result<StepStats> {
        let m = views.len();
        let mut data: Vec<S> = Vec::with_capacity(2 * views.stream_a.len());
        data.extend(views.stream_a.data().iter().map(|&v| S::of(v)));
        data.extend(views.stream_b.data().iter().map(|&v| S::of(v)));
        let mut shape = views.stream_a.shape().to_vec();
        shape[0] = 2 * m;

        let mut g = Graph::new();
        let bound = self.state.bind(&mut g, true);
        let mut fw = Forward::new(&self.state, &bound, Mode::Train);
        let x = g.constant(Tensor::new(shape, data)?);
        let f = fw.encode(&mut g, x)?;
        let z = fw.project(&mut g, f)?;
        let q = fw.predict(&mut g, z)?;
        let bn_stats = std::mem::take(&mut fw.stats);
        let zn = g.l2_normalize_rows(z, Some(S::of(EPS)))?;
        let l_sim = losses::simsiam_loss(&mut g, q, zn, &stacked_pairs(m))?;
        let cfg = &self.config.loss;
        let l_ia = match cfg.variant {
            IaVariant::ImageAware => Some(losses::ia_closs(
                &mut g,
                zn,
                &views.stacked_image_ids(),
                cfg.tau,
                cfg.reduction,
            )?),
            IaVariant::Supervised => Some(losses::sup_closs(
                &mut g,
                zn,
                &views.stacked_labels(),
                cfg.tau,
                cfg.reduction,
            )?),
            IaVariant::None => None,
        };
        let total = match l_ia {
            Some(l) => losses::total_loss(&mut g, l_sim, l, cfg.lambda)?,
            None => l_sim,
        };
        let stats = StepStats {
            l_sim: g.value(l_sim).item().as_f64(),
            l_ia: l_ia.map_or(0.0, |l| g.value(l).item().as_f64()),
            l_total: g.value(total).item().as_f64(),
            lr,
            z_std: embedding_std(g.value(z)),
        };
        if !stats.l_total.is_finite() {
            return Err(Error::NonFinite {
                location: format!("loss at step {}", self.step),
            });
        }
        g.backward(total)?;
        let grads: Vec<Tensor<S>> = bound
            .vars
            .iter()
            .map(|&v| g.grad(v).expect("parameter gradient").clone())
            .collect();
        drop(g);
        self.optimizer.step(&mut self.state, &grads, lr)?;
        self.state.update_running_stats(&bn_stats);
        Ok(stats)
    }

    /// Train until finished, or until `max_steps` more steps have run.
    pub fn run(&mut self, images: &[ImageSample], max_steps: Option<u64>) -> Result<()> {
        self.check_dataset(images)?;
        let mut taken = 0;
        while !self.finished(images.len()) && max_steps.is_none_or(|m| taken < m) {
            self.train_step(images)?;
            taken += 1;
        }
        Ok(())
    }

    pub fn warnings(&self) -> Vec<String> {
        (COLLAPSE_EPOCHS..=self.history.len())
            .filter_map(|k| collapse_warning(&self.history[..k], self.config.model.embed_dim))
            .collect()
    }

    pub fn meta(&self, dataset_len: usize) -> RunMeta {
        RunMeta {
            config: self.config.clone(),
            dtype: S::DTYPE.to_string(),
            effective_batch: self.config.effective_batch(),
            base_lr: self.config.base_lr(),
            lr_rule: if self.config.base_lr.is_some() {
                "explicit".into()
            } else {
                "0.05 * effective_batch / 256".into()
            },
            ia_reduction: self.config.loss.reduction,
            steps: self.step,
            steps_per_epoch: self.config.steps_per_epoch(dataset_len),
            epochs_completed: self.history.len(),
            param_count: self.state.param_count(),
            dataset_len,
            warnings: self.warnings(),
        }
    }
}

/// Warning text when the last [`COLLAPSE_EPOCHS`] epochs all had `z_std < 0.1/√d`.
pub fn collapse_warning(history: &[EpochLog], embed_dim: usize) -> Option<String> {
    let floor = 0.1 / (embed_dim as f64).sqrt();
    let n = history.len();
    if n < COLLAPSE_EPOCHS || history[n - COLLAPSE_EPOCHS..].iter().any(|e| e.z_std >= floor) {
        return None;
    }
    Some(format!(
        "possible collapse: embedding std below {floor:.4} for epochs {}..={}",
        n + 1 - COLLAPSE_EPOCHS,
        n
    ))
}

/// Run description written next to the log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config: TrainConfig,
    pub dtype: String,
    pub effective_batch: usize,
    pub base_lr: f64,
    pub lr_rule: String,
    pub ia_reduction: losses::Reduction,
    pub steps: u64,
    pub steps_per_epoch: u64,
    pub epochs_completed: usize,
    pub param_count: usize,
    pub dataset_len: usize,
    pub warnings: Vec<String>,
}

/// Run a fresh pretraining job to completion.
pub fn pretrain<S: Scalar>(images: &[ImageSample], config: TrainConfig) -> Result<Trainer<S>> {
    let mut t = Trainer::new(config)?;
    t.run(images, None)?;
    Ok(t)
}

/// First epoch (1-based) whose mean `L_sim` is at or below `threshold`.
pub fn epochs_to_reach(history: &[EpochLog], threshold: f64) -> Option<usize> {
    history.iter().find(|e| e.l_sim <= threshold).map(|e| e.epoch)
}
