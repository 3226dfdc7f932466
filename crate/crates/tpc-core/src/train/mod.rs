//! End-to-end training: batch assembly, the per-step
//! forward/backward/update cycle, evaluation metrics, and resumable state.

pub mod checkpoint;
pub mod data;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::BreakRecord;
use crate::losses::{self, LossBreakdown};
use crate::model::{Model, ModelConfig, ModelError, ModelVariant};
use checkpoint::{Checkpoint, CheckpointError, RngState};
use data::{DataError, Dataset, DatasetSpec, Example};
use optim::{Adam, Schedule};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] crate::model::ConfigError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error(
        "non-finite loss at step {step} (task {task}, ponder {ponder}, \
         distribution {distribution}); {} break records captured",
        records.len()
    )]
    NonFinite {
        step: u64,
        task: f64,
        ponder: f64,
        distribution: f64,
        records: Vec<BreakRecord>,
    },
    #[error("training already past total_steps ({0})")]
    Finished(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Warmup length as a fraction of total steps.
    pub warmup_fraction: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 128,
            epochs: 200,
            warmup_fraction: 0.05,
        }
    }
}

/// Full run description: architecture, data and optimization. This is the
/// document the config file deserializes into; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DatasetSpec,
    pub optim: OptimConfig,
    /// Emit trace rows every N steps (0 disables tracing).
    pub trace_every: usize,
    /// Write a checkpoint every N steps (0 = only at the end).
    pub checkpoint_every: usize,
}

/// Everything observable about one optimization step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// 0-based step index this outcome describes.
    pub step: u64,
    pub breakdown: LossBreakdown,
    pub mean_depth: f64,
    pub active_tokens_mean: f64,
    pub lr: f64,
    /// Break records of the first example in the batch, for tracing.
    pub records: Vec<BreakRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub top1: f64,
    pub top5: f64,
    pub mean_depth: f64,
    pub active_tokens_per_layer: Vec<f64>,
    /// Mean measured floating-point ops per image (instrumented count).
    pub flops_per_image: f64,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub optim: Adam,
    pub train_set: Dataset,
    pub eval_set: Dataset,
    rng: ChaCha8Rng,
    seed: u64,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: RunConfig, seed: u64) -> Result<Self, TrainError> {
        cfg.model.validate()?;
        let (train_set, eval_set) = cfg.data.load_split()?;
        let model = Model::new(cfg.model.clone(), seed)?;
        let optim = Adam::new(
            &model
                .params()
                .iter()
                .map(|p| p.value.data.len())
                .collect::<Vec<_>>(),
            Self::schedule(&cfg, train_set.len()),
        );
        let rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Trainer { cfg, model, optim, train_set, eval_set, rng, seed, step: 0 })
    }

    pub fn resume(cfg: RunConfig, seed: u64, ckpt: Checkpoint) -> Result<Self, TrainError> {
        let mut t = Self::new(cfg, seed)?;
        t.model = Model::from_params(ckpt.config, ckpt.params)?;
        t.optim = ckpt.optim;
        t.rng = ckpt.rng.restore();
        t.step = ckpt.step;
        Ok(t)
    }

    fn schedule(cfg: &RunConfig, train_len: usize) -> Schedule {
        let spe = Self::steps_per_epoch(cfg, train_len);
        let total = (cfg.optim.epochs * spe).max(1);
        let warmup = ((total as f64 * cfg.optim.warmup_fraction) as usize).min(total - 1);
        let mut s = Schedule::new(cfg.optim.base_lr, total, warmup);
        s.base_lr = cfg.optim.base_lr;
        s
    }

    fn steps_per_epoch(cfg: &RunConfig, train_len: usize) -> usize {
        train_len.div_ceil(cfg.optim.batch_size).max(1)
    }

    pub fn total_steps(&self) -> usize {
        self.optim.schedule.total_steps
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    /// Batch for a given step. Each epoch's order is reshuffled from a seed
    /// derived from the run seed and the epoch index, so a resumed run sees
    /// exactly the batches the uninterrupted run would have.
    fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = Self::steps_per_epoch(&self.cfg, self.train_set.len());
        let epoch = step as usize / spe;
        let slot = step as usize % spe;
        let mut order: Vec<usize> = (0..self.train_set.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9E3779B97F4A7C15));
        order.shuffle(&mut rng);
        let lo = slot * self.cfg.optim.batch_size;
        let hi = (lo + self.cfg.optim.batch_size).min(order.len());
        order[lo..hi].to_vec()
    }

    /// One optimization step over the next batch.
    pub fn step(&mut self) -> Result<StepOutcome, TrainError> {
        if self.step as usize >= self.total_steps() {
            return Err(TrainError::Finished(self.total_steps()));
        }
        let idxs = self.batch_indices(self.step);
        let batch: Vec<&Example> = idxs
            .iter()
            .map(|&i| &self.train_set.examples[i])
            .collect();
        let outcome = train_step(&mut self.model, &batch, &mut self.optim, self.step)?;
        self.step += 1;
        Ok(outcome)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config.clone(),
            step: self.step,
            params: self.model.params().to_vec(),
            optim: self.optim.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn evaluate(&self) -> Result<EvalMetrics, TrainError> {
        evaluate(&self.model, &self.eval_set)
    }
}

/// Forward + backward over a batch, then one Adam update. Gradients are
/// averaged over the batch; halting statistics are averaged per image.
pub fn train_step(
    model: &mut Model,
    batch: &[&Example],
    optim: &mut Adam,
    step: u64,
) -> Result<StepOutcome, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let tpc = model.config.variant == ModelVariant::Tpc;
    let phi_p = model.config.tpc.phi_p;
    let phi_d = model.config.tpc.phi_d;
    let depth = model.config.depth;

    let mut grad_acc: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| vec![0.0; p.value.data.len()])
        .collect();
    let mut task_sum = 0.0;
    let mut ponder_sum = 0.0;
    let mut dist_sum = 0.0;
    let mut depth_sum = 0.0;
    let mut active_sum = 0.0;
    let mut first_records: Vec<BreakRecord> = Vec::new();

    for (bi, ex) in batch.iter().enumerate() {
        let bound = model.bind();
        bound.tape.set_check_finite(false);
        let (total, task, ponder, dist) = if tpc {
            let out = bound.forward_tpc(&ex.image, Some(ex.label))?;
            let task = out.task.expect("label provided");
            let total =
                losses::compose_final(&task, &out.ponder, &out.distribution, phi_p, phi_d)?;
            depth_sum += out.state.mean_halting_layer(depth);
            active_sum += out.active_per_layer.iter().sum::<usize>() as f64
                / out.active_per_layer.len() as f64;
            if bi == 0 {
                first_records = out.records;
            }
            (total, task.item(), out.ponder.item(), out.distribution.item())
        } else {
            let out = bound.forward_vanilla(&ex.image, Some(ex.label))?;
            let task = out.task.expect("label provided");
            depth_sum += depth as f64;
            active_sum += model.config.tokens() as f64;
            (task.clone(), task.item(), 0.0, 0.0)
        };
        if !total.item().is_finite() {
            return Err(TrainError::NonFinite {
                step,
                task,
                ponder: ponder,
                distribution: dist,
                records: first_records,
            });
        }
        task_sum += task;
        ponder_sum += ponder;
        dist_sum += dist;
        bound.tape.backward(&total)?;
        for (acc, (_, tensor)) in grad_acc.iter_mut().zip(bound.named_tensors()) {
            if let Some(g) = tensor.grad() {
                for (a, v) in acc.iter_mut().zip(&g) {
                    *a += v;
                }
            }
        }
    }

    let inv = 1.0 / batch.len() as f64;
    for g in &mut grad_acc {
        for v in g.iter_mut() {
            *v *= inv;
        }
    }
    let lr = optim.current_lr();
    let mut views: Vec<&mut [f64]> = model
        .params_mut()
        .iter_mut()
        .map(|p| p.value.data.as_mut_slice())
        .collect();
    optim.apply(&mut views, &grad_acc);

    Ok(StepOutcome {
        step,
        breakdown: LossBreakdown::compose(
            task_sum * inv,
            ponder_sum * inv,
            dist_sum * inv,
            phi_p,
            phi_d,
        ),
        mean_depth: depth_sum * inv,
        active_tokens_mean: active_sum * inv,
        lr,
        records: first_records,
    })
}

/// Deterministic metrics over a dataset: accuracy, halting statistics and
/// the instrumented per-image op count.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<EvalMetrics, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let tpc = model.config.variant == ModelVariant::Tpc;
    let depth = model.config.depth;
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    let mut depth_sum = 0.0;
    let mut active_layers = vec![0.0; depth];
    let mut flops_sum = 0.0;

    for ex in &dataset.examples {
        let bound = model.bind();
        let logits = if tpc {
            let out = bound.forward_tpc(&ex.image, None)?;
            depth_sum += out.state.mean_halting_layer(depth);
            for (l, &a) in out.active_per_layer.iter().enumerate() {
                active_layers[l] += a as f64;
            }
            out.logits.value()
        } else {
            depth_sum += depth as f64;
            for a in active_layers.iter_mut() {
                *a += model.config.tokens() as f64;
            }
            bound.forward_vanilla(&ex.image, None)?.logits.value()
        };
        flops_sum += bound.tape.flops() as f64;
        let mut ranked: Vec<usize> = (0..logits.len()).collect();
        ranked.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap());
        if ranked[0] == ex.label {
            top1 += 1;
        }
        if ranked.iter().take(5).any(|&c| c == ex.label) {
            top5 += 1;
        }
    }

    let n = dataset.len() as f64;
    Ok(EvalMetrics {
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
        mean_depth: depth_sum / n,
        active_tokens_per_layer: active_layers.iter().map(|a| a / n).collect(),
        flops_per_image: flops_sum / n,
    })
}
