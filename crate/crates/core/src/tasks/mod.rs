//! Prompt-tuned downstream tasks: triple classification, zero-shot image
//! classification and question answering.

pub mod data;
pub mod metrics;
pub mod qa;
pub mod tc;
pub mod tune;
pub mod zsl;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{adam_step, lr_schedule, AdamState, Tensor};
use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::model::ModelParams;
use crate::sampler::rng_for;
use crate::scalar::Scalar;
use crate::sequence::{TripleSequence, Vocab};

pub use metrics::{Confusion, MetricReport, ZslMetrics};

/// Epoch tag for evaluation-time sampling, outside any training epoch.
const EVAL_EPOCH: u64 = u64::MAX;
const STREAM_ORDER: u64 = 11;
const STREAM_EXAMPLE: u64 = 12;

/// Task graph and sampling size shared by every task.
#[derive(Debug, Clone, Copy)]
pub struct TaskContext<'a> {
    pub graph: &'a KnowledgeGraph,
    pub vocab: &'a Vocab,
    /// Triples per sampled context sub-graph.
    pub k: usize,
    pub seed: u64,
}

impl TaskContext<'_> {
    /// The generator used when example `index` is scored at evaluation.
    pub fn eval_rng(&self, index: usize) -> ChaCha8Rng {
        rng_for(self.seed, EVAL_EPOCH, index as u64, STREAM_EXAMPLE)
    }
}

/// Forward pass, with dropout when `train` is set.
pub fn hidden<T: Scalar>(
    model: &ModelParams<T>,
    seq: &TripleSequence,
    w_map: Option<&Tensor<T>>,
    train: Option<&mut ChaCha8Rng>,
) -> Result<Tensor<T>> {
    match train {
        Some(rng) if model.config.dropout > 0.0 => model.forward_train(seq, w_map, rng),
        _ => model.forward(seq, w_map),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneRun {
    pub steps: usize,
    pub optim: OptimConfig,
    /// Micro-batches of `optim.batch` examples per optimizer step.
    pub accumulation: usize,
    pub seed: u64,
    pub log_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn tune_log_csv(rows: &[TuneRow]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, r.lr, r.loss));
    }
    out
}

/// Adam over shuffled examples. `loss_of(model, i, rng)` returns the loss of
/// example `i`, sampling its context from `rng`; every optimizer step
/// averages `batch × accumulation` of them, one micro-batch backward at a
/// time.
pub fn train_examples<T: Scalar>(
    model: &mut ModelParams<T>,
    n_examples: usize,
    run: &TuneRun,
    mut loss_of: impl FnMut(&ModelParams<T>, usize, &mut ChaCha8Rng) -> Result<Tensor<T>>,
) -> Result<Vec<TuneRow>> {
    if n_examples == 0 {
        return Err(Error::TaskData("no training examples".into()));
    }
    let batch = run.optim.batch.max(1);
    let accum = run.accumulation.max(1);
    let warmup = (run.optim.warmup_ratio * run.steps as f64).round() as usize;
    let mut adam = AdamState::<T>::with_betas(run.optim.lr, run.optim.beta1, run.optim.beta2, run.optim.eps);
    let scale = T::lit(1.0 / (batch * accum) as f64);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut rows = Vec::new();
    for step in 0..run.steps {
        let mut total = 0.0;
        for _ in 0..accum {
            let mut micro: Option<Tensor<T>> = None;
            for _ in 0..batch {
                if cursor == order.len() {
                    order = (0..n_examples).collect();
                    order.shuffle(&mut rng_for(run.seed, epoch, 0, STREAM_ORDER));
                    epoch += 1;
                    cursor = 0;
                }
                let i = order[cursor];
                cursor += 1;
                let mut rng = rng_for(run.seed, epoch, i as u64, STREAM_EXAMPLE);
                let l = loss_of(model, i, &mut rng)?;
                micro = Some(match micro {
                    Some(m) => m.add(&l)?,
                    None => l,
                });
            }
            let micro = micro.expect("batch is non-empty").scale(scale);
            let v = micro.item().as_f64();
            if !v.is_finite() {
                return Err(Error::Numeric(format!("task loss is {v} at step {step}")));
            }
            total += v;
            micro.backward()?;
        }
        let lr = lr_schedule(step, warmup, run.steps, run.optim.lr);
        let params = model.trainable_params();
        let with_grad: Vec<(&str, &Tensor<T>)> = params
            .iter()
            .filter(|(_, t)| t.has_grad())
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        adam_step(&with_grad, &mut adam, lr)?;
        if run.log_every > 0 && step % run.log_every == 0 || step + 1 == run.steps {
            rows.push(TuneRow { step, lr, loss: total });
        }
    }
    Ok(rows)
}
