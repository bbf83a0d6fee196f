//! Wiring between a pretrained checkpoint and task tuning: model
//! construction on the task vocabulary, continual training on the task graph
//! and per-mode freezing.

use std::path::PathBuf;

use crate::checkpoint::Checkpoint;
use crate::config::{Mode, OptimConfig, RunConfig, Task};
use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::model::{ModelConfig, ModelParams, ParamGroup};
use crate::pretrain::{run_objectives, ObjectiveRun, Objectives, PretrainReport};
use crate::sampler::{derive_seed, rng_for};
use crate::scalar::Scalar;
use crate::sequence::Vocab;

use super::TuneRun;

const STREAM_INIT: u64 = 21;
const STREAM_CONTINUAL: u64 = 22;
const STREAM_TUNE: u64 = 23;
const STREAM_HEAD: u64 = 24;

pub fn objectives(cfg: &RunConfig) -> Objectives {
    Objectives {
        mem: cfg.pretrain.use_mem,
        mrm: cfg.pretrain.use_mrm,
        epm: cfg.pretrain.use_epm,
    }
}

fn objective_run(cfg: &RunConfig, optim: &OptimConfig, steps: usize, epochs: usize, seed: u64, dir: Option<PathBuf>) -> ObjectiveRun {
    ObjectiveRun {
        sampling: cfg.sampling.clone(),
        objectives: objectives(cfg),
        optim: optim.clone(),
        steps,
        epochs,
        seed,
        log_every: cfg.pretrain.log_every,
        checkpoint_every: cfg.pretrain.checkpoint_every,
        checkpoint_dir: dir,
    }
}

/// The pretraining phase of `cfg`.
pub fn pretrain_run(cfg: &RunConfig, checkpoint_dir: Option<PathBuf>) -> ObjectiveRun {
    let p = &cfg.pretrain;
    objective_run(cfg, &p.optim, p.steps, p.epochs, cfg.seed, checkpoint_dir)
}

/// Pretraining objectives on the task graph, with the tuning optimizer.
pub fn continual_run(cfg: &RunConfig) -> ObjectiveRun {
    let seed = derive_seed(cfg.seed, 0, 0, STREAM_CONTINUAL);
    let mut run = objective_run(cfg, &cfg.tune.optim, cfg.tune.continual_steps, 0, seed, None);
    run.checkpoint_every = 0;
    run
}

pub fn tune_run(cfg: &RunConfig) -> TuneRun {
    TuneRun {
        steps: cfg.tune.steps,
        optim: cfg.tune.optim.clone(),
        accumulation: cfg.tune.accumulation,
        seed: derive_seed(cfg.seed, 0, 0, STREAM_TUNE),
        log_every: cfg.pretrain.log_every,
    }
}

/// A freshly initialised model for pretraining on `g`.
pub fn pretrain_model<T: Scalar>(cfg: &RunConfig, vocab: &Vocab) -> Result<ModelParams<T>> {
    let mut rng = rng_for(cfg.seed, 0, 0, STREAM_INIT);
    ModelParams::new(cfg.model.clone(), vocab.len(), vocab.n_relations(), &mut rng)
}

/// Model configuration stored in a checkpoint.
pub fn checkpoint_model_config(ck: &Checkpoint) -> Result<ModelConfig> {
    let raw = ck
        .meta
        .get("model_config")
        .ok_or_else(|| Error::Checkpoint("checkpoint lacks a model configuration".into()))?;
    serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("bad model configuration: {e}")))
}

/// Model on the task vocabulary. Outside scratch mode the layer stack comes
/// from `ck` and the architecture follows it, with the run's `use_matrix`
/// and `dropout`; the task embeddings start at the checkpoint's scale with
/// its special-token rows. In scratch mode everything is fresh.
pub fn task_model<T: Scalar>(ck: Option<&Checkpoint>, cfg: &RunConfig, vocab: &Vocab) -> Result<ModelParams<T>> {
    let mode = cfg.tune.mode;
    let mut model_cfg = match ck {
        Some(ck) => {
            let mut c = checkpoint_model_config(ck)?;
            c.use_matrix = cfg.model.use_matrix;
            c.dropout = cfg.model.dropout;
            c
        }
        None if mode == Mode::Scratch => cfg.model.clone(),
        None => {
            return Err(Error::Config(vec![format!(
                "mode {mode} needs a pretrained checkpoint (paths.checkpoint)"
            )]))
        }
    };
    model_cfg.init_std = cfg.model.init_std;
    let mut rng = rng_for(cfg.seed, 0, 1, STREAM_INIT);
    let mut model = ModelParams::new(model_cfg, vocab.len(), vocab.n_relations(), &mut rng)?;
    if mode != Mode::Scratch {
        let ck = ck.expect("checked above");
        model.transplant_layers(ck)?;
        model.transfer_embeddings(ck)?;
    }
    Ok(model)
}

/// Attaches the head of `task`; `d_ext` is the feature dimension for the
/// tasks that inject external vectors.
pub fn add_task_head<T: Scalar>(model: &mut ModelParams<T>, cfg: &RunConfig, task: Task, d_ext: Option<usize>) -> Result<()> {
    let mut rng = rng_for(cfg.seed, 0, 0, STREAM_HEAD);
    let need = |d: Option<usize>| d.ok_or_else(|| Error::Config(vec![format!("task {task} needs paths.features")]));
    match task {
        Task::Tc => model.add_tc_head(&mut rng),
        Task::Zsl => model.add_zsl_head(need(d_ext)?, &mut rng),
        Task::Qa => model.add_qa_head(need(d_ext)?, &mut rng),
        Task::Pretrain => return Err(Error::Config(vec!["tune.task must be tc, zsl or qa".into()])),
    }
    Ok(())
}

/// Groups frozen while the task head is trained.
pub fn tuning_frozen(mode: Mode) -> &'static [&'static str] {
    match mode {
        Mode::Frozen => &["layers"],
        Mode::Finetune | Mode::Scratch => &[],
    }
}

/// Continual training on the task graph with the layer stack frozen in every
/// mode, so only the task embeddings and pretraining heads move. In scratch
/// mode the frozen layers are the fresh initialisation.
pub fn continual_training<T: Scalar>(
    model: &mut ModelParams<T>,
    g: &KnowledgeGraph,
    vocab: &Vocab,
    cfg: &RunConfig,
) -> Result<Option<PretrainReport>> {
    if cfg.tune.continual_steps == 0 {
        return Ok(None);
    }
    model.set_frozen(&["layers"])?;
    let report = run_objectives(model, g, vocab, &continual_run(cfg))?;
    Ok(Some(report))
}

/// Freezes per mode before task tuning.
pub fn prepare_tuning<T: Scalar>(model: &mut ModelParams<T>, mode: Mode) -> Result<()> {
    model.set_frozen(tuning_frozen(mode))
}

/// Whether the layer stack of `a` and `b` holds identical values.
pub fn same_layers(a: &Checkpoint, b: &Checkpoint) -> bool {
    let layers = |c: &Checkpoint| {
        c.entries
            .iter()
            .filter(|e| e.group == ParamGroup::Layers.name())
            .map(|e| (e.name.clone(), e.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>()))
            .collect::<Vec<_>>()
    };
    layers(a) == layers(b)
}
