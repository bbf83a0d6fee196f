//! Commands behind the `kgt` binary.

use std::fs;
use std::path::{Path, PathBuf};

use kgt_core::checkpoint::Checkpoint;
use kgt_core::config::{Mode, Precision, RunConfig, Task};
use kgt_core::model::ModelParams;
use kgt_core::pretrain::{run_objectives, write_loss_log};
use kgt_core::sampler::{rng_for, sample_with, Strategy};
use kgt_core::sequence::{MaskKind, TripleSequence, Vocab};
use kgt_core::tasks::data::{self, FeatureFile};
use kgt_core::tasks::{qa, tc, tune, tune_log_csv, zsl, MetricReport, TaskContext};
use kgt_core::{Error, ErrorClass, KnowledgeGraph, Result, Scalar};
use serde_json::json;
use sha2::{Digest, Sha256};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

pub const ENV_CONFIG: &str = "KGT_CONFIG";

/// Exit status for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
        ErrorClass::Internal => 1,
    }
}

/// Where a run's configuration comes from, in increasing precedence.
#[derive(Debug, Clone, Default)]
pub struct ConfigSource {
    pub preset: Option<String>,
    pub file: Option<PathBuf>,
    /// `section.key=value` assignments.
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
    pub use_matrix: Option<bool>,
    pub out_dir: Option<PathBuf>,
}

impl ConfigSource {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::preset(self.preset.as_deref().unwrap_or("paper"))?;
        if let Some(path) = &self.file {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
            cfg = RunConfig::parse_onto(cfg, &text).map_err(|e| match e {
                Error::Config(v) => Error::Config(v.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
                other => other,
            })?;
        }
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.use_matrix {
            cfg.model.use_matrix = m;
        }
        if let Some(d) = &self.out_dir {
            cfg.paths.out_dir = d.clone();
        }
        Ok(cfg)
    }
}

pub fn config_hash(cfg: &RunConfig) -> String {
    hex::encode(Sha256::digest(cfg.to_text().as_bytes()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let d = cfg.paths.out_dir.clone();
    fs::create_dir_all(&d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    Ok(d)
}

/// `manifest.json` and `config.txt` next to a run's outputs.
fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, outputs: &[&str]) -> Result<()> {
    write(&dir.join("config.txt"), &cfg.to_text())?;
    let m = json!({
        "command": command,
        "version": VERSION,
        "config_sha256": config_hash(cfg),
        "seed": cfg.seed,
        "outputs": outputs,
    });
    write(&dir.join("manifest.json"), &format!("{}\n", serde_json::to_string_pretty(&m).unwrap()))
}

/// Outputs of one command, relative to the run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutputs {
    pub dir: PathBuf,
    pub files: Vec<String>,
    /// Human-readable summary printed by the binary.
    pub summary: String,
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<RunOutputs> {
    cfg.validate_pretrain()?;
    match cfg.precision {
        Precision::F64 => pretrain_impl::<f64>(cfg),
        Precision::F32 => pretrain_impl::<f32>(cfg),
    }
}

fn pretrain_impl<T: Scalar>(cfg: &RunConfig) -> Result<RunOutputs> {
    let g = KnowledgeGraph::load_triple_files(&cfg.paths.graph)?;
    let vocab = Vocab::for_graph(&g);
    let dir = out_dir(cfg)?;
    let ck_dir = (cfg.pretrain.checkpoint_every > 0).then(|| dir.join("checkpoints"));
    if let Some(d) = &ck_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    let mut model = tune::pretrain_model::<T>(cfg, &vocab)?;
    let run = tune::pretrain_run(cfg, ck_dir);
    let report = run_objectives(&mut model, &g, &vocab, &run)?;
    write_loss_log(&dir.join("loss_log.csv"), &report.rows, run.objectives)?;
    model.to_checkpoint(report.steps as u64, None)?.save(dir.join("model.ckpt"))?;
    let mut files = vec!["loss_log.csv".to_owned(), "model.ckpt".to_owned()];
    files.extend(report.checkpoints.iter().map(|p| format!("checkpoints/{}", p.file_name().unwrap().to_string_lossy())));
    let refs: Vec<&str> = files.iter().map(String::as_str).collect();
    write_manifest(&dir, "pretrain", cfg, &refs)?;
    let last = report.rows.last().map(|r| r.total).unwrap_or(f64::NAN);
    Ok(RunOutputs {
        summary: format!(
            "pretrained {} steps on {} triples; final loss {last:.4}; outputs in {}\n",
            report.steps,
            g.n_triples(),
            dir.display()
        ),
        dir,
        files,
    })
}

/// Loaded task inputs beyond the graph.
struct TaskFiles {
    features: Option<FeatureFile>,
    classes: Option<data::ClassSplit>,
}

fn load_task_files(cfg: &RunConfig) -> Result<TaskFiles> {
    let features = match (&cfg.paths.features, cfg.tune.task) {
        (Some(p), Task::Zsl | Task::Qa) => Some(FeatureFile::load(p)?),
        _ => None,
    };
    let classes = match (&cfg.paths.classes, cfg.tune.task) {
        (Some(p), Task::Zsl) => Some(data::load_classes(p)?),
        _ => None,
    };
    Ok(TaskFiles { features, classes })
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::Config(vec![format!("{key} is required")]))
}

/// Scores the model on `paths.test`.
fn evaluate<T: Scalar>(model: &ModelParams<T>, cfg: &RunConfig, ctx: &TaskContext, files: &TaskFiles) -> Result<MetricReport> {
    let test = required(&cfg.paths.test, "paths.test")?;
    match cfg.tune.task {
        Task::Tc => {
            let ex = tc::resolve_all(ctx.graph, &data::load_tc_examples(test)?)?;
            Ok(MetricReport::tc(&tc::evaluate(model, ctx, &ex)?))
        }
        Task::Zsl => {
            let classes = zsl::ResolvedClasses::resolve(ctx, files.classes.as_ref().expect("validated"))?;
            let ex = data::load_zsl_examples(test)?;
            let m = zsl::evaluate(model, ctx, files.features.as_ref().expect("validated"), &classes, &ex)?;
            Ok(MetricReport::zsl(&m))
        }
        Task::Qa => {
            let ex = data::load_qa_examples(test)?;
            let (acc, n) = qa::evaluate(model, ctx, files.features.as_ref().expect("validated"), &ex)?;
            Ok(MetricReport::qa(acc, n))
        }
        Task::Pretrain => Err(Error::Config(vec!["tune.task must be tc, zsl or qa".into()])),
    }
}

fn train_task<T: Scalar>(model: &mut ModelParams<T>, cfg: &RunConfig, ctx: &TaskContext, files: &TaskFiles) -> Result<Vec<kgt_core::tasks::TuneRow>> {
    let train = required(&cfg.paths.train, "paths.train")?;
    let run = tune::tune_run(cfg);
    match cfg.tune.task {
        Task::Tc => {
            let mut ex = tc::resolve_all(ctx.graph, &data::load_tc_examples(train)?)?;
            // a positives-only file gets corrupted negatives
            if ex.iter().all(|q| q.label) && cfg.tune.tc_negatives > 0 {
                let pos: Vec<_> = ex.iter().map(|q| q.triple).collect();
                let mut rng = rng_for(cfg.seed, 0, 0, 31);
                let neg = tc::corrupt_negatives(ctx.graph, &pos, cfg.tune.tc_negatives, &mut rng)?;
                ex.extend(neg.into_iter().map(|triple| tc::TcQuery { triple, label: false }));
            }
            tc::train(model, ctx, &ex, &run)
        }
        Task::Zsl => {
            let classes = zsl::ResolvedClasses::resolve(ctx, files.classes.as_ref().expect("validated"))?;
            let ex = data::load_zsl_examples(train)?;
            let mut rng = rng_for(cfg.seed, 0, 0, 32);
            let pairs = zsl::training_pairs(ctx, &classes, &ex, cfg.tune.zsl_negatives, &mut rng)?;
            zsl::train(model, ctx, files.features.as_ref().expect("validated"), &pairs, &run)
        }
        Task::Qa => {
            let ex = data::load_qa_examples(train)?;
            qa::train(model, ctx, files.features.as_ref().expect("validated"), &ex, &run)
        }
        Task::Pretrain => Err(Error::Config(vec!["tune.task must be tc, zsl or qa".into()])),
    }
}

pub fn cmd_tune(cfg: &RunConfig) -> Result<RunOutputs> {
    cfg.validate_task(cfg.tune.mode != Mode::Scratch)?;
    if cfg.paths.train.is_none() {
        return Err(Error::Config(vec!["paths.train is required".into()]));
    }
    match cfg.precision {
        Precision::F64 => tune_impl::<f64>(cfg),
        Precision::F32 => tune_impl::<f32>(cfg),
    }
}

fn tune_impl<T: Scalar>(cfg: &RunConfig) -> Result<RunOutputs> {
    let g = KnowledgeGraph::load_triple_files(&cfg.paths.task_graph)?;
    let vocab = Vocab::for_graph(&g);
    let files = load_task_files(cfg)?;
    let ck = cfg.paths.checkpoint.as_ref().map(Checkpoint::load).transpose()?;
    let dir = out_dir(cfg)?;
    let mut model = tune::task_model::<T>(ck.as_ref(), cfg, &vocab)?;
    tune::add_task_head(&mut model, cfg, cfg.tune.task, files.features.as_ref().map(|f| f.dim))?;
    let mut outputs = Vec::new();
    if let Some(rep) = tune::continual_training(&mut model, &g, &vocab, cfg)? {
        write_loss_log(&dir.join("continual_log.csv"), &rep.rows, tune::objectives(cfg))?;
        outputs.push("continual_log.csv".to_owned());
    }
    tune::prepare_tuning(&mut model, cfg.tune.mode)?;
    let ctx = TaskContext {
        graph: &g,
        vocab: &vocab,
        k: cfg.sampling.k,
        seed: cfg.seed,
    };
    let rows = train_task(&mut model, cfg, &ctx, &files)?;
    write(&dir.join("tune_log.csv"), &tune_log_csv(&rows))?;
    model.to_checkpoint(cfg.tune.steps as u64, None)?.save(dir.join("tuned.ckpt"))?;
    let report = evaluate(&model, cfg, &ctx, &files)?;
    write(&dir.join("metrics.csv"), &report.to_csv())?;
    write(&dir.join("summary.txt"), &report.summary())?;
    outputs.extend(["tune_log.csv", "tuned.ckpt", "metrics.csv", "summary.txt"].map(String::from));
    let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    write_manifest(&dir, "tune", cfg, &refs)?;
    Ok(RunOutputs {
        summary: report.summary(),
        dir,
        files: outputs,
    })
}

/// Evaluates a tuned checkpoint on `paths.test`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<RunOutputs> {
    cfg.validate_task(true)?;
    match cfg.precision {
        Precision::F64 => eval_impl::<f64>(cfg),
        Precision::F32 => eval_impl::<f32>(cfg),
    }
}

fn eval_impl<T: Scalar>(cfg: &RunConfig) -> Result<RunOutputs> {
    let g = KnowledgeGraph::load_triple_files(&cfg.paths.task_graph)?;
    let vocab = Vocab::for_graph(&g);
    let files = load_task_files(cfg)?;
    let ck = Checkpoint::load(cfg.paths.checkpoint.as_ref().expect("validated"))?;
    let mut model = ModelParams::<T>::from_checkpoint(&ck)?;
    if model.vocab_size != vocab.len() || model.n_relations != vocab.n_relations() {
        return Err(Error::Checkpoint(format!(
            "checkpoint vocabulary ({} tokens, {} relations) does not match the task graph ({}, {})",
            model.vocab_size,
            model.n_relations,
            vocab.len(),
            vocab.n_relations()
        )));
    }
    model.config.use_matrix = cfg.model.use_matrix;
    let ctx = TaskContext {
        graph: &g,
        vocab: &vocab,
        k: cfg.sampling.k,
        seed: cfg.seed,
    };
    let report = evaluate(&model, cfg, &ctx, &files)?;
    let dir = out_dir(cfg)?;
    write(&dir.join("metrics.csv"), &report.to_csv())?;
    write(&dir.join("summary.txt"), &report.summary())?;
    write_manifest(&dir, "eval", cfg, &["metrics.csv", "summary.txt"])?;
    Ok(RunOutputs {
        summary: report.summary(),
        dir,
        files: vec!["metrics.csv".into(), "summary.txt".into()],
    })
}

/// Statistics of the union of triple files, as TSV.
pub fn cmd_stats(graphs: &[PathBuf]) -> Result<String> {
    if graphs.is_empty() {
        return Err(Error::Config(vec!["name at least one triple file".into()]));
    }
    let g = KnowledgeGraph::load_triple_files(graphs)?;
    Ok(g.compute_stats()?.to_tsv())
}

#[derive(Debug, Clone)]
pub struct DumpRequest {
    pub graphs: Vec<PathBuf>,
    pub center: String,
    pub k: usize,
    pub strategy: Strategy,
    pub mask: Option<MaskKind>,
    pub mask_rate: f64,
    pub seed: u64,
}

/// The token and matrix grid of one sampled sequence.
pub fn cmd_dump_sequence(req: &DumpRequest) -> Result<String> {
    let g = KnowledgeGraph::load_triple_files(&req.graphs)?;
    let vocab = Vocab::for_graph(&g);
    let center = g
        .entity_id(&req.center)
        .ok_or_else(|| Error::UnknownLabel(req.center.clone()))?;
    let mut rng = rng_for(req.seed, 0, center.0 as u64, 0);
    let sg = sample_with(req.strategy, &g, center, req.k, &mut rng)?;
    let mut seq = TripleSequence::serialize(&sg, &vocab)?;
    seq.build_matrix()?;
    if let Some(kind) = req.mask {
        seq.apply_mask(kind, req.mask_rate, &vocab, &mut rng)?;
    }
    Ok(seq.dump_grid(&vocab, Some(&g)))
}
