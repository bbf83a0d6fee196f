//! Self-supervised objectives on triple sequences and the training loop
//! that combines them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{adam_step, lr_schedule, AdamState, Tensor};
use crate::config::{OptimConfig, SamplingConfig};
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::model::{extract, ModelParams, Role};
use crate::sampler::{rng_for, sample_epm_pair, sample_with, Strategy};
use crate::scalar::Scalar;
use crate::sequence::{MaskKind, TokenId, TokenKind, TripleSequence, Vocab};

const STREAM_ORDER: u64 = 1;
const STREAM_MEM: u64 = 2;
const STREAM_MRM: u64 = 3;
const STREAM_EPM: u64 = 4;
const STREAM_NEG: u64 = 5;
const STREAM_DROPOUT: u64 = 6;

/// Which objective terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Objectives {
    pub mem: bool,
    pub mrm: bool,
    pub epm: bool,
}

impl Objectives {
    pub const ALL: Objectives = Objectives {
        mem: true,
        mrm: true,
        epm: true,
    };
}

/// Training inputs built around one center entity.
#[derive(Debug, Clone)]
pub struct PretrainSample {
    pub center: EntityId,
    pub mem: Option<TripleSequence>,
    pub mrm: Option<TripleSequence>,
    /// Concatenated pair sequence and whether the pair is positive.
    pub epm: Option<(TripleSequence, bool)>,
}

fn strategy_coin<R: Rng + ?Sized>(rng: &mut R) -> Strategy {
    if rng.gen_bool(0.5) {
        Strategy::RandomWalk
    } else {
        Strategy::EntityCentered
    }
}

fn masked_sample(
    g: &KnowledgeGraph,
    vocab: &Vocab,
    s: &SamplingConfig,
    center: EntityId,
    kind: MaskKind,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<TripleSequence> {
    let sg = sample_with(strategy_coin(rng), g, center, s.k, rng)?;
    let mut seq = TripleSequence::serialize(&sg, vocab)?;
    seq.build_matrix()?;
    seq.apply_mask(kind, s.mask_rate, vocab, rng)?;
    Ok(seq)
}

/// Builds the samples for `center` in `epoch`, each from its own seed
/// stream.
pub fn build_sample(
    g: &KnowledgeGraph,
    vocab: &Vocab,
    s: &SamplingConfig,
    obj: Objectives,
    seed: u64,
    epoch: u64,
    center: EntityId,
) -> Result<PretrainSample> {
    let idx = center.0 as u64;
    let mem = if obj.mem {
        let mut rng = rng_for(seed, epoch, idx, STREAM_MEM);
        Some(masked_sample(g, vocab, s, center, MaskKind::Entity, &mut rng)?)
    } else {
        None
    };
    let mrm = if obj.mrm {
        let mut rng = rng_for(seed, epoch, idx, STREAM_MRM);
        Some(masked_sample(g, vocab, s, center, MaskKind::Relation, &mut rng)?)
    } else {
        None
    };
    let epm = if obj.epm {
        let mut rng = rng_for(seed, epoch, idx, STREAM_EPM);
        let pair = sample_epm_pair(g, center, s.k, s.epm_positive_prob, &mut rng)?;
        let mut left = TripleSequence::serialize(&pair.left, vocab)?;
        left.build_matrix()?;
        let mut right = TripleSequence::serialize(&pair.right, vocab)?;
        right.build_matrix()?;
        Some((TripleSequence::concat_pair(&left, &right)?, pair.positive))
    } else {
        None
    };
    Ok(PretrainSample {
        center,
        mem,
        mrm,
        epm,
    })
}

fn entity_of(vocab: &Vocab, t: TokenId) -> Option<EntityId> {
    match vocab.kind(t) {
        Ok(TokenKind::Entity(e)) => Some(e),
        _ => None,
    }
}

/// Negatives for every entity mask record of every MEM sequence in the
/// batch: `count` distinct entities drawn from those appearing in the
/// batch's MEM sequences, never the target. When the batch is too small the
/// remainder comes from the whole graph.
pub fn draw_mem_negatives<R: Rng + ?Sized>(
    g: &KnowledgeGraph,
    vocab: &Vocab,
    seqs: &[&TripleSequence],
    count: usize,
    rng: &mut R,
) -> Vec<Vec<Vec<EntityId>>> {
    let mut in_batch = BTreeSet::new();
    for s in seqs {
        for p in 0..s.n_triples() {
            for t in s.triple_elements(p) {
                if let Some(e) = entity_of(vocab, t) {
                    in_batch.insert(e);
                }
            }
        }
    }
    let in_batch: Vec<EntityId> = in_batch.into_iter().collect();
    seqs.iter()
        .map(|s| {
            s.mask_records
                .iter()
                .filter(|r| r.kind == MaskKind::Entity)
                .map(|r| {
                    let target = entity_of(vocab, r.original).expect("entity mask holds an entity");
                    let local: Vec<EntityId> =
                        in_batch.iter().copied().filter(|&e| e != target).collect();
                    let mut out: Vec<EntityId> =
                        local.choose_multiple(rng, count.min(local.len())).copied().collect();
                    if out.len() < count {
                        let global: Vec<EntityId> = g
                            .entities()
                            .filter(|e| *e != target && !out.contains(e))
                            .collect();
                        let need = count - out.len();
                        out.extend(global.choose_multiple(rng, need.min(global.len())).copied());
                    }
                    out
                })
                .collect()
        })
        .collect()
}

/// Binary cross-entropy of the masked entity against its negatives, summed
/// over masked positions. `negatives[i]` belongs to the `i`-th entity mask
/// record.
pub fn mem_loss<T: Scalar>(
    model: &ModelParams<T>,
    hidden: &Tensor<T>,
    seq: &TripleSequence,
    negatives: &[Vec<EntityId>],
    vocab: &Vocab,
) -> Result<Tensor<T>> {
    let records: Vec<_> = seq
        .mask_records
        .iter()
        .filter(|r| r.kind == MaskKind::Entity)
        .collect();
    if records.is_empty() {
        return Err(Error::Sequence("MEM loss needs masked entities".into()));
    }
    if negatives.len() != records.len() {
        return Err(Error::Sequence(format!(
            "{} negative lists for {} masked entities",
            negatives.len(),
            records.len()
        )));
    }
    let mut total: Option<Tensor<T>> = None;
    for (r, negs) in records.iter().zip(negatives) {
        let s = extract(hidden, seq, Role::Position(r.position))?;
        let proj = s.matmul(&model.pretrain.w_mem)?;
        let mut ids = vec![r.original.index()];
        ids.extend(negs.iter().map(|&e| vocab.entity(e).index()));
        let cands = model.embeddings.gather_rows(&ids)?;
        let logits = proj.matmul(&cands.transpose()?)?;
        let mut targets = vec![T::zero(); ids.len()];
        targets[0] = T::one();
        let l = logits.bce_with_logits(&targets)?;
        total = Some(match total {
            Some(t) => t.add(&l)?,
            None => l,
        });
    }
    Ok(total.expect("at least one record"))
}

/// Relation logits `MLP(s·W_MRM)` at a hidden row.
pub fn mrm_logits<T: Scalar>(model: &ModelParams<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    model.pretrain.mrm_out.forward(&s.matmul(&model.pretrain.w_mrm)?)
}

/// Softmax cross-entropy over relation classes, summed over masked
/// relations.
pub fn mrm_loss<T: Scalar>(
    model: &ModelParams<T>,
    hidden: &Tensor<T>,
    seq: &TripleSequence,
    vocab: &Vocab,
) -> Result<Tensor<T>> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for r in seq.mask_records.iter().filter(|r| r.kind == MaskKind::Relation) {
        let TokenKind::Relation(rel) = vocab.kind(r.original)? else {
            return Err(Error::Sequence("relation mask holds a non-relation".into()));
        };
        rows.push(r.position);
        targets.push(rel.index());
    }
    if rows.is_empty() {
        return Err(Error::Sequence("MRM loss needs masked relations".into()));
    }
    let s = hidden.gather_rows(&rows)?;
    mrm_logits(model, &s)?.softmax_cross_entropy(&targets)
}

/// Pair logits from the two segment-leading states.
pub fn epm_logits<T: Scalar>(
    model: &ModelParams<T>,
    hidden: &Tensor<T>,
    seq: &TripleSequence,
) -> Result<Tensor<T>> {
    let a = extract(hidden, seq, Role::SegmentBegin(0))?;
    let b = extract(hidden, seq, Role::SegmentBegin(1))
        .map_err(|_| Error::Sequence("EPM needs a second segment".into()))?;
    model.pretrain.epm_out.forward(&Tensor::concat(&[a, b], 1)?)
}

pub fn epm_loss<T: Scalar>(
    model: &ModelParams<T>,
    hidden: &Tensor<T>,
    seq: &TripleSequence,
    positive: bool,
) -> Result<Tensor<T>> {
    epm_logits(model, hidden, seq)?.softmax_cross_entropy(&[positive as usize])
}

/// Per-term losses for one batch, each averaged over the batch.
pub struct BatchLoss<T: Scalar> {
    pub mem: Option<Tensor<T>>,
    pub mrm: Option<Tensor<T>>,
    pub epm: Option<Tensor<T>>,
    pub total: Tensor<T>,
}

fn add_opt<T: Scalar>(acc: Option<Tensor<T>>, x: Tensor<T>) -> Result<Option<Tensor<T>>> {
    Ok(Some(match acc {
        Some(a) => a.add(&x)?,
        None => x,
    }))
}

/// `L_MEM + L_MRM + L_EPM` over a batch of samples. Dropout, when enabled,
/// draws from `rng`.
pub fn batch_loss<T: Scalar>(
    model: &ModelParams<T>,
    g: &KnowledgeGraph,
    vocab: &Vocab,
    samples: &[PretrainSample],
    mem_negatives: usize,
    neg_rng: &mut rand_chacha::ChaCha8Rng,
    mut dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<BatchLoss<T>> {
    let mut fwd = |s: &TripleSequence| match dropout_rng.as_deref_mut() {
        Some(r) => model.forward_train(s, None, r),
        None => model.forward(s, None),
    };
    let mem_seqs: Vec<&TripleSequence> = samples.iter().filter_map(|s| s.mem.as_ref()).collect();
    let negs = draw_mem_negatives(g, vocab, &mem_seqs, mem_negatives, neg_rng);
    let mut mem = None;
    for (seq, n) in mem_seqs.iter().zip(&negs) {
        let h = fwd(seq)?;
        mem = add_opt(mem, mem_loss(model, &h, seq, n, vocab)?)?;
    }
    let mut mrm = None;
    let mut n_mrm = 0;
    let mut epm = None;
    let mut n_epm = 0;
    for s in samples {
        if let Some(seq) = &s.mrm {
            let h = fwd(seq)?;
            mrm = add_opt(mrm, mrm_loss(model, &h, seq, vocab)?)?;
            n_mrm += 1;
        }
        if let Some((seq, pos)) = &s.epm {
            let h = fwd(seq)?;
            epm = add_opt(epm, epm_loss(model, &h, seq, *pos)?)?;
            n_epm += 1;
        }
    }
    let avg = |t: Option<Tensor<T>>, n: usize| t.map(|t| t.scale(T::lit(1.0 / n.max(1) as f64)));
    let mem = avg(mem, mem_seqs.len());
    let mrm = avg(mrm, n_mrm);
    let epm = avg(epm, n_epm);
    let mut total: Option<Tensor<T>> = None;
    for t in [&mem, &mrm, &epm].into_iter().flatten() {
        total = add_opt(total, t.clone())?;
    }
    let total = total.ok_or_else(|| Error::Config(vec!["no objective is enabled".into()]))?;
    Ok(BatchLoss {
        mem,
        mrm,
        epm,
        total,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub lr: f64,
    pub mem: Option<f64>,
    pub mrm: Option<f64>,
    pub epm: Option<f64>,
    pub total: f64,
}

/// CSV with one column per enabled term.
pub fn loss_log_csv(rows: &[LossRow], obj: Objectives) -> String {
    let mut out = String::from("step,lr");
    for (on, name) in [(obj.mem, "L_MEM"), (obj.mrm, "L_MRM"), (obj.epm, "L_EPM")] {
        if on {
            out.push(',');
            out.push_str(name);
        }
    }
    out.push_str(",L_total\n");
    for r in rows {
        write!(out, "{},{}", r.step, r.lr).unwrap();
        for (on, v) in [(obj.mem, r.mem), (obj.mrm, r.mrm), (obj.epm, r.epm)] {
            if on {
                write!(out, ",{}", v.unwrap_or(f64::NAN)).unwrap();
            }
        }
        writeln!(out, ",{}", r.total).unwrap();
    }
    out
}

/// One run of the objectives on a graph.
#[derive(Debug, Clone)]
pub struct ObjectiveRun {
    pub sampling: SamplingConfig,
    pub objectives: Objectives,
    pub optim: OptimConfig,
    /// Optimizer steps; 0 means `epochs` full passes.
    pub steps: usize,
    pub epochs: usize,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl ObjectiveRun {
    pub fn total_steps(&self, n_centers: usize) -> usize {
        if self.steps > 0 {
            self.steps
        } else {
            self.epochs * n_centers.div_ceil(self.optim.batch.max(1))
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub rows: Vec<LossRow>,
    pub steps: usize,
    pub checkpoints: Vec<PathBuf>,
}

/// Center entities in a fixed order: everything with an incident triple.
pub fn center_pool(g: &KnowledgeGraph) -> Vec<EntityId> {
    g.connected_entities()
}

/// Cache of per-center samples, so repeated epochs can reuse them.
struct SampleSource<'a> {
    g: &'a KnowledgeGraph,
    vocab: &'a Vocab,
    run: &'a ObjectiveRun,
    cache: BTreeMap<EntityId, PretrainSample>,
}

impl SampleSource<'_> {
    fn get(&mut self, epoch: u64, center: EntityId) -> Result<PretrainSample> {
        let r = self.run;
        if !r.sampling.fixed_samples {
            return build_sample(self.g, self.vocab, &r.sampling, r.objectives, r.seed, epoch, center);
        }
        if let Some(s) = self.cache.get(&center) {
            return Ok(s.clone());
        }
        let s = build_sample(self.g, self.vocab, &r.sampling, r.objectives, r.seed, 0, center)?;
        self.cache.insert(center, s.clone());
        Ok(s)
    }
}

/// Trains the model's unfrozen parameters on the enabled objectives with
/// Adam and a warm-up/decay schedule. Aborts with a numeric error on a
/// non-finite loss.
pub fn run_objectives<T: Scalar>(
    model: &mut ModelParams<T>,
    g: &KnowledgeGraph,
    vocab: &Vocab,
    run: &ObjectiveRun,
) -> Result<PretrainReport> {
    let centers = center_pool(g);
    if centers.is_empty() {
        return Err(Error::EmptyGraph("no entity has an incident triple".into()));
    }
    if vocab.n_relations() != model.n_relations || vocab.len() != model.vocab_size {
        return Err(Error::Model(format!(
            "model built for {} tokens / {} relations, vocabulary has {} / {}",
            model.vocab_size,
            model.n_relations,
            vocab.len(),
            vocab.n_relations()
        )));
    }
    let total = run.total_steps(centers.len());
    let warmup = (run.optim.warmup_ratio * total as f64).round() as usize;
    let mut adam = AdamState::<T>::with_betas(run.optim.lr, run.optim.beta1, run.optim.beta2, run.optim.eps);
    let mut source = SampleSource {
        g,
        vocab,
        run,
        cache: BTreeMap::new(),
    };
    let batch = run.optim.batch.max(1);
    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    let mut step = 0;
    let mut epoch = 0u64;
    while step < total {
        let mut order = centers.clone();
        order.shuffle(&mut rng_for(run.seed, epoch, 0, STREAM_ORDER));
        for chunk in order.chunks(batch) {
            if step >= total {
                break;
            }
            let samples = chunk
                .iter()
                .map(|&c| source.get(epoch, c))
                .collect::<Result<Vec<_>>>()?;
            let mut neg_rng = rng_for(run.seed, epoch, step as u64, STREAM_NEG);
            let mut drop_rng = rng_for(run.seed, epoch, step as u64, STREAM_DROPOUT);
            let loss = batch_loss(
                model,
                g,
                vocab,
                &samples,
                run.sampling.mem_negatives,
                &mut neg_rng,
                Some(&mut drop_rng),
            )?;
            let value = loss.total.item().as_f64();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss is {value} at step {step}")));
            }
            loss.total.backward()?;
            let lr = lr_schedule(step, warmup, total, run.optim.lr);
            let params = model.trainable_params();
            let with_grad: Vec<(&str, &Tensor<T>)> = params
                .iter()
                .filter(|(_, t)| t.has_grad())
                .map(|(n, t)| (n.as_str(), t))
                .collect();
            adam_step(&with_grad, &mut adam, lr)?;
            if run.log_every > 0 && step % run.log_every == 0 || step + 1 == total {
                rows.push(LossRow {
                    step,
                    lr,
                    mem: loss.mem.map(|t| t.item().as_f64()),
                    mrm: loss.mrm.map(|t| t.item().as_f64()),
                    epm: loss.epm.map(|t| t.item().as_f64()),
                    total: value,
                });
            }
            step += 1;
            if let Some(dir) = &run.checkpoint_dir {
                if run.checkpoint_every > 0 && step % run.checkpoint_every == 0 {
                    let path = dir.join(format!("step-{step:07}.ckpt"));
                    model.to_checkpoint(step as u64, None)?.save(&path)?;
                    checkpoints.push(path);
                }
            }
        }
        epoch += 1;
    }
    Ok(PretrainReport {
        rows,
        steps: step,
        checkpoints,
    })
}

pub fn write_loss_log(path: &Path, rows: &[LossRow], obj: Objectives) -> Result<()> {
    fs::write(path, loss_log_csv(rows, obj))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Accuracy of each objective's prediction on a set of samples.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveAccuracy {
    /// Masked entities whose top-scoring entity is the original.
    pub mem_hit1: f64,
    pub mrm_acc: f64,
    pub epm_acc: f64,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Scores masked entities against every entity, relations against every
/// relation and pairs against both labels. Ties go to the lowest id.
pub fn evaluate_objectives<T: Scalar>(
    model: &ModelParams<T>,
    vocab: &Vocab,
    samples: &[PretrainSample],
) -> Result<ObjectiveAccuracy> {
    let n_e = vocab.n_entities();
    let entity_rows: Vec<usize> = (0..n_e)
        .map(|i| vocab.entity(EntityId(i as u32)).index())
        .collect();
    let table = model.embeddings.detach().gather_rows(&entity_rows)?.transpose()?;
    let (mut mem_hits, mut mem_n) = (0usize, 0usize);
    let (mut mrm_hits, mut mrm_n) = (0usize, 0usize);
    let (mut epm_hits, mut epm_n) = (0usize, 0usize);
    for s in samples {
        if let Some(seq) = &s.mem {
            let h = model.forward(seq, None)?;
            for r in seq.mask_records.iter().filter(|r| r.kind == MaskKind::Entity) {
                let row = extract(&h, seq, Role::Position(r.position))?;
                let scores = row.matmul(&model.pretrain.w_mem)?.matmul(&table)?.to_f64_vec();
                let target = entity_of(vocab, r.original).expect("entity").index();
                mem_hits += (argmax(&scores) == target) as usize;
                mem_n += 1;
            }
        }
        if let Some(seq) = &s.mrm {
            let h = model.forward(seq, None)?;
            for r in seq.mask_records.iter().filter(|r| r.kind == MaskKind::Relation) {
                let row = extract(&h, seq, Role::Position(r.position))?;
                let scores = mrm_logits(model, &row)?.to_f64_vec();
                let TokenKind::Relation(rel) = vocab.kind(r.original)? else {
                    continue;
                };
                mrm_hits += (argmax(&scores) == rel.index()) as usize;
                mrm_n += 1;
            }
        }
        if let Some((seq, pos)) = &s.epm {
            let h = model.forward(seq, None)?;
            let scores = epm_logits(model, &h, seq)?.to_f64_vec();
            epm_hits += (argmax(&scores) == *pos as usize) as usize;
            epm_n += 1;
        }
    }
    let frac = |a: usize, n: usize| if n == 0 { 0.0 } else { a as f64 / n as f64 };
    Ok(ObjectiveAccuracy {
        mem_hit1: frac(mem_hits, mem_n),
        mrm_acc: frac(mrm_hits, mrm_n),
        epm_acc: frac(epm_hits, epm_n),
    })
}

/// The samples the first epoch of `run` trains on.
pub fn first_epoch_samples(
    g: &KnowledgeGraph,
    vocab: &Vocab,
    run: &ObjectiveRun,
) -> Result<Vec<PretrainSample>> {
    center_pool(g)
        .into_iter()
        .map(|c| build_sample(g, vocab, &run.sampling, run.objectives, run.seed, 0, c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::model::ModelConfig;
    use crate::synthetic::{TypedGraph, TypedSpec};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_graph() -> KnowledgeGraph {
        KnowledgeGraph::from_labeled([
            ("a", "r1", "b"),
            ("b", "r2", "c"),
            ("c", "r1", "d"),
            ("d", "r3", "a"),
            ("a", "r2", "c"),
        ])
    }

    fn run_for(cfg: &RunConfig) -> ObjectiveRun {
        ObjectiveRun {
            sampling: cfg.sampling.clone(),
            objectives: Objectives::ALL,
            optim: cfg.pretrain.optim.clone(),
            steps: cfg.pretrain.steps,
            epochs: cfg.pretrain.epochs,
            seed: cfg.seed,
            log_every: 1,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }

    fn model_for(g: &KnowledgeGraph, vocab: &Vocab, cfg: ModelConfig) -> ModelParams<f64> {
        ModelParams::new(cfg, vocab.len(), g.n_relations(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn zero(t: &Tensor<f64>) {
        t.set_data(vec![0.0; t.numel()]).unwrap();
    }

    #[test]
    fn zero_logit_losses_have_closed_forms() {
        let g = small_graph();
        let vocab = Vocab::for_graph(&g);
        let model = model_for(&g, &vocab, ModelConfig::toy(8, 2, 1));
        zero(&model.pretrain.w_mem);
        zero(&model.pretrain.mrm_out.w);
        zero(&model.pretrain.mrm_out.b);
        zero(&model.pretrain.epm_out.w);
        zero(&model.pretrain.epm_out.b);
        let mut s = RunConfig::smoke().sampling;
        s.k = 4;
        let sample = build_sample(&g, &vocab, &s, Objectives::ALL, 7, 0, EntityId(0)).unwrap();
        let mem = sample.mem.as_ref().unwrap();
        let negs = draw_mem_negatives(&g, &vocab, &[mem], 2, &mut ChaCha8Rng::seed_from_u64(0));
        let h = model.forward(mem, None).unwrap();
        let n_masked = mem.mask_records.len() as f64;
        let l = mem_loss(&model, &h, mem, &negs[0], &vocab).unwrap().item();
        assert!((l - n_masked * 3.0 * 2f64.ln()).abs() < 1e-12, "{l}");

        let mrm = sample.mrm.as_ref().unwrap();
        let h = model.forward(mrm, None).unwrap();
        let l = mrm_loss(&model, &h, mrm, &vocab).unwrap().item();
        let n = mrm.mask_records.len() as f64;
        assert!((l - n * (g.n_relations() as f64).ln()).abs() < 1e-12);

        let (epm, pos) = sample.epm.as_ref().unwrap();
        let h = model.forward(epm, None).unwrap();
        let l = epm_loss(&model, &h, epm, *pos).unwrap().item();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_over_eleven_relations() {
        let triples: Vec<(String, String, String)> =
            (0..11).map(|i| (format!("h{i}"), format!("r{i}"), format!("t{i}"))).collect();
        let g = KnowledgeGraph::from_labeled(triples.iter().map(|(a, b, c)| (a.as_str(), b.as_str(), c.as_str())));
        let vocab = Vocab::for_graph(&g);
        let model = model_for(&g, &vocab, ModelConfig::toy(8, 2, 1));
        zero(&model.pretrain.mrm_out.w);
        let s = RunConfig::smoke().sampling;
        let sample = build_sample(&g, &vocab, &s, Objectives::ALL, 1, 0, EntityId(0)).unwrap();
        let mrm = sample.mrm.unwrap();
        let h = model.forward(&mrm, None).unwrap();
        let l = mrm_loss(&model, &h, &mrm, &vocab).unwrap().item();
        assert!((l - 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_drive_losses_to_zero() {
        let g = small_graph();
        let vocab = Vocab::for_graph(&g);
        let model = model_for(&g, &vocab, ModelConfig::toy(8, 2, 1));
        let s = RunConfig::smoke().sampling;
        let sample = build_sample(&g, &vocab, &s, Objectives::ALL, 3, 0, EntityId(1)).unwrap();
        let (epm, pos) = sample.epm.unwrap();
        zero(&model.pretrain.epm_out.w);
        let mut b = vec![0.0, 0.0];
        b[pos as usize] = 50.0;
        model.pretrain.epm_out.b.set_data(b).unwrap();
        let h = model.forward(&epm, None).unwrap();
        assert!(epm_loss(&model, &h, &epm, pos).unwrap().item() < 1e-20);
    }

    #[test]
    fn negatives_never_hit_the_target() {
        let tg = TypedGraph::generate(TypedSpec {
            n_entities: 30,
            n_relations: 4,
            n_types: 3,
            n_triples: 80,
            prefix: String::new(),
            seed: 4,
        })
        .unwrap();
        let g = &tg.graph;
        let vocab = Vocab::for_graph(g);
        let s = RunConfig::smoke().sampling;
        for seed in 0..40 {
            let samples: Vec<_> = (0..4)
                .map(|c| build_sample(g, &vocab, &s, Objectives::ALL, seed, 0, EntityId(c)).unwrap())
                .collect();
            let seqs: Vec<_> = samples.iter().map(|s| s.mem.as_ref().unwrap()).collect();
            let negs = draw_mem_negatives(g, &vocab, &seqs, 2, &mut ChaCha8Rng::seed_from_u64(seed));
            for (seq, per) in seqs.iter().zip(&negs) {
                let masked: Vec<_> = seq.mask_records.iter().filter(|r| r.kind == MaskKind::Entity).collect();
                assert_eq!(masked.len(), per.len());
                for (r, n) in masked.iter().zip(per) {
                    assert_eq!(n.len(), 2);
                    assert!(n.iter().all(|&e| vocab.entity(e) != r.original));
                }
            }
        }
    }

    #[test]
    fn combined_loss_is_the_plain_sum() {
        let g = small_graph();
        let vocab = Vocab::for_graph(&g);
        let model = model_for(&g, &vocab, ModelConfig::toy(8, 2, 2));
        let s = RunConfig::smoke().sampling;
        let samples: Vec<_> = (0..3)
            .map(|c| build_sample(&g, &vocab, &s, Objectives::ALL, 5, 0, EntityId(c)).unwrap())
            .collect();
        let l = batch_loss(&model, &g, &vocab, &samples, 2, &mut ChaCha8Rng::seed_from_u64(0), None).unwrap();
        let parts = [&l.mem, &l.mrm, &l.epm].map(|t| t.as_ref().unwrap().item());
        assert!(parts.iter().all(|&p| p >= 0.0));
        assert_eq!(l.total.item(), parts[0] + parts[1] + parts[2]);
    }

    #[test]
    fn loss_log_columns_follow_toggles() {
        let rows = vec![LossRow {
            step: 0,
            lr: 0.5,
            mem: None,
            mrm: Some(1.0),
            epm: Some(2.0),
            total: 3.0,
        }];
        let obj = Objectives {
            mem: false,
            mrm: true,
            epm: true,
        };
        assert_eq!(loss_log_csv(&rows, obj), "step,lr,L_MRM,L_EPM,L_total\n0,0.5,1,2,3\n");
    }

    #[test]
    fn smoke_run_reduces_loss_and_is_deterministic() {
        let tg = TypedGraph::generate(TypedSpec {
            n_entities: 20,
            n_relations: 3,
            n_types: 3,
            n_triples: 60,
            prefix: String::new(),
            seed: 9,
        })
        .unwrap();
        let g = &tg.graph;
        let vocab = Vocab::for_graph(g);
        let cfg = RunConfig::smoke();
        let run = run_for(&cfg);
        let mut a = model_for(g, &vocab, cfg.model.clone());
        let ra = run_objectives(&mut a, g, &vocab, &run).unwrap();
        assert_eq!(ra.steps, 200);
        let head: f64 = ra.rows[..20].iter().map(|r| r.total).sum::<f64>() / 20.0;
        let tail: f64 = ra.rows[ra.rows.len() - 20..].iter().map(|r| r.total).sum::<f64>() / 20.0;
        assert!(tail < head, "{head} -> {tail}");
        let mut b = model_for(g, &vocab, cfg.model.clone());
        let rb = run_objectives(&mut b, g, &vocab, &run).unwrap();
        assert_eq!(ra.rows, rb.rows);
    }

    #[test]
    fn frozen_layers_stay_bit_identical() {
        let g = small_graph();
        let vocab = Vocab::for_graph(&g);
        let mut cfg = RunConfig::smoke();
        cfg.model = ModelConfig::toy(8, 2, 2);
        cfg.pretrain.steps = 20;
        let mut model = model_for(&g, &vocab, cfg.model.clone());
        model.set_frozen(&["layers"]).unwrap();
        let before = model.to_checkpoint(0, None).unwrap();
        run_objectives(&mut model, &g, &vocab, &run_for(&cfg)).unwrap();
        let after = model.to_checkpoint(0, None).unwrap();
        for (x, y) in before.entries.iter().zip(&after.entries) {
            if x.group == "layers" {
                assert_eq!(x.data, y.data, "{}", x.name);
            } else if x.name == "embeddings" {
                assert_ne!(x.data, y.data);
            }
        }
    }

    #[test]
    fn combined_loss_gradient_check() {
        use crate::autodiff::gradcheck::max_relative_error;
        let g = KnowledgeGraph::from_labeled([("a", "r1", "b"), ("b", "r2", "c")]);
        let vocab = Vocab::for_graph(&g);
        let mut mc = ModelConfig::toy(8, 2, 2);
        mc.init_std = 0.3;
        let model = model_for(&g, &vocab, mc);
        let mut s = RunConfig::smoke().sampling;
        s.k = 2;
        let samples: Vec<_> = (0..2)
            .map(|c| build_sample(&g, &vocab, &s, Objectives::ALL, 2, 0, EntityId(c)).unwrap())
            .collect();
        let params: Vec<Tensor<f64>> = model.named_params().into_iter().map(|(_, _, t)| t).collect();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let coords: Vec<(usize, usize)> = params
            .iter()
            .enumerate()
            .flat_map(|(i, p)| [(i, p.numel()); 2])
            .map(|(i, n)| (i, r.gen_range(0..n)))
            .collect();
        let err = max_relative_error(&params, &coords, 1e-5, 1e-6, &mut || {
            let l = batch_loss(&model, &g, &vocab, &samples, 2, &mut ChaCha8Rng::seed_from_u64(1), None)?;
            Ok(l.total)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
