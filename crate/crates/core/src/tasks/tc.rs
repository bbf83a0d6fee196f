//! Triple classification: is `(h, r, t)` a true fact?

use std::collections::{BTreeSet, HashSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::data::TcExample;
use super::metrics::{argmax, Confusion};
use super::{hidden, train_examples, TaskContext, TuneRow, TuneRun};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, Triple};
use crate::model::{extract, ModelParams, Role};
use crate::sampler::{entity_centered_sample_excluding, SubGraph};
use crate::scalar::Scalar;
use crate::sequence::{Special, TaskKind, TripleSequence};

/// A labelled example resolved against the task graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TcQuery {
    pub triple: Triple,
    pub label: bool,
}

pub fn resolve(g: &KnowledgeGraph, ex: &TcExample) -> Result<TcQuery> {
    let e = |l: &str| g.entity_id(l).ok_or_else(|| Error::UnknownLabel(l.to_owned()));
    let head = e(&ex.head)?;
    let tail = e(&ex.tail)?;
    let relation = g
        .relation_id(&ex.relation)
        .ok_or_else(|| Error::UnknownLabel(ex.relation.clone()))?;
    Ok(TcQuery {
        triple: Triple::new(head, relation, tail),
        label: ex.label,
    })
}

pub fn resolve_all(g: &KnowledgeGraph, examples: &[TcExample]) -> Result<Vec<TcQuery>> {
    examples.iter().map(|e| resolve(g, e)).collect()
}

fn triple_index(g: &KnowledgeGraph, t: &Triple) -> Option<usize> {
    g.out_triples(t.head).iter().copied().find(|&i| g.triple(i) == *t)
}

/// `k` context triples around the head, then `k` around the tail, never
/// including the query itself. Either side may be empty, not both.
pub fn context(g: &KnowledgeGraph, t: &Triple, k: usize, rng: &mut impl Rng) -> Result<SubGraph> {
    let exclude: HashSet<usize> = triple_index(g, t).into_iter().collect();
    let side = |e: EntityId, rng: &mut dyn rand::RngCore| {
        match entity_centered_sample_excluding(g, e, k, &exclude, rng) {
            Ok(s) => Ok(Some(s)),
            Err(Error::EmptySubGraph(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let h = side(t.head, rng)?;
    let tl = if t.tail == t.head { None } else { side(t.tail, rng)? };
    match (h, tl) {
        (Some(mut a), Some(b)) => {
            a.merge(&b);
            Ok(a)
        }
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => Err(Error::EmptyGraph(format!(
            "no context triples around `{}` or `{}`",
            g.entity_label(t.head),
            g.entity_label(t.tail)
        ))),
    }
}

/// Context sequence with the `[T] h r t` prompt.
pub fn sequence(ctx: &TaskContext, t: &Triple, rng: &mut impl Rng) -> Result<TripleSequence> {
    let v = ctx.vocab;
    let sg = context(ctx.graph, t, ctx.k, rng)?;
    let mut seq = TripleSequence::serialize(&sg, v)?;
    seq.build_matrix()?;
    let prompt = [v.special(Special::Task), v.entity(t.head), v.relation(t.relation), v.entity(t.tail)];
    seq.with_prompt(TaskKind::TripleClassification, prompt, &BTreeSet::new(), v)
}

fn head<T: Scalar>(model: &ModelParams<T>) -> Result<&crate::model::Linear<T>> {
    model
        .tasks
        .tc
        .as_ref()
        .ok_or_else(|| Error::Model("model has no triple-classification head".into()))
}

/// `[s_B ‖ s_T]` through the head: 1×2 logits, class 1 meaning true.
pub fn logits<T: Scalar>(
    model: &ModelParams<T>,
    seq: &TripleSequence,
    train: Option<&mut ChaCha8Rng>,
) -> Result<Tensor<T>> {
    let w = head(model)?;
    let h = hidden(model, seq, None, train)?;
    let s = Tensor::concat(&[extract(&h, seq, Role::SegmentBegin(0))?, extract(&h, seq, Role::Task)?], 1)?;
    w.forward(&s)
}

pub fn forward<T: Scalar>(
    model: &ModelParams<T>,
    ctx: &TaskContext,
    q: &TcQuery,
    rng: &mut ChaCha8Rng,
    train: bool,
) -> Result<Tensor<T>> {
    let seq = sequence(ctx, &q.triple, rng)?;
    logits(model, &seq, train.then_some(rng))
}

pub fn loss<T: Scalar>(model: &ModelParams<T>, ctx: &TaskContext, q: &TcQuery, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    forward(model, ctx, q, rng, true)?.softmax_cross_entropy(&[q.label as usize])
}

pub fn train<T: Scalar>(
    model: &mut ModelParams<T>,
    ctx: &TaskContext,
    examples: &[TcQuery],
    run: &TuneRun,
) -> Result<Vec<TuneRow>> {
    head(model)?;
    train_examples(model, examples.len(), run, |m, i, rng| loss(m, ctx, &examples[i], rng))
}

/// Argmax prediction per example (ties go to class 0).
pub fn predict<T: Scalar>(model: &ModelParams<T>, ctx: &TaskContext, examples: &[TcQuery]) -> Result<Vec<bool>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let l = forward(model, ctx, q, &mut ctx.eval_rng(i), false)?.to_f64_vec();
            Ok(argmax(&l) == Some(1))
        })
        .collect()
}

pub fn evaluate<T: Scalar>(model: &ModelParams<T>, ctx: &TaskContext, examples: &[TcQuery]) -> Result<Confusion> {
    let pred = predict(model, ctx, examples)?;
    Ok(Confusion::from_pairs(examples.iter().map(|q| q.label).zip(pred)))
}

/// Replaces the head or the tail of each positive (fair coin) with a random
/// entity, `per_positive` times, keeping only triples absent from the graph
/// and from the positives.
pub fn corrupt_negatives(
    g: &KnowledgeGraph,
    positives: &[Triple],
    per_positive: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Triple>> {
    let known: HashSet<Triple> = positives.iter().chain(g.triples()).copied().collect();
    let n = g.n_entities();
    if n < 2 {
        return Err(Error::TaskData("corruption needs at least two entities".into()));
    }
    let mut out = Vec::with_capacity(positives.len() * per_positive);
    for p in positives {
        let mut made = 0;
        let mut tries = 0;
        while made < per_positive {
            tries += 1;
            if tries > 1000 * per_positive.max(1) {
                return Err(Error::TaskData(format!(
                    "could not corrupt {:?} into {per_positive} unseen triples",
                    p
                )));
            }
            let e = EntityId(rng.gen_range(0..n) as u32);
            let c = if rng.gen_bool(0.5) {
                Triple::new(e, p.relation, p.tail)
            } else {
                Triple::new(p.head, p.relation, e)
            };
            if !known.contains(&c) {
                out.push(c);
                made += 1;
            }
        }
    }
    Ok(out)
}

pub fn to_example(g: &KnowledgeGraph, t: &Triple, label: bool) -> TcExample {
    TcExample {
        head: g.entity_label(t.head).to_owned(),
        relation: g.relation_label(t.relation).to_owned(),
        tail: g.entity_label(t.tail).to_owned(),
        label,
    }
}
