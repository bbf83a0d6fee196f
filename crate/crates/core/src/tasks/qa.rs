//! Multiple-choice question answering over keyword neighbourhoods.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::data::{qa_groups, FeatureFile, QaExample};
use super::metrics::argmax;
use super::{hidden, train_examples, TaskContext, TuneRow, TuneRun};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::kg::EntityId;
use crate::model::{extract, ModelParams, QaHeads, Role};
use crate::sampler::{entity_centered_sample, SubGraph};
use crate::scalar::Scalar;
use crate::sequence::{Special, TaskKind, TripleSequence, QUESTION_TOKEN};

pub fn resolve_keywords(ctx: &TaskContext, ex: &QaExample) -> Result<Vec<EntityId>> {
    ex.keywords
        .iter()
        .map(|k| ctx.graph.entity_id(k).ok_or_else(|| Error::UnknownLabel(k.clone())))
        .collect()
}

/// Union of keyword neighbourhoods, `k / |W|` triples each (at least one)
/// and at most `k` overall. Keywords without triples are skipped.
pub fn context(ctx: &TaskContext, keywords: &[EntityId], rng: &mut impl Rng) -> Result<SubGraph> {
    let distinct: Vec<EntityId> = keywords.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let per = (ctx.k / distinct.len().max(1)).max(1);
    let mut out: Option<SubGraph> = None;
    for &w in &distinct {
        match entity_centered_sample(ctx.graph, w, per, rng) {
            Ok(s) => match out.as_mut() {
                Some(o) => o.merge(&s),
                None => out = Some(s),
            },
            Err(Error::EmptySubGraph(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let mut sg = out.ok_or_else(|| Error::EmptyGraph("no keyword has incident triples".into()))?;
    sg.triples.truncate(ctx.k);
    Ok(sg)
}

/// Keyword context with the `[T] [M] [M] [Q]` prompt, `[Q]` carrying the
/// question-choice features.
pub fn sequence(ctx: &TaskContext, keywords: &[EntityId], features: &[f64], rng: &mut impl Rng) -> Result<TripleSequence> {
    let v = ctx.vocab;
    let q = v
        .dynamic_token(QUESTION_TOKEN)
        .ok_or_else(|| Error::Sequence("vocabulary lacks the question token".into()))?;
    let sg = context(ctx, keywords, rng)?;
    let mut seq = TripleSequence::serialize(&sg, v)?;
    seq.build_matrix()?;
    let keys: BTreeSet<_> = keywords.iter().map(|&e| v.entity(e)).collect();
    let m = v.special(Special::Mask);
    let mut seq = seq.with_prompt(TaskKind::QuestionAnswering, [v.special(Special::Task), m, m, q], &keys, v)?;
    let at = seq.len() - 1;
    seq.injected.push((at, features.to_vec()));
    Ok(seq)
}

fn heads<T: Scalar>(model: &ModelParams<T>) -> Result<&QaHeads<T>> {
    model
        .tasks
        .qa
        .as_ref()
        .ok_or_else(|| Error::Model("model has no question-answering head".into()))
}

/// `[s_B ‖ s_Q ‖ R_qc]` through the head, where `R_qc` is the raw feature
/// vector: 1×2 logits.
pub fn logits<T: Scalar>(
    model: &ModelParams<T>,
    seq: &TripleSequence,
    features: &[f64],
    train: Option<&mut ChaCha8Rng>,
) -> Result<Tensor<T>> {
    let q = heads(model)?;
    let h = hidden(model, seq, Some(&q.w_map), train)?;
    let raw = Tensor::from_f64(features, &[1, features.len()])?;
    let s = Tensor::concat(&[extract(&h, seq, Role::SegmentBegin(0))?, extract(&h, seq, Role::Injected)?, raw], 1)?;
    q.out.forward(&s)
}

pub fn forward<T: Scalar>(
    model: &ModelParams<T>,
    ctx: &TaskContext,
    features: &FeatureFile,
    ex: &QaExample,
    rng: &mut ChaCha8Rng,
    train: bool,
) -> Result<Tensor<T>> {
    let kws = resolve_keywords(ctx, ex)?;
    let f = features.get(&ex.qc)?;
    let seq = sequence(ctx, &kws, f, rng)?;
    logits(model, &seq, f, train.then_some(rng))
}

pub fn loss<T: Scalar>(
    model: &ModelParams<T>,
    ctx: &TaskContext,
    features: &FeatureFile,
    ex: &QaExample,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    forward(model, ctx, features, ex, rng, true)?.softmax_cross_entropy(&[ex.label as usize])
}

pub fn train<T: Scalar>(
    model: &mut ModelParams<T>,
    ctx: &TaskContext,
    features: &FeatureFile,
    examples: &[QaExample],
    run: &TuneRun,
) -> Result<Vec<TuneRow>> {
    heads(model)?;
    qa_groups(examples)?;
    train_examples(model, examples.len(), run, |m, i, rng| loss(m, ctx, features, &examples[i], rng))
}

/// Ranking score of one candidate: `logit_1 − logit_0`.
pub fn score<T: Scalar>(
    model: &ModelParams<T>,
    ctx: &TaskContext,
    features: &FeatureFile,
    ex: &QaExample,
    index: usize,
) -> Result<f64> {
    let l = forward(model, ctx, features, ex, &mut ctx.eval_rng(index), false)?.to_f64_vec();
    Ok(l[1] - l[0])
}

/// Index within the group of the chosen candidate; ties go to the first.
pub fn choose(scores: &[f64]) -> usize {
    argmax(scores).unwrap_or(0)
}

/// Fraction of groups whose top-scoring candidate is the positive one, and
/// the number of groups.
pub fn evaluate<T: Scalar>(
    model: &ModelParams<T>,
    ctx: &TaskContext,
    features: &FeatureFile,
    examples: &[QaExample],
) -> Result<(f64, usize)> {
    let groups = qa_groups(examples)?;
    let mut hits = 0;
    for g in &groups {
        let scores = g
            .iter()
            .map(|&i| score(model, ctx, features, &examples[i], i))
            .collect::<Result<Vec<_>>>()?;
        hits += examples[g[choose(&scores)]].label as usize;
    }
    Ok((hits as f64 / groups.len().max(1) as f64, groups.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::KnowledgeGraph;
    use crate::model::ModelConfig;
    use crate::sequence::Vocab;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn ties_pick_the_first_candidate() {
        assert_eq!(choose(&[0.0; 5]), 0);
        assert_eq!(choose(&[0.0, 2.0, 1.0, 2.0, 0.0]), 1);
    }

    #[test]
    fn context_is_capped_and_keyed() {
        let g = KnowledgeGraph::from_labeled([
            ("a", "r", "b"),
            ("a", "r", "c"),
            ("a", "r", "d"),
            ("b", "s", "c"),
            ("e", "s", "f"),
            ("lone", "s", "lone2"),
        ]);
        let v = Vocab::for_graph(&g);
        let ctx = TaskContext { graph: &g, vocab: &v, k: 4, seed: 0 };
        let kws = [g.entity_id("a").unwrap(), g.entity_id("e").unwrap()];
        for s in 0..10 {
            let sg = context(&ctx, &kws, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            assert!(sg.len() <= 4);
            assert!(sg.triples.iter().any(|t| t.touches(kws[1])));
        }
        let seq = sequence(&ctx, &kws, &[0.5, 0.5], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(seq.injected.len(), 1);
        assert_eq!(seq.injected[0].0, seq.len() - 1);
    }

    #[test]
    fn untrained_scores_tie_and_choose_first() {
        let g = KnowledgeGraph::from_labeled([("a", "r", "b"), ("b", "r", "c")]);
        let v = Vocab::for_graph(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = ModelParams::<f64>::new(ModelConfig::toy(8, 2, 1), v.len(), g.n_relations(), &mut rng).unwrap();
        m.add_qa_head(2, &mut rng);
        let ctx = TaskContext { graph: &g, vocab: &v, k: 4, seed: 0 };
        let mut f = FeatureFile::new(2);
        let mut ex = Vec::new();
        for c in 0..5 {
            f.insert(&format!("c{c}"), vec![c as f64, 1.0]).unwrap();
            ex.push(QaExample { group: "g".into(), qc: format!("c{c}"), keywords: vec!["a".into()], label: c == 3 });
        }
        let (acc, n) = evaluate(&m, &ctx, &f, &ex).unwrap();
        assert_eq!((acc, n), (0.0, 1));
        ex.swap(0, 3);
        assert_eq!(evaluate(&m, &ctx, &f, &ex).unwrap().0, 1.0);
        let missing = QaExample { qc: "nope".into(), ..ex[0].clone() };
        assert!(forward(&m, &ctx, &f, &missing, &mut rng, false).is_err());
    }
}
