//! Zero-shot image classification: score an image feature vector against a
//! class entity's neighbourhood.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::data::{ClassSplit, FeatureFile, ZslExample};
use super::metrics::{argmax, class_balanced_accuracy, harmonic, ZslMetrics};
use super::{hidden, train_examples, TaskContext, TuneRow, TuneRun};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::kg::EntityId;
use crate::model::{extract, ModelParams, Role, ZslHeads};
use crate::sampler::entity_centered_sample;
use crate::scalar::Scalar;
use crate::sequence::{Special, TaskKind, TripleSequence, IMAGE_TOKEN};

/// An image-class pair resolved against the task graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ZslPair {
    pub image: String,
    pub class: EntityId,
    pub label: bool,
}

/// Class entities of a split, resolved and sorted by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedClasses {
    pub seen: Vec<EntityId>,
    pub unseen: Vec<EntityId>,
}

impl ResolvedClasses {
    pub fn resolve(ctx: &TaskContext, split: &ClassSplit) -> Result<Self> {
        let ids = |set: &BTreeSet<String>| -> Result<Vec<EntityId>> {
            let mut v = set
                .iter()
                .map(|c| ctx.graph.entity_id(c).ok_or_else(|| Error::UnknownLabel(c.clone())))
                .collect::<Result<Vec<_>>>()?;
            v.sort();
            Ok(v)
        };
        Ok(Self {
            seen: ids(&split.seen)?,
            unseen: ids(&split.unseen)?,
        })
    }

    pub fn all(&self) -> Vec<EntityId> {
        let mut v: Vec<EntityId> = self.seen.iter().chain(&self.unseen).copied().collect();
        v.sort();
        v
    }

    pub fn is_seen(&self, c: EntityId) -> bool {
        self.seen.binary_search(&c).is_ok()
    }
}

/// Class neighbourhood with the `[T] C [M] [V]` prompt, `[V]` carrying the
/// image features.
pub fn sequence(ctx: &TaskContext, class: EntityId, features: &[f64], rng: &mut impl Rng) -> Result<TripleSequence> {
    let v = ctx.vocab;
    ctx.graph.check_entity(class)?;
    let image = v
        .dynamic_token(IMAGE_TOKEN)
        .ok_or_else(|| Error::Sequence("vocabulary lacks the image token".into()))?;
    let sg = entity_centered_sample(ctx.graph, class, ctx.k, rng)?;
    let mut seq = TripleSequence::serialize(&sg, v)?;
    seq.build_matrix()?;
    let prompt = [v.special(Special::Task), v.entity(class), v.special(Special::Mask), image];
    let mut seq = seq.with_prompt(TaskKind::ZeroShot, prompt, &BTreeSet::new(), v)?;
    let at = seq.len() - 1;
    seq.injected.push((at, features.to_vec()));
    Ok(seq)
}

fn heads<T: Scalar>(model: &ModelParams<T>) -> Result<&ZslHeads<T>> {
    model
        .tasks
        .zsl
        .as_ref()
        .ok_or_else(|| Error::Model("model has no zero-shot head".into()))
}

/// Cosine of the projected `s_B` and `s_V`, a 1×1 tensor in `[-1, 1]`.
pub fn score<T: Scalar>(model: &ModelParams<T>, seq: &TripleSequence, train: Option<&mut ChaCha8Rng>) -> Result<Tensor<T>> {
    let z = heads(model)?;
    let h = hidden(model, seq, Some(&z.w_map), train)?;
    let b = z.mlp_b.forward(&extract(&h, seq, Role::SegmentBegin(0))?)?;
    let v = z.mlp_v.forward(&extract(&h, seq, Role::Injected)?)?;
    b.cosine_similarity(&v)
}

pub fn forward<T: Scalar>(
    model: &ModelParams<T>,
    ctx: &TaskContext,
    class: EntityId,
    features: &[f64],
    rng: &mut ChaCha8Rng,
    train: bool,
) -> Result<Tensor<T>> {
    let seq = sequence(ctx, class, features, rng)?;
    score(model, &seq, train.then_some(rng))
}

/// Binary cross-entropy on `(score + 1) / 2`.
pub fn loss<T: Scalar>(
    model: &ModelParams<T>,
    ctx: &TaskContext,
    features: &FeatureFile,
    pair: &ZslPair,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let s = forward(model, ctx, pair.class, features.get(&pair.image)?, rng, true)?;
    let p = s.add_scalar(T::one()).scale(T::lit(0.5));
    p.binary_cross_entropy(&[T::lit(pair.label as u8 as f64)])
}

/// Training pairs: explicit labelled rows as given, and for every unlabelled
/// seen-class image one positive plus `negatives` pairs with other seen
/// classes. Unseen-class images never enter training.
pub fn training_pairs(
    ctx: &TaskContext,
    classes: &ResolvedClasses,
    examples: &[ZslExample],
    negatives: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ZslPair>> {
    let mut out = Vec::new();
    for ex in examples {
        let c = ctx
            .graph
            .entity_id(&ex.class)
            .ok_or_else(|| Error::UnknownLabel(ex.class.clone()))?;
        if !classes.is_seen(c) {
            continue;
        }
        match ex.label {
            Some(l) => out.push(ZslPair {
                image: ex.image.clone(),
                class: c,
                label: l,
            }),
            None => {
                out.push(ZslPair {
                    image: ex.image.clone(),
                    class: c,
                    label: true,
                });
                let others: Vec<EntityId> = classes.seen.iter().copied().filter(|&o| o != c).collect();
                for &o in others.choose_multiple(rng, negatives.min(others.len())) {
                    out.push(ZslPair {
                        image: ex.image.clone(),
                        class: o,
                        label: false,
                    });
                }
            }
        }
    }
    Ok(out)
}

pub fn train<T: Scalar>(
    model: &mut ModelParams<T>,
    ctx: &TaskContext,
    features: &FeatureFile,
    pairs: &[ZslPair],
    run: &TuneRun,
) -> Result<Vec<TuneRow>> {
    heads(model)?;
    train_examples(model, pairs.len(), run, |m, i, rng| loss(m, ctx, features, &pairs[i], rng))
}

/// Highest-scoring candidate; ties go to the lowest class id. `index` seeds
/// the context sampling so repeated calls agree.
pub fn predict<T: Scalar>(
    model: &ModelParams<T>,
    ctx: &TaskContext,
    features: &[f64],
    candidates: &[EntityId],
    index: usize,
) -> Result<EntityId> {
    let mut cands = candidates.to_vec();
    cands.sort();
    cands.dedup();
    let scores = cands
        .iter()
        .map(|&c| {
            let mut rng = ctx.eval_rng(index);
            Ok(forward(model, ctx, c, features, &mut rng, false)?.item().as_f64())
        })
        .collect::<Result<Vec<f64>>>()?;
    argmax(&scores)
        .map(|i| cands[i])
        .ok_or_else(|| Error::TaskData("no candidate classes".into()))
}

/// Gold (unlabelled or positive) rows only. T1 ranks unseen images among
/// unseen classes; S and U rank seen and unseen images among all classes.
pub fn evaluate<T: Scalar>(
    model: &ModelParams<T>,
    ctx: &TaskContext,
    features: &FeatureFile,
    classes: &ResolvedClasses,
    examples: &[ZslExample],
) -> Result<ZslMetrics> {
    let all = classes.all();
    let mut t1 = Vec::new();
    let mut s = Vec::new();
    let mut u = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        if ex.label == Some(false) {
            continue;
        }
        let gold = ctx
            .graph
            .entity_id(&ex.class)
            .ok_or_else(|| Error::UnknownLabel(ex.class.clone()))?;
        let f = features.get(&ex.image)?;
        let any = predict(model, ctx, f, &all, i)?;
        if classes.is_seen(gold) {
            s.push((gold, any));
        } else {
            u.push((gold, any));
            if !classes.unseen.is_empty() {
                t1.push((gold, predict(model, ctx, f, &classes.unseen, i)?));
            }
        }
    }
    let (s, u) = (class_balanced_accuracy(s), class_balanced_accuracy(u));
    Ok(ZslMetrics {
        t1: class_balanced_accuracy(t1),
        s,
        u,
        h: harmonic(s, u),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::KnowledgeGraph;
    use crate::model::ModelConfig;
    use crate::sequence::Vocab;
    use rand_chacha::rand_core::SeedableRng;

    fn setup() -> (KnowledgeGraph, Vocab) {
        let g = KnowledgeGraph::from_labeled([
            ("cat", "is", "animal"),
            ("dog", "is", "animal"),
            ("cat", "has", "whiskers"),
            ("dog", "has", "tail"),
        ]);
        let v = Vocab::for_graph(&g);
        (g, v)
    }

    fn model(v: &Vocab, g: &KnowledgeGraph) -> ModelParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = ModelParams::new(ModelConfig::toy(8, 2, 2), v.len(), g.n_relations(), &mut rng).unwrap();
        m.add_zsl_head(3, &mut rng);
        m
    }

    #[test]
    fn score_is_a_cosine() {
        let (g, v) = setup();
        let m = model(&v, &g);
        let ctx = TaskContext { graph: &g, vocab: &v, k: 4, seed: 0 };
        for s in 0..10u64 {
            let f = [s as f64 - 4.0, 1.0, -0.5 * s as f64];
            let x = forward(&m, &ctx, EntityId(0), &f, &mut ChaCha8Rng::seed_from_u64(s), false).unwrap().item();
            assert!((-1.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn positive_rescaling_of_the_projections_keeps_the_score() {
        let (g, v) = setup();
        let m = model(&v, &g);
        let ctx = TaskContext { graph: &g, vocab: &v, k: 4, seed: 0 };
        let f = [0.3, -1.0, 2.0];
        let a = forward(&m, &ctx, EntityId(1), &f, &mut ChaCha8Rng::seed_from_u64(0), false).unwrap().item();
        let z = m.tasks.zsl.as_ref().unwrap();
        for t in [&z.mlp_b.w, &z.mlp_b.b] {
            t.update_data(|d| d.iter_mut().for_each(|x| *x *= 3.5));
        }
        for t in [&z.mlp_v.w, &z.mlp_v.b] {
            t.update_data(|d| d.iter_mut().for_each(|x| *x *= 0.2));
        }
        let b = forward(&m, &ctx, EntityId(1), &f, &mut ChaCha8Rng::seed_from_u64(0), false).unwrap().item();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn graph_never_attends_the_prompt() {
        let (g, v) = setup();
        let ctx = TaskContext { graph: &g, vocab: &v, k: 4, seed: 0 };
        let seq = sequence(&ctx, EntityId(0), &[1.0, 2.0, 3.0], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mtx = seq.matrix().unwrap();
        let p = seq.prompt_segment().unwrap();
        let begin = seq.segments[0].start;
        for i in 0..p.start {
            for j in p.start..p.end {
                if i != begin {
                    assert!(!mtx.get(i, j), "graph {i} sees prompt {j}");
                }
            }
        }
        let m = model(&v, &g);
        let (_, probs) = m.forward_traced(&seq, Some(&m.tasks.zsl.as_ref().unwrap().w_map)).unwrap();
        for layer in &probs {
            for head in layer {
                for i in 0..p.start {
                    if i == begin {
                        continue;
                    }
                    for j in p.start..p.end {
                        assert!(head.get(i, j) < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn single_candidate_is_returned() {
        let (g, v) = setup();
        let m = model(&v, &g);
        let ctx = TaskContext { graph: &g, vocab: &v, k: 4, seed: 0 };
        assert_eq!(predict(&m, &ctx, &[1.0, 0.0, 0.0], &[EntityId(3)], 0).unwrap(), EntityId(3));
    }

    #[test]
    fn pairs_skip_unseen_classes() {
        let (g, v) = setup();
        let ctx = TaskContext { graph: &g, vocab: &v, k: 4, seed: 0 };
        let split = ClassSplit {
            seen: ["cat".to_owned(), "whiskers".to_owned(), "tail".to_owned()].into(),
            unseen: ["dog".to_owned()].into(),
        };
        let rc = ResolvedClasses::resolve(&ctx, &split).unwrap();
        let ex = vec![
            ZslExample { image: "i1".into(), class: "cat".into(), label: None },
            ZslExample { image: "i2".into(), class: "dog".into(), label: None },
        ];
        let pairs = training_pairs(&ctx, &rc, &ex, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(pairs.len(), 3);
        assert!(pairs[0].label && pairs.iter().skip(1).all(|p| !p.label && p.class != pairs[0].class));
    }
}
