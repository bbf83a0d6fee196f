//! Typed synthetic graphs and task data for tests and demos.
//!
//! Every entity has a type and every relation a `(domain, range)` type
//! signature; a triple is *consistent* when its endpoints match the
//! signature. Graphs are samples of consistent triples, so the consistent
//! set is a ground truth against which held-out triples and corruptions can
//! be labelled.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, Triple};

#[derive(Debug, Clone)]
pub struct TypedSpec {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_types: usize,
    pub n_triples: usize,
    /// Prepended to every label, so graphs with different prefixes share no
    /// vocabulary.
    pub prefix: String,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TypedGraph {
    pub graph: KnowledgeGraph,
    pub spec: TypedSpec,
    /// Relation `j`'s `(domain, range)` types.
    pub signatures: Vec<(usize, usize)>,
}

impl TypedGraph {
    pub fn entity_label(&self, i: usize) -> String {
        format!("{}e{i}", self.spec.prefix)
    }

    pub fn relation_label(&self, j: usize) -> String {
        format!("{}r{j}", self.spec.prefix)
    }

    pub fn entity_type(&self, i: usize) -> usize {
        i % self.spec.n_types
    }

    fn parse_index(&self, label: &str, tag: char) -> Option<usize> {
        label
            .strip_prefix(self.spec.prefix.as_str())?
            .strip_prefix(tag)?
            .parse()
            .ok()
    }

    /// Whether `(h, r, t)`, given by labels, matches the type signature.
    pub fn is_consistent_labels(&self, h: &str, r: &str, t: &str) -> bool {
        let (Some(h), Some(r), Some(t)) = (
            self.parse_index(h, 'e'),
            self.parse_index(r, 'r'),
            self.parse_index(t, 'e'),
        ) else {
            return false;
        };
        h != t && self.signatures.get(r) == Some(&(self.entity_type(h), self.entity_type(t)))
    }

    pub fn is_consistent(&self, t: &Triple) -> bool {
        let g = &self.graph;
        self.is_consistent_labels(
            g.entity_label(t.head),
            g.relation_label(t.relation),
            g.entity_label(t.tail),
        )
    }

    fn of_type(&self, ty: usize) -> Vec<usize> {
        (0..self.spec.n_entities).filter(|&i| self.entity_type(i) == ty).collect()
    }

    /// Every consistent triple as label indices.
    pub fn consistent_triples(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (r, &(dom, ran)) in self.signatures.iter().enumerate() {
            for &h in &self.of_type(dom) {
                for &t in &self.of_type(ran) {
                    if h != t {
                        out.push((h, r, t));
                    }
                }
            }
        }
        out
    }

    pub fn generate(spec: TypedSpec) -> Result<Self> {
        if spec.n_types == 0 || spec.n_entities < 2 * spec.n_types || spec.n_relations == 0 {
            return Err(Error::TaskData("typed graph needs ≥ 2 entities per type and a relation".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let nt = spec.n_types;
        let mut types: Vec<usize> = (0..nt).collect();
        types.shuffle(&mut rng);
        // chain the shuffled types so every type occurs in some signature
        let mut signatures: Vec<(usize, usize)> = Vec::new();
        let mut j = 0;
        while signatures.len() < spec.n_relations && 2 * signatures.len() < nt {
            signatures.push((types[j % nt], types[(j + 1) % nt]));
            j += 2;
        }
        let mut pairs: Vec<(usize, usize)> = (0..nt)
            .flat_map(|a| (0..nt).map(move |b| (a, b)))
            .filter(|p| !signatures.contains(p))
            .collect();
        pairs.shuffle(&mut rng);
        // then distinct fresh signatures while they last, then repeats
        let mut k = 0;
        while signatures.len() < spec.n_relations {
            let next = if pairs.is_empty() { signatures[k] } else { pairs[k % pairs.len()] };
            signatures.push(next);
            k += 1;
        }
        let mut tg = TypedGraph {
            graph: KnowledgeGraph::new(),
            spec,
            signatures,
        };
        let mut pool = tg.consistent_triples();
        if pool.len() < tg.spec.n_triples {
            return Err(Error::TaskData(format!(
                "only {} consistent triples for {} requested",
                pool.len(),
                tg.spec.n_triples
            )));
        }
        pool.shuffle(&mut rng);
        let mut chosen: BTreeSet<(usize, usize, usize)> = BTreeSet::new();
        let mut order = Vec::new();
        // cover every entity first, then fill up
        for e in 0..tg.spec.n_entities {
            if order.len() >= tg.spec.n_triples {
                break;
            }
            let touching = |&&(h, _, t): &&(usize, usize, usize)| h == e || t == e;
            if pool.iter().filter(touching).any(|x| chosen.contains(x)) {
                continue;
            }
            if let Some(&t) = pool.iter().find(touching) {
                chosen.insert(t);
                order.push(t);
            }
        }
        for &t in &pool {
            if order.len() >= tg.spec.n_triples {
                break;
            }
            if chosen.insert(t) {
                order.push(t);
            }
        }
        for &(h, r, t) in &order {
            let (h, r, t) = (tg.entity_label(h), tg.relation_label(r), tg.entity_label(t));
            tg.graph.add_labeled(&h, &r, &t);
        }
        Ok(tg)
    }

    /// Consistent triples absent from the graph, as labels.
    pub fn held_out_positives(&self, n: usize, rng: &mut impl Rng) -> Vec<[String; 3]> {
        let mut pool: Vec<_> = self
            .consistent_triples()
            .into_iter()
            .filter(|&(h, r, t)| {
                !self
                    .graph
                    .triple_from_labels(&self.entity_label(h), &self.relation_label(r), &self.entity_label(t))
                    .map(|tr| self.graph.contains(&tr))
                    .unwrap_or(false)
            })
            .collect();
        pool.shuffle(rng);
        pool.truncate(n);
        pool.into_iter()
            .map(|(h, r, t)| [self.entity_label(h), self.relation_label(r), self.entity_label(t)])
            .collect()
    }

    /// Replaces the head or the tail (fair coin) with a random entity so the
    /// result is inconsistent. Returns labels.
    pub fn corrupt(&self, h: &str, r: &str, t: &str, rng: &mut impl Rng) -> [String; 3] {
        loop {
            let e = self.entity_label(rng.gen_range(0..self.spec.n_entities));
            let cand = if rng.gen_bool(0.5) {
                [e, r.to_owned(), t.to_owned()]
            } else {
                [h.to_owned(), r.to_owned(), e]
            };
            if !self.is_consistent_labels(&cand[0], &cand[1], &cand[2]) {
                return cand;
            }
        }
    }
}

/// Labelled triple-classification examples.
pub fn tc_examples(
    tg: &TypedGraph,
    positives: &[[String; 3]],
    negatives_per_positive: usize,
    rng: &mut impl Rng,
) -> Vec<([String; 3], bool)> {
    let mut out = Vec::new();
    for p in positives {
        out.push((p.clone(), true));
        for _ in 0..negatives_per_positive {
            out.push((tg.corrupt(&p[0], &p[1], &p[2], rng), false));
        }
    }
    out
}

/// Graph triples as labels.
pub fn graph_triples(tg: &TypedGraph) -> Vec<[String; 3]> {
    let g = &tg.graph;
    g.triples()
        .iter()
        .map(|t| {
            [
                g.entity_label(t.head).to_owned(),
                g.relation_label(t.relation).to_owned(),
                g.entity_label(t.tail).to_owned(),
            ]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> TypedSpec {
        TypedSpec {
            n_entities: 50,
            n_relations: 5,
            n_types: 5,
            n_triples: 200,
            prefix: "p_".into(),
            seed,
        }
    }

    #[test]
    fn graph_has_requested_size_and_is_consistent() {
        let tg = TypedGraph::generate(spec(1)).unwrap();
        let g = &tg.graph;
        assert_eq!(g.n_triples(), 200);
        assert_eq!(g.n_relations(), 5);
        assert_eq!(g.n_entities(), 50);
        assert!(g.triples().iter().all(|t| tg.is_consistent(t)));
        let sigs: BTreeSet<_> = tg.signatures.iter().collect();
        assert_eq!(sigs.len(), 5);
    }

    #[test]
    fn every_type_is_used() {
        for seed in 0..50 {
            let tg = TypedGraph::generate(TypedSpec { n_relations: 3, ..spec(seed) }).unwrap();
            assert_eq!(tg.graph.n_entities(), 50, "seed {seed}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = TypedGraph::generate(spec(3)).unwrap();
        let b = TypedGraph::generate(spec(3)).unwrap();
        assert_eq!(a.graph.to_tsv(), b.graph.to_tsv());
    }

    #[test]
    fn held_out_and_corruptions() {
        let tg = TypedGraph::generate(spec(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pos = tg.held_out_positives(30, &mut rng);
        assert_eq!(pos.len(), 30);
        for p in &pos {
            assert!(tg.is_consistent_labels(&p[0], &p[1], &p[2]));
            let t = tg.graph.triple_from_labels(&p[0], &p[1], &p[2]);
            assert!(t.map(|t| !tg.graph.contains(&t)).unwrap_or(true));
            let c = tg.corrupt(&p[0], &p[1], &p[2], &mut rng);
            assert!(!tg.is_consistent_labels(&c[0], &c[1], &c[2]));
            assert!(c[0] == p[0] || c[2] == p[2]);
        }
    }
}
