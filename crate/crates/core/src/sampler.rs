//! Sub-graph sampling for pretraining: random walks, entity-centered
//! neighbourhoods and entity pairs for the pair-modeling objective.

use std::collections::{BTreeSet, HashSet};

use rand::seq::index;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, Triple};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubGraph {
    pub center: EntityId,
    pub triples: Vec<Triple>,
}

impl SubGraph {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Appends the triples of `other` not already present, keeping order.
    pub fn merge(&mut self, other: &SubGraph) {
        let seen: HashSet<Triple> = self.triples.iter().copied().collect();
        self.triples
            .extend(other.triples.iter().filter(|t| !seen.contains(t)).copied());
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpmPair {
    pub left: SubGraph,
    pub right: SubGraph,
    pub positive: bool,
}

impl EpmPair {
    pub fn label(&self) -> usize {
        usize::from(self.positive)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    RandomWalk,
    EntityCentered,
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one sample, derived from the run seed, the epoch, the sample
/// index and a stream tag that separates independent uses.
pub fn derive_seed(base: u64, epoch: u64, index: u64, stream: u64) -> u64 {
    mix(mix(mix(mix(base) ^ epoch) ^ index) ^ stream)
}

pub fn rng_for(base: u64, epoch: u64, index: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, epoch, index, stream))
}

/// Walks `k` steps from `center`, each step taking a uniformly random
/// incident triple and moving to its other endpoint. Repeated triples are
/// skipped, so the result holds at most `k` triples.
pub fn random_walk_sample<R: Rng + ?Sized>(
    g: &KnowledgeGraph,
    center: EntityId,
    k: usize,
    rng: &mut R,
) -> Result<SubGraph> {
    g.check_entity(center)?;
    let mut seen = HashSet::new();
    let mut triples = Vec::with_capacity(k);
    let mut current = center;
    for _ in 0..k {
        let incident = g.neighbor_indices(current)?;
        if incident.is_empty() {
            break;
        }
        let pick = incident[rng.gen_range(0..incident.len())];
        let t = g.triple(pick);
        if seen.insert(pick) {
            triples.push(t);
        }
        current = t.other_end(current);
    }
    if triples.is_empty() {
        return Err(Error::EmptySubGraph(center.0));
    }
    Ok(SubGraph { center, triples })
}

fn choose<R: Rng + ?Sized>(pool: &[usize], amount: usize, rng: &mut R) -> Vec<usize> {
    let amount = amount.min(pool.len());
    index::sample(rng, pool.len(), amount)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// Samples up to `k` one-hop triples; when fewer than `k` exist, tops up with
/// two-hop triples incident to the one-hop endpoints.
pub fn entity_centered_sample<R: Rng + ?Sized>(
    g: &KnowledgeGraph,
    center: EntityId,
    k: usize,
    rng: &mut R,
) -> Result<SubGraph> {
    entity_centered_sample_excluding(g, center, k, &HashSet::new(), rng)
}

/// Entity-centered sampling that never returns a triple in `exclude`
/// (triple indices). Used to keep a query triple out of its own context.
pub fn entity_centered_sample_excluding<R: Rng + ?Sized>(
    g: &KnowledgeGraph,
    center: EntityId,
    k: usize,
    exclude: &HashSet<usize>,
    rng: &mut R,
) -> Result<SubGraph> {
    let one_hop: Vec<usize> = g
        .neighbor_indices(center)?
        .into_iter()
        .filter(|i| !exclude.contains(i))
        .collect();
    if one_hop.is_empty() {
        return Err(Error::EmptySubGraph(center.0));
    }
    let mut chosen = choose(&one_hop, k, rng);
    if one_hop.len() < k {
        let taken: HashSet<usize> = chosen.iter().copied().collect();
        let endpoints: BTreeSet<EntityId> = one_hop
            .iter()
            .map(|&i| g.triple(i).other_end(center))
            .collect();
        let mut pool = BTreeSet::new();
        for e in endpoints {
            for i in g.neighbor_indices(e)? {
                if !taken.contains(&i) && !exclude.contains(&i) {
                    pool.insert(i);
                }
            }
        }
        let pool: Vec<usize> = pool.into_iter().collect();
        chosen.extend(choose(&pool, k - one_hop.len(), rng));
    }
    Ok(SubGraph {
        center,
        triples: chosen.into_iter().map(|i| g.triple(i)).collect(),
    })
}

pub fn sample_with<R: Rng + ?Sized>(
    strategy: Strategy,
    g: &KnowledgeGraph,
    center: EntityId,
    k: usize,
    rng: &mut R,
) -> Result<SubGraph> {
    match strategy {
        Strategy::RandomWalk => random_walk_sample(g, center, k, rng),
        Strategy::EntityCentered => entity_centered_sample(g, center, k, rng),
    }
}

/// Flips a coin with `positive_prob` and samples an entity pair accordingly.
pub fn sample_epm_pair<R: Rng + ?Sized>(
    g: &KnowledgeGraph,
    center: EntityId,
    k: usize,
    positive_prob: f64,
    rng: &mut R,
) -> Result<EpmPair> {
    let positive = rng.gen_bool(positive_prob);
    sample_epm_pair_with(g, center, k, positive, rng)
}

/// Samples a pair with the coin already decided. A positive request with no
/// same-role candidate falls back to a negative pair; a negative request with
/// no candidate falls back to a positive one.
pub fn sample_epm_pair_with<R: Rng + ?Sized>(
    g: &KnowledgeGraph,
    center: EntityId,
    k: usize,
    positive: bool,
    rng: &mut R,
) -> Result<EpmPair> {
    let same = g.same_role_entities(center)?;
    let positives: Vec<EntityId> = same.iter().copied().collect();
    let negatives = || -> Vec<EntityId> {
        g.entities()
            .filter(|e| *e != center && !same.contains(e) && g.degree(*e) > 0)
            .collect()
    };
    let (partner, label) = if positive && !positives.is_empty() {
        (positives[rng.gen_range(0..positives.len())], true)
    } else {
        let neg = negatives();
        if !neg.is_empty() {
            (neg[rng.gen_range(0..neg.len())], false)
        } else if !positives.is_empty() {
            (positives[rng.gen_range(0..positives.len())], true)
        } else {
            return Err(Error::EmptySubGraph(center.0));
        }
    };
    let left = entity_centered_sample(g, center, k, rng)?;
    let right = entity_centered_sample(g, partner, k, rng)?;
    Ok(EpmPair {
        left,
        right,
        positive: label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::RelationId;
    use proptest::prelude::*;
    use proptest::strategy::Strategy;

    fn graph(triples: &[(&str, &str, &str)]) -> KnowledgeGraph {
        KnowledgeGraph::from_labeled(triples.iter().copied())
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn walk_on_chain_is_connected() {
        let g = graph(&[("a", "r", "b"), ("b", "r", "c"), ("c", "r", "d")]);
        let a = g.entity_id("a").unwrap();
        let mut saw_full = false;
        for seed in 0..200 {
            let sg = random_walk_sample(&g, a, 3, &mut rng(seed)).unwrap();
            assert!(sg.len() <= 3);
            assert_eq!(sg.triples[0], g.triple(0));
            // each new triple touches an entity already visited
            let mut visited: HashSet<EntityId> = [a].into();
            for t in &sg.triples {
                assert!(visited.contains(&t.head) || visited.contains(&t.tail));
                visited.insert(t.head);
                visited.insert(t.tail);
            }
            saw_full |= sg.triples == g.triples();
        }
        assert!(saw_full);
    }

    #[test]
    fn walk_on_single_triple_skips_repeats() {
        let g = graph(&[("a", "r", "b")]);
        let sg = random_walk_sample(&g, EntityId(0), 5, &mut rng(1)).unwrap();
        assert_eq!(sg.triples, vec![g.triple(0)]);
    }

    #[test]
    fn isolated_center_signals_empty() {
        let mut g = graph(&[("a", "r", "b")]);
        let c = g.add_entity("c");
        assert!(matches!(
            random_walk_sample(&g, c, 3, &mut rng(0)),
            Err(Error::EmptySubGraph(_))
        ));
        assert!(matches!(
            entity_centered_sample(&g, c, 3, &mut rng(0)),
            Err(Error::EmptySubGraph(_))
        ));
    }

    #[test]
    fn star_walk_first_step_is_uniform() {
        let spokes: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let mut g = KnowledgeGraph::new();
        for s in &spokes {
            g.add_labeled("hub", "r", s);
        }
        let hub = g.entity_id("hub").unwrap();
        let n = 10_000usize;
        let mut counts = [0usize; 10];
        for seed in 0..n as u64 {
            let sg = random_walk_sample(&g, hub, 4, &mut rng(seed)).unwrap();
            let idx = g.triples().iter().position(|t| *t == sg.triples[0]).unwrap();
            counts[idx] += 1;
        }
        let p = 0.1;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma + 1.0, "{counts:?}");
        }
    }

    #[test]
    fn entity_centered_counts() {
        let g = graph(&[("a", "r", "b"), ("a", "r", "c"), ("d", "r", "a")]);
        let sg = entity_centered_sample(&g, EntityId(0), 2, &mut rng(3)).unwrap();
        assert_eq!(sg.len(), 2);
        assert!(sg.triples.iter().all(|t| t.touches(EntityId(0))));

        let g = graph(&[
            ("a", "r", "b"),
            ("b", "r", "c"),
            ("b", "r", "d"),
            ("e", "r", "b"),
            ("b", "s", "f"),
        ]);
        let sg = entity_centered_sample(&g, EntityId(0), 3, &mut rng(3)).unwrap();
        assert_eq!(sg.len(), 3);
        assert_eq!(sg.triples[0], g.triple(0));
        assert!(sg.triples[1..].iter().all(|t| t.touches(EntityId(1))));
    }

    #[test]
    fn excluded_triples_never_sampled() {
        let g = graph(&[("a", "r", "b"), ("a", "r", "c"), ("c", "r", "d")]);
        let exclude: HashSet<usize> = [0].into();
        for seed in 0..50 {
            let sg =
                entity_centered_sample_excluding(&g, EntityId(0), 5, &exclude, &mut rng(seed)).unwrap();
            assert!(!sg.triples.contains(&g.triple(0)));
        }
    }

    #[test]
    fn epm_forced_coins() {
        let g = graph(&[("a", "r", "b"), ("c", "r", "d")]);
        let id = |l| g.entity_id(l).unwrap();
        let p = sample_epm_pair_with(&g, id("a"), 2, true, &mut rng(0)).unwrap();
        assert!(p.positive);
        assert_eq!(p.right.center, id("c"));
        for seed in 0..20 {
            let n = sample_epm_pair_with(&g, id("a"), 2, false, &mut rng(seed)).unwrap();
            assert!(!n.positive);
            assert!([id("b"), id("d")].contains(&n.right.center));
        }
    }

    #[test]
    fn epm_positive_falls_back_to_negative() {
        let g = graph(&[("a", "r", "b"), ("c", "s", "d")]);
        let p = sample_epm_pair_with(&g, EntityId(0), 2, true, &mut rng(0)).unwrap();
        assert!(!p.positive);
    }

    #[test]
    fn epm_coin_is_fair() {
        let g = graph(&[("a", "r", "b"), ("c", "r", "d"), ("e", "s", "f")]);
        let n = 10_000;
        let pos = (0..n)
            .filter(|&s| {
                sample_epm_pair(&g, EntityId(0), 2, 0.5, &mut rng(s as u64))
                    .unwrap()
                    .positive
            })
            .count();
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((pos as f64 - n as f64 / 2.0).abs() < 3.0 * sigma);
    }

    #[test]
    fn derived_seeds_differ_per_coordinate() {
        let s = derive_seed(7, 0, 0, 0);
        assert_ne!(s, derive_seed(7, 1, 0, 0));
        assert_ne!(s, derive_seed(7, 0, 1, 0));
        assert_ne!(s, derive_seed(7, 0, 0, 1));
        assert_eq!(s, derive_seed(7, 0, 0, 0));
    }

    fn arb_graph() -> impl Strategy<Value = KnowledgeGraph> {
        proptest::collection::vec((0u32..15, 0u32..3, 0u32..15), 1..40).prop_map(|ts| {
            let mut g = KnowledgeGraph::new();
            for i in 0..15 {
                g.add_entity(&format!("e{i}"));
            }
            for i in 0..3 {
                g.add_relation(&format!("r{i}"));
            }
            for (h, r, t) in ts {
                g.add_triple(Triple::new(EntityId(h), RelationId(r), EntityId(t))).unwrap();
            }
            g
        })
    }

    proptest! {
        #[test]
        fn entity_centered_respects_pool(g in arb_graph(), k in 1usize..12, seed in 0u64..1000) {
            for e in g.connected_entities() {
                let sg = entity_centered_sample(&g, e, k, &mut rng(seed)).unwrap();
                let one: BTreeSet<Triple> = g.neighbors(e).unwrap().into_iter().collect();
                let mut two = BTreeSet::new();
                for t in &one {
                    for u in g.neighbors(t.other_end(e)).unwrap() {
                        if !one.contains(&u) { two.insert(u); }
                    }
                }
                prop_assert!(sg.len() <= k);
                let uniq: BTreeSet<Triple> = sg.triples.iter().copied().collect();
                prop_assert_eq!(uniq.len(), sg.len());
                let n1 = one.len().min(k);
                prop_assert_eq!(sg.len(), (n1 + two.len()).min(k));
                for (i, t) in sg.triples.iter().enumerate() {
                    if i < n1 { prop_assert!(one.contains(t)); } else { prop_assert!(two.contains(t)); }
                }
            }
        }

        #[test]
        fn sampling_is_deterministic(g in arb_graph(), k in 1usize..10, seed in 0u64..1000) {
            for e in g.connected_entities() {
                prop_assert_eq!(
                    random_walk_sample(&g, e, k, &mut rng(seed)).unwrap(),
                    random_walk_sample(&g, e, k, &mut rng(seed)).unwrap()
                );
                prop_assert_eq!(
                    entity_centered_sample(&g, e, k, &mut rng(seed)).unwrap(),
                    entity_centered_sample(&g, e, k, &mut rng(seed)).unwrap()
                );
                let w = random_walk_sample(&g, e, k, &mut rng(seed)).unwrap();
                prop_assert!(w.len() <= k);
                prop_assert!(w.triples.iter().all(|t| g.contains(t)));
            }
        }

        #[test]
        fn epm_positive_label_means_same_role(g in arb_graph(), seed in 0u64..1000) {
            for e in g.connected_entities() {
                if let Ok(p) = sample_epm_pair(&g, e, 4, 0.5, &mut rng(seed)) {
                    let same = g.same_role_entities(e).unwrap();
                    prop_assert_eq!(p.positive, same.contains(&p.right.center));
                }
            }
        }
    }
}
