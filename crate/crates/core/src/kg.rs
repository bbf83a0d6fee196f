//! Knowledge-graph storage: label interning, adjacency indexes and
//! dataset statistics.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }

    /// The endpoint opposite to `e`; a self-loop returns `e` itself.
    pub fn other_end(&self, e: EntityId) -> EntityId {
        if self.head == e {
            self.tail
        } else {
            self.head
        }
    }

    pub fn touches(&self, e: EntityId) -> bool {
        self.head == e || self.tail == e
    }
}

/// An in-memory knowledge graph with dense ids.
///
/// Entities and relations live in separate id spaces, assigned in order of
/// first appearance. The graph is append-only, so every index stays valid
/// for the lifetime of the value.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    entity_labels: Vec<String>,
    relation_labels: Vec<String>,
    entity_ids: HashMap<String, EntityId>,
    relation_ids: HashMap<String, RelationId>,
    triples: Vec<Triple>,
    triple_set: HashSet<Triple>,
    out_index: Vec<Vec<usize>>,
    in_index: Vec<Vec<usize>>,
    rel_heads: Vec<BTreeSet<EntityId>>,
    rel_tails: Vec<BTreeSet<EntityId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_triples: usize,
    pub std_rel: f64,
    pub std_ent: f64,
    pub density: f64,
}

impl GraphStats {
    /// `n_triples / (n_entities² · n_relations)`.
    pub fn density_of(n_entities: usize, n_relations: usize, n_triples: usize) -> f64 {
        let e = n_entities as f64;
        n_triples as f64 / (e * e * n_relations as f64)
    }

    pub fn to_tsv(&self) -> String {
        format!(
            "n_entities\t{}\nn_relations\t{}\nn_triples\t{}\nstd_rel\t{}\nstd_ent\t{}\ndensity\t{:e}\n",
            self.n_entities, self.n_relations, self.n_triples, self.std_rel, self.std_ent, self.density
        )
    }
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n == 0 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    var.sqrt()
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Interns an entity label, returning its id.
    pub fn add_entity(&mut self, label: &str) -> EntityId {
        if let Some(&id) = self.entity_ids.get(label) {
            return id;
        }
        let id = EntityId(self.entity_labels.len() as u32);
        self.entity_labels.push(label.to_owned());
        self.entity_ids.insert(label.to_owned(), id);
        self.out_index.push(Vec::new());
        self.in_index.push(Vec::new());
        id
    }

    pub fn add_relation(&mut self, label: &str) -> RelationId {
        if let Some(&id) = self.relation_ids.get(label) {
            return id;
        }
        let id = RelationId(self.relation_labels.len() as u32);
        self.relation_labels.push(label.to_owned());
        self.relation_ids.insert(label.to_owned(), id);
        self.rel_heads.push(BTreeSet::new());
        self.rel_tails.push(BTreeSet::new());
        id
    }

    /// Adds a triple over already-interned ids. Returns `false` for duplicates.
    pub fn add_triple(&mut self, triple: Triple) -> Result<bool> {
        self.check_entity(triple.head)?;
        self.check_entity(triple.tail)?;
        if triple.relation.index() >= self.relation_labels.len() {
            return Err(Error::UnknownRelation(triple.relation.0));
        }
        if !self.triple_set.insert(triple) {
            return Ok(false);
        }
        let idx = self.triples.len();
        self.triples.push(triple);
        self.out_index[triple.head.index()].push(idx);
        self.in_index[triple.tail.index()].push(idx);
        self.rel_heads[triple.relation.index()].insert(triple.head);
        self.rel_tails[triple.relation.index()].insert(triple.tail);
        Ok(true)
    }

    pub fn add_labeled(&mut self, head: &str, relation: &str, tail: &str) -> bool {
        let h = self.add_entity(head);
        let r = self.add_relation(relation);
        let t = self.add_entity(tail);
        self.add_triple(Triple::new(h, r, t))
            .expect("freshly interned ids are valid")
    }

    /// Builds a graph from labeled `(head, relation, tail)` triples.
    pub fn from_labeled<'a, I>(triples: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    {
        let mut g = Self::new();
        for (h, r, t) in triples {
            g.add_labeled(h, r, t);
        }
        g
    }

    /// Parses tab-separated triple lines into the graph. `origin` only
    /// feeds error messages.
    pub fn extend_from_tsv(&mut self, text: &str, origin: &Path) -> Result<usize> {
        let mut added = 0;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: lineno + 1,
                    message: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            if self.add_labeled(fields[0], fields[1], fields[2]) {
                added += 1;
            }
        }
        Ok(added)
    }

    /// Loads one TSV triple file.
    pub fn load_triples(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_triple_files(&[path.as_ref()])
    }

    /// Loads several TSV files (e.g. train, valid and test splits) into one
    /// graph sharing a single id space.
    pub fn load_triple_files<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        let mut g = Self::new();
        for path in paths {
            let path = path.as_ref();
            let text = fs::read_to_string(path)
                .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            g.extend_from_tsv(&text, path)?;
        }
        if g.triples.is_empty() {
            let names: Vec<String> = paths
                .iter()
                .map(|p| p.as_ref().display().to_string())
                .collect();
            return Err(Error::EmptyGraph(names.join(", ")));
        }
        Ok(g)
    }

    pub fn n_entities(&self) -> usize {
        self.entity_labels.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relation_labels.len()
    }

    pub fn n_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn triple(&self, index: usize) -> Triple {
        self.triples[index]
    }

    pub fn contains(&self, triple: &Triple) -> bool {
        self.triple_set.contains(triple)
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        (0..self.entity_labels.len() as u32).map(EntityId)
    }

    pub fn relations(&self) -> impl Iterator<Item = RelationId> + '_ {
        (0..self.relation_labels.len() as u32).map(RelationId)
    }

    pub fn entity_label(&self, e: EntityId) -> &str {
        &self.entity_labels[e.index()]
    }

    pub fn relation_label(&self, r: RelationId) -> &str {
        &self.relation_labels[r.index()]
    }

    pub fn entity_id(&self, label: &str) -> Option<EntityId> {
        self.entity_ids.get(label).copied()
    }

    pub fn relation_id(&self, label: &str) -> Option<RelationId> {
        self.relation_ids.get(label).copied()
    }

    pub fn check_entity(&self, e: EntityId) -> Result<()> {
        if e.index() < self.entity_labels.len() {
            Ok(())
        } else {
            Err(Error::UnknownEntity(e.0))
        }
    }

    pub fn out_triples(&self, e: EntityId) -> &[usize] {
        &self.out_index[e.index()]
    }

    pub fn in_triples(&self, e: EntityId) -> &[usize] {
        &self.in_index[e.index()]
    }

    pub fn rel_heads(&self, r: RelationId) -> &BTreeSet<EntityId> {
        &self.rel_heads[r.index()]
    }

    pub fn rel_tails(&self, r: RelationId) -> &BTreeSet<EntityId> {
        &self.rel_tails[r.index()]
    }

    /// Indices of the triples incident to `e`, ascending. A self-loop is
    /// listed once.
    pub fn neighbor_indices(&self, e: EntityId) -> Result<Vec<usize>> {
        self.check_entity(e)?;
        let out = &self.out_index[e.index()];
        let inc = &self.in_index[e.index()];
        // both lists are ascending already, so a merge keeps the order
        let mut merged = Vec::with_capacity(out.len() + inc.len());
        let (mut i, mut j) = (0, 0);
        while i < out.len() || j < inc.len() {
            let next = match (out.get(i), inc.get(j)) {
                (Some(&a), Some(&b)) if a == b => {
                    i += 1;
                    j += 1;
                    a
                }
                (Some(&a), Some(&b)) if a < b => {
                    i += 1;
                    a
                }
                (Some(_), Some(&b)) => {
                    j += 1;
                    b
                }
                (Some(&a), None) => {
                    i += 1;
                    a
                }
                (None, Some(&b)) => {
                    j += 1;
                    b
                }
                (None, None) => unreachable!(),
            };
            merged.push(next);
        }
        Ok(merged)
    }

    pub fn neighbors(&self, e: EntityId) -> Result<Vec<Triple>> {
        Ok(self
            .neighbor_indices(e)?
            .into_iter()
            .map(|i| self.triples[i])
            .collect())
    }

    pub fn degree(&self, e: EntityId) -> usize {
        self.out_index[e.index()].len() + self.in_index[e.index()].len()
    }

    /// Entities with at least one incident triple.
    pub fn connected_entities(&self) -> Vec<EntityId> {
        self.entities().filter(|&e| self.degree(e) > 0).collect()
    }

    /// Entities that share a head role or a tail role of some relation with `e`.
    pub fn same_role_entities(&self, e: EntityId) -> Result<BTreeSet<EntityId>> {
        self.check_entity(e)?;
        let mut out = BTreeSet::new();
        let head_rels: BTreeSet<RelationId> = self.out_index[e.index()]
            .iter()
            .map(|&i| self.triples[i].relation)
            .collect();
        let tail_rels: BTreeSet<RelationId> = self.in_index[e.index()]
            .iter()
            .map(|&i| self.triples[i].relation)
            .collect();
        for r in head_rels {
            out.extend(self.rel_heads[r.index()].iter().copied());
        }
        for r in tail_rels {
            out.extend(self.rel_tails[r.index()].iter().copied());
        }
        out.remove(&e);
        Ok(out)
    }

    pub fn compute_stats(&self) -> Result<GraphStats> {
        if self.triples.is_empty() {
            return Err(Error::EmptyGraph("cannot compute statistics".into()));
        }
        let mut per_rel = vec![0usize; self.n_relations()];
        let mut per_ent = vec![0usize; self.n_entities()];
        for t in &self.triples {
            per_rel[t.relation.index()] += 1;
            per_ent[t.head.index()] += 1;
            per_ent[t.tail.index()] += 1;
        }
        Ok(GraphStats {
            n_entities: self.n_entities(),
            n_relations: self.n_relations(),
            n_triples: self.n_triples(),
            std_rel: population_std(per_rel.iter().map(|&c| c as f64)),
            std_ent: population_std(per_ent.iter().map(|&c| c as f64)),
            density: GraphStats::density_of(self.n_entities(), self.n_relations(), self.n_triples()),
        })
    }

    /// Label/id dump: `kind<TAB>id<TAB>label` per line.
    pub fn vocabulary_tsv(&self) -> String {
        let mut out = String::new();
        for (i, l) in self.entity_labels.iter().enumerate() {
            let _ = writeln!(out, "entity\t{i}\t{l}");
        }
        for (i, l) in self.relation_labels.iter().enumerate() {
            let _ = writeln!(out, "relation\t{i}\t{l}");
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for t in &self.triples {
            let _ = writeln!(
                out,
                "{}\t{}\t{}",
                self.entity_label(t.head),
                self.relation_label(t.relation),
                self.entity_label(t.tail)
            );
        }
        out
    }

    pub fn triple_from_labels(&self, h: &str, r: &str, t: &str) -> Result<Triple> {
        let head = self
            .entity_id(h)
            .ok_or_else(|| Error::UnknownLabel(h.to_owned()))?;
        let relation = self
            .relation_id(r)
            .ok_or_else(|| Error::UnknownLabel(r.to_owned()))?;
        let tail = self
            .entity_id(t)
            .ok_or_else(|| Error::UnknownLabel(t.to_owned()))?;
        Ok(Triple::new(head, relation, tail))
    }
}
