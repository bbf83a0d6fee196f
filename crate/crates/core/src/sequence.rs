//! Triple-sequence serialization, the neighbourship matrix that gates
//! attention, masking for the pretraining objectives and task prompts.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId};
use crate::sampler::SubGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    /// Beginning of a graph segment.
    Begin,
    /// Separator after each triple.
    Sep,
    Mask,
    /// Task token opening a prompt.
    Task,
}

const SPECIALS: [Special; 4] = [Special::Begin, Special::Sep, Special::Mask, Special::Task];

/// Special tokens occupy the first rows of every vocabulary.
pub const N_SPECIALS: usize = SPECIALS.len();

impl Special {
    fn name(self) -> &'static str {
        match self {
            Special::Begin => "[B]",
            Special::Sep => "[S]",
            Special::Mask => "[M]",
            Special::Task => "[T]",
        }
    }
}

pub const IMAGE_TOKEN: &str = "[V]";
pub const QUESTION_TOKEN: &str = "[Q]";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Special(Special),
    Entity(EntityId),
    Relation(RelationId),
    Dynamic(usize),
}

/// Token id layout: specials, then entities, then relations, then dynamic
/// task tokens. The four ranges are disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    n_entities: usize,
    n_relations: usize,
    dynamic: Vec<String>,
}

impl Vocab {
    pub fn new(n_entities: usize, n_relations: usize) -> Self {
        Self {
            n_entities,
            n_relations,
            dynamic: Vec::new(),
        }
    }

    /// Vocabulary for `g` with the image and question tokens registered.
    pub fn for_graph(g: &KnowledgeGraph) -> Self {
        let mut v = Self::new(g.n_entities(), g.n_relations());
        v.register(IMAGE_TOKEN);
        v.register(QUESTION_TOKEN);
        v
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn n_relations(&self) -> usize {
        self.n_relations
    }

    pub fn len(&self) -> usize {
        SPECIALS.len() + self.n_entities + self.n_relations + self.dynamic.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn entity_base(&self) -> usize {
        SPECIALS.len()
    }

    fn relation_base(&self) -> usize {
        SPECIALS.len() + self.n_entities
    }

    fn dynamic_base(&self) -> usize {
        SPECIALS.len() + self.n_entities + self.n_relations
    }

    pub fn special(&self, s: Special) -> TokenId {
        TokenId(SPECIALS.iter().position(|&x| x == s).unwrap() as u32)
    }

    pub fn entity(&self, e: EntityId) -> TokenId {
        debug_assert!(e.index() < self.n_entities);
        TokenId((self.entity_base() + e.index()) as u32)
    }

    pub fn relation(&self, r: RelationId) -> TokenId {
        debug_assert!(r.index() < self.n_relations);
        TokenId((self.relation_base() + r.index()) as u32)
    }

    /// Interns a dynamic token and returns its id.
    pub fn register(&mut self, name: &str) -> TokenId {
        if let Some(t) = self.dynamic_token(name) {
            return t;
        }
        self.dynamic.push(name.to_owned());
        TokenId((self.dynamic_base() + self.dynamic.len() - 1) as u32)
    }

    pub fn dynamic_token(&self, name: &str) -> Option<TokenId> {
        self.dynamic
            .iter()
            .position(|d| d == name)
            .map(|i| TokenId((self.dynamic_base() + i) as u32))
    }

    pub fn kind(&self, t: TokenId) -> Result<TokenKind> {
        let i = t.index();
        if i < SPECIALS.len() {
            Ok(TokenKind::Special(SPECIALS[i]))
        } else if i < self.relation_base() {
            Ok(TokenKind::Entity(EntityId((i - self.entity_base()) as u32)))
        } else if i < self.dynamic_base() {
            Ok(TokenKind::Relation(RelationId((i - self.relation_base()) as u32)))
        } else if i < self.len() {
            Ok(TokenKind::Dynamic(i - self.dynamic_base()))
        } else {
            Err(Error::Sequence(format!("token id {i} outside vocabulary of {}", self.len())))
        }
    }

    pub fn label(&self, t: TokenId, g: Option<&KnowledgeGraph>) -> String {
        match self.kind(t) {
            Ok(TokenKind::Special(s)) => s.name().to_owned(),
            Ok(TokenKind::Entity(e)) => match g {
                Some(g) if e.index() < g.n_entities() => g.entity_label(e).to_owned(),
                _ => format!("e{}", e.0),
            },
            Ok(TokenKind::Relation(r)) => match g {
                Some(g) if r.index() < g.n_relations() => g.relation_label(r).to_owned(),
                _ => format!("r{}", r.0),
            },
            Ok(TokenKind::Dynamic(i)) => self.dynamic[i].clone(),
            Err(_) => format!("?{}", t.0),
        }
    }
}

/// Dense square 0/1 matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMatrix {
    n: usize,
    bits: Vec<bool>,
}

impl BinaryMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            bits: vec![false; n * n],
        }
    }

    pub fn ones(n: usize) -> Self {
        Self {
            n,
            bits: vec![true; n * n],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.n + j] = v;
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Row-major 0/1 values.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Copy enlarged to `n` with the existing block in the top-left corner.
    fn grown(&self, n: usize) -> Self {
        let mut out = Self::zeros(n);
        for i in 0..self.n {
            for j in 0..self.n {
                out.set(i, j, self.get(i, j));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Graph,
    Prompt,
}

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub kind: SegmentKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Entity,
    Relation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskRecord {
    pub position: usize,
    pub original: TokenId,
    pub kind: MaskKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    TripleClassification,
    ZeroShot,
    QuestionAnswering,
}

/// A serialized token sequence together with its attention matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleSequence {
    pub tokens: Vec<TokenId>,
    /// For every position, the index into `elements` of the triple owning it
    /// (`None` for segment-leading `[B]` tokens and prompt tokens).
    owner: Vec<Option<usize>>,
    /// Pre-mask `(h, r, t)` tokens of each serialized triple.
    elements: Vec<[TokenId; 3]>,
    pub segments: Vec<Segment>,
    pub matrix: Option<BinaryMatrix>,
    pub mask_records: Vec<MaskRecord>,
    /// Positions whose embedding comes from an external feature vector.
    pub injected: Vec<(usize, Vec<f64>)>,
}

impl TripleSequence {
    /// `[B] h₁ r₁ t₁ [S] h₂ r₂ t₂ [S] …`
    pub fn serialize(sg: &SubGraph, vocab: &Vocab) -> Result<Self> {
        if sg.is_empty() {
            return Err(Error::Sequence("cannot serialize an empty sub-graph".into()));
        }
        let n = 1 + 4 * sg.len();
        let mut tokens = Vec::with_capacity(n);
        let mut owner = Vec::with_capacity(n);
        let mut elements = Vec::with_capacity(sg.len());
        tokens.push(vocab.special(Special::Begin));
        owner.push(None);
        for (p, t) in sg.triples.iter().enumerate() {
            let el = [vocab.entity(t.head), vocab.relation(t.relation), vocab.entity(t.tail)];
            tokens.extend_from_slice(&el);
            tokens.push(vocab.special(Special::Sep));
            owner.extend([Some(p); 4]);
            elements.push(el);
        }
        Ok(Self {
            tokens,
            owner,
            elements,
            segments: vec![Segment {
                start: 0,
                end: n,
                kind: SegmentKind::Graph,
            }],
            matrix: None,
            mask_records: Vec::new(),
            injected: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_triples(&self) -> usize {
        self.elements.len()
    }

    /// Pre-mask `(h, r, t)` tokens of the `p`-th triple.
    pub fn triple_elements(&self, p: usize) -> [TokenId; 3] {
        self.elements[p]
    }

    pub fn owner(&self, position: usize) -> Option<usize> {
        self.owner[position]
    }

    pub fn is_graph_only(&self) -> bool {
        self.segments.iter().all(|s| s.kind == SegmentKind::Graph)
    }

    fn segment_of(&self, pos: usize) -> usize {
        self.segments
            .iter()
            .position(|s| pos >= s.start && pos < s.end)
            .expect("every position belongs to a segment")
    }

    pub fn matrix(&self) -> Result<&BinaryMatrix> {
        self.matrix
            .as_ref()
            .ok_or_else(|| Error::Sequence("neighbourship matrix not built".into()))
    }

    /// Fills the neighbourship matrix: a segment's leading `[B]` sees its whole
    /// segment, and two other positions see each other iff their triples
    /// share an element.
    pub fn build_matrix(&mut self) -> Result<()> {
        if !self.is_graph_only() {
            return Err(Error::Sequence("build_matrix expects a graph-only sequence".into()));
        }
        let n = self.len();
        let k = self.elements.len();
        let mut share = vec![false; k * k];
        for a in 0..k {
            for b in a..k {
                let s = self.elements[a].iter().any(|x| self.elements[b].contains(x));
                share[a * k + b] = s;
                share[b * k + a] = s;
            }
        }
        let mut m = BinaryMatrix::zeros(n);
        for seg in &self.segments {
            for j in seg.start..seg.end {
                m.set(seg.start, j, true);
                m.set(j, seg.start, true);
            }
        }
        for i in 0..n {
            let Some(a) = self.owner[i] else { continue };
            for j in 0..n {
                if let Some(b) = self.owner[j] {
                    if share[a * k + b] {
                        m.set(i, j, true);
                    }
                }
            }
        }
        self.matrix = Some(m);
        Ok(())
    }

    /// Masks heads/tails (entity) or relations of `⌈rate·k′⌉` random triples.
    /// The matrix is built from pre-mask elements first if still missing.
    pub fn apply_mask<R: Rng + ?Sized>(
        &mut self,
        kind: MaskKind,
        rate: f64,
        vocab: &Vocab,
        rng: &mut R,
    ) -> Result<()> {
        if !(rate > 0.0 && rate < 1.0) {
            return Err(Error::Sequence(format!("mask rate {rate} outside (0, 1)")));
        }
        if !self.is_graph_only() {
            return Err(Error::Sequence("masking expects a graph-only sequence".into()));
        }
        if self.matrix.is_none() {
            self.build_matrix()?;
        }
        let k = self.n_triples();
        // the epsilon keeps e.g. 0.15·20 from rounding up to 4
        let count = ((rate * k as f64) - 1e-9).ceil().max(1.0) as usize;
        let count = count.min(k);
        let mask = vocab.special(Special::Mask);
        let mut picked: Vec<usize> = index::sample(rng, k, count).into_vec();
        picked.sort_unstable();
        for p in picked {
            let slot = match kind {
                MaskKind::Relation => 1,
                MaskKind::Entity => {
                    if rng.gen_bool(0.5) {
                        0
                    } else {
                        2
                    }
                }
            };
            let position = self.triple_position(p) + slot;
            if self.tokens[position] == mask {
                continue;
            }
            self.mask_records.push(MaskRecord {
                position,
                original: self.tokens[position],
                kind,
            });
            self.tokens[position] = mask;
        }
        Ok(())
    }

    /// Position of the head token of triple `p`.
    pub fn triple_position(&self, p: usize) -> usize {
        self.owner
            .iter()
            .position(|o| *o == Some(p))
            .expect("triple index in range")
    }

    /// Two graph sequences side by side, each keeping its own `[B]`.
    pub fn concat_pair(left: &TripleSequence, right: &TripleSequence) -> Result<Self> {
        if !left.is_graph_only() || !right.is_graph_only() {
            return Err(Error::Sequence("concatenation expects graph-only sequences".into()));
        }
        let offset = left.len();
        let tri_offset = left.elements.len();
        let mut out = left.clone();
        out.tokens.extend_from_slice(&right.tokens);
        out.owner
            .extend(right.owner.iter().map(|o| o.map(|p| p + tri_offset)));
        out.elements.extend_from_slice(&right.elements);
        out.segments.extend(right.segments.iter().map(|s| Segment {
            start: s.start + offset,
            end: s.end + offset,
            kind: s.kind,
        }));
        out.mask_records
            .extend(right.mask_records.iter().map(|r| MaskRecord {
                position: r.position + offset,
                ..*r
            }));
        out.injected
            .extend(right.injected.iter().map(|(p, v)| (p + offset, v.clone())));
        out.build_matrix()?;
        Ok(out)
    }

    /// Appends a four-token task prompt and extends the matrix.
    ///
    /// The prompt block is fully connected and the first `[B]` keeps its
    /// global row and column. Prompt/graph visibility depends on the task:
    /// triple classification relates the prompt to triples sharing its
    /// `(h, r, t)`; zero-shot relates it one way (prompt attends triples that
    /// contain the class entity, graph never attends the prompt); question
    /// answering relates it both ways to triples containing a keyword.
    pub fn with_prompt(
        &self,
        task: TaskKind,
        prompt: [TokenId; 4],
        keywords: &BTreeSet<TokenId>,
        vocab: &Vocab,
    ) -> Result<Self> {
        if !self.is_graph_only() {
            return Err(Error::Sequence("prompt must follow a graph-only sequence".into()));
        }
        let base = self.matrix()?;
        let kinds: Vec<TokenKind> = prompt
            .iter()
            .map(|&t| vocab.kind(t))
            .collect::<Result<_>>()?;
        let task_tok = TokenKind::Special(Special::Task);
        let mask_tok = TokenKind::Special(Special::Mask);
        let shape_ok = kinds[0] == task_tok
            && match task {
                TaskKind::TripleClassification => {
                    matches!(kinds[1], TokenKind::Entity(_))
                        && matches!(kinds[2], TokenKind::Relation(_))
                        && matches!(kinds[3], TokenKind::Entity(_))
                }
                TaskKind::ZeroShot => {
                    matches!(kinds[1], TokenKind::Entity(_))
                        && kinds[2] == mask_tok
                        && matches!(kinds[3], TokenKind::Dynamic(_))
                }
                TaskKind::QuestionAnswering => {
                    kinds[1] == mask_tok
                        && kinds[2] == mask_tok
                        && matches!(kinds[3], TokenKind::Dynamic(_))
                }
            };
        if !shape_ok {
            return Err(Error::Sequence(format!("prompt {prompt:?} does not fit task {task:?}")));
        }
        let keys: BTreeSet<TokenId> = match task {
            TaskKind::TripleClassification => prompt[1..].iter().copied().collect(),
            TaskKind::ZeroShot => [prompt[1]].into(),
            TaskKind::QuestionAnswering => keywords.clone(),
        };
        let (prompt_sees_graph, graph_sees_prompt) = match task {
            TaskKind::ZeroShot => (true, false),
            _ => (true, true),
        };

        let n0 = self.len();
        let n = n0 + 4;
        let mut m = base.grown(n);
        let head = self.segments[0].start;
        for p in n0..n {
            for q in n0..n {
                m.set(p, q, true);
            }
            m.set(head, p, true);
            m.set(p, head, true);
        }
        for i in 0..n0 {
            let Some(a) = self.owner[i] else { continue };
            if self.elements[a].iter().any(|x| keys.contains(x)) {
                for p in n0..n {
                    if prompt_sees_graph {
                        m.set(p, i, true);
                    }
                    if graph_sees_prompt {
                        m.set(i, p, true);
                    }
                }
            }
        }

        let mut out = self.clone();
        out.tokens.extend_from_slice(&prompt);
        out.owner.extend([None; 4]);
        out.segments.push(Segment {
            start: n0,
            end: n,
            kind: SegmentKind::Prompt,
        });
        out.matrix = Some(m);
        Ok(out)
    }

    /// Positions holding token `t`.
    pub fn positions_of(&self, t: TokenId) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, &x)| x == t)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn prompt_segment(&self) -> Option<Segment> {
        self.segments
            .iter()
            .copied()
            .find(|s| s.kind == SegmentKind::Prompt)
    }

    /// Replaces the matrix with all ones (the no-matrix ablation).
    pub fn clear_matrix(&mut self) {
        self.matrix = Some(BinaryMatrix::ones(self.len()));
    }

    /// Token labels followed by the 0/1 grid, one row per line.
    pub fn dump_grid(&self, vocab: &Vocab, g: Option<&KnowledgeGraph>) -> String {
        let mut out = String::new();
        let labels: Vec<String> = self.tokens.iter().map(|&t| vocab.label(t, g)).collect();
        for (i, l) in labels.iter().enumerate() {
            let seg = self.segment_of(i);
            let _ = writeln!(out, "{i}\t{l}\tsegment={seg}");
        }
        if let Some(m) = &self.matrix {
            out.push('\n');
            for i in 0..m.size() {
                let row: String = (0..m.size())
                    .map(|j| if m.get(i, j) { '1' } else { '0' })
                    .collect();
                let _ = writeln!(out, "{row}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Triple;
    use proptest::prelude::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(triples: &[(&str, &str, &str)]) -> (KnowledgeGraph, Vocab, SubGraph) {
        let g = KnowledgeGraph::from_labeled(triples.iter().copied());
        let v = Vocab::for_graph(&g);
        let sg = SubGraph {
            center: EntityId(0),
            triples: g.triples().to_vec(),
        };
        (g, v, sg)
    }

    /// Recomputes every entry from the literal 1-indexed formulas:
    /// `M_ij = 1` if `i = 1` or `j = 1`, else iff `trp(i) ∩ trp(j) ≠ ∅`
    /// with `trp(n)` the elements of triple `⌊(n−2)/4⌋+1`.
    fn oracle(sg: &SubGraph, v: &Vocab) -> BinaryMatrix {
        let n = 1 + 4 * sg.len();
        let trp = |pos1: usize| -> BTreeSet<TokenId> {
            let t = sg.triples[(pos1 - 2) / 4];
            [v.entity(t.head), v.relation(t.relation), v.entity(t.tail)].into()
        };
        let mut m = BinaryMatrix::zeros(n);
        for i in 1..=n {
            for j in 1..=n {
                let one = i == 1 || j == 1 || !trp(i).is_disjoint(&trp(j));
                m.set(i - 1, j - 1, one);
            }
        }
        m
    }

    #[test]
    fn serialize_layout() {
        let (_, v, sg) = setup(&[("a", "r", "b")]);
        let s = TripleSequence::serialize(&sg, &v).unwrap();
        let b = v.special(Special::Begin);
        let sep = v.special(Special::Sep);
        assert_eq!(
            s.tokens,
            vec![b, v.entity(EntityId(0)), v.relation(RelationId(0)), v.entity(EntityId(1)), sep]
        );
        let (_, v, sg) = setup(&[("a", "r", "b"), ("c", "r", "d")]);
        assert_eq!(TripleSequence::serialize(&sg, &v).unwrap().len(), 9);
        let empty = SubGraph {
            center: EntityId(0),
            triples: vec![],
        };
        assert!(TripleSequence::serialize(&empty, &v).is_err());
    }

    #[test]
    fn serialize_full_width() {
        let mut g = KnowledgeGraph::new();
        for i in 0..126 {
            g.add_labeled("hub", "r", &format!("x{i}"));
        }
        let v = Vocab::for_graph(&g);
        let sg = SubGraph {
            center: EntityId(0),
            triples: g.triples().to_vec(),
        };
        let s = TripleSequence::serialize(&sg, &v).unwrap();
        assert_eq!(s.len(), 505);
        for p in 0..126 {
            assert_eq!(s.tokens[4 + 4 * p], v.special(Special::Sep));
        }
    }

    #[test]
    fn single_triple_matrix_is_full() {
        let (_, v, sg) = setup(&[("a", "r", "b")]);
        let mut s = TripleSequence::serialize(&sg, &v).unwrap();
        s.build_matrix().unwrap();
        assert_eq!(s.matrix().unwrap(), &BinaryMatrix::ones(5));
    }

    #[test]
    fn disjoint_triples_are_blocked() {
        let (_, v, sg) = setup(&[("a", "r1", "b"), ("c", "r2", "d")]);
        let mut s = TripleSequence::serialize(&sg, &v).unwrap();
        s.build_matrix().unwrap();
        let m = s.matrix().unwrap();
        for i in 0..9 {
            for j in 0..9 {
                let expect = i == 0 || j == 0 || ((i - 1) / 4 == (j - 1) / 4);
                assert_eq!(m.get(i, j), expect, "({i},{j})");
            }
        }
    }

    #[test]
    fn mask_counts_and_records() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, v, sg) = setup(&[("a", "r", "b")]);
        let mut s = TripleSequence::serialize(&sg, &v).unwrap();
        s.apply_mask(MaskKind::Relation, 0.15, &v, &mut rng).unwrap();
        let m = v.special(Special::Mask);
        assert_eq!(s.tokens[2], m);
        assert_eq!(
            s.mask_records,
            vec![MaskRecord {
                position: 2,
                original: v.relation(RelationId(0)),
                kind: MaskKind::Relation
            }]
        );

        let mut g = KnowledgeGraph::new();
        for i in 0..20 {
            g.add_labeled(&format!("h{i}"), "r", &format!("t{i}"));
        }
        let v = Vocab::for_graph(&g);
        let sg = SubGraph {
            center: EntityId(0),
            triples: g.triples().to_vec(),
        };
        let mut s = TripleSequence::serialize(&sg, &v).unwrap();
        s.apply_mask(MaskKind::Entity, 0.15, &v, &mut rng).unwrap();
        assert_eq!(s.mask_records.len(), 3);
        for r in &s.mask_records {
            assert_eq!(s.tokens[r.position], m);
            assert!(matches!(v.kind(r.original).unwrap(), TokenKind::Entity(_)));
        }
        assert!(s.apply_mask(MaskKind::Entity, 1.0, &v, &mut rng).is_err());
    }

    #[test]
    fn masking_keeps_matrix() {
        let (_, v, sg) = setup(&[("a", "r", "b"), ("b", "s", "c"), ("d", "s", "e")]);
        let mut s = TripleSequence::serialize(&sg, &v).unwrap();
        s.build_matrix().unwrap();
        let before = s.matrix.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        s.apply_mask(MaskKind::Relation, 0.9, &v, &mut rng).unwrap();
        assert_eq!(s.matrix, before);
    }

    #[test]
    fn pair_concatenation() {
        let (_, v, _) = setup(&[("a", "r1", "b"), ("c", "r2", "d"), ("a", "r3", "e")]);
        let g = KnowledgeGraph::from_labeled([("a", "r1", "b"), ("c", "r2", "d"), ("a", "r3", "e")]);
        let left = SubGraph {
            center: EntityId(0),
            triples: vec![g.triple(0)],
        };
        let right = SubGraph {
            center: EntityId(2),
            triples: vec![g.triple(1)],
        };
        let mut l = TripleSequence::serialize(&left, &v).unwrap();
        let mut r = TripleSequence::serialize(&right, &v).unwrap();
        l.build_matrix().unwrap();
        r.build_matrix().unwrap();
        let pair = TripleSequence::concat_pair(&l, &r).unwrap();
        assert_eq!(pair.len(), 10);
        let seg: Vec<(usize, usize)> = pair.segments.iter().map(|s| (s.start, s.end)).collect();
        assert_eq!(seg, vec![(0, 5), (5, 10)]);
        let m = pair.matrix().unwrap();
        for i in 0..5 {
            for j in 5..10 {
                assert!(!m.get(i, j) && !m.get(j, i));
            }
        }
        assert!(m.get(5, 9) && m.get(9, 5));

        // sharing entity `a` across segments links exactly those triples
        let right = SubGraph {
            center: EntityId(0),
            triples: vec![g.triple(2), g.triple(1)],
        };
        let mut r = TripleSequence::serialize(&right, &v).unwrap();
        r.build_matrix().unwrap();
        let pair = TripleSequence::concat_pair(&l, &r).unwrap();
        let m = pair.matrix().unwrap();
        for i in 1..5 {
            for j in 5..pair.len() {
                let expect = (6..10).contains(&j);
                assert_eq!(m.get(i, j), expect, "({i},{j})");
                assert_eq!(m.get(j, i), expect);
            }
        }
        assert!(!m.get(0, 5) && !m.get(0, 6));
        assert!(m.is_symmetric());
    }

    fn prompted(task: TaskKind) -> (Vocab, TripleSequence, usize) {
        let g = KnowledgeGraph::from_labeled([("a", "r", "b"), ("c", "r2", "d"), ("a", "r2", "c")]);
        let v = Vocab::for_graph(&g);
        let sg = SubGraph {
            center: EntityId(0),
            triples: vec![g.triple(0), g.triple(1)],
        };
        let mut s = TripleSequence::serialize(&sg, &v).unwrap();
        s.build_matrix().unwrap();
        let e = |l: &str| v.entity(g.entity_id(l).unwrap());
        let t = v.special(Special::Task);
        let m = v.special(Special::Mask);
        let prompt = match task {
            TaskKind::TripleClassification => [t, e("a"), v.relation(RelationId(0)), e("b")],
            TaskKind::ZeroShot => [t, e("a"), m, v.dynamic_token(IMAGE_TOKEN).unwrap()],
            TaskKind::QuestionAnswering => [t, m, m, v.dynamic_token(QUESTION_TOKEN).unwrap()],
        };
        let keys: BTreeSet<TokenId> = [e("d")].into();
        let n0 = s.len();
        (v.clone(), s.with_prompt(task, prompt, &keys, &v).unwrap(), n0)
    }

    #[test]
    fn tc_prompt_relates_sharing_triples() {
        let (_, s, n0) = prompted(TaskKind::TripleClassification);
        let m = s.matrix().unwrap();
        for p in n0..n0 + 4 {
            for i in 1..5 {
                assert!(m.get(p, i) && m.get(i, p));
            }
            for i in 5..9 {
                assert!(!m.get(p, i) && !m.get(i, p));
            }
            assert!(m.get(0, p) && m.get(p, 0));
        }
        assert!(m.is_symmetric());
    }

    #[test]
    fn zsl_prompt_is_one_way() {
        let (_, s, n0) = prompted(TaskKind::ZeroShot);
        let m = s.matrix().unwrap();
        for p in n0..n0 + 4 {
            for i in 1..n0 {
                assert!(!m.get(i, p), "graph row {i} must not see prompt column {p}");
            }
            for i in 1..5 {
                assert!(m.get(p, i));
            }
            for i in 5..9 {
                assert!(!m.get(p, i));
            }
        }
        assert!(!m.is_symmetric());
        for i in 0..s.len() {
            for j in 0..s.len() {
                if m.get(i, j) != m.get(j, i) {
                    assert!(j >= n0 || i >= n0);
                    assert!(i < n0 || j < n0);
                }
            }
        }
    }

    #[test]
    fn qa_prompt_uses_keywords() {
        let (_, s, n0) = prompted(TaskKind::QuestionAnswering);
        let m = s.matrix().unwrap();
        for p in n0..n0 + 4 {
            for i in 1..5 {
                assert!(!m.get(p, i));
            }
            for i in 5..9 {
                assert!(m.get(p, i) && m.get(i, p));
            }
        }
        // no keywords: only [B] and the prompt block are visible
        let g = KnowledgeGraph::from_labeled([("a", "r", "b")]);
        let v = Vocab::for_graph(&g);
        let sg = SubGraph {
            center: EntityId(0),
            triples: g.triples().to_vec(),
        };
        let mut s = TripleSequence::serialize(&sg, &v).unwrap();
        s.build_matrix().unwrap();
        let t = v.special(Special::Task);
        let mk = v.special(Special::Mask);
        let q = v.dynamic_token(QUESTION_TOKEN).unwrap();
        let s = s
            .with_prompt(TaskKind::QuestionAnswering, [t, mk, mk, q], &BTreeSet::new(), &v)
            .unwrap();
        let m = s.matrix().unwrap();
        for p in 5..9 {
            for i in 1..5 {
                assert!(!m.get(p, i) && !m.get(i, p));
            }
        }
    }

    #[test]
    fn prompt_shape_is_checked() {
        let (v, _, _) = prompted(TaskKind::TripleClassification);
        let t = v.special(Special::Task);
        let m = v.special(Special::Mask);
        let g = TripleSequence::serialize(
            &SubGraph {
                center: EntityId(0),
                triples: vec![Triple::new(EntityId(0), RelationId(0), EntityId(1))],
            },
            &v,
        )
        .map(|mut s| {
            s.build_matrix().unwrap();
            s
        })
        .unwrap();
        assert!(g
            .with_prompt(TaskKind::TripleClassification, [t, m, m, m], &BTreeSet::new(), &v)
            .is_err());
    }

    #[test]
    fn vocab_ranges_are_disjoint() {
        let mut v = Vocab::new(3, 2);
        let q = v.register("[Q]");
        assert_eq!(v.register("[Q]"), q);
        let mut seen = BTreeSet::new();
        for i in 0..v.len() as u32 {
            let kind = v.kind(TokenId(i)).unwrap();
            let back = match kind {
                TokenKind::Special(s) => v.special(s),
                TokenKind::Entity(e) => v.entity(e),
                TokenKind::Relation(r) => v.relation(r),
                TokenKind::Dynamic(_) => TokenId(i),
            };
            assert_eq!(back, TokenId(i));
            assert!(seen.insert(format!("{kind:?}")));
        }
        assert!(v.kind(TokenId(v.len() as u32)).is_err());
    }

    #[test]
    fn grid_dump_has_rows() {
        let (g, v, sg) = setup(&[("a", "r", "b")]);
        let mut s = TripleSequence::serialize(&sg, &v).unwrap();
        s.build_matrix().unwrap();
        let dump = s.dump_grid(&v, Some(&g));
        assert!(dump.contains("1\ta\tsegment=0"));
        assert!(dump.contains("\n11111\n"));
    }

    fn arb_subgraph() -> impl proptest::strategy::Strategy<Value = (Vocab, SubGraph)> {
        proptest::collection::btree_set((0u32..8, 0u32..3, 0u32..8), 1..=10).prop_map(|set| {
            let v = Vocab::new(8, 3);
            let triples = set
                .into_iter()
                .map(|(h, r, t)| Triple::new(EntityId(h), RelationId(r), EntityId(t)))
                .collect();
            (
                v,
                SubGraph {
                    center: EntityId(0),
                    triples,
                },
            )
        })
    }

    proptest! {
        #[test]
        fn matrix_matches_trp_oracle((v, sg) in arb_subgraph()) {
            let mut s = TripleSequence::serialize(&sg, &v).unwrap();
            s.build_matrix().unwrap();
            let m = s.matrix().unwrap();
            prop_assert_eq!(m, &oracle(&sg, &v));
            prop_assert!(m.is_symmetric());
            prop_assert!((0..s.len()).all(|i| m.get(i, i)));
        }

        #[test]
        fn trp_index_is_total(k in 1usize..200) {
            for n in 2..=(1 + 4 * k) {
                let p = (n - 2) / 4 + 1;
                prop_assert!((1..=k).contains(&p));
            }
        }

        #[test]
        fn sep_every_fourth((v, sg) in arb_subgraph()) {
            let s = TripleSequence::serialize(&sg, &v).unwrap();
            prop_assert_eq!(s.tokens[0], v.special(Special::Begin));
            for p in 0..sg.len() {
                prop_assert_eq!(s.tokens[4 + 4 * p], v.special(Special::Sep));
            }
        }
    }
}
