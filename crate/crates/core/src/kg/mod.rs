//! Knowledge graphs, entity alignment and dataset splits.
//!
//! Every downstream module works on dense `u32` indices; names only exist at
//! the boundary (file loading and reports).

mod io;
mod leakage;
mod merge;

use std::collections::HashMap;

use indexmap::IndexSet;

use crate::error::{Error, Result};

pub use io::{
    load_alignment, load_kg_dir, load_split, load_triplets, parse_triplets, save_kg_dir,
    write_alignment, write_triplets, KG_FORMAT_VERSION,
};
pub use leakage::{relation_pairs_from_alignment, remove_leakage, LeakageReport};
pub use merge::{merge_aligned, MergedGraph};

/// Suffix appended to a relation name to form its reverse relation.
pub const REVERSE_SUFFIX: &str = "[reverse]";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub subject: u32,
    pub relation: u32,
    pub object: u32,
}

impl Triplet {
    pub const fn new(subject: u32, relation: u32, object: u32) -> Self {
        Triplet {
            subject,
            relation,
            object,
        }
    }
}

/// Ordered string vocabulary with dense indices in first-insertion order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocab::new();
        for name in names {
            let name = name.into();
            if vocab.get(&name).is_some() {
                return Err(Error::data(format!("duplicate vocabulary entry {name:?}")));
            }
            vocab.insert(&name)?;
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Returns the index of `name`, inserting it at the end if absent.
    pub fn insert(&mut self, name: &str) -> Result<u32> {
        if let Some(id) = self.index.get(name) {
            return Ok(*id);
        }
        if name.is_empty() || name.contains(['\t', '\n', '\r']) {
            return Err(Error::data(format!("invalid identifier {name:?}")));
        }
        let id = u32::try_from(self.names.len())
            .map_err(|_| Error::data("vocabulary exceeds 32-bit index space"))?;
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        Ok(id)
    }
}

/// A named knowledge graph: entity and relation vocabularies plus a
/// deduplicated triplet set kept in insertion order.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    name: String,
    entities: Vocab,
    relations: Vocab,
    /// For each relation, its paired reverse relation once the graph is
    /// reverse-closed.
    reverse_of: Vec<Option<u32>>,
    /// Marks relations that were introduced by reverse closure.
    is_reverse: Vec<bool>,
    triplets: IndexSet<Triplet>,
    reverse_closed: bool,
}

impl PartialEq for KnowledgeGraph {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.entities == other.entities
            && self.relations == other.relations
            && self.reverse_of == other.reverse_of
            && self.is_reverse == other.is_reverse
            && self.reverse_closed == other.reverse_closed
            && self.triplets.len() == other.triplets.len()
            && self.triplets.iter().eq(other.triplets.iter())
    }
}

impl KnowledgeGraph {
    pub fn new(name: impl Into<String>) -> Self {
        KnowledgeGraph {
            name: name.into(),
            entities: Vocab::new(),
            relations: Vocab::new(),
            reverse_of: Vec::new(),
            is_reverse: Vec::new(),
            triplets: IndexSet::new(),
            reverse_closed: false,
        }
    }

    /// Builds a graph from existing vocabularies and triplets. Indices are
    /// checked against the vocabularies; duplicates collapse.
    pub fn from_parts(
        name: impl Into<String>,
        entities: Vocab,
        relations: Vocab,
        triplets: impl IntoIterator<Item = Triplet>,
    ) -> Result<Self> {
        let n_rel = relations.len();
        let mut kg = KnowledgeGraph {
            name: name.into(),
            entities,
            relations,
            reverse_of: vec![None; n_rel],
            is_reverse: vec![false; n_rel],
            triplets: IndexSet::new(),
            reverse_closed: false,
        };
        for t in triplets {
            kg.insert(t)?;
        }
        Ok(kg)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn reverse_closed(&self) -> bool {
        self.reverse_closed
    }

    pub fn triplets(&self) -> impl ExactSizeIterator<Item = &Triplet> + '_ {
        self.triplets.iter()
    }

    pub fn triplet(&self, i: usize) -> Triplet {
        self.triplets[i]
    }

    pub fn contains(&self, t: &Triplet) -> bool {
        self.triplets.contains(t)
    }

    pub fn reverse_relation(&self, r: u32) -> Option<u32> {
        self.reverse_of.get(r as usize).copied().flatten()
    }

    pub fn is_reverse_relation(&self, r: u32) -> bool {
        self.is_reverse.get(r as usize).copied().unwrap_or(false)
    }

    pub fn entity_name(&self, id: u32) -> &str {
        self.entities.name(id)
    }

    pub fn relation_name(&self, id: u32) -> &str {
        self.relations.name(id)
    }

    pub fn add_entity(&mut self, name: &str) -> Result<u32> {
        self.entities.insert(name)
    }

    pub fn add_relation(&mut self, name: &str) -> Result<u32> {
        let before = self.relations.len();
        let id = self.relations.insert(name)?;
        if self.relations.len() > before {
            self.reverse_of.push(None);
            self.is_reverse.push(false);
        }
        Ok(id)
    }

    /// Adds a triplet by names, growing the vocabularies as needed. Returns
    /// the triplet and whether it was new.
    pub fn add_named(&mut self, s: &str, r: &str, o: &str) -> Result<(Triplet, bool)> {
        let subject = self.add_entity(s)?;
        let relation = self.add_relation(r)?;
        let object = self.add_entity(o)?;
        let t = Triplet::new(subject, relation, object);
        Ok((t, self.triplets.insert(t)))
    }

    /// Inserts an index triplet. Returns whether it was new.
    pub fn insert(&mut self, t: Triplet) -> Result<bool> {
        if t.subject as usize >= self.entities.len()
            || t.object as usize >= self.entities.len()
            || t.relation as usize >= self.relations.len()
        {
            return Err(Error::data(format!(
                "triplet {t:?} out of vocabulary bounds in {}",
                self.name
            )));
        }
        Ok(self.triplets.insert(t))
    }

    /// Copy of this graph with the same vocabularies but only the triplets
    /// accepted by `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(&Triplet) -> bool) -> KnowledgeGraph {
        KnowledgeGraph {
            triplets: self.triplets.iter().copied().filter(|t| keep(t)).collect(),
            ..self.clone()
        }
    }

    /// Appends `r[reverse]` for every relation and `(o, r[reverse], s)` for
    /// every triplet.
    pub fn add_reverse_triplets(&self) -> Result<KnowledgeGraph> {
        if self.reverse_closed {
            return Err(Error::data(format!(
                "knowledge graph {} is already reverse-closed",
                self.name
            )));
        }
        let mut out = self.clone();
        let n = self.relations.len();
        for r in 0..n {
            let name = format!("{}{}", self.relations.name(r as u32), REVERSE_SUFFIX);
            if out.relations.get(&name).is_some() {
                return Err(Error::data(format!(
                    "relation {name:?} already exists; cannot close {}",
                    self.name
                )));
            }
            let rev = out.add_relation(&name)?;
            out.reverse_of[r] = Some(rev);
            out.reverse_of[rev as usize] = Some(r as u32);
            out.is_reverse[rev as usize] = true;
        }
        for t in self.triplets.iter() {
            let rev = out.reverse_of[t.relation as usize].expect("paired above");
            out.triplets.insert(Triplet::new(t.object, rev, t.subject));
        }
        out.reverse_closed = true;
        Ok(out)
    }

    pub fn entity_frequencies(&self) -> FrequencyTable {
        let mut entity = vec![0u64; self.entities.len()];
        let mut relation = vec![0u64; self.relations.len()];
        for t in &self.triplets {
            entity[t.subject as usize] += 1;
            entity[t.object as usize] += 1;
            relation[t.relation as usize] += 1;
        }
        FrequencyTable { entity, relation }
    }

    /// Outgoing adjacency in compressed-row form.
    pub fn adjacency(&self) -> Adjacency {
        let n = self.entities.len();
        let mut offsets = vec![0usize; n + 1];
        for t in &self.triplets {
            offsets[t.subject as usize + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let mut cursor = offsets.clone();
        let mut edges = vec![(0u32, 0u32); self.triplets.len()];
        for t in &self.triplets {
            let slot = &mut cursor[t.subject as usize];
            edges[*slot] = (t.relation, t.object);
            *slot += 1;
        }
        Adjacency { offsets, edges }
    }

    /// Checks the structural invariants. Index bounds and deduplication are
    /// enforced at insertion; this re-verifies them plus the reverse-closure
    /// contract.
    pub fn validate(&self) -> Result<()> {
        for t in &self.triplets {
            if t.subject as usize >= self.entities.len()
                || t.object as usize >= self.entities.len()
                || t.relation as usize >= self.relations.len()
            {
                return Err(Error::data(format!("triplet {t:?} out of bounds")));
            }
        }
        if self.reverse_closed {
            for t in &self.triplets {
                let rev = self.reverse_of[t.relation as usize].ok_or_else(|| {
                    Error::data(format!(
                        "relation {} has no reverse",
                        self.relations.name(t.relation)
                    ))
                })?;
                if !self.triplets.contains(&Triplet::new(t.object, rev, t.subject)) {
                    return Err(Error::data(format!("missing reverse of {t:?}")));
                }
            }
            let adj = self.adjacency();
            let isolated: Vec<u32> = (0..self.entities.len() as u32)
                .filter(|e| adj.out_degree(*e) == 0)
                .collect();
            if let Some(e) = isolated.first() {
                return Err(Error::data(format!(
                    "entity {} has no outgoing triplet ({} isolated in total)",
                    self.entities.name(*e),
                    isolated.len()
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn set_reverse_pairs(&mut self, reverse_of: Vec<Option<u32>>, is_reverse: Vec<bool>, closed: bool) {
        self.reverse_of = reverse_of;
        self.is_reverse = is_reverse;
        self.reverse_closed = closed;
    }
}

/// Compressed outgoing-edge lists, `(relation, object)` per edge.
#[derive(Clone, Debug)]
pub struct Adjacency {
    offsets: Vec<usize>,
    edges: Vec<(u32, u32)>,
}

impl Adjacency {
    pub fn out_edges(&self, entity: u32) -> &[(u32, u32)] {
        let e = entity as usize;
        &self.edges[self.offsets[e]..self.offsets[e + 1]]
    }

    pub fn out_degree(&self, entity: u32) -> usize {
        let e = entity as usize;
        self.offsets[e + 1] - self.offsets[e]
    }
}

/// Occurrence counts of entities (subject or object slot) and relations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyTable {
    pub entity: Vec<u64>,
    pub relation: Vec<u64>,
}

/// Identical-entity pairs between a left and a right graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentSet {
    pub left_kg: String,
    pub right_kg: String,
    pairs: IndexSet<(u32, u32)>,
}

impl AlignmentSet {
    pub fn new(left_kg: impl Into<String>, right_kg: impl Into<String>) -> Self {
        AlignmentSet {
            left_kg: left_kg.into(),
            right_kg: right_kg.into(),
            pairs: IndexSet::new(),
        }
    }

    /// Builds an alignment and checks every pair against the two graphs.
    pub fn from_pairs(
        left: &KnowledgeGraph,
        right: &KnowledgeGraph,
        pairs: impl IntoIterator<Item = (u32, u32)>,
    ) -> Result<Self> {
        let mut a = AlignmentSet::new(left.name(), right.name());
        for p in pairs {
            a.pairs.insert(p);
        }
        a.validate(left, right)?;
        Ok(a)
    }

    pub fn insert(&mut self, left: u32, right: u32) -> bool {
        self.pairs.insert((left, right))
    }

    pub fn pairs(&self) -> impl ExactSizeIterator<Item = &(u32, u32)> + '_ {
        self.pairs.iter()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, left: u32, right: u32) -> bool {
        self.pairs.contains(&(left, right))
    }

    pub fn reversed(&self) -> AlignmentSet {
        AlignmentSet {
            left_kg: self.right_kg.clone(),
            right_kg: self.left_kg.clone(),
            pairs: self.pairs.iter().map(|&(l, r)| (r, l)).collect(),
        }
    }

    /// Left entity -> right counterparts, in pair order.
    pub fn left_map(&self) -> HashMap<u32, Vec<u32>> {
        let mut m: HashMap<u32, Vec<u32>> = HashMap::new();
        for &(l, r) in &self.pairs {
            m.entry(l).or_default().push(r);
        }
        m
    }

    pub fn right_map(&self) -> HashMap<u32, Vec<u32>> {
        self.reversed().left_map()
    }

    pub fn validate(&self, left: &KnowledgeGraph, right: &KnowledgeGraph) -> Result<()> {
        if left.name() != self.left_kg || right.name() != self.right_kg {
            return Err(Error::data(format!(
                "alignment {}<->{} applied to {}<->{}",
                self.left_kg,
                self.right_kg,
                left.name(),
                right.name()
            )));
        }
        for &(l, r) in &self.pairs {
            if l as usize >= left.num_entities() || r as usize >= right.num_entities() {
                return Err(Error::data(format!(
                    "alignment pair ({l}, {r}) references an unknown entity"
                )));
            }
        }
        Ok(())
    }
}

/// Several graphs linked pairwise by alignment sets.
#[derive(Clone, Debug, Default)]
pub struct MultiSourceCollection {
    pub kgs: Vec<KnowledgeGraph>,
    /// `(left graph index, right graph index, alignment)`.
    pub alignments: Vec<(usize, usize, AlignmentSet)>,
}

impl MultiSourceCollection {
    pub fn new(kgs: Vec<KnowledgeGraph>) -> Self {
        MultiSourceCollection {
            kgs,
            alignments: Vec::new(),
        }
    }

    pub fn add_alignment(&mut self, left: usize, right: usize, alignment: AlignmentSet) -> Result<()> {
        let (l, r) = (
            self.kgs.get(left).ok_or_else(|| Error::data("unknown left graph"))?,
            self.kgs.get(right).ok_or_else(|| Error::data("unknown right graph"))?,
        );
        alignment.validate(l, r)?;
        self.alignments.push((left, right, alignment));
        Ok(())
    }

    /// Checks every alignment and the connectivity requirement: each graph
    /// has a nonempty alignment with another graph. A lone graph passes only
    /// when `allow_single` is set.
    pub fn validate(&self, allow_single: bool) -> Result<()> {
        if self.kgs.is_empty() {
            return Err(Error::data("collection contains no knowledge graph"));
        }
        for (l, r, a) in &self.alignments {
            if l == r {
                return Err(Error::data("alignment must link two different graphs"));
            }
            a.validate(&self.kgs[*l], &self.kgs[*r])?;
        }
        if self.kgs.len() == 1 {
            if allow_single {
                return Ok(());
            }
            return Err(Error::data(format!(
                "multi-source collection requires every graph to be linked to another one; {} stands alone",
                self.kgs[0].name()
            )));
        }
        for (i, kg) in self.kgs.iter().enumerate() {
            let linked = self
                .alignments
                .iter()
                .any(|(l, r, a)| (*l == i || *r == i) && !a.is_empty());
            if !linked {
                return Err(Error::data(format!(
                    "graph {} has no nonempty alignment with another graph",
                    kg.name()
                )));
            }
        }
        Ok(())
    }
}

/// Train/valid/test triplets over one graph's vocabulary.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<Triplet>,
    pub valid: Vec<Triplet>,
    pub test: Vec<Triplet>,
}

impl DatasetSplit {
    /// Checks disjointness, that `train` is contained in `kg`, and that all
    /// indices fall inside its vocabularies.
    pub fn validate(&self, kg: &KnowledgeGraph) -> Result<()> {
        let mut seen: HashMap<Triplet, &'static str> = HashMap::new();
        for (part, ts) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            for t in ts {
                if t.subject as usize >= kg.num_entities()
                    || t.object as usize >= kg.num_entities()
                    || t.relation as usize >= kg.num_relations()
                {
                    return Err(Error::data(format!("{part} triplet {t:?} outside train vocabulary")));
                }
                if let Some(prev) = seen.insert(*t, part) {
                    if prev != part {
                        return Err(Error::data(format!("triplet {t:?} appears in both {prev} and {part}")));
                    }
                }
            }
        }
        if let Some(t) = self.train.iter().find(|t| !kg.contains(t)) {
            return Err(Error::data(format!("train triplet {t:?} missing from graph")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kg(triplets: &[(&str, &str, &str)]) -> KnowledgeGraph {
        let mut kg = KnowledgeGraph::new("K");
        for (s, r, o) in triplets {
            kg.add_named(s, r, o).unwrap();
        }
        kg
    }

    #[test]
    fn reverse_closure_single_triplet() {
        let closed = kg(&[("a", "r", "b")]).add_reverse_triplets().unwrap();
        assert_eq!(closed.num_relations(), 2);
        assert_eq!(closed.relation_name(1), "r[reverse]");
        assert!(closed.contains(&Triplet::new(1, 1, 0)));
        assert_eq!(closed.len(), 2);
        assert!(closed.reverse_closed());
        assert_eq!(closed.reverse_relation(0), Some(1));
        assert_eq!(closed.reverse_relation(1), Some(0));
        closed.validate().unwrap();
    }

    #[test]
    fn reverse_closure_self_loop() {
        let closed = kg(&[("a", "r", "a")]).add_reverse_triplets().unwrap();
        let ts: Vec<_> = closed.triplets().copied().collect();
        assert_eq!(ts, vec![Triplet::new(0, 0, 0), Triplet::new(0, 1, 0)]);
    }

    #[test]
    fn reverse_closure_doubles() {
        let g = kg(&[("a", "r", "b"), ("b", "s", "c"), ("c", "r", "a"), ("a", "s", "c")]);
        assert_eq!(g.add_reverse_triplets().unwrap().len(), 8);
    }

    #[test]
    fn reverse_closure_twice_is_an_error() {
        let closed = kg(&[("a", "r", "b")]).add_reverse_triplets().unwrap();
        assert!(matches!(closed.add_reverse_triplets(), Err(Error::Data(_))));
    }

    #[test]
    fn frequencies() {
        let g = kg(&[("a", "r", "b")]);
        assert_eq!(g.entity_frequencies().entity, vec![1, 1]);
        let g = kg(&[("a", "r", "b"), ("a", "r", "c")]);
        let f = g.entity_frequencies();
        assert_eq!(f.entity, vec![2, 1, 1]);
        assert_eq!(f.relation, vec![2]);
        let closed = kg(&[("a", "r", "b")]).add_reverse_triplets().unwrap();
        assert_eq!(closed.entity_frequencies().entity, vec![2, 2]);
        assert_eq!(closed.entity_frequencies().entity.iter().sum::<u64>(), 2 * closed.len() as u64);
    }

    #[test]
    fn duplicate_triplets_collapse() {
        let mut g = KnowledgeGraph::new("K");
        assert!(g.add_named("a", "r", "b").unwrap().1);
        assert!(!g.add_named("a", "r", "b").unwrap().1);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn rejects_out_of_bounds_triplet() {
        let mut g = kg(&[("a", "r", "b")]);
        assert!(g.insert(Triplet::new(0, 0, 7)).is_err());
    }

    #[test]
    fn collection_connectivity() {
        let a = kg(&[("a", "r", "b")]);
        let mut b = kg(&[("x", "s", "y")]);
        b.set_name("L");
        let single = MultiSourceCollection::new(vec![a.clone()]);
        assert!(single.validate(false).is_err());
        single.validate(true).unwrap();

        let mut two = MultiSourceCollection::new(vec![a.clone(), b.clone()]);
        assert!(two.validate(false).is_err());
        two.add_alignment(0, 1, AlignmentSet::from_pairs(&a, &b, [(0, 0)]).unwrap())
            .unwrap();
        two.validate(false).unwrap();
    }

    #[test]
    fn alignment_rejects_unknown_entity() {
        let a = kg(&[("a", "r", "b")]);
        let b = kg(&[("x", "s", "y")]);
        assert!(AlignmentSet::from_pairs(&a, &b, [(0, 9)]).is_err());
    }

    #[test]
    fn split_must_be_disjoint() {
        let g = kg(&[("a", "r", "b"), ("b", "r", "c")]);
        let split = DatasetSplit {
            train: vec![Triplet::new(0, 0, 1)],
            valid: vec![Triplet::new(0, 0, 1)],
            test: vec![],
        };
        assert!(split.validate(&g).is_err());
        let split = DatasetSplit {
            train: vec![Triplet::new(0, 0, 1)],
            valid: vec![Triplet::new(1, 0, 2)],
            test: vec![],
        };
        split.validate(&g).unwrap();
    }
}
