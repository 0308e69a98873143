use crate::error::{Error, Result};

use super::{KnowledgeGraph, MultiSourceCollection, Triplet, Vocab};

/// Joint graph produced by collapsing aligned entities into single nodes.
#[derive(Clone, Debug)]
pub struct MergedGraph {
    pub kg: KnowledgeGraph,
    /// `class_of[g][e]` is the merged node of entity `e` of source graph `g`.
    pub class_of: Vec<Vec<u32>>,
    /// `(source graph, entity)` members of each merged node.
    pub members: Vec<Vec<(usize, u32)>>,
    /// Sum of source triplet counts before class-level deduplication.
    pub input_triplets: usize,
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Merges every graph of the collection into one, identifying entities that
/// are (transitively) aligned. Relations are namespaced as `graph:relation`
/// and merged nodes are named after their first member, `graph:entity`.
pub fn merge_aligned(collection: &MultiSourceCollection) -> Result<MergedGraph> {
    for (l, r, a) in &collection.alignments {
        let (lk, rk) = (
            collection.kgs.get(*l).ok_or_else(|| Error::data("alignment references unknown graph"))?,
            collection.kgs.get(*r).ok_or_else(|| Error::data("alignment references unknown graph"))?,
        );
        a.validate(lk, rk)?;
    }
    for kg in &collection.kgs {
        if kg.name().contains(':') {
            return Err(Error::data(format!(
                "graph name {:?} may not contain ':' (used as namespace separator)",
                kg.name()
            )));
        }
    }

    let mut offsets = Vec::with_capacity(collection.kgs.len());
    let mut total = 0usize;
    for kg in &collection.kgs {
        offsets.push(total);
        total += kg.num_entities();
    }
    let mut uf = UnionFind::new(total);
    for (l, r, a) in &collection.alignments {
        for &(x, y) in a.pairs() {
            uf.union(offsets[*l] + x as usize, offsets[*r] + y as usize);
        }
    }

    // Classes are numbered by first appearance in collection order.
    let mut class_of_root = vec![u32::MAX; total];
    let mut members: Vec<Vec<(usize, u32)>> = Vec::new();
    let mut entities = Vocab::new();
    let mut class_of = Vec::with_capacity(collection.kgs.len());
    for (g, kg) in collection.kgs.iter().enumerate() {
        let mut map = Vec::with_capacity(kg.num_entities());
        for e in 0..kg.num_entities() as u32 {
            let root = uf.find(offsets[g] + e as usize);
            if class_of_root[root] == u32::MAX {
                let id = entities.insert(&format!("{}:{}", kg.name(), kg.entity_name(e)))?;
                class_of_root[root] = id;
                members.push(Vec::new());
            }
            let c = class_of_root[root];
            members[c as usize].push((g, e));
            map.push(c);
        }
        class_of.push(map);
    }

    let mut relations = Vocab::new();
    let mut triplets = Vec::new();
    let mut input_triplets = 0;
    for (g, kg) in collection.kgs.iter().enumerate() {
        let rel_map: Vec<u32> = (0..kg.num_relations() as u32)
            .map(|r| relations.insert(&format!("{}:{}", kg.name(), kg.relation_name(r))))
            .collect::<Result<_>>()?;
        input_triplets += kg.len();
        for t in kg.triplets() {
            triplets.push(Triplet::new(
                class_of[g][t.subject as usize],
                rel_map[t.relation as usize],
                class_of[g][t.object as usize],
            ));
        }
    }
    let name = collection
        .kgs
        .iter()
        .map(|k| k.name())
        .collect::<Vec<_>>()
        .join("+");
    let kg = KnowledgeGraph::from_parts(name, entities, relations, triplets)?;
    Ok(MergedGraph {
        kg,
        class_of,
        members,
        input_triplets,
    })
}
