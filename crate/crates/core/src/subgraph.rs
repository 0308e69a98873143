//! Background triplets linked to a target graph, and their budgeted sample.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kg::{
    load_alignment, load_kg_dir, save_kg_dir, write_alignment, AlignmentSet, KnowledgeGraph, Triplet,
};
use crate::manifest::Manifest;

pub const SUBGRAPH_FORMAT: &str = "kgtransfer-subgraph";
pub const SUBGRAPH_VERSION: u32 = 1;

/// `full`: background triplets with at least one aligned endpoint; `core`:
/// those with both endpoints aligned. Both keep background order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LinkedSubgraph {
    pub full: Vec<Triplet>,
    pub core: Vec<Triplet>,
}

/// Scans `background` (reverse triplets skipped) against the background
/// side of `alignment`, whose pairs are `(background, target)`.
pub fn build_linked_subgraph(background: &KnowledgeGraph, alignment: &AlignmentSet) -> LinkedSubgraph {
    let aligned: HashSet<u32> = alignment.pairs().map(|&(b, _)| b).collect();
    let mut out = LinkedSubgraph::default();
    for t in background.triplets() {
        if background.is_reverse_relation(t.relation) {
            continue;
        }
        let (s, o) = (aligned.contains(&t.subject), aligned.contains(&t.object));
        if s || o {
            out.full.push(*t);
        }
        if s && o {
            out.core.push(*t);
        }
    }
    out
}

/// Entity frequencies within the core.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PopularityTable {
    pub entity: HashMap<u32, u64>,
}

impl PopularityTable {
    pub fn from_core(core: &[Triplet]) -> Self {
        let mut entity = HashMap::new();
        for t in core {
            *entity.entry(t.subject).or_insert(0) += 1;
            *entity.entry(t.object).or_insert(0) += 1;
        }
        PopularityTable { entity }
    }

    /// Subject frequency plus object frequency.
    pub fn triplet(&self, t: &Triplet) -> u64 {
        let f = |e| self.entity.get(&e).copied().unwrap_or(0);
        f(t.subject) + f(t.object)
    }
}

/// Budgeted sample of the linked subgraph. The core is preferred: a uniform
/// `budget`-subset of it when it is large enough, otherwise all of it plus a
/// popularity-weighted draw (without replacement, floor weight 1) from the
/// rest. The result keeps the order of `linked.full`.
pub fn sample_subgraph(linked: &LinkedSubgraph, budget: usize, seed: u64) -> Vec<Triplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if linked.core.len() >= budget {
        let mut picked = index::sample(&mut rng, linked.core.len(), budget).into_vec();
        picked.sort_unstable();
        return picked.into_iter().map(|i| linked.core[i]).collect();
    }
    let core: HashSet<Triplet> = linked.core.iter().copied().collect();
    let rest: Vec<Triplet> = linked.full.iter().filter(|t| !core.contains(t)).copied().collect();
    let shortfall = (budget - linked.core.len()).min(rest.len());
    let pop = PopularityTable::from_core(&linked.core);
    let chosen: HashSet<Triplet> = if shortfall == rest.len() {
        rest.iter().copied().collect()
    } else {
        let weight = |i: usize| pop.triplet(&rest[i]).max(1) as f64;
        index::sample_weighted(&mut rng, rest.len(), weight, shortfall)
            .expect("positive finite weights")
            .into_iter()
            .map(|i| rest[i])
            .collect()
    };
    linked
        .full
        .iter()
        .filter(|t| core.contains(t) || chosen.contains(t))
        .copied()
        .collect()
}

/// The sampled subgraph as a standalone graph over its own entities, with
/// the alignment restricted to them.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledSubgraph {
    /// The sample in background ids.
    pub triplets: Vec<Triplet>,
    /// The sample re-indexed; names and graph name come from the background.
    pub kg: KnowledgeGraph,
    /// Entity set of the sample (background ids, ascending).
    pub entities: Vec<u32>,
    /// Pairs `(subgraph entity, target entity)`.
    pub alignment: AlignmentSet,
    pub budget: usize,
    pub seed: u64,
    pub full_size: usize,
    pub core_size: usize,
}

impl SampledSubgraph {
    /// Number of triplets drawn beyond the core.
    pub fn shortfall(&self) -> usize {
        self.triplets.len().saturating_sub(self.core_size)
    }

    pub fn manifest(&self) -> Manifest {
        let mut m = Manifest::new(SUBGRAPH_FORMAT, SUBGRAPH_VERSION);
        m.set("background", self.kg.name());
        m.set("target", &self.alignment.right_kg);
        m.set("budget", self.budget);
        m.set("seed", self.seed);
        m.set("linked_triplets", self.full_size);
        m.set("core_triplets", self.core_size);
        m.set("sampled_triplets", self.triplets.len());
        m.set("shortfall", self.shortfall());
        m.set("entities", self.entities.len());
        m.set("aligned_pairs", self.alignment.len());
        m
    }
}

/// Builds the linked subgraph of `background` towards `target`, samples it
/// under `budget` and packages the result.
pub fn extract_subgraph(
    background: &KnowledgeGraph,
    target: &KnowledgeGraph,
    alignment: &AlignmentSet,
    budget: usize,
    seed: u64,
) -> Result<SampledSubgraph> {
    alignment.validate(background, target)?;
    let linked = build_linked_subgraph(background, alignment);
    let triplets = sample_subgraph(&linked, budget, seed);
    package(background, target, alignment, triplets, budget, seed, linked.full.len(), linked.core.len())
}

impl SampledSubgraph {
    /// No background knowledge at all; retraining on it is target-only.
    pub fn empty(target: &KnowledgeGraph) -> Self {
        SampledSubgraph {
            triplets: Vec::new(),
            kg: KnowledgeGraph::new(EMPTY_SUBGRAPH),
            entities: Vec::new(),
            alignment: AlignmentSet::new(EMPTY_SUBGRAPH, target.name()),
            budget: 0,
            seed: 0,
            full_size: 0,
            core_size: 0,
        }
    }

    /// The entire background (reverse triplets skipped) with the full
    /// alignment, as used for joint training on the merged graphs.
    pub fn whole(background: &KnowledgeGraph, target: &KnowledgeGraph, alignment: &AlignmentSet) -> Result<Self> {
        alignment.validate(background, target)?;
        let triplets: Vec<Triplet> = background
            .triplets()
            .filter(|t| !background.is_reverse_relation(t.relation))
            .copied()
            .collect();
        let linked = build_linked_subgraph(background, alignment);
        let n = triplets.len();
        package(background, target, alignment, triplets, n, 0, linked.full.len(), linked.core.len())
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

/// Graph name of [`SampledSubgraph::empty`].
pub const EMPTY_SUBGRAPH: &str = "empty-background";

#[allow(clippy::too_many_arguments)]
fn package(
    background: &KnowledgeGraph,
    target: &KnowledgeGraph,
    alignment: &AlignmentSet,
    triplets: Vec<Triplet>,
    budget: usize,
    seed: u64,
    full_size: usize,
    core_size: usize,
) -> Result<SampledSubgraph> {
    let entities: Vec<u32> = triplets
        .iter()
        .flat_map(|t| [t.subject, t.object])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut kg = KnowledgeGraph::new(background.name());
    let mut local = HashMap::new();
    for &e in &entities {
        local.insert(e, kg.add_entity(background.entity_name(e))?);
    }
    for t in &triplets {
        let r = kg.add_relation(background.relation_name(t.relation))?;
        kg.insert(Triplet::new(local[&t.subject], r, local[&t.object]))?;
    }
    let mut restricted = AlignmentSet::new(kg.name(), target.name());
    for &(b, t) in alignment.pairs() {
        if let Some(&l) = local.get(&b) {
            restricted.insert(l, t);
        }
    }
    Ok(SampledSubgraph {
        triplets,
        kg,
        entities,
        alignment: restricted,
        budget,
        seed,
        full_size,
        core_size,
    })
}

/// Writes `graph/` (graph directory format), `alignment.tsv` and
/// `manifest.txt` under `dir`.
pub fn save_subgraph(sub: &SampledSubgraph, target: &KnowledgeGraph, dir: &Path) -> Result<()> {
    save_kg_dir(&sub.kg, &dir.join("graph"))?;
    write_alignment(&dir.join("alignment.tsv"), &sub.alignment, &sub.kg, target)?;
    sub.manifest().write(&dir.join("manifest.txt"))
}

/// Reads a saved subgraph. Background ids are not stored, so `triplets`
/// and `entities` refer to the subgraph's own ids.
pub fn load_subgraph(dir: &Path, target: &KnowledgeGraph) -> Result<SampledSubgraph> {
    let m = Manifest::read(&dir.join("manifest.txt"))?;
    m.expect(SUBGRAPH_FORMAT, SUBGRAPH_VERSION)?;
    let kg = load_kg_dir(&dir.join("graph"))?;
    let alignment = load_alignment(&dir.join("alignment.tsv"), &kg, target)?;
    if m.require("target")? != target.name() {
        return Err(Error::data(format!(
            "subgraph was built for {}, not {}",
            m.require("target")?,
            target.name()
        )));
    }
    Ok(SampledSubgraph {
        triplets: kg.triplets().copied().collect(),
        entities: (0..kg.num_entities() as u32).collect(),
        kg,
        alignment,
        budget: m.parse_value("budget")?,
        seed: m.parse_value("seed")?,
        full_size: m.parse_value("linked_triplets")?,
        core_size: m.parse_value("core_triplets")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(triplets: &[(&str, &str, &str)]) -> KnowledgeGraph {
        let mut kg = KnowledgeGraph::new("B");
        for (s, r, o) in triplets {
            kg.add_named(s, r, o).unwrap();
        }
        kg
    }

    fn align(bg: &KnowledgeGraph, names: &[&str]) -> (KnowledgeGraph, AlignmentSet) {
        let mut target = KnowledgeGraph::new("T");
        let mut a = AlignmentSet::new("B", "T");
        for n in names {
            let t = target.add_entity(&format!("t_{n}")).unwrap();
            a.insert(bg.entities().get(n).unwrap(), t);
        }
        (target, a)
    }

    #[test]
    fn definition_split() {
        let bg = graph(&[("a", "r", "b")]);
        let (_, a1) = align(&bg, &["a"]);
        let l = build_linked_subgraph(&bg, &a1);
        assert_eq!(l.full.len(), 1);
        assert!(l.core.is_empty());
        let (_, a2) = align(&bg, &["a", "b"]);
        assert_eq!(build_linked_subgraph(&bg, &a2).core.len(), 1);
    }

    #[test]
    fn six_triplet_scan() {
        let bg = graph(&[
            ("a", "r", "b"),
            ("b", "r", "c"),
            ("c", "r", "d"),
            ("d", "r", "e"),
            ("e", "r", "a"),
            ("x", "r", "y"),
        ]);
        let (_, al) = align(&bg, &["a", "b", "d"]);
        let l = build_linked_subgraph(&bg, &al);
        let aligned: HashSet<u32> = al.pairs().map(|p| p.0).collect();
        let oracle_full: Vec<Triplet> = bg
            .triplets()
            .filter(|t| aligned.contains(&t.subject) || aligned.contains(&t.object))
            .copied()
            .collect();
        let oracle_core: Vec<Triplet> = bg
            .triplets()
            .filter(|t| aligned.contains(&t.subject) && aligned.contains(&t.object))
            .copied()
            .collect();
        assert_eq!(l.full, oracle_full);
        assert_eq!(l.core, oracle_core);
        assert_eq!(l.full.len(), 5);
        assert_eq!(l.core.len(), 1);
    }

    #[test]
    fn budget_edges() {
        let bg = graph(&[("a", "r", "b"), ("b", "r", "c"), ("c", "r", "d")]);
        let (_, al) = align(&bg, &["b", "c"]);
        let l = build_linked_subgraph(&bg, &al);
        assert_eq!(sample_subgraph(&l, 10, 0), l.full);
        assert!(sample_subgraph(&l, 0, 0).is_empty());
        let one = sample_subgraph(&l, 1, 0);
        assert_eq!(one, l.core);
    }

    #[test]
    fn extraction_restricts_alignment() {
        let bg = graph(&[("a", "r", "b"), ("b", "s", "c"), ("c", "r", "d")]);
        let (target, al) = align(&bg, &["a", "b", "d"]);
        let sub = extract_subgraph(&bg, &target, &al, 1, 0).unwrap();
        assert_eq!(sub.triplets.len(), 1);
        assert_eq!(sub.kg.num_entities(), 2);
        assert_eq!(sub.alignment.len(), 2);
        for &(l, _) in sub.alignment.pairs() {
            assert!((l as usize) < sub.kg.num_entities());
        }
        let dir = tempfile::tempdir().unwrap();
        save_subgraph(&sub, &target, dir.path()).unwrap();
        let back = load_subgraph(dir.path(), &target).unwrap();
        assert_eq!(back.kg, sub.kg);
        assert_eq!(back.alignment, sub.alignment);
        assert_eq!(back.core_size, sub.core_size);
    }

    #[test]
    fn popularity_weighting_frequency() {
        // Core gives a frequency 4 and b frequency 1; the two non-core
        // candidates have popularity 4 and 1.
        let bg = graph(&[
            ("a", "r", "b"),
            ("a", "r", "c"),
            ("a", "r", "d"),
            ("a", "r", "e"),
            ("a", "s", "x"),
            ("f", "s", "y"),
        ]);
        let (_, al) = align(&bg, &["a", "b", "c", "d", "e", "f"]);
        let l = build_linked_subgraph(&bg, &al);
        assert_eq!(l.core.len(), 4);
        let pop = PopularityTable::from_core(&l.core);
        let heavy = l.full[4];
        let light = l.full[5];
        assert_eq!(pop.triplet(&heavy), 4);
        assert_eq!(pop.triplet(&light), 0);
        // Floor weight 1 for the zero-popularity triplet: P(heavy) = 4/5.
        let trials = 100_000u64;
        let hits = (0..trials)
            .filter(|&seed| sample_subgraph(&l, 5, seed).contains(&heavy))
            .count();
        let p = hits as f64 / trials as f64;
        assert!((p - 0.8).abs() < 0.01, "{p}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn scenario() -> impl Strategy<Value = (Vec<(u8, u8, u8)>, Vec<u8>, usize, u64)> {
            (
                proptest::collection::vec((0u8..12, 0u8..3, 0u8..12), 0..40),
                proptest::collection::vec(0u8..12, 0..8),
                0usize..45,
                any::<u64>(),
            )
        }

        fn build(raw: &[(u8, u8, u8)], aligned: &[u8]) -> (KnowledgeGraph, KnowledgeGraph, AlignmentSet) {
            let mut bg = KnowledgeGraph::new("B");
            for i in 0..12 {
                bg.add_entity(&format!("e{i}")).unwrap();
            }
            for (s, r, o) in raw {
                bg.add_named(&format!("e{s}"), &format!("r{r}"), &format!("e{o}")).unwrap();
            }
            let mut target = KnowledgeGraph::new("T");
            let mut a = AlignmentSet::new("B", "T");
            for e in aligned {
                let t = target.add_entity(&format!("t{e}")).unwrap();
                a.insert(*e as u32, t);
            }
            (bg, target, a)
        }

        proptest! {
            #[test]
            fn sample_invariants((raw, aligned, budget, seed) in scenario()) {
                let (bg, target, al) = build(&raw, &aligned);
                let l = build_linked_subgraph(&bg, &al);
                let s = sample_subgraph(&l, budget, seed);
                prop_assert_eq!(s.len(), budget.min(l.full.len()));
                prop_assert!(s.iter().all(|t| l.full.contains(t)));
                if budget >= l.core.len() {
                    prop_assert!(l.core.iter().all(|t| s.contains(t)));
                } else {
                    prop_assert!(s.iter().all(|t| l.core.contains(t)));
                }
                prop_assert_eq!(&s, &sample_subgraph(&l, budget, seed));

                let sub = extract_subgraph(&bg, &target, &al, budget, seed).unwrap();
                prop_assert_eq!(sub.kg.len(), s.len());
                prop_assert_eq!(sub.kg.num_entities(), sub.entities.len());
                for &(e, t) in sub.alignment.pairs() {
                    let bg_id = sub.entities[e as usize];
                    prop_assert!(al.contains(bg_id, t));
                }
                let expected = al.pairs().filter(|p| sub.entities.binary_search(&p.0).is_ok()).count();
                prop_assert_eq!(sub.alignment.len(), expected);
            }
        }
    }
}
