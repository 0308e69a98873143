use std::collections::{HashMap, HashSet};

use super::{AlignmentSet, DatasetSplit, KnowledgeGraph, Triplet};

/// What [`remove_leakage`] deleted.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LeakageReport {
    pub examined: usize,
    pub deleted: Vec<Triplet>,
    /// Deletions triggered by the inverse orientation `(o', r', s')`.
    pub deleted_inverse: usize,
    pub strict: bool,
}

impl LeakageReport {
    pub fn deleted_count(&self) -> usize {
        self.deleted.len()
    }
}

/// Held-out target entity pairs mapped to the relations they carry.
fn held_out_pairs(split: &DatasetSplit) -> HashMap<(u32, u32), Vec<u32>> {
    let mut pairs: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
    for t in split.valid.iter().chain(&split.test) {
        pairs.entry((t.subject, t.object)).or_default().push(t.relation);
    }
    pairs
}

/// Removes background triplets that mirror a valid/test target triplet
/// through the alignment (`alignment` pairs are `(background, target)`).
///
/// With `relation_map` (`(background relation, target relation)` pairs) a
/// triplet is deleted only when its relation is paired with the held-out
/// one; without it any entity-pair match is deleted. Both orientations are
/// checked.
pub fn remove_leakage(
    background: &KnowledgeGraph,
    target_split: &DatasetSplit,
    alignment: &AlignmentSet,
    relation_map: Option<&HashSet<(u32, u32)>>,
) -> (KnowledgeGraph, LeakageReport) {
    let held = held_out_pairs(target_split);
    let align = alignment.left_map();
    let relation_ok = |bg_rel: u32, rels: &[u32]| match relation_map {
        None => true,
        Some(map) => rels.iter().any(|r| map.contains(&(bg_rel, *r))),
    };

    let mut report = LeakageReport {
        examined: background.len(),
        strict: relation_map.is_none(),
        ..Default::default()
    };
    let mut doomed = HashSet::new();
    for t in background.triplets() {
        let (Some(subs), Some(objs)) = (align.get(&t.subject), align.get(&t.object)) else {
            continue;
        };
        let mut forward = false;
        let mut inverse = false;
        for &s in subs {
            for &o in objs {
                if held.get(&(s, o)).is_some_and(|rels| relation_ok(t.relation, rels)) {
                    forward = true;
                }
                if held.get(&(o, s)).is_some_and(|rels| relation_ok(t.relation, rels)) {
                    inverse = true;
                }
            }
        }
        if forward || inverse {
            doomed.insert(*t);
            report.deleted.push(*t);
            if inverse && !forward {
                report.deleted_inverse += 1;
            }
        }
    }
    let filtered = background.filtered(|t| !doomed.contains(t));
    (filtered, report)
}

/// Relation pairs `(background, target)` that co-occur on an aligned entity
/// pair in the same orientation.
pub fn relation_pairs_from_alignment<'a>(
    background: &KnowledgeGraph,
    target_triplets: impl IntoIterator<Item = &'a Triplet>,
    alignment: &AlignmentSet,
) -> HashSet<(u32, u32)> {
    let mut by_pair: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
    for t in target_triplets {
        by_pair.entry((t.subject, t.object)).or_default().push(t.relation);
    }
    let align = alignment.left_map();
    let mut out = HashSet::new();
    for t in background.triplets() {
        let (Some(subs), Some(objs)) = (align.get(&t.subject), align.get(&t.object)) else {
            continue;
        };
        for &s in subs {
            for &o in objs {
                if let Some(rels) = by_pair.get(&(s, o)) {
                    out.extend(rels.iter().map(|r| (t.relation, *r)));
                }
            }
        }
    }
    out
}
