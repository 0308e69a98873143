use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kg::AlignmentSet;

use super::{PathCorpus, Provenance, RelationalPath, Tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Cap on generated paths per strategy as a multiple of the raw corpus
    /// size; `None` keeps everything.
    pub multiplier: Option<f64>,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            multiplier: Some(1.0),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    fn cap(&self, raw: usize) -> usize {
        match self.multiplier {
            None => usize::MAX,
            Some(m) => (m.max(0.0) * raw as f64).ceil() as usize,
        }
    }
}

/// Uniform reservoir over a stream; survivors are returned in stream order.
struct Reservoir {
    cap: usize,
    seen: usize,
    items: Vec<(usize, RelationalPath)>,
    rng: ChaCha8Rng,
}

impl Reservoir {
    fn new(cap: usize, seed: u64) -> Self {
        Reservoir {
            cap,
            seen: 0,
            items: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn offer(&mut self, item: RelationalPath) {
        let idx = self.seen;
        self.seen += 1;
        if self.items.len() < self.cap {
            self.items.push((idx, item));
        } else if self.cap > 0 {
            let j = self.rng.gen_range(0..self.seen);
            if j < self.cap {
                self.items[j] = (idx, item);
            }
        }
    }

    fn into_sorted(mut self) -> Vec<RelationalPath> {
        self.items.sort_by_key(|(i, _)| *i);
        self.items.into_iter().map(|(_, p)| p).collect()
    }
}

/// For every occurrence of a `from`-tagged entity that has a counterpart in
/// `alignment` (left side = `from`, right side = `to`), emits a copy of the
/// path with only that occurrence replaced. The result holds the original
/// paths followed by the replacements.
pub fn augment_entity_replacement(
    corpus: &PathCorpus,
    alignment: &AlignmentSet,
    from: Tag,
    to: Tag,
    config: &AugmentConfig,
) -> Result<PathCorpus> {
    let map = alignment.left_map();
    let mut reservoir = Reservoir::new(config.cap(corpus.len()), config.seed);
    for p in corpus.iter() {
        for pos in (0..p.len()).step_by(2) {
            if p.tags[pos] != from {
                continue;
            }
            if let Some(counterparts) = map.get(&p.elements[pos]) {
                for &c in counterparts {
                    let mut path = p.to_owned();
                    path.elements[pos] = c;
                    path.tags[pos] = to;
                    reservoir.offer(path);
                }
            }
        }
    }
    let mut out = corpus.clone();
    for path in reservoir.into_sorted() {
        out.push_path(&path, Provenance::EntityReplaced)?;
    }
    Ok(out)
}

/// Joins paths of `first` ending at a `from`-tagged entity `o` with paths of
/// `second` starting at a `to`-tagged `s'` aligned to `o`. Both junction
/// variants (keeping `o`, keeping `s'`) are emitted; identical variants are
/// kept once. Only the new paths are returned; their length is
/// `first.length() + second.length() - 1`.
pub fn augment_concatenation(
    first: &PathCorpus,
    second: &PathCorpus,
    alignment: &AlignmentSet,
    from: Tag,
    to: Tag,
    config: &AugmentConfig,
) -> Result<PathCorpus> {
    let length = first.length() + second.length() - 1;
    let mut out = PathCorpus::new(length)?;
    let map = alignment.left_map();
    let mut starts: HashMap<u32, Vec<usize>> = HashMap::new();
    for (i, p) in second.iter().enumerate() {
        if p.tags[0] == to {
            starts.entry(p.elements[0]).or_default().push(i);
        }
    }
    let mut reservoir = Reservoir::new(config.cap(first.len()), config.seed);
    let last = first.length() - 1;
    for p in first.iter() {
        if p.tags[last] != from {
            continue;
        }
        let Some(counterparts) = map.get(&p.elements[last]) else {
            continue;
        };
        for &s in counterparts {
            let Some(followers) = starts.get(&s) else {
                continue;
            };
            for &j in followers {
                let q = second.get(j);
                let keep_left = RelationalPath {
                    elements: [p.elements, &q.elements[1..]].concat(),
                    tags: [p.tags, &q.tags[1..]].concat(),
                };
                let keep_right = RelationalPath {
                    elements: [&p.elements[..last], q.elements].concat(),
                    tags: [&p.tags[..last], q.tags].concat(),
                };
                let same = keep_left == keep_right;
                reservoir.offer(keep_left);
                if !same {
                    reservoir.offer(keep_right);
                }
            }
        }
    }
    let mut seen = HashSet::new();
    for path in reservoir.into_sorted() {
        if seen.insert(path.clone()) {
            out.push_path(&path, Provenance::Concatenated)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::KnowledgeGraph;
    use crate::paths::PathValidator;

    fn corpus(length: usize, paths: &[(&[u32], Tag)]) -> PathCorpus {
        let mut c = PathCorpus::new(length).unwrap();
        for (els, tag) in paths {
            c.push(els, &vec![*tag; els.len()], Provenance::Raw).unwrap();
        }
        c
    }

    fn unbounded() -> AugmentConfig {
        AugmentConfig {
            multiplier: None,
            seed: 0,
        }
    }

    fn alignment(pairs: &[(u32, u32)]) -> AlignmentSet {
        let mut a = AlignmentSet::new("K1", "K2");
        for &(l, r) in pairs {
            a.insert(l, r);
        }
        a
    }

    #[test]
    fn replaces_one_aligned_entity() {
        // (s, r, o, r1, o1) with (o, o') aligned -> (s, r, o', r1, o1)
        let c = corpus(5, &[(&[0, 0, 1, 1, 2], 0)]);
        let out = augment_entity_replacement(&c, &alignment(&[(1, 9)]), 0, 1, &unbounded()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out.get(0), c.get(0));
        assert_eq!(out.get(1).elements, &[0, 0, 9, 1, 2]);
        assert_eq!(out.get(1).tags, &[0, 0, 1, 0, 0]);
        assert_eq!(out.provenance(1), Provenance::EntityReplaced);
    }

    #[test]
    fn no_aligned_entity_means_no_new_paths() {
        let c = corpus(5, &[(&[0, 0, 1, 1, 2], 0)]);
        let out = augment_entity_replacement(&c, &alignment(&[(7, 9)]), 0, 1, &unbounded()).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn two_aligned_entities_give_two_paths() {
        let c = corpus(5, &[(&[0, 0, 1, 1, 2], 0)]);
        let out = augment_entity_replacement(&c, &alignment(&[(0, 5), (2, 6)]), 0, 1, &unbounded()).unwrap();
        // enumerate occurrence positions: 0 and 4
        let expected: Vec<Vec<u32>> = vec![vec![5, 0, 1, 1, 2], vec![0, 0, 1, 1, 6]];
        let got: Vec<Vec<u32>> = (1..out.len()).map(|i| out.get(i).elements.to_vec()).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn concatenation_emits_both_junctions() {
        // (s, r, o) in K1, (s', r', o') in K2, (o, s') aligned
        let c1 = corpus(3, &[(&[0, 0, 1], 0)]);
        let c2 = corpus(3, &[(&[5, 3, 6], 1)]);
        let out = augment_concatenation(&c1, &c2, &alignment(&[(1, 5)]), 0, 1, &unbounded()).unwrap();
        assert_eq!(out.length(), 5);
        assert_eq!(out.len(), 2);
        assert_eq!(out.get(0).elements, &[0, 0, 1, 3, 6]);
        assert_eq!(out.get(0).tags, &[0, 0, 0, 1, 1]);
        assert_eq!(out.get(1).elements, &[0, 0, 5, 3, 6]);
        assert_eq!(out.get(1).tags, &[0, 0, 1, 1, 1]);
    }

    #[test]
    fn concatenation_with_empty_alignment_is_empty() {
        let c1 = corpus(3, &[(&[0, 0, 1], 0)]);
        let c2 = corpus(3, &[(&[5, 3, 6], 1)]);
        let out = augment_concatenation(&c1, &c2, &alignment(&[]), 0, 1, &unbounded()).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn identity_junction_is_deduplicated() {
        let c1 = corpus(3, &[(&[0, 0, 1], 0)]);
        let c2 = corpus(3, &[(&[1, 1, 2], 0)]);
        let mut a = AlignmentSet::new("K1", "K1");
        a.insert(1, 1);
        let out = augment_concatenation(&c1, &c2, &a, 0, 0, &unbounded()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.get(0).elements, &[0, 0, 1, 1, 2]);
    }

    #[test]
    fn cap_limits_volume_deterministically() {
        let paths: Vec<Vec<u32>> = (0..50).map(|i| vec![i, 0, i + 1]).collect();
        let refs: Vec<(&[u32], Tag)> = paths.iter().map(|p| (p.as_slice(), 0)).collect();
        let c = corpus(3, &refs);
        let pairs: Vec<(u32, u32)> = (0..51).map(|i| (i, i + 100)).collect();
        let config = AugmentConfig {
            multiplier: Some(0.5),
            seed: 4,
        };
        let out = augment_entity_replacement(&c, &alignment(&pairs), 0, 1, &config).unwrap();
        assert_eq!(out.len(), 50 + 25);
        assert_eq!(out, augment_entity_replacement(&c, &alignment(&pairs), 0, 1, &config).unwrap());
    }

    #[test]
    fn augmented_paths_pass_the_validator() {
        let mut k1 = KnowledgeGraph::new("K1");
        k1.add_named("s", "r", "o").unwrap();
        k1.add_named("o", "r1", "o1").unwrap();
        let mut k2 = KnowledgeGraph::new("K2");
        k2.add_named("o2", "q", "x").unwrap();
        let a = AlignmentSet::from_pairs(&k1, &k2, [(1, 0)]).unwrap();
        let c1 = corpus(5, &[(&[0, 0, 1, 1, 2], 0)]);
        let c3 = corpus(3, &[(&[0, 0, 1], 0)]);
        let c2 = corpus(3, &[(&[0, 0, 1], 1)]);
        let v = PathValidator::new([(0, &k1), (1, &k2)]).with_alignment(0, 1, &a);
        let rep = augment_entity_replacement(&c1, &a, 0, 1, &unbounded()).unwrap();
        let cat = augment_concatenation(&c3, &c2, &a, 0, 1, &unbounded()).unwrap();
        for p in rep.iter().chain(cat.iter()) {
            v.validate(p).unwrap();
        }
        // a broken junction is rejected
        let bad = RelationalPath::new(vec![0, 0, 2, 0, 1], vec![0, 0, 0, 1, 1]).unwrap();
        assert!(v.validate(bad.as_ref()).is_err());
    }
}
