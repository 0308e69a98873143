use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{Adjacency, KnowledgeGraph};

use super::{PathCorpus, Provenance, Tag};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeighborWeighting {
    #[default]
    Uniform,
    /// Next hop drawn with probability proportional to `1 / q(object)`.
    InverseFrequency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WalkConfig {
    pub path_length: usize,
    pub walks_per_start: usize,
    pub seed: u64,
    pub neighbor_weighting: NeighborWeighting,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            path_length: 5,
            walks_per_start: 2,
            seed: 0,
            neighbor_weighting: NeighborWeighting::Uniform,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.path_length < 3 || self.path_length.is_multiple_of(2) {
            return Err(Error::config(format!(
                "path_length must be an odd number >= 3, got {}",
                self.path_length
            )));
        }
        if self.walks_per_start == 0 {
            return Err(Error::config("walks_per_start must be positive"));
        }
        Ok(())
    }

    /// Neighbor hops appended after the start triplet.
    pub fn steps(&self) -> usize {
        (self.path_length - 3) / 2
    }
}

/// Start triplets handled by one independently seeded RNG stream.
const CHUNK: usize = 1024;

struct Sampler<'a> {
    adj: &'a Adjacency,
    /// Cumulative edge weights aligned with the adjacency edge order; only
    /// used for inverse-frequency weighting.
    cumulative: Option<Vec<Vec<f64>>>,
}

impl Sampler<'_> {
    fn step(&self, entity: u32, rng: &mut ChaCha8Rng) -> (u32, u32) {
        let edges = self.adj.out_edges(entity);
        let i = match &self.cumulative {
            None => rng.gen_range(0..edges.len()),
            Some(cum) => {
                let c = &cum[entity as usize];
                let x = rng.gen::<f64>() * c[c.len() - 1];
                c.partition_point(|&v| v <= x).min(c.len() - 1)
            }
        };
        edges[i]
    }
}

/// Samples `walks_per_start` paths per triplet of a reverse-closed graph.
/// Each path starts with the triplet itself and continues from its object
/// for `(l - 3) / 2` hops. All elements are tagged with `tag`.
pub fn sample_paths(kg: &KnowledgeGraph, tag: Tag, config: &WalkConfig) -> Result<PathCorpus> {
    config.validate()?;
    if !kg.reverse_closed() {
        return Err(Error::data(format!(
            "random walks need a reverse-closed graph; close {} first",
            kg.name()
        )));
    }
    let adj = kg.adjacency();
    let cumulative = match config.neighbor_weighting {
        NeighborWeighting::Uniform => None,
        NeighborWeighting::InverseFrequency => {
            let q = kg.entity_frequencies().entity;
            Some(
                (0..kg.num_entities() as u32)
                    .map(|e| {
                        let mut acc = 0.0;
                        adj.out_edges(e)
                            .iter()
                            .map(|&(_, o)| {
                                acc += 1.0 / q[o as usize].max(1) as f64;
                                acc
                            })
                            .collect()
                    })
                    .collect(),
            )
        }
    };
    let sampler = Sampler {
        adj: &adj,
        cumulative,
    };
    let triplets: Vec<_> = kg.triplets().copied().collect();
    let l = config.path_length;
    let steps = config.steps();

    let chunks: Vec<Vec<u32>> = triplets
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(ci as u64);
            let mut out = Vec::with_capacity(chunk.len() * config.walks_per_start * l);
            for t in chunk {
                for _ in 0..config.walks_per_start {
                    out.extend_from_slice(&[t.subject, t.relation, t.object]);
                    let mut cur = t.object;
                    for _ in 0..steps {
                        let (r, o) = sampler.step(cur, &mut rng);
                        out.push(r);
                        out.push(o);
                        cur = o;
                    }
                }
            }
            out
        })
        .collect();

    let mut corpus = PathCorpus::new(l)?;
    let tags = vec![tag; l];
    for chunk in &chunks {
        for path in chunk.chunks_exact(l) {
            corpus.push(path, &tags, Provenance::Raw)?;
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Triplet;
    use crate::paths::PathValidator;

    fn closed(triplets: &[(&str, &str, &str)]) -> KnowledgeGraph {
        let mut kg = KnowledgeGraph::new("K");
        for (s, r, o) in triplets {
            kg.add_named(s, r, o).unwrap();
        }
        kg.add_reverse_triplets().unwrap()
    }

    fn cfg(l: usize, n: usize, seed: u64) -> WalkConfig {
        WalkConfig {
            path_length: l,
            walks_per_start: n,
            seed,
            neighbor_weighting: NeighborWeighting::Uniform,
        }
    }

    #[test]
    fn rejects_even_or_short_lengths() {
        let kg = closed(&[("a", "r", "b")]);
        assert!(matches!(sample_paths(&kg, 0, &cfg(4, 1, 0)), Err(Error::Config(_))));
        assert!(matches!(sample_paths(&kg, 0, &cfg(1, 1, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn requires_reverse_closure() {
        let mut kg = KnowledgeGraph::new("K");
        kg.add_named("a", "r", "b").unwrap();
        assert!(sample_paths(&kg, 0, &cfg(5, 1, 0)).is_err());
    }

    #[test]
    fn length_three_yields_the_triplets() {
        let kg = closed(&[("a", "r", "b"), ("b", "s", "c")]);
        let corpus = sample_paths(&kg, 0, &cfg(3, 2, 1)).unwrap();
        assert_eq!(corpus.len(), 2 * kg.len());
        for (i, t) in kg.triplets().enumerate() {
            for k in 0..2 {
                assert_eq!(corpus.get(2 * i + k).elements, &[t.subject, t.relation, t.object]);
            }
        }
    }

    #[test]
    fn one_step_for_length_five() {
        assert_eq!(cfg(5, 1, 0).steps(), 1);
        assert_eq!(cfg(3, 1, 0).steps(), 0);
        assert_eq!(cfg(9, 1, 0).steps(), 3);
    }

    #[test]
    fn chain_start_has_two_equally_likely_extensions() {
        // b's outgoing edges after closure: (b, r2, c) and (b, r1[reverse], a).
        let kg = closed(&[("a", "r1", "b"), ("b", "r2", "c")]);
        let (a, b, c) = (0u32, 1u32, 2u32);
        let r2 = kg.relations().get("r2").unwrap();
        let r1_rev = kg.relations().get("r1[reverse]").unwrap();
        let n = 20_000;
        let corpus = sample_paths(&kg, 0, &cfg(5, n, 7)).unwrap();
        let (mut to_c, mut back) = (0usize, 0usize);
        for i in 0..n {
            let p = corpus.get(i).elements;
            assert_eq!(&p[..3], &[a, 0, b]);
            match (p[3], p[4]) {
                (r, e) if r == r2 && e == c => to_c += 1,
                (r, e) if r == r1_rev && e == a => back += 1,
                other => panic!("impossible extension {other:?}"),
            }
        }
        // chi-square with one degree of freedom, 1% critical value 6.635
        let expected = n as f64 / 2.0;
        let chi2 = ((to_c as f64 - expected).powi(2) + (back as f64 - expected).powi(2)) / expected;
        assert!(chi2 < 6.635, "chi2 = {chi2}");
    }

    #[test]
    fn inverse_frequency_prefers_rare_neighbors() {
        // hub h has many links; from x the walk can go to hub or leaf.
        let mut triplets = vec![("x", "r", "h"), ("x", "r", "leaf")];
        let spokes: Vec<String> = (0..8).map(|i| format!("s{i}")).collect();
        for s in &spokes {
            triplets.push(("h", "r", s.as_str()));
        }
        let kg = closed(&triplets);
        let mut config = cfg(5, 4000, 3);
        config.neighbor_weighting = NeighborWeighting::InverseFrequency;
        let corpus = sample_paths(&kg, 0, &config).unwrap();
        let x = kg.entities().get("x").unwrap();
        let h = kg.entities().get("h").unwrap();
        let leaf = kg.entities().get("leaf").unwrap();
        let rev = kg.relations().get("r[reverse]").unwrap();
        // walks starting with (h, r[reverse], x) continue from x
        let start = kg.triplets().position(|t| *t == Triplet::new(h, rev, x)).unwrap();
        let (mut to_h, mut to_leaf) = (0, 0);
        for k in 0..4000 {
            let p = corpus.get(start * 4000 + k).elements;
            if p[4] == h {
                to_h += 1;
            } else if p[4] == leaf {
                to_leaf += 1;
            }
        }
        // q(h) = 2 * 9 = 18, q(leaf) = 2: leaf is 9x more likely
        assert!(to_leaf > 6 * to_h, "leaf {to_leaf} vs hub {to_h}");
    }

    #[test]
    fn paths_are_valid_and_reproducible() {
        let kg = closed(&[
            ("a", "r", "b"),
            ("b", "s", "c"),
            ("c", "r", "d"),
            ("d", "t", "a"),
            ("b", "t", "d"),
        ]);
        let config = cfg(7, 3, 11);
        let corpus = sample_paths(&kg, 2, &config).unwrap();
        assert_eq!(corpus.len(), 3 * kg.len());
        let v = PathValidator::new([(2, &kg)]);
        for p in corpus.iter() {
            v.validate(p).unwrap();
        }
        assert_eq!(corpus, sample_paths(&kg, 2, &config).unwrap());
        assert_ne!(corpus, sample_paths(&kg, 2, &cfg(7, 3, 12)).unwrap());
    }
}
