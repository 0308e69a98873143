//! Deterministic synthetic scenarios: a background graph in which a
//! composed relation `rc(X,Z) ⇐ ra(X,Y) ∧ rb(Y,Z)` holds at a planted rate,
//! and a target graph whose held-out `rc` facts are only derivable through
//! the background's two-hop paths.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{
    load_alignment, load_split, load_triplets, remove_leakage, write_alignment,
    write_triplets, AlignmentSet, DatasetSplit, KnowledgeGraph, Triplet,
};
use crate::manifest::Manifest;

pub const BACKGROUND_NAME: &str = "background";
pub const TARGET_NAME: &str = "target";
pub const REL_A: &str = "ra";
pub const REL_B: &str = "rb";
pub const REL_C: &str = "rc";
pub const AUDIT_FORMAT: &str = "kgtransfer-scenario-audit";
pub const AUDIT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_entities: usize,
    /// `ra`, `rb`, `rc` plus `n_relations - 3` noise relations.
    pub n_relations: usize,
    pub alignment_fraction: f64,
    /// Fraction of two-hop pairs that carry `rc`; the rest are withheld.
    pub planted_confidence: f64,
    /// Out-degree of every entity under `ra` and `rb`.
    pub degree: usize,
    /// Jitter around the ring offset of `ra`/`rb` targets.
    pub window: usize,
    /// Probability that a background `ra`/`rb`/noise triplet is copied to the target.
    pub target_keep: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_entities: 100,
            n_relations: 4,
            alignment_fraction: 1.0,
            planted_confidence: 0.9,
            degree: 2,
            window: 2,
            target_keep: 0.5,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("scenario: {m}")));
        if self.n_entities < 20 {
            return bad("n_entities must be at least 20");
        }
        if self.n_relations < 3 {
            return bad("n_relations must be at least 3");
        }
        if !(0.0..=1.0).contains(&self.alignment_fraction) {
            return bad("alignment_fraction must lie in [0, 1]");
        }
        if !(self.planted_confidence > 0.0 && self.planted_confidence < 1.0) {
            return bad("planted_confidence must lie in (0, 1)");
        }
        if self.window == 0 || 2 * self.window + 1 >= self.n_entities {
            return bad("window must lie in [1, (n_entities - 1) / 2)");
        }
        if self.degree == 0 || self.degree > 2 * self.window {
            return bad("degree must lie in [1, 2 * window]");
        }
        if !(0.0..=1.0).contains(&self.target_keep) {
            return bad("target_keep must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Evidence that the scenario is transferable and leakage-free.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuditReport {
    /// Distinct `(X, Z)` pairs joined by `ra ∘ rb` in the background, `X ≠ Z`.
    pub two_hop_pairs: usize,
    pub planted_pairs: usize,
    pub withheld_pairs: usize,
    pub valid: usize,
    pub test: usize,
    /// Test triplets (target ids) whose endpoints are aligned and joined by a
    /// background two-hop path.
    pub derivable: Vec<Triplet>,
    /// Background triplets strict-mode `remove_leakage` would delete.
    pub leaked: usize,
    /// Held-out triplets also present in the target training set.
    pub overlap: usize,
}

impl AuditReport {
    pub fn derivable_fraction(&self) -> f64 {
        if self.test == 0 {
            0.0
        } else {
            self.derivable.len() as f64 / self.test as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct TransferScenario {
    pub background: KnowledgeGraph,
    /// Holds the target training triplets.
    pub target: KnowledgeGraph,
    pub split: DatasetSplit,
    /// `(background, target)` entity pairs.
    pub alignment: AlignmentSet,
    pub audit: AuditReport,
    pub config: ScenarioConfig,
}

fn name(i: usize) -> String {
    format!("e{i}")
}

/// Draws `k` distinct ring neighbours of `x` at `offset ± window`,
/// excluding `x` itself.
fn neighbours(rng: &mut ChaCha8Rng, ring: &Ring, x: usize, offset: usize, window: usize, k: usize) -> Vec<usize> {
    let n = ring.slot.len();
    let centre = ring.slot[x] + offset;
    let mut pool: Vec<usize> = (0..=2 * window)
        .map(|d| ring.at[(centre + n - window + d) % n])
        .filter(|&y| y != x)
        .collect();
    pool.sort_unstable();
    pool.dedup();
    pool.shuffle(rng);
    pool.truncate(k);
    pool.sort_unstable();
    pool
}

/// Hidden circular layout: `slot[e]` is the position of entity `e`, `at` its inverse.
struct Ring {
    slot: Vec<usize>,
    at: Vec<usize>,
}

impl Ring {
    fn new(rng: &mut ChaCha8Rng, n: usize) -> Self {
        let mut at: Vec<usize> = (0..n).collect();
        at.shuffle(rng);
        let mut slot = vec![0; n];
        for (i, &e) in at.iter().enumerate() {
            slot[e] = i;
        }
        Ring { slot, at }
    }
}

pub fn generate_transfer_scenario(
    n_entities: usize,
    n_relations: usize,
    alignment_fraction: f64,
    seed: u64,
) -> Result<TransferScenario> {
    generate_with(&ScenarioConfig {
        n_entities,
        n_relations,
        alignment_fraction,
        seed,
        ..Default::default()
    })
}

pub fn generate_with(config: &ScenarioConfig) -> Result<TransferScenario> {
    config.validate()?;
    let n = config.n_entities;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Background edges as (subject, relation name, object) over entity indices.
    // Entities sit on a hidden ring; `ra` and `rb` jump by fixed offsets
    // (plus jitter), so their composition is geometrically consistent.
    let ring = Ring::new(&mut rng, n);
    let (off_a, off_b) = (n / 10, n / 4);
    let mut bg: Vec<(usize, String, usize)> = Vec::new();
    let mut ra = vec![Vec::new(); n];
    let mut rb = vec![Vec::new(); n];
    for x in 0..n {
        for y in neighbours(&mut rng, &ring, x, off_a, config.window, config.degree) {
            ra[x].push(y);
            bg.push((x, REL_A.into(), y));
        }
    }
    for y in 0..n {
        for z in neighbours(&mut rng, &ring, y, off_b, config.window, config.degree) {
            rb[y].push(z);
            bg.push((y, REL_B.into(), z));
        }
    }
    for k in 0..config.n_relations - 3 {
        let rel = format!("n{k}");
        for _ in 0..n {
            let s = rng.gen_range(0..n);
            let mut o = rng.gen_range(0..n);
            while o == s {
                o = rng.gen_range(0..n);
            }
            bg.push((s, rel.clone(), o));
        }
    }
    let mut pairs = BTreeSet::new();
    for x in 0..n {
        for &y in &ra[x] {
            for &z in &rb[y] {
                if x != z {
                    pairs.insert((x, z));
                }
            }
        }
    }
    let pairs: Vec<(usize, usize)> = pairs.into_iter().collect();
    // Withheld pairs are every eligible pair touching a few "cold" entities,
    // taken in random entity order, so those entities have no `rc` fact in
    // the target. Eligible pairs have no one-hop shortcut: no background edge
    // and no reverse two-hop pair (which would carry rc) between the endpoints.
    let linked: HashSet<(usize, usize)> = bg.iter().flat_map(|(s, _, o)| [(*s, *o), (*o, *s)]).collect();
    let all: HashSet<(usize, usize)> = pairs.iter().copied().collect();
    let planted_n = (config.planted_confidence * pairs.len() as f64).ceil() as usize;
    let withheld_n = pairs.len() - planted_n;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut chosen: BTreeSet<(usize, usize)> = BTreeSet::new();
    for e in order {
        if chosen.len() >= withheld_n {
            break;
        }
        for &p in &pairs {
            if chosen.len() < withheld_n
                && (p.0 == e || p.1 == e)
                && !linked.contains(&p)
                && !all.contains(&(p.1, p.0))
            {
                chosen.insert(p);
            }
        }
    }
    let mut withheld: Vec<(usize, usize)> = chosen.iter().copied().collect();
    withheld.shuffle(&mut rng);
    let mut planted: Vec<(usize, usize)> = pairs.iter().filter(|p| !chosen.contains(p)).copied().collect();
    if withheld.len() < 2 || withheld.len() < withheld_n {
        return Err(Error::config(
            "scenario: too few withheld pairs for a valid/test split; raise n_entities or lower planted_confidence",
        ));
    }
    planted.sort_unstable();
    for &(x, z) in &planted {
        bg.push((x, REL_C.into(), z));
    }

    // Target training data: every planted rc fact plus a thinned copy of the rest.
    let mut train: Vec<(usize, String, usize)> = Vec::new();
    for (s, r, o) in &bg {
        if r == REL_C || rng.gen_bool(config.target_keep) {
            train.push((*s, r.clone(), *o));
        }
    }
    let withheld_set: HashSet<(usize, usize)> = withheld.iter().copied().collect();

    let mut background = KnowledgeGraph::new(BACKGROUND_NAME);
    for (s, r, o) in &bg {
        background.add_named(&name(*s), r, &name(*o))?;
    }
    let mut target = KnowledgeGraph::new(TARGET_NAME);
    for (s, r, o) in &train {
        target.add_named(&name(*s), r, &name(*o))?;
    }
    let rc = target.relations().get(REL_C).expect("planted relation present");

    // Held-out facts whose endpoints occur in target training.
    let mut held = Vec::new();
    for &(x, z) in &withheld {
        if let (Some(s), Some(o)) = (target.entities().get(&name(x)), target.entities().get(&name(z))) {
            held.push(Triplet::new(s, rc, o));
        }
    }
    if held.len() < 2 {
        return Err(Error::config("scenario: withheld facts do not reach the target vocabulary"));
    }
    let n_valid = held.len() / 2;
    let split = DatasetSplit {
        train: target.triplets().copied().collect(),
        valid: held[..n_valid].to_vec(),
        test: held[n_valid..].to_vec(),
    };
    split.validate(&target)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let k = (config.alignment_fraction * n as f64).round() as usize;
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    let mut alignment = AlignmentSet::new(BACKGROUND_NAME, TARGET_NAME);
    for i in chosen {
        if let (Some(b), Some(t)) = (background.entities().get(&name(i)), target.entities().get(&name(i))) {
            alignment.insert(b, t);
        }
    }

    let audit = audit(&background, &target, &split, &alignment)?;
    debug_assert!(split
        .test
        .iter()
        .all(|t| withheld_set.contains(&(index_of(&target, t.subject), index_of(&target, t.object)))));
    Ok(TransferScenario {
        background,
        target,
        split,
        alignment,
        audit: AuditReport {
            planted_pairs: planted.len(),
            withheld_pairs: withheld.len(),
            ..audit
        },
        config: config.clone(),
    })
}

fn index_of(kg: &KnowledgeGraph, e: u32) -> usize {
    kg.entity_name(e)[1..].parse().expect("generated entity name")
}

/// Recomputes derivability and leakage from the graphs alone.
pub fn audit(
    background: &KnowledgeGraph,
    target: &KnowledgeGraph,
    split: &DatasetSplit,
    alignment: &AlignmentSet,
) -> Result<AuditReport> {
    let rel = |kg: &KnowledgeGraph, r: &str| {
        kg.relations()
            .get(r)
            .ok_or_else(|| Error::data(format!("scenario graph {} lacks relation {r}", kg.name())))
    };
    split.validate(target)?;
    let (ra, rb) = (rel(background, REL_A)?, rel(background, REL_B)?);
    let n = background.num_entities();
    let mut out_a = vec![Vec::new(); n];
    let mut out_b = vec![Vec::new(); n];
    for t in background.triplets() {
        if t.relation == ra {
            out_a[t.subject as usize].push(t.object);
        } else if t.relation == rb {
            out_b[t.subject as usize].push(t.object);
        }
    }
    let mut two_hop = HashSet::new();
    for x in 0..n {
        for &y in &out_a[x] {
            for &z in &out_b[y as usize] {
                if x as u32 != z {
                    two_hop.insert((x as u32, z));
                }
            }
        }
    }

    let to_bg = alignment.right_map();
    let derivable = split
        .test
        .iter()
        .filter(|t| {
            let (Some(xs), Some(zs)) = (to_bg.get(&t.subject), to_bg.get(&t.object)) else {
                return false;
            };
            xs.iter().any(|x| zs.iter().any(|z| two_hop.contains(&(*x, *z))))
        })
        .copied()
        .collect();

    let (_, leak) = remove_leakage(background, split, alignment, None);
    let train: HashSet<&Triplet> = split.train.iter().collect();
    let overlap = split.valid.iter().chain(&split.test).filter(|t| train.contains(t)).count();

    Ok(AuditReport {
        two_hop_pairs: two_hop.len(),
        planted_pairs: 0,
        withheld_pairs: 0,
        valid: split.valid.len(),
        test: split.test.len(),
        derivable,
        leaked: leak.deleted.len(),
        overlap,
    })
}

impl TransferScenario {
    pub fn audit_manifest(&self) -> Manifest {
        let c = &self.config;
        let a = &self.audit;
        let mut m = Manifest::new(AUDIT_FORMAT, AUDIT_VERSION);
        m.set("n_entities", c.n_entities);
        m.set("n_relations", c.n_relations);
        m.set("alignment_fraction", c.alignment_fraction);
        m.set("planted_confidence", c.planted_confidence);
        m.set("degree", c.degree);
        m.set("window", c.window);
        m.set("target_keep", c.target_keep);
        m.set("seed", c.seed);
        m.set("background_triplets", self.background.len());
        m.set("target_train", self.split.train.len());
        m.set("aligned_pairs", self.alignment.len());
        m.set("two_hop_pairs", a.two_hop_pairs);
        m.set("planted_pairs", a.planted_pairs);
        m.set("withheld_pairs", a.withheld_pairs);
        m.set("valid", a.valid);
        m.set("test", a.test);
        m.set("derivable", a.derivable.len());
        m.set("leaked", a.leaked);
        m.set("overlap", a.overlap);
        m
    }

    /// Writes `background.tsv`, `train.tsv`, `valid.tsv`, `test.tsv`,
    /// `alignment.tsv`, `derivable.tsv` and `audit.txt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_triplets(&dir.join("background.tsv"), &self.background, self.background.triplets())?;
        write_triplets(&dir.join("train.tsv"), &self.target, &self.split.train)?;
        write_triplets(&dir.join("valid.tsv"), &self.target, &self.split.valid)?;
        write_triplets(&dir.join("test.tsv"), &self.target, &self.split.test)?;
        write_triplets(&dir.join("derivable.tsv"), &self.target, &self.audit.derivable)?;
        write_alignment(&dir.join("alignment.tsv"), &self.alignment, &self.background, &self.target)?;
        self.audit_manifest().write(&dir.join("audit.txt"))
    }
}

/// Reads a saved scenario back; the audit is recomputed from the files.
pub fn load_scenario(dir: &Path) -> Result<TransferScenario> {
    let m = Manifest::read(&dir.join("audit.txt"))?;
    m.expect(AUDIT_FORMAT, AUDIT_VERSION)?;
    let config = ScenarioConfig {
        n_entities: m.parse_value("n_entities")?,
        n_relations: m.parse_value("n_relations")?,
        alignment_fraction: m.parse_value("alignment_fraction")?,
        planted_confidence: m.parse_value("planted_confidence")?,
        degree: m.parse_value("degree")?,
        window: m.parse_value("window")?,
        target_keep: m.parse_value("target_keep")?,
        seed: m.parse_value("seed")?,
    };
    let background = load_triplets(&dir.join("background.tsv"), BACKGROUND_NAME)?;
    let (target, split, _) = load_split(
        &dir.join("train.tsv"),
        &dir.join("valid.tsv"),
        &dir.join("test.tsv"),
        TARGET_NAME,
    )?;
    let alignment = load_alignment(&dir.join("alignment.tsv"), &background, &target)?;
    let audit = audit(&background, &target, &split, &alignment)?;
    Ok(TransferScenario {
        background,
        target,
        split,
        alignment,
        audit: AuditReport {
            planted_pairs: m.parse_value("planted_pairs")?,
            withheld_pairs: m.parse_value("withheld_pairs")?,
            ..audit
        },
        config,
    })
}
