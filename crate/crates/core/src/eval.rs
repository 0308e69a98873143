//! Filtered link-prediction metrics and 2-D embedding projection.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape};
use crate::encoder::{Binder, Encoder, Mode, PathBatch, ENTITY_TABLE};
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, Triplet};
use crate::paths::Tag;
use crate::pretrain::{Checkpoint, Vocabulary};

/// Queries scored per encoder pass.
const QUERY_CHUNK: usize = 256;

/// `(subject, relation, ?)` with the expected answer, in local ids of the
/// evaluated graph. Head queries use the reverse relation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LinkQuery {
    pub subject: u32,
    pub relation: u32,
    pub gold: u32,
}

impl LinkQuery {
    /// Tail and head query of a triplet; fails when `kg` lacks the reverse
    /// relation.
    pub fn both(kg: &KnowledgeGraph, t: &Triplet) -> Result<[LinkQuery; 2]> {
        let rev = kg.reverse_relation(t.relation).ok_or_else(|| {
            Error::data(format!(
                "relation {} has no reverse; close the graph first",
                kg.relation_name(t.relation)
            ))
        })?;
        Ok([
            LinkQuery {
                subject: t.subject,
                relation: t.relation,
                gold: t.object,
            },
            LinkQuery {
                subject: t.object,
                relation: rev,
                gold: t.subject,
            },
        ])
    }
}

/// Scores queries on one graph of a model: candidates are all entities of
/// that graph.
pub struct LinkScorer<'a> {
    encoder: &'a Encoder,
    entities: Vec<usize>,
    relations: Vec<usize>,
    candidates: Mat,
}

impl<'a> LinkScorer<'a> {
    /// `entities[i]` / `relations[i]` are the model ids of local element `i`.
    pub fn new(encoder: &'a Encoder, entities: Vec<usize>, relations: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = entities.iter().find(|&&e| e >= encoder.num_entities()) {
            return Err(Error::data(format!("entity id {bad} outside the model vocabulary")));
        }
        if let Some(&bad) = relations.iter().find(|&&r| r >= encoder.num_relations()) {
            return Err(Error::data(format!("relation id {bad} outside the model vocabulary")));
        }
        let table = encoder.params.require(ENTITY_TABLE)?;
        let candidates = table.select(Axis(0), &entities);
        Ok(LinkScorer {
            encoder,
            entities,
            relations,
            candidates,
        })
    }

    /// Maps every element of `kg` (registered under `tag`) into the model.
    pub fn for_graph(encoder: &'a Encoder, vocab: &Vocabulary, tag: Tag, kg: &KnowledgeGraph) -> Result<Self> {
        let missing = |kind: &str, i: usize| {
            Error::data(format!("{kind} {i} of graph {} is not in the model vocabulary", kg.name()))
        };
        let entities = vocab
            .entity_map(tag, kg)
            .into_iter()
            .enumerate()
            .map(|(i, e)| e.ok_or_else(|| missing("entity", i)))
            .collect::<Result<Vec<_>>>()?;
        let relations = vocab
            .relation_map(tag, kg)
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.ok_or_else(|| missing("relation", i)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(encoder, entities, relations)
    }

    pub fn num_candidates(&self) -> usize {
        self.entities.len()
    }

    fn check(&self, q: &LinkQuery) -> Result<()> {
        let n = self.entities.len() as u32;
        if q.subject >= n || q.gold >= n || q.relation as usize >= self.relations.len() {
            return Err(Error::data(format!("query {q:?} outside the evaluated graph")));
        }
        Ok(())
    }

    /// Context vectors (`queries × d`) of the answer slot of `(s, r, ?)`.
    pub fn contexts(&self, queries: &[LinkQuery]) -> Result<Mat> {
        let mut ids = Vec::with_capacity(queries.len() * 3);
        for q in queries {
            self.check(q)?;
            let s = self.entities[q.subject as usize] as u32;
            // The answer slot is never read; the subject is a placeholder.
            ids.extend_from_slice(&[s, self.relations[q.relation as usize] as u32, s]);
        }
        let batch = PathBatch::new(3, ids)?;
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(&self.encoder.params);
        let c = self
            .encoder
            .context_at(&mut tape, &mut binder, &batch, 2, &mut Mode::Eval)?;
        Ok(tape.value(c).clone())
    }

    /// Scores of every candidate (`queries × candidates`).
    pub fn score_all(&self, queries: &[LinkQuery]) -> Result<Mat> {
        Ok(self.contexts(queries)?.dot(&self.candidates.t()))
    }

    /// Score of local entity `candidate` for `query`.
    pub fn score_query(&self, query: &LinkQuery, candidate: u32) -> Result<f64> {
        if candidate as usize >= self.entities.len() {
            return Err(Error::data(format!("candidate {candidate} outside the evaluated graph")));
        }
        let c = self.contexts(std::slice::from_ref(query))?;
        Ok(c.row(0).dot(&self.candidates.row(candidate as usize)))
    }

    /// Filtered rank of the gold entity.
    pub fn rank_query(&self, query: &LinkQuery, filter: &FilterIndex) -> Result<RankedQuery> {
        let scores = self.score_all(std::slice::from_ref(query))?;
        rank_in_row(scores.row(0).as_slice().expect("standard layout"), query, filter)
    }
}

/// Known triplets excluded from ranking, indexed by `(subject, relation)`.
#[derive(Clone, Debug, Default)]
pub struct FilterIndex {
    known: HashMap<(u32, u32), HashSet<u32>>,
}

impl FilterIndex {
    pub fn new<'a>(triplets: impl IntoIterator<Item = &'a Triplet>) -> Self {
        let mut f = FilterIndex::default();
        f.extend(triplets);
        f
    }

    pub fn extend<'a>(&mut self, triplets: impl IntoIterator<Item = &'a Triplet>) {
        for t in triplets {
            self.known
                .entry((t.subject, t.relation))
                .or_default()
                .insert(t.object);
        }
    }

    pub fn contains(&self, t: &Triplet) -> bool {
        self.known
            .get(&(t.subject, t.relation))
            .is_some_and(|s| s.contains(&t.object))
    }

    /// Entities completing `(subject, relation, ?)` to a known triplet.
    pub fn answers(&self, subject: u32, relation: u32) -> Option<&HashSet<u32>> {
        self.known.get(&(subject, relation))
    }
}

/// Which splits feed the filter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterScope {
    #[default]
    Train,
    All,
}

impl FilterScope {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(FilterScope::Train),
            "all" => Ok(FilterScope::All),
            _ => Err(Error::config(format!("unknown filter scope {s:?} (train|all)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankedQuery {
    pub rank: usize,
    /// Candidates left after filtering (gold included).
    pub candidates: usize,
}

/// Rank of `gold` among `scores` with `excluded` removed: one plus the
/// number of strictly better candidates plus half the other tied
/// candidates, rounded up. Only comparisons are used, so any strictly
/// monotone transform of the scores leaves the rank unchanged.
pub fn rank_from_scores(scores: &[f64], gold: usize, excluded: &HashSet<u32>) -> Result<RankedQuery> {
    let g = *scores
        .get(gold)
        .ok_or_else(|| Error::data(format!("gold entity {gold} outside the candidate list")))?;
    if !g.is_finite() {
        return Err(Error::numeric(format!("non-finite score for gold entity {gold}")));
    }
    let (mut higher, mut ties, mut kept) = (0usize, 0usize, 0usize);
    for (i, &s) in scores.iter().enumerate() {
        if i != gold && excluded.contains(&(i as u32)) {
            continue;
        }
        kept += 1;
        if i == gold {
            continue;
        }
        if s > g {
            higher += 1;
        } else if s == g {
            ties += 1;
        }
    }
    Ok(RankedQuery {
        rank: higher + 1 + ties.div_ceil(2),
        candidates: kept,
    })
}

fn rank_in_row(scores: &[f64], q: &LinkQuery, filter: &FilterIndex) -> Result<RankedQuery> {
    static EMPTY: std::sync::OnceLock<HashSet<u32>> = std::sync::OnceLock::new();
    let excluded = filter
        .answers(q.subject, q.relation)
        .unwrap_or_else(|| EMPTY.get_or_init(HashSet::new));
    rank_from_scores(scores, q.gold as usize, excluded)
}

/// Which training regime produced the evaluated model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Setting {
    #[default]
    Lp,
    JointLp,
    Pr4lp,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Lp => "LP",
            Setting::JointLp => "JointLP",
            Setting::Pr4lp => "PR4LP",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lp" => Ok(Setting::Lp),
            "jointlp" | "joint_lp" | "joint-lp" => Ok(Setting::JointLp),
            "pr4lp" => Ok(Setting::Pr4lp),
            _ => Err(Error::config(format!("unknown setting {s:?} (LP|JointLP|PR4LP)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub setting: Setting,
    pub queries: usize,
    pub mrr: f64,
    pub hits1: f64,
    pub hits10: f64,
    pub ranks: Vec<usize>,
    pub candidates: Vec<usize>,
}

impl MetricsReport {
    pub fn from_ranks(setting: Setting, ranks: Vec<usize>, candidates: Vec<usize>) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::data("no queries to evaluate"));
        }
        if ranks.contains(&0) {
            return Err(Error::data("ranks start at 1"));
        }
        let n = ranks.len() as f64;
        let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
        let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Ok(MetricsReport {
            setting,
            queries: ranks.len(),
            mrr,
            hits1: hits(1),
            hits10: hits(10),
            ranks,
            candidates,
        })
    }

    pub fn mean_candidates(&self) -> f64 {
        if self.candidates.is_empty() {
            return 0.0;
        }
        self.candidates.iter().sum::<usize>() as f64 / self.candidates.len() as f64
    }

    pub fn to_text(&self) -> String {
        format!(
            "setting={} queries={} MRR={:.4} H@1={:.4} H@10={:.4} mean_filtered_candidates={:.1}\n",
            self.setting.as_str(),
            self.queries,
            self.mrr,
            self.hits1,
            self.hits10,
            self.mean_candidates()
        )
    }

    pub fn to_tsv(&self) -> String {
        format!(
            "setting\tqueries\tmrr\thits1\thits10\n{}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
            self.setting.as_str(),
            self.queries,
            self.mrr,
            self.hits1,
            self.hits10
        )
    }

    /// One line per query: index, rank, filtered candidate count.
    pub fn ranks_tsv(&self) -> String {
        let mut s = String::from("query\trank\tcandidates\n");
        for (i, (r, c)) in self.ranks.iter().zip(&self.candidates).enumerate() {
            let _ = writeln!(s, "{i}\t{r}\t{c}");
        }
        s
    }
}

/// Builds the filter from the requested splits.
pub fn build_filter(scope: FilterScope, train: &KnowledgeGraph, valid: &[Triplet], test: &[Triplet]) -> FilterIndex {
    let mut f = FilterIndex::new(train.triplets());
    if scope == FilterScope::All {
        for t in valid.iter().chain(test) {
            f.extend([t]);
            if let Some(rev) = train.reverse_relation(t.relation) {
                f.extend([&Triplet::new(t.object, rev, t.subject)]);
            }
        }
    }
    f
}

/// Tail and head queries of every test triplet, ranked with filtering.
/// `kg` must be reverse-closed so head queries can use reverse relations.
/// With a train-only filter a test triplet that is already a known fact is
/// a data inconsistency and rejected.
pub fn evaluate(
    scorer: &LinkScorer,
    kg: &KnowledgeGraph,
    test: &[Triplet],
    filter: &FilterIndex,
    scope: FilterScope,
    setting: Setting,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::data("empty test split"));
    }
    let mut queries = Vec::with_capacity(test.len() * 2);
    for t in test {
        if scope == FilterScope::Train && filter.contains(t) {
            return Err(Error::data(format!(
                "test triplet ({}, {}, {}) is also a training triplet",
                kg.entity_name(t.subject),
                kg.relation_name(t.relation),
                kg.entity_name(t.object)
            )));
        }
        queries.extend(LinkQuery::both(kg, t)?);
    }
    let chunks: Vec<Vec<RankedQuery>> = queries
        .par_chunks(QUERY_CHUNK)
        .map(|chunk| {
            let scores = scorer.score_all(chunk)?;
            chunk
                .iter()
                .zip(scores.rows())
                .map(|(q, row)| rank_in_row(row.as_slice().expect("standard layout"), q, filter))
                .collect()
        })
        .collect::<Result<_>>()?;
    let ranked: Vec<RankedQuery> = chunks.into_iter().flatten().collect();
    MetricsReport::from_ranks(
        setting,
        ranked.iter().map(|r| r.rank).collect(),
        ranked.iter().map(|r| r.candidates).collect(),
    )
}

/// Labelled 2-D coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub labels: Vec<String>,
    pub coords: Mat,
}

impl Projection {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("label\tx\ty\n");
        for (l, row) in self.labels.iter().zip(self.coords.rows()) {
            let _ = writeln!(s, "{l}\t{:.6}\t{:.6}", row[0], row[1]);
        }
        s
    }
}

/// Projects mean-centred rows onto the top two principal components. Each
/// component's sign makes its largest-magnitude coordinate positive; a
/// component with (numerically) zero variance yields zeros.
pub fn pca_2d(data: &Mat) -> Result<Mat> {
    let (n, d) = data.dim();
    if n < 2 {
        return Err(Error::data("projection needs at least two points"));
    }
    if !data.iter().all(|x| x.is_finite()) {
        return Err(Error::numeric("non-finite embedding"));
    }
    let centred = data - &data.mean_axis(Axis(0)).expect("non-empty");
    let cov = centred.t().dot(&centred) / (n - 1) as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let mut out = Mat::zeros((n, 2));
    for (k, &c) in order.iter().take(2).enumerate() {
        if eig.eigenvalues[c] <= top * 1e-12 || top == 0.0 {
            continue;
        }
        let v = eig.eigenvectors.column(c);
        let mut col: Vec<f64> = centred
            .rows()
            .into_iter()
            .map(|r| r.iter().zip(v.iter()).map(|(a, b)| a * b).sum())
            .collect();
        let peak = col
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if peak < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        for (i, x) in col.into_iter().enumerate() {
            out[[i, k]] = x;
        }
    }
    Ok(out)
}

/// Projection of the selected entity embeddings of a checkpoint, labelled
/// `graph:name`.
pub fn project_embeddings(ckpt: &Checkpoint, entities: &[usize]) -> Result<Projection> {
    let table = ckpt.encoder.params.require(ENTITY_TABLE)?;
    if let Some(&bad) = entities.iter().find(|&&e| e >= table.nrows()) {
        return Err(Error::data(format!("entity id {bad} outside the checkpoint vocabulary")));
    }
    let coords = pca_2d(&table.select(Axis(0), entities))?;
    Ok(Projection {
        labels: entities.iter().map(|&e| ckpt.vocab.entity_label(e)).collect(),
        coords,
    })
}
