//! Re-training on a target graph with knowledge distilled from a frozen
//! teacher: feature, network and prediction distillation, alternated with
//! the path objective.

use std::time::Instant;

use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::encoder::{
    init_parameters, is_embedding_table, Binder, Encoder, EncoderConfig, GradientSet, Mode, ParameterSet, PathBatch,
    ENTITY_TABLE, RELATION_TABLE,
};
use crate::error::{Error, Result};
use crate::eval::{build_filter, evaluate, FilterIndex, FilterScope, LinkScorer, MetricsReport, Setting};
use crate::kg::{DatasetSplit, KnowledgeGraph, MultiSourceCollection, Triplet};
use crate::objective::NceConfig;
use crate::paths::{sample_paths, AugmentConfig, Tag, WalkConfig};
use crate::pretrain::{
    adam_step, build_joint_paths, joint_frequencies, AdamState, Checkpoint, IdMaps, PathTrainer, TrainConfig,
    TrainingMeta, TrainingPaths, Vocabulary,
};
use crate::subgraph::SampledSubgraph;

/// Floor applied to student probabilities inside the KL divergence.
pub const PROB_FLOOR: f64 = 1e-12;
/// Feature transform, `d_teacher × d_student`.
pub const FEATURE_TRANSFORM: &str = "kd.feat";
/// Graph tags inside a student vocabulary.
pub const TARGET_TAG: Tag = 0;
pub const SUBGRAPH_TAG: Tag = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Weight of network distillation.
    pub alpha: f64,
    /// Weight of prediction distillation.
    pub beta: f64,
    /// Include feature distillation.
    pub feature: bool,
    /// Distillation batches after every path batch.
    pub kd_ratio: usize,
    /// Non-improving validations tolerated before stopping.
    pub patience: usize,
    /// Validate every this many epochs.
    pub validate_every: usize,
    /// Start shared embeddings and matching encoder weights from the teacher.
    pub init_from_teacher: bool,
    /// Splits used to filter validation ranking.
    pub filter: FilterScope,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 0.3,
            beta: 0.3,
            feature: true,
            kd_ratio: 1,
            patience: 3,
            validate_every: 2,
            init_from_teacher: true,
            filter: FilterScope::Train,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("distill.{name} must be a nonnegative number")));
            }
        }
        if self.validate_every == 0 {
            return Err(Error::config("distill.validate_every must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainConfig {
    pub walk: WalkConfig,
    pub augment: AugmentConfig,
    pub nce: NceConfig,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub distill: DistillConfig,
}

// ---------------------------------------------------------------------------
// Loss terms

/// Feature distillation: MSE between transformed student embeddings
/// (`rows · Wᵀ`) and teacher embeddings, plus MSE between the student
/// embeddings of aligned pairs.
pub fn feature_kd_loss(
    tape: &mut Tape,
    student_rows: Var,
    transform: Var,
    teacher_rows: &Mat,
    pairs: Option<(Var, Var)>,
) -> Var {
    let mapped = tape.matmul_t(student_rows, transform);
    let target = tape.constant(teacher_rows.clone());
    let mut loss = tape.mse(mapped, target);
    if let Some((a, b)) = pairs {
        let tie = tape.mse(a, b);
        loss = tape.add(loss, tie);
    }
    loss
}

/// One network-distillation pair: `left · θ_student · right` against the
/// teacher's `θ`.
pub struct NetworkTerm {
    pub student: Var,
    pub left: Var,
    pub right: Option<Var>,
    pub teacher: Var,
}

/// Mean over matched parameters of their transformed MSE.
pub fn network_kd_loss(tape: &mut Tape, terms: &[NetworkTerm]) -> Result<Var> {
    if terms.is_empty() {
        return Err(Error::data("network distillation needs at least one matched parameter"));
    }
    let mut parts = Vec::with_capacity(terms.len());
    for t in terms {
        let mut x = tape.matmul(t.left, t.student);
        if let Some(r) = t.right {
            x = tape.matmul(x, r);
        }
        if tape.shape(x) != tape.shape(t.teacher) {
            return Err(Error::data(format!(
                "transformed parameter shape {:?} does not match teacher shape {:?}",
                tape.shape(x),
                tape.shape(t.teacher)
            )));
        }
        parts.push(tape.mse(x, t.teacher));
    }
    let sum = tape.add_all(&parts);
    Ok(tape.scale(sum, 1.0 / terms.len() as f64))
}

/// Rows of normalized sigmoid scores: `σ(c·e) / Σ σ(c·e′)`.
pub fn prediction_distribution(contexts: &Mat, candidates: &Mat) -> Result<Mat> {
    if candidates.nrows() == 0 {
        return Err(Error::data("prediction distribution over an empty candidate set"));
    }
    let mut p = contexts.dot(&candidates.t()).mapv(crate::objective::sigmoid);
    for mut row in p.rows_mut() {
        let z = row.sum();
        row /= z;
    }
    Ok(p)
}

/// Same construction on the tape, with gradients.
pub fn student_distribution(tape: &mut Tape, contexts: Var, candidates: Var) -> Var {
    let scores = tape.matmul_t(contexts, candidates);
    let p = tape.sigmoid(scores);
    let z = tape.row_sum(p);
    tape.div_col(p, z)
}

/// KL(teacher ‖ student) per row, averaged over rows. Student
/// probabilities are floored at [`PROB_FLOOR`]; also returns how many
/// entries hit the floor while carrying teacher mass.
pub fn prediction_kd_loss(tape: &mut Tape, teacher: &Mat, student: Var) -> (Var, usize) {
    let rows = teacher.nrows().max(1) as f64;
    let clamped = teacher
        .iter()
        .zip(tape.value(student).iter())
        .filter(|(&t, &s)| t > 0.0 && s <= PROB_FLOOR)
        .count();
    let entropy: f64 = teacher
        .iter()
        .filter(|&&t| t > 0.0)
        .map(|&t| t * t.ln())
        .sum::<f64>()
        / rows;
    let log_s = tape.log(student, PROB_FLOOR);
    let t = tape.constant(teacher.clone());
    let cross = tape.mul(t, log_s);
    let cross = tape.sum(cross);
    let cross = tape.scale(cross, -1.0 / rows);
    let c = tape.constant(Mat::from_elem((1, 1), entropy));
    (tape.add(c, cross), clamped)
}

/// Plain KL divergence with the same floor.
pub fn kl_divergence(teacher: &[f64], student: &[f64]) -> f64 {
    teacher
        .iter()
        .zip(student)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &s)| t * (t.ln() - s.max(PROB_FLOOR).ln()))
        .sum()
}

/// `L_feat + α·L_net + β·L_prob`.
pub fn total_kd_loss(feature: f64, network: f64, prediction: f64, alpha: f64, beta: f64) -> f64 {
    feature + alpha * network + beta * prediction
}

// ---------------------------------------------------------------------------
// Student layout and teacher linkage

/// Student vocabulary over the reverse-closed target graph (tag 0) and the
/// reverse-closed sampled subgraph (tag 1): target entities, subgraph
/// entities, target relations, subgraph relations. Aligned entities stay
/// distinct.
#[derive(Clone, Debug)]
pub struct StudentLayout {
    pub vocab: Vocabulary,
    pub target: KnowledgeGraph,
    pub subgraph: KnowledgeGraph,
    /// Student ids of the subgraph entities, in subgraph order.
    pub subgraph_entities: Vec<usize>,
    /// Student ids of aligned `(subgraph, target)` pairs.
    pub pairs: Vec<(usize, usize)>,
}

fn closed(kg: &KnowledgeGraph) -> Result<KnowledgeGraph> {
    if kg.reverse_closed() {
        Ok(kg.clone())
    } else {
        kg.add_reverse_triplets()
    }
}

impl StudentLayout {
    pub fn new(target: &KnowledgeGraph, sub: &SampledSubgraph) -> Result<Self> {
        if target.name() == sub.kg.name() {
            return Err(Error::data(format!(
                "target and background graphs share the name {}",
                target.name()
            )));
        }
        sub.alignment.validate(&sub.kg, target)?;
        let target = closed(target)?;
        let subgraph = closed(&sub.kg)?;
        let vocab = Vocabulary::from_graphs(&[&target, &subgraph])?;
        let subgraph_entities = subgraph
            .entities()
            .names()
            .iter()
            .map(|n| vocab.entity(SUBGRAPH_TAG, n).expect("registered"))
            .collect::<Vec<_>>();
        let pairs = sub
            .alignment
            .pairs()
            .map(|&(s, t)| {
                (
                    subgraph_entities[s as usize],
                    vocab.entity(TARGET_TAG, target.entity_name(t)).expect("registered"),
                )
            })
            .collect();
        Ok(StudentLayout {
            vocab,
            target,
            subgraph,
            subgraph_entities,
            pairs,
        })
    }
}

/// Teacher ids for student elements found in the teacher vocabulary under
/// the same graph and element name.
fn link_vocab(student: &Vocabulary, teacher: &Vocabulary) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
    let graph = |tag: Tag| teacher.graph_tag(&student.graphs()[tag as usize]);
    let entities = student
        .entities()
        .iter()
        .map(|(tag, name)| graph(*tag).and_then(|t| teacher.entity(t, name)))
        .collect();
    let relations = student
        .relations()
        .iter()
        .map(|(tag, name)| graph(*tag).and_then(|t| teacher.relation(t, name)))
        .collect();
    (entities, relations)
}

/// Copies teacher values into the student: embeddings of shared entities
/// and relations (aligned target entities take their counterpart's), and
/// every encoder weight with a matching name and shape. Embeddings are
/// copied only when both models have the same width. Returns the number of
/// tensors or rows copied.
pub fn init_from_teacher(student: &mut Encoder, layout: &StudentLayout, teacher: &Checkpoint) -> Result<usize> {
    let (mut ent, rel) = link_vocab(&layout.vocab, &teacher.vocab);
    for &(s, t) in &layout.pairs {
        if ent[t].is_none() {
            ent[t] = ent[s];
        }
    }
    let mut copied = 0;
    if student.dim() == teacher.encoder.dim() {
        for (table, map) in [(ENTITY_TABLE, &ent), (RELATION_TABLE, &rel)] {
            let src = teacher.encoder.params.require(table)?;
            let dst = student
                .params
                .get_mut(table)
                .ok_or_else(|| Error::data(format!("missing parameter {table}")))?;
            for (i, m) in map.iter().enumerate() {
                if let Some(j) = m {
                    dst.row_mut(i).assign(&src.row(*j));
                    copied += 1;
                }
            }
        }
    }
    for (name, value) in student.params.iter_mut() {
        if is_embedding_table(name) {
            continue;
        }
        if let Some(src) = teacher.encoder.params.get(name) {
            if src.dim() == value.dim() {
                value.assign(src);
                copied += 1;
            }
        }
    }
    Ok(copied)
}

/// Rectangular identity.
fn eye(rows: usize, cols: usize) -> Mat {
    Mat::from_shape_fn((rows, cols), |(i, j)| (i == j) as u8 as f64)
}

/// A student weight matched by name with a teacher weight.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkMatch {
    pub name: String,
    pub left: String,
    pub right: Option<String>,
}

/// Encoder weights present in both models by name. Layers beyond the
/// shallower model have no counterpart and are skipped.
pub fn match_parameters(student: &ParameterSet, teacher: &ParameterSet) -> Vec<NetworkMatch> {
    student
        .names()
        .filter(|n| !is_embedding_table(n) && teacher.get(n).is_some())
        .map(|n| {
            let (s, t) = (student.require(n).unwrap().dim(), teacher.require(n).unwrap().dim());
            NetworkMatch {
                name: n.to_owned(),
                left: format!("kd.net.{n}.left"),
                right: (s.1 != t.1).then(|| format!("kd.net.{n}.right")),
            }
        })
        .collect()
}

/// Learnable distillation transforms, identity-initialized: the feature map
/// when `feature`, and left (plus right, when widths differ) maps for every
/// network match.
pub fn init_transforms(
    student: &Encoder,
    teacher: &Encoder,
    feature: bool,
    network: &[NetworkMatch],
) -> Result<ParameterSet> {
    let mut p = ParameterSet::new();
    if feature {
        p.insert(FEATURE_TRANSFORM, eye(teacher.dim(), student.dim()))?;
    }
    for m in network {
        let (s, t) = (
            student.params.require(&m.name)?.dim(),
            teacher.params.require(&m.name)?.dim(),
        );
        p.insert(m.left.clone(), eye(t.0, s.0))?;
        if let Some(r) = &m.right {
            p.insert(r.clone(), eye(s.1, t.1))?;
        }
    }
    Ok(p)
}

/// Loss graph of one distillation step.
pub struct KdTerms {
    pub total: Var,
    pub feature: Option<Var>,
    pub network: Option<Var>,
    pub prediction: Option<Var>,
    /// Student probabilities that hit the floor.
    pub clamped: usize,
}

struct FeaturePart {
    student_ids: Vec<usize>,
    teacher_rows: Mat,
}

struct PredictionPart {
    /// Student ids of the candidate set.
    student_ids: Vec<usize>,
    /// Teacher embeddings of the candidate set.
    teacher_candidates: Mat,
    entity_map: Vec<Option<usize>>,
    relation_map: Vec<Option<usize>>,
}

/// Frozen teacher plus learnable transforms and the precomputed teacher
/// targets of every active distillation term.
pub struct Distiller<'t> {
    pub teacher: &'t Checkpoint,
    pub config: DistillConfig,
    pub transforms: ParameterSet,
    adam: AdamState,
    feature: Option<FeaturePart>,
    pairs: Vec<(usize, usize)>,
    network: Vec<NetworkMatch>,
    prediction: Option<PredictionPart>,
}

impl<'t> Distiller<'t> {
    /// Sets up the active terms; `None` when no term is active (empty
    /// subgraph and zero network weight, or all weights off).
    pub fn new(
        teacher: &'t Checkpoint,
        layout: &StudentLayout,
        student: &Encoder,
        config: &DistillConfig,
    ) -> Result<Option<Self>> {
        config.validate()?;
        let (ent, rel) = link_vocab(&layout.vocab, &teacher.vocab);
        let candidates = &layout.subgraph_entities;
        let teacher_ids = candidates
            .iter()
            .map(|&e| {
                ent[e].ok_or_else(|| {
                    Error::data(format!(
                        "teacher has no embedding for {}",
                        layout.vocab.entity_label(e)
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let teacher_table = teacher.encoder.params.require(ENTITY_TABLE)?;
        let teacher_rows = teacher_table.select(Axis(0), &teacher_ids);

        let feature = (config.feature && !candidates.is_empty()).then(|| FeaturePart {
            student_ids: candidates.clone(),
            teacher_rows: teacher_rows.clone(),
        });
        let network = if config.alpha > 0.0 {
            match_parameters(&student.params, &teacher.encoder.params)
        } else {
            Vec::new()
        };
        let prediction = if config.beta > 0.0 && !candidates.is_empty() {
            for (i, (tag, name)) in layout.vocab.relations().iter().enumerate() {
                if *tag == SUBGRAPH_TAG && rel[i].is_none() {
                    return Err(Error::data(format!("teacher has no relation {name}")));
                }
            }
            Some(PredictionPart {
                student_ids: candidates.clone(),
                teacher_candidates: teacher_rows,
                entity_map: ent,
                relation_map: rel,
            })
        } else {
            None
        };
        if feature.is_none() && network.is_empty() && prediction.is_none() {
            return Ok(None);
        }
        let transforms = init_transforms(student, &teacher.encoder, feature.is_some(), &network)?;
        Ok(Some(Distiller {
            teacher,
            config: config.clone(),
            adam: AdamState::new(&transforms),
            transforms,
            pairs: layout.pairs.clone(),
            feature,
            network,
            prediction,
        }))
    }

    pub fn uses_prediction(&self) -> bool {
        self.prediction.is_some()
    }

    pub fn network_matches(&self) -> &[NetworkMatch] {
        &self.network
    }

    /// Teacher distribution over the candidate set for the last element of
    /// every path in `batch` (student ids).
    pub fn teacher_distribution(&self, batch: &PathBatch) -> Result<Mat> {
        let part = self
            .prediction
            .as_ref()
            .ok_or_else(|| Error::data("prediction distillation is disabled"))?;
        let mut ids = Vec::with_capacity(batch.len() * batch.length());
        for b in 0..batch.len() {
            for (p, &id) in batch.path(b).iter().enumerate() {
                let map = if p % 2 == 0 {
                    &part.entity_map
                } else {
                    &part.relation_map
                };
                let t = map.get(id as usize).copied().flatten().ok_or_else(|| {
                    Error::data(format!("path element {id} at position {p} has no teacher counterpart"))
                })?;
                ids.push(t as u32);
            }
        }
        let tb = PathBatch::new(batch.length(), ids)?;
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(&self.teacher.encoder.params);
        let c = self
            .teacher
            .encoder
            .context_at(&mut tape, &mut binder, &tb, tb.length() - 1, &mut Mode::Eval)?;
        prediction_distribution(tape.value(c), &part.teacher_candidates)
    }

    /// Builds the weighted distillation loss. Student parameters occupy
    /// slots `0..n`, transforms `n..`. `batch` feeds prediction
    /// distillation and is ignored when that term is off.
    pub fn loss(&self, tape: &mut Tape, student: &Encoder, batch: Option<&PathBatch>) -> Result<KdTerms> {
        let base = student.params.len();
        let mut sb = Binder::new(&student.params, Some(0));
        let mut kb = Binder::new(&self.transforms, Some(base));
        let mut parts = Vec::new();
        let mut terms = KdTerms {
            total: tape.constant(Mat::zeros((1, 1))),
            feature: None,
            network: None,
            prediction: None,
            clamped: 0,
        };
        if let Some(f) = &self.feature {
            let rows = sb.rows(tape, ENTITY_TABLE, &f.student_ids)?;
            let w = kb.weight(tape, FEATURE_TRANSFORM)?;
            let pairs = if self.pairs.is_empty() {
                None
            } else {
                let a: Vec<usize> = self.pairs.iter().map(|p| p.0).collect();
                let b: Vec<usize> = self.pairs.iter().map(|p| p.1).collect();
                Some((sb.rows(tape, ENTITY_TABLE, &a)?, sb.rows(tape, ENTITY_TABLE, &b)?))
            };
            let l = feature_kd_loss(tape, rows, w, &f.teacher_rows, pairs);
            terms.feature = Some(l);
            parts.push(l);
        }
        if !self.network.is_empty() {
            let mut nt = Vec::with_capacity(self.network.len());
            for m in &self.network {
                let right = match &m.right {
                    Some(r) => Some(kb.weight(tape, r)?),
                    None => None,
                };
                nt.push(NetworkTerm {
                    student: sb.weight(tape, &m.name)?,
                    left: kb.weight(tape, &m.left)?,
                    right,
                    teacher: tape.constant(self.teacher.encoder.params.require(&m.name)?.clone()),
                });
            }
            let l = network_kd_loss(tape, &nt)?;
            terms.network = Some(l);
            parts.push(tape.scale(l, self.config.alpha));
        }
        if let (Some(p), Some(batch)) = (&self.prediction, batch) {
            let teacher = self.teacher_distribution(batch)?;
            let ctx = student.context_at(tape, &mut sb, batch, batch.length() - 1, &mut Mode::Eval)?;
            let cands = sb.rows(tape, ENTITY_TABLE, &p.student_ids)?;
            let dist = student_distribution(tape, ctx, cands);
            let (l, clamped) = prediction_kd_loss(tape, &teacher, dist);
            terms.clamped = clamped;
            terms.prediction = Some(l);
            parts.push(tape.scale(l, self.config.beta));
        }
        if !parts.is_empty() {
            terms.total = tape.add_all(&parts);
        }
        Ok(terms)
    }

    /// One distillation update of the student (through `trainer`'s
    /// optimizer) and of the transforms; returns the loss.
    pub fn step(&mut self, trainer: &mut PathTrainer, batch: Option<&PathBatch>) -> Result<f64> {
        let mut tape = Tape::new();
        let terms = self.loss(&mut tape, &trainer.encoder, batch)?;
        if terms.feature.is_none() && terms.network.is_none() && terms.prediction.is_none() {
            return Ok(0.0);
        }
        let value = tape.scalar(terms.total);
        let grads = tape.backward(terms.total)?;
        let n = trainer.encoder.params.len();
        let sg = GradientSet::from_tape(&grads, &trainer.encoder.params, 0)?;
        let kg = GradientSet::from_tape(&grads, &self.transforms, n)?;
        trainer.apply(&sg)?;
        adam_step(
            &mut self.transforms,
            &kg,
            &mut self.adam,
            trainer.train.learning_rate,
            &trainer.train.adam,
            trainer.encoder.config.precision,
        )?;
        Ok(value)
    }
}

// ---------------------------------------------------------------------------
// Re-training loop

#[derive(Clone, Debug, PartialEq)]
pub struct RetrainRecord {
    pub epoch: usize,
    pub path_loss: f64,
    pub kd_loss: Option<f64>,
    pub valid_mrr: Option<f64>,
    pub valid_hits1: Option<f64>,
    pub wall_time: f64,
}

impl RetrainRecord {
    pub fn to_line(&self) -> String {
        let mut s = format!(
            "epoch={} mean_loss={:.6} wall_time={:.3}",
            self.epoch, self.path_loss, self.wall_time
        );
        if let Some(k) = self.kd_loss {
            s += &format!(" kd_loss={k:.6}");
        }
        if let Some(m) = self.valid_mrr {
            s += &format!(" valid_mrr={m:.6}");
        }
        if let Some(h) = self.valid_hits1 {
            s += &format!(" valid_hits1={h:.6}");
        }
        s
    }
}

/// Best-validation student.
#[derive(Clone, Debug)]
pub struct Student {
    pub checkpoint: Checkpoint,
    pub history: Vec<RetrainRecord>,
    pub best_epoch: usize,
    pub best_valid_mrr: f64,
    pub epochs_run: usize,
    /// Whether any distillation term was active.
    pub distilled: bool,
}

/// Scorer over the target graph of a student checkpoint.
pub fn target_scorer<'a>(ckpt: &'a Checkpoint, target: &KnowledgeGraph) -> Result<LinkScorer<'a>> {
    let tag = ckpt
        .vocab
        .graph_tag(target.name())
        .ok_or_else(|| Error::data(format!("checkpoint does not cover graph {}", target.name())))?;
    LinkScorer::for_graph(&ckpt.encoder, &ckpt.vocab, tag, target)
}

/// Filtered metrics of `ckpt` on `test`, with the filter drawn from
/// `scope`. `target` is the training graph (closed here if needed).
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    target: &KnowledgeGraph,
    split: &DatasetSplit,
    test: &[Triplet],
    scope: FilterScope,
    setting: Setting,
) -> Result<MetricsReport> {
    let target = closed(target)?;
    let scorer = target_scorer(ckpt, &target)?;
    let filter = build_filter(scope, &target, &split.valid, &split.test);
    evaluate(&scorer, &target, test, &filter, scope, setting)
}

fn validation(
    encoder: &Encoder,
    vocab: &Vocabulary,
    target: &KnowledgeGraph,
    valid: &[Triplet],
    filter: &FilterIndex,
    scope: FilterScope,
) -> Result<MetricsReport> {
    let scorer = LinkScorer::for_graph(encoder, vocab, TARGET_TAG, target)?;
    evaluate(&scorer, target, valid, filter, scope, Setting::Lp)
}

/// Re-trains a student on `target` (training graph) plus the sampled
/// subgraph, alternating path-loss batches with distillation batches when a
/// teacher is given, and early-stopping on filtered validation MRR.
///
/// Without a teacher (or with every distillation term inactive) this is
/// plain path training on the merged corpus; with an empty subgraph it is
/// target-only training.
pub fn retrain(
    target: &KnowledgeGraph,
    split: &DatasetSplit,
    sub: &SampledSubgraph,
    teacher: Option<&Checkpoint>,
    config: &RetrainConfig,
    setting: Setting,
    log: &mut dyn FnMut(&RetrainRecord),
) -> Result<Student> {
    config.train.validate()?;
    config.walk.validate()?;
    config.distill.validate()?;
    if split.valid.is_empty() {
        return Err(Error::data("re-training needs validation triplets for early stopping"));
    }
    let layout = StudentLayout::new(target, sub)?;
    let with_sub = !layout.subgraph.is_empty();

    let mut collection = MultiSourceCollection::new(vec![layout.target.clone()]);
    if with_sub {
        collection.kgs.push(layout.subgraph.clone());
        if !sub.alignment.is_empty() {
            collection.add_alignment(1, 0, sub.alignment.clone())?;
        }
    }
    let paths = build_joint_paths(&collection, &layout.vocab, &config.walk, &config.augment)?;
    if paths.is_empty() {
        return Err(Error::data("re-training corpus is empty"));
    }
    // The subgraph's own walks, identical to those in the merged corpus.
    let mut sub_paths = TrainingPaths::new();
    if with_sub {
        let cfg = WalkConfig {
            seed: config.walk.seed.wrapping_add(SUBGRAPH_TAG as u64),
            ..config.walk.clone()
        };
        let corpus = sample_paths(&layout.subgraph, SUBGRAPH_TAG, &cfg)?;
        let maps = IdMaps::new(
            &layout.vocab,
            &[(TARGET_TAG, &layout.target), (SUBGRAPH_TAG, &layout.subgraph)],
        );
        sub_paths.add_corpus(&corpus, &maps)?;
    }

    let mut encoder = init_parameters(
        &config.encoder,
        layout.vocab.num_entities(),
        layout.vocab.num_relations(),
        config.train.seed,
    )?;
    let mut distiller = match teacher {
        Some(t) => Distiller::new(t, &layout, &encoder, &config.distill)?,
        None => None,
    };
    if let Some(d) = &distiller {
        if config.distill.init_from_teacher {
            init_from_teacher(&mut encoder, &layout, d.teacher)?;
            if encoder.config.precision == crate::encoder::Precision::F32 {
                encoder.params.round_to_f32();
            }
        }
    }

    let kgs: Vec<&KnowledgeGraph> = if with_sub {
        vec![&layout.target, &layout.subgraph]
    } else {
        vec![&layout.target]
    };
    let mut trainer = PathTrainer::new(
        encoder,
        &joint_frequencies(&kgs),
        config.nce.clone(),
        config.train.clone(),
    )?;
    let filter = build_filter(config.distill.filter, &layout.target, &split.valid, &split.test);
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed ^ config.nce.seed.rotate_left(17));
    let start = Instant::now();

    let mut history = Vec::new();
    let mut losses = Vec::new();
    let mut best: Option<(f64, usize, Encoder)> = None;
    let mut stale = 0usize;
    let mut epochs_run = 0;
    for epoch in 1..=config.train.epochs {
        let batches = paths.epoch_batches(config.train.batch_size, &mut rng);
        let kd_batches = match &distiller {
            Some(d) if d.uses_prediction() && !sub_paths.is_empty() => {
                sub_paths.epoch_batches(config.train.batch_size, &mut rng)
            }
            _ => Vec::new(),
        };
        let (mut total, mut count) = (0.0, 0usize);
        let (mut kd_total, mut kd_steps) = (0.0, 0usize);
        let mut cursor = 0usize;
        for b in &batches {
            total += trainer.step(b, &mut rng)? * b.len() as f64;
            count += b.len();
            if let Some(d) = distiller.as_mut() {
                for _ in 0..config.distill.kd_ratio {
                    let kb = if kd_batches.is_empty() {
                        None
                    } else {
                        cursor = (cursor + 1) % kd_batches.len();
                        Some(&kd_batches[cursor])
                    };
                    kd_total += d.step(&mut trainer, kb)?;
                    kd_steps += 1;
                }
            }
        }
        let mean = total / count.max(1) as f64;
        if !mean.is_finite() || !kd_total.is_finite() {
            return Err(Error::numeric(format!("loss diverged at epoch {epoch}")));
        }
        losses.push(mean);
        epochs_run = epoch;
        let check = epoch % config.distill.validate_every == 0 || epoch == config.train.epochs;
        let valid = if check {
            Some(validation(
                &trainer.encoder,
                &layout.vocab,
                &layout.target,
                &split.valid,
                &filter,
                config.distill.filter,
            )?)
        } else {
            None
        };
        let record = RetrainRecord {
            epoch,
            path_loss: mean,
            kd_loss: (kd_steps > 0).then(|| kd_total / kd_steps as f64),
            valid_mrr: valid.as_ref().map(|v| v.mrr),
            valid_hits1: valid.as_ref().map(|v| v.hits1),
            wall_time: start.elapsed().as_secs_f64(),
        };
        log(&record);
        history.push(record);
        if let Some(m) = valid.map(|v| v.mrr) {
            if best.as_ref().is_none_or(|(b, _, _)| m > *b) {
                best = Some((m, epoch, trainer.encoder.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale > config.distill.patience {
                    break;
                }
            }
        }
    }
    let (best_mrr, best_epoch, best_encoder) = match best {
        Some(b) => b,
        None => {
            let m = validation(
                &trainer.encoder,
                &layout.vocab,
                &layout.target,
                &split.valid,
                &filter,
                config.distill.filter,
            )?
            .mrr;
            (m, 0, trainer.encoder.clone())
        }
    };

    let distilled = distiller.is_some();
    let mut provenance = vec![("setting".to_owned(), setting.as_str().to_owned())];
    if let (Some(t), true) = (teacher, distilled) {
        provenance.push(("teacher.checksum".into(), t.checksum()));
    }
    for (k, v) in sub.manifest().entries() {
        provenance.push((format!("subgraph.{k}"), v.clone()));
    }
    provenance.push(("distill.alpha".into(), format!("{:?}", config.distill.alpha)));
    provenance.push(("distill.beta".into(), format!("{:?}", config.distill.beta)));
    provenance.push(("distill.active".into(), distilled.to_string()));
    provenance.push(("best_epoch".into(), best_epoch.to_string()));
    provenance.push(("best_valid_mrr".into(), format!("{best_mrr:?}")));
    Ok(Student {
        checkpoint: Checkpoint {
            encoder: best_encoder,
            vocab: layout.vocab,
            meta: TrainingMeta {
                epochs: epochs_run,
                seed: config.train.seed,
                final_loss: losses.last().copied().unwrap_or(f64::NAN),
                epoch_losses: losses,
            },
            provenance,
        },
        history,
        best_epoch,
        best_valid_mrr: best_mrr,
        epochs_run,
        distilled,
    })
}
