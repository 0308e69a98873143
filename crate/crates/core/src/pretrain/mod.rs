//! Joint pre-training over several linked graphs.

mod checkpoint;
mod corpus;
mod optim;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::encoder::{init_parameters, Binder, Encoder, EncoderConfig, GradientSet, Mode, PathBatch};
use crate::error::{Error, Result};
use crate::kg::{FrequencyTable, KnowledgeGraph, MultiSourceCollection};
use crate::objective::{
    build_negative_distribution, path_loss, sample_batch_negatives, NceConfig, NegativeDistribution,
};
use crate::paths::{augment_concatenation, augment_entity_replacement, sample_paths, AugmentConfig, Tag, WalkConfig};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, TeacherCheckpoint, TrainingMeta, CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
};
pub use corpus::{IdMaps, TrainingPaths, Vocabulary};
pub use optim::{adam_step, AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Resample walks every this many epochs; `None` samples once.
    pub resample_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 2048,
            learning_rate: 1e-3,
            epochs: 20,
            adam: AdamConfig::default(),
            seed: 0,
            resample_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.epsilon <= 0.0 {
            return Err(Error::config("adam betas must lie in [0, 1) and epsilon be positive"));
        }
        if self.resample_every == Some(0) {
            return Err(Error::config("resample_every must be positive"));
        }
        Ok(())
    }
}

/// Everything pre-training needs besides the data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub walk: WalkConfig,
    pub augment: AugmentConfig,
    pub nce: NceConfig,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    /// Accept a collection with a single unlinked graph.
    pub allow_single_graph: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_time: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} mean_loss={:.6} wall_time={:.3}",
            self.epoch, self.mean_loss, self.wall_time
        )
    }
}

/// Parameters, optimizer state and negative tables for path-loss training.
pub struct PathTrainer {
    pub encoder: Encoder,
    pub adam: AdamState,
    pub entity_negatives: NegativeDistribution,
    pub relation_negatives: NegativeDistribution,
    pub nce: NceConfig,
    pub train: TrainConfig,
}

impl PathTrainer {
    pub fn new(
        encoder: Encoder,
        frequencies: &FrequencyTable,
        nce: NceConfig,
        train: TrainConfig,
    ) -> Result<Self> {
        train.validate()?;
        Ok(PathTrainer {
            adam: AdamState::new(&encoder.params),
            entity_negatives: build_negative_distribution(&frequencies.entity)?,
            relation_negatives: build_negative_distribution(&frequencies.relation)?,
            encoder,
            nce,
            train,
        })
    }

    /// Loss and gradients of one batch, without updating.
    pub fn batch_gradients(&self, batch: &PathBatch, rng: &mut ChaCha8Rng) -> Result<(f64, GradientSet)> {
        let negatives = sample_batch_negatives(
            batch,
            self.nce.k,
            &self.entity_negatives,
            &self.relation_negatives,
            rng,
        )?;
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.encoder.params, Some(0));
        let loss = path_loss(
            &mut tape,
            &self.encoder,
            &mut binder,
            batch,
            &negatives,
            self.nce.variant,
            &mut Mode::Train(&mut dropout_rng),
        )?;
        let value = tape.scalar(loss);
        let grads = tape.backward(loss)?;
        Ok((value, GradientSet::from_tape(&grads, &self.encoder.params, 0)?))
    }

    /// One optimization step on `batch`; returns the batch loss.
    pub fn step(&mut self, batch: &PathBatch, rng: &mut ChaCha8Rng) -> Result<f64> {
        let (loss, grads) = self.batch_gradients(batch, rng)?;
        self.apply(&grads)?;
        Ok(loss)
    }

    pub fn apply(&mut self, grads: &GradientSet) -> Result<()> {
        adam_step(
            &mut self.encoder.params,
            grads,
            &mut self.adam,
            self.train.learning_rate,
            &self.train.adam,
            self.encoder.config.precision,
        )
    }

    /// Runs one epoch over `paths`; returns the path-weighted mean loss.
    pub fn epoch(&mut self, paths: &TrainingPaths, rng: &mut ChaCha8Rng) -> Result<f64> {
        let batches = paths.epoch_batches(self.train.batch_size, rng);
        let (mut total, mut count) = (0.0, 0usize);
        for b in &batches {
            total += self.step(b, rng)? * b.len() as f64;
            count += b.len();
        }
        let mean = total / count.max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::numeric("epoch loss is not finite"));
        }
        Ok(mean)
    }
}

/// Frequency table over the concatenated vocabularies of `kgs`.
pub fn joint_frequencies(kgs: &[&KnowledgeGraph]) -> FrequencyTable {
    let mut entity = Vec::new();
    let mut relation = Vec::new();
    for kg in kgs {
        let f = kg.entity_frequencies();
        entity.extend(f.entity);
        relation.extend(f.relation);
    }
    FrequencyTable { entity, relation }
}

/// Reverse-closes every graph that is not closed yet.
pub fn close_collection(collection: &MultiSourceCollection) -> Result<MultiSourceCollection> {
    let kgs = collection
        .kgs
        .iter()
        .map(|kg| {
            if kg.reverse_closed() {
                Ok(kg.clone())
            } else {
                kg.add_reverse_triplets()
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiSourceCollection {
        kgs,
        alignments: collection.alignments.clone(),
    })
}

/// Walks over every graph of a closed collection, both augmentations across
/// every alignment in both directions, mapped into `vocab`.
pub fn build_joint_paths(
    collection: &MultiSourceCollection,
    vocab: &Vocabulary,
    walk: &WalkConfig,
    augment: &AugmentConfig,
) -> Result<TrainingPaths> {
    let graphs: Vec<(Tag, &KnowledgeGraph)> = collection
        .kgs
        .iter()
        .enumerate()
        .map(|(i, kg)| (i as Tag, kg))
        .collect();
    let maps = IdMaps::new(vocab, &graphs);
    let corpora = graphs
        .iter()
        .map(|(tag, kg)| {
            let cfg = WalkConfig {
                seed: walk.seed.wrapping_add(*tag as u64),
                ..walk.clone()
            };
            sample_paths(kg, *tag, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut paths = TrainingPaths::new();
    for c in &corpora {
        paths.add_corpus(c, &maps)?;
    }
    for (ai, (l, r, a)) in collection.alignments.iter().enumerate() {
        let (lt, rt) = (*l as Tag, *r as Tag);
        let rev = a.reversed();
        for (di, (from, to, al)) in [(lt, rt, a), (rt, lt, &rev)].into_iter().enumerate() {
            let cfg = AugmentConfig {
                seed: augment.seed.wrapping_add((ai * 4 + di * 2) as u64),
                ..augment.clone()
            };
            let src = &corpora[from as usize];
            let replaced = augment_entity_replacement(src, al, from, to, &cfg)?;
            let mut extra = crate::paths::PathCorpus::new(src.length())?;
            for i in src.len()..replaced.len() {
                extra.push(replaced.get(i).elements, replaced.get(i).tags, replaced.provenance(i))?;
            }
            paths.add_corpus(&extra, &maps)?;
            let cfg = AugmentConfig {
                seed: cfg.seed + 1,
                ..cfg
            };
            let joined = augment_concatenation(src, &corpora[to as usize], al, from, to, &cfg)?;
            paths.add_corpus(&joined, &maps)?;
        }
    }
    Ok(paths)
}

/// Pre-trains a teacher over all graphs of `collection`. `log` receives one
/// record per epoch.
pub fn pretrain(
    collection: &MultiSourceCollection,
    config: &PretrainConfig,
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    collection.validate(config.allow_single_graph)?;
    config.walk.validate()?;
    config.train.validate()?;
    let closed = close_collection(collection)?;
    let kgs: Vec<&KnowledgeGraph> = closed.kgs.iter().collect();
    let vocab = Vocabulary::from_graphs(&kgs)?;
    let mut paths = build_joint_paths(&closed, &vocab, &config.walk, &config.augment)?;
    if paths.is_empty() {
        return Err(Error::data("pre-training corpus is empty"));
    }
    let encoder = init_parameters(
        &config.encoder,
        vocab.num_entities(),
        vocab.num_relations(),
        config.train.seed,
    )?;
    let mut trainer = PathTrainer::new(
        encoder,
        &joint_frequencies(&kgs),
        config.nce.clone(),
        config.train.clone(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed ^ config.nce.seed.rotate_left(17));
    let start = Instant::now();
    let mut losses = Vec::with_capacity(config.train.epochs);
    for epoch in 0..config.train.epochs {
        if let Some(r) = config.train.resample_every {
            if epoch > 0 && epoch % r == 0 {
                let walk = WalkConfig {
                    seed: config.walk.seed.wrapping_add(1000 * epoch as u64),
                    ..config.walk.clone()
                };
                paths = build_joint_paths(&closed, &vocab, &walk, &config.augment)?;
            }
        }
        let mean = trainer.epoch(&paths, &mut rng)?;
        losses.push(mean);
        log(&EpochRecord {
            epoch: epoch + 1,
            mean_loss: mean,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    Ok(Checkpoint {
        encoder: trainer.encoder,
        vocab,
        meta: TrainingMeta {
            epochs: config.train.epochs,
            seed: config.train.seed,
            final_loss: losses.last().copied().unwrap_or(f64::NAN),
            epoch_losses: losses,
        },
        provenance: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderKind, Precision};
    use crate::kg::AlignmentSet;

    fn toy() -> MultiSourceCollection {
        let mut a = KnowledgeGraph::new("A");
        let mut b = KnowledgeGraph::new("B");
        for i in 0..6 {
            a.add_named(&format!("e{i}"), "r", &format!("e{}", (i + 1) % 6)).unwrap();
            b.add_named(&format!("f{i}"), "s", &format!("f{}", (i + 2) % 6)).unwrap();
        }
        let al = AlignmentSet::from_pairs(&a, &b, [(0, 0), (1, 1)]).unwrap();
        let mut c = MultiSourceCollection::new(vec![a, b]);
        c.add_alignment(0, 1, al).unwrap();
        c
    }

    fn config(epochs: usize) -> PretrainConfig {
        PretrainConfig {
            train: TrainConfig {
                batch_size: 16,
                learning_rate: 0.01,
                epochs,
                seed: 3,
                ..Default::default()
            },
            encoder: EncoderConfig {
                kind: EncoderKind::Rsn,
                dim: 8,
                dropout: 0.0,
                precision: Precision::F32,
                ..Default::default()
            },
            nce: NceConfig {
                k: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_equals_initialization() {
        let c = config(0);
        let ckpt = pretrain(&toy(), &c, &mut |_| {}).unwrap();
        let init = init_parameters(&c.encoder, ckpt.vocab.num_entities(), ckpt.vocab.num_relations(), 3).unwrap();
        assert_eq!(ckpt.encoder, init);
    }

    #[test]
    fn single_graph_needs_exemption() {
        let mut c = toy();
        c.kgs.truncate(1);
        c.alignments.clear();
        assert!(pretrain(&c, &config(1), &mut |_| {}).is_err());
        let mut cfg = config(1);
        cfg.allow_single_graph = true;
        assert!(pretrain(&c, &cfg, &mut |_| {}).is_ok());
    }

    #[test]
    fn training_is_reproducible_and_logs_each_epoch() {
        let mut records = Vec::new();
        let a = pretrain(&toy(), &config(3), &mut |r| records.push(r.clone())).unwrap();
        let b = pretrain(&toy(), &config(3), &mut |_| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(records.len(), 3);
        assert!(records.iter().all(|r| r.mean_loss.is_finite()));
        assert!(a.encoder.params.all_finite());
    }

    #[test]
    fn joint_paths_include_augmentations() {
        let closed = close_collection(&toy()).unwrap();
        let kgs: Vec<&KnowledgeGraph> = closed.kgs.iter().collect();
        let vocab = Vocabulary::from_graphs(&kgs).unwrap();
        let paths = build_joint_paths(&closed, &vocab, &WalkConfig::default(), &AugmentConfig::default()).unwrap();
        let raw = 2 * (12 + 12);
        assert!(paths.len() > raw);
        assert_eq!(paths.lengths().collect::<Vec<_>>(), vec![5, 9]);
    }
}
