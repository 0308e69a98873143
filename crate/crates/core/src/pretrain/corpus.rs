use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::encoder::PathBatch;
use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::paths::{PathCorpus, Tag};

/// Model vocabulary spanning several graphs. Every element is identified by
/// its graph tag and local name; model ids are positions in these lists.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    graphs: Vec<String>,
    entities: Vec<(Tag, String)>,
    relations: Vec<(Tag, String)>,
    entity_index: HashMap<(Tag, String), usize>,
    relation_index: HashMap<(Tag, String), usize>,
}

impl Vocabulary {
    pub fn new(graphs: Vec<String>) -> Self {
        Vocabulary {
            graphs,
            ..Default::default()
        }
    }

    /// All entities, then all relations, of `kgs` in order; graph `i` gets
    /// tag `i`.
    pub fn from_graphs(kgs: &[&KnowledgeGraph]) -> Result<Self> {
        let mut v = Vocabulary::new(kgs.iter().map(|k| k.name().to_owned()).collect());
        for (tag, kg) in kgs.iter().enumerate() {
            for name in kg.entities().names() {
                v.push_entity(tag as Tag, name)?;
            }
        }
        for (tag, kg) in kgs.iter().enumerate() {
            for name in kg.relations().names() {
                v.push_relation(tag as Tag, name)?;
            }
        }
        Ok(v)
    }

    fn check_tag(&self, tag: Tag) -> Result<()> {
        if tag as usize >= self.graphs.len() {
            return Err(Error::data(format!("unknown graph tag {tag}")));
        }
        Ok(())
    }

    /// Adds an entity unless present; returns its id either way.
    pub fn push_entity(&mut self, tag: Tag, name: &str) -> Result<usize> {
        self.check_tag(tag)?;
        let key = (tag, name.to_owned());
        if let Some(&i) = self.entity_index.get(&key) {
            return Ok(i);
        }
        self.entities.push(key.clone());
        self.entity_index.insert(key, self.entities.len() - 1);
        Ok(self.entities.len() - 1)
    }

    pub fn push_relation(&mut self, tag: Tag, name: &str) -> Result<usize> {
        self.check_tag(tag)?;
        let key = (tag, name.to_owned());
        if let Some(&i) = self.relation_index.get(&key) {
            return Ok(i);
        }
        self.relations.push(key.clone());
        self.relation_index.insert(key, self.relations.len() - 1);
        Ok(self.relations.len() - 1)
    }

    pub fn graphs(&self) -> &[String] {
        &self.graphs
    }

    pub fn graph_tag(&self, name: &str) -> Option<Tag> {
        self.graphs.iter().position(|g| g == name).map(|i| i as Tag)
    }

    pub fn entities(&self) -> &[(Tag, String)] {
        &self.entities
    }

    pub fn relations(&self) -> &[(Tag, String)] {
        &self.relations
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entity(&self, tag: Tag, name: &str) -> Option<usize> {
        self.entity_index.get(&(tag, name.to_owned())).copied()
    }

    pub fn relation(&self, tag: Tag, name: &str) -> Option<usize> {
        self.relation_index.get(&(tag, name.to_owned())).copied()
    }

    /// `graph:name` label of entity `i`.
    pub fn entity_label(&self, i: usize) -> String {
        let (t, n) = &self.entities[i];
        format!("{}:{n}", self.graphs[*t as usize])
    }

    pub fn relation_label(&self, i: usize) -> String {
        let (t, n) = &self.relations[i];
        format!("{}:{n}", self.graphs[*t as usize])
    }

    /// Model ids of every local entity of `kg` registered under `tag`
    /// (`None` where absent).
    pub fn entity_map(&self, tag: Tag, kg: &KnowledgeGraph) -> Vec<Option<usize>> {
        kg.entities().names().iter().map(|n| self.entity(tag, n)).collect()
    }

    pub fn relation_map(&self, tag: Tag, kg: &KnowledgeGraph) -> Vec<Option<usize>> {
        kg.relations().names().iter().map(|n| self.relation(tag, n)).collect()
    }
}

/// Local-to-model id tables for each tag.
pub struct IdMaps {
    pub entities: Vec<Vec<Option<usize>>>,
    pub relations: Vec<Vec<Option<usize>>>,
}

impl IdMaps {
    pub fn new(vocab: &Vocabulary, graphs: &[(Tag, &KnowledgeGraph)]) -> Self {
        let n = graphs.iter().map(|(t, _)| *t as usize + 1).max().unwrap_or(0);
        let mut entities = vec![Vec::new(); n];
        let mut relations = vec![Vec::new(); n];
        for (tag, kg) in graphs {
            entities[*tag as usize] = vocab.entity_map(*tag, kg);
            relations[*tag as usize] = vocab.relation_map(*tag, kg);
        }
        IdMaps { entities, relations }
    }

    fn lookup(&self, position: usize, tag: Tag, id: u32) -> Option<usize> {
        let table = if position.is_multiple_of(2) {
            &self.entities
        } else {
            &self.relations
        };
        table.get(tag as usize)?.get(id as usize).copied().flatten()
    }
}

/// Training paths in model ids, grouped by length.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrainingPaths {
    groups: BTreeMap<usize, Vec<u32>>,
}

impl TrainingPaths {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds every path of `corpus`; fails on elements missing from `maps`.
    pub fn add_corpus(&mut self, corpus: &PathCorpus, maps: &IdMaps) -> Result<()> {
        let l = corpus.length();
        let group = self.groups.entry(l).or_default();
        for p in corpus.iter() {
            for (pos, (&e, &t)) in p.elements.iter().zip(p.tags).enumerate() {
                let id = maps.lookup(pos, t, e).ok_or_else(|| {
                    Error::data(format!("path element {t}:{e} at position {pos} is not in the model vocabulary"))
                })?;
                group.push(id as u32);
            }
        }
        Ok(())
    }

    pub fn add_path(&mut self, ids: &[u32]) {
        self.groups.entry(ids.len()).or_default().extend_from_slice(ids);
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|(l, ids)| ids.len() / l).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.groups.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u32]> {
        self.groups.iter().flat_map(|(&l, ids)| ids.chunks_exact(l))
    }

    /// One epoch of batches: paths shuffled within each length, cut into
    /// batches of at most `batch_size`, and the batch order shuffled.
    pub fn epoch_batches(&self, batch_size: usize, rng: &mut impl Rng) -> Vec<PathBatch> {
        let mut batches = Vec::new();
        for (&l, ids) in &self.groups {
            let mut order: Vec<usize> = (0..ids.len() / l).collect();
            order.shuffle(rng);
            for chunk in order.chunks(batch_size.max(1)) {
                let mut flat = Vec::with_capacity(chunk.len() * l);
                for &i in chunk {
                    flat.extend_from_slice(&ids[i * l..(i + 1) * l]);
                }
                batches.push(PathBatch::new(l, flat).expect("whole paths"));
            }
        }
        batches.shuffle(rng);
        batches
    }
}
