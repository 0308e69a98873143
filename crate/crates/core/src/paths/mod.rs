//! Relational paths: random-walk sampling, cross-graph augmentation and the
//! corpus file format.

mod augment;
mod io;
mod walk;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kg::{AlignmentSet, KnowledgeGraph, Triplet};

pub use augment::{augment_concatenation, augment_entity_replacement, AugmentConfig};
pub use io::{read_corpus, write_corpus, write_corpus_text, CORPUS_FORMAT_VERSION};
pub use walk::{sample_paths, NeighborWeighting, WalkConfig};

/// Namespace tag identifying which graph an element belongs to.
pub type Tag = u16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Provenance {
    Raw = 0,
    EntityReplaced = 1,
    Concatenated = 2,
}

impl Provenance {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Provenance::Raw),
            1 => Some(Provenance::EntityReplaced),
            2 => Some(Provenance::Concatenated),
            _ => None,
        }
    }
}

/// An owned alternating entity/relation sequence. Even offsets (0, 2, ..)
/// hold entities, odd offsets hold relations.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RelationalPath {
    pub elements: Vec<u32>,
    pub tags: Vec<Tag>,
}

impl RelationalPath {
    pub fn new(elements: Vec<u32>, tags: Vec<Tag>) -> Result<Self> {
        if elements.len() != tags.len() {
            return Err(Error::data("path elements and tags differ in length"));
        }
        if elements.len() < 3 || elements.len().is_multiple_of(2) {
            return Err(Error::data(format!(
                "path length {} is not an odd number >= 3",
                elements.len()
            )));
        }
        Ok(RelationalPath { elements, tags })
    }

    /// A path whose elements all come from one graph.
    pub fn single(tag: Tag, elements: Vec<u32>) -> Result<Self> {
        let tags = vec![tag; elements.len()];
        RelationalPath::new(elements, tags)
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn as_ref(&self) -> PathRef<'_> {
        PathRef {
            elements: &self.elements,
            tags: &self.tags,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathRef<'a> {
    pub elements: &'a [u32],
    pub tags: &'a [Tag],
}

impl<'a> PathRef<'a> {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn is_entity_position(i: usize) -> bool {
        i.is_multiple_of(2)
    }

    pub fn to_owned(&self) -> RelationalPath {
        RelationalPath {
            elements: self.elements.to_vec(),
            tags: self.tags.to_vec(),
        }
    }
}

/// Paths of a single length stored contiguously.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathCorpus {
    length: usize,
    elements: Vec<u32>,
    tags: Vec<Tag>,
    provenance: Vec<Provenance>,
}

impl PathCorpus {
    pub fn new(length: usize) -> Result<Self> {
        if length < 3 || length.is_multiple_of(2) {
            return Err(Error::config(format!(
                "path length {length} must be an odd number >= 3"
            )));
        }
        Ok(PathCorpus {
            length,
            elements: Vec::new(),
            tags: Vec::new(),
            provenance: Vec::new(),
        })
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn push(&mut self, elements: &[u32], tags: &[Tag], provenance: Provenance) -> Result<()> {
        if elements.len() != self.length || tags.len() != self.length {
            return Err(Error::data(format!(
                "path of length {} pushed into a corpus of length {}",
                elements.len(),
                self.length
            )));
        }
        self.elements.extend_from_slice(elements);
        self.tags.extend_from_slice(tags);
        self.provenance.push(provenance);
        Ok(())
    }

    pub fn push_path(&mut self, path: &RelationalPath, provenance: Provenance) -> Result<()> {
        self.push(&path.elements, &path.tags, provenance)
    }

    pub fn get(&self, i: usize) -> PathRef<'_> {
        let span = i * self.length..(i + 1) * self.length;
        PathRef {
            elements: &self.elements[span.clone()],
            tags: &self.tags[span],
        }
    }

    pub fn provenance(&self, i: usize) -> Provenance {
        self.provenance[i]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = PathRef<'_>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    /// Appends every path of `other` (same length required).
    pub fn extend(&mut self, other: &PathCorpus) -> Result<()> {
        if other.length != self.length {
            return Err(Error::data("cannot merge corpora of different path lengths"));
        }
        self.elements.extend_from_slice(&other.elements);
        self.tags.extend_from_slice(&other.tags);
        self.provenance.extend_from_slice(&other.provenance);
        Ok(())
    }

    /// Rewrites every `(tag, element)` through `map`; used to move a corpus
    /// into another model's vocabulary.
    pub fn remap(&self, mut map: impl FnMut(usize, Tag, u32) -> Option<(Tag, u32)>) -> Result<PathCorpus> {
        let mut out = self.clone();
        for (i, (e, t)) in out.elements.iter_mut().zip(out.tags.iter_mut()).enumerate() {
            let (nt, ne) = map(i % self.length, *t, *e)
                .ok_or_else(|| Error::data(format!("element {t}:{e} has no mapping")))?;
            *t = nt;
            *e = ne;
        }
        Ok(out)
    }
}

/// Checks the structural contract of a path: odd length, and every
/// `(entity, relation, entity)` window is a triplet of the relation's graph
/// once endpoints from other graphs are replaced by aligned counterparts.
pub struct PathValidator<'a> {
    graphs: HashMap<Tag, &'a KnowledgeGraph>,
    /// `(from tag, entity, to tag)` -> counterparts in `to tag`.
    links: HashMap<(Tag, u32, Tag), Vec<u32>>,
}

impl<'a> PathValidator<'a> {
    pub fn new(graphs: impl IntoIterator<Item = (Tag, &'a KnowledgeGraph)>) -> Self {
        PathValidator {
            graphs: graphs.into_iter().collect(),
            links: HashMap::new(),
        }
    }

    /// Registers an alignment whose left side is graph `left` and right side
    /// graph `right`; both directions become usable.
    pub fn with_alignment(mut self, left: Tag, right: Tag, alignment: &AlignmentSet) -> Self {
        for &(l, r) in alignment.pairs() {
            self.links.entry((left, l, right)).or_default().push(r);
            self.links.entry((right, r, left)).or_default().push(l);
        }
        self
    }

    fn counterparts(&self, tag: Tag, entity: u32, target: Tag) -> Vec<u32> {
        if tag == target {
            return vec![entity];
        }
        self.links
            .get(&(tag, entity, target))
            .cloned()
            .unwrap_or_default()
    }

    pub fn validate(&self, path: PathRef<'_>) -> Result<()> {
        if path.len() < 3 || path.len().is_multiple_of(2) || path.tags.len() != path.len() {
            return Err(Error::data(format!("bad path length {}", path.len())));
        }
        for w in (0..path.len() - 2).step_by(2) {
            let rel_tag = path.tags[w + 1];
            let kg = self
                .graphs
                .get(&rel_tag)
                .ok_or_else(|| Error::data(format!("unknown graph tag {rel_tag}")))?;
            let r = path.elements[w + 1];
            let subs = self.counterparts(path.tags[w], path.elements[w], rel_tag);
            let objs = self.counterparts(path.tags[w + 2], path.elements[w + 2], rel_tag);
            let found = subs
                .iter()
                .any(|&s| objs.iter().any(|&o| kg.contains(&Triplet::new(s, r, o))));
            if !found {
                return Err(Error::data(format!(
                    "window at offset {w} of {:?} is neither a triplet nor an aligned junction",
                    path.elements
                )));
            }
        }
        Ok(())
    }
}
