use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;

use super::{PathCorpus, Provenance, Tag};

pub const CORPUS_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"KGTPATHS";

/// Binary layout (little-endian): magic, version u32, path length u32,
/// path count u64, then `count * length` u32 elements, `count * length` u16
/// namespace tags and `count` provenance bytes.
pub fn write_corpus(corpus: &PathCorpus, path: &Path) -> Result<()> {
    let n = corpus.len() * corpus.length();
    let mut bytes = Vec::with_capacity(24 + n * 6 + corpus.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CORPUS_FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(corpus.length() as u32).to_le_bytes());
    bytes.extend_from_slice(&(corpus.len() as u64).to_le_bytes());
    for e in &corpus.elements {
        bytes.extend_from_slice(&e.to_le_bytes());
    }
    for t in &corpus.tags {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    bytes.extend(corpus.provenance.iter().map(|p| *p as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<PathCorpus> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err(bad("not a path corpus file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CORPUS_FORMAT_VERSION {
        return Err(bad(&format!("unsupported corpus version {version}")));
    }
    let length = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let n = count
        .checked_mul(length)
        .ok_or_else(|| bad("corpus header overflows"))?;
    if bytes.len() != 24 + n * 6 + count {
        return Err(bad("corpus file is truncated or has trailing bytes"));
    }
    let mut corpus = PathCorpus::new(length)?;
    let body = &bytes[24..];
    corpus.elements = body[..4 * n]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    corpus.tags = body[4 * n..6 * n]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect();
    corpus.provenance = body[6 * n..]
        .iter()
        .map(|b| Provenance::from_u8(*b).ok_or_else(|| bad("unknown provenance byte")))
        .collect::<Result<_>>()?;
    Ok(corpus)
}

/// Human-readable dump, one path per line: provenance, then the elements as
/// `graph:name` (or `tag:index` when the tag has no graph).
pub fn write_corpus_text(
    corpus: &PathCorpus,
    graphs: &[(Tag, &KnowledgeGraph)],
    mut out: impl Write,
) -> std::io::Result<()> {
    let by_tag: HashMap<Tag, &KnowledgeGraph> = graphs.iter().copied().collect();
    for (i, p) in corpus.iter().enumerate() {
        let kind = match corpus.provenance(i) {
            Provenance::Raw => "raw",
            Provenance::EntityReplaced => "entity-replaced",
            Provenance::Concatenated => "concatenated",
        };
        write!(out, "{kind}")?;
        for (pos, (&e, &t)) in p.elements.iter().zip(p.tags).enumerate() {
            match by_tag.get(&t) {
                Some(kg) if pos % 2 == 0 => write!(out, "\t{}:{}", kg.name(), kg.entity_name(e))?,
                Some(kg) => write!(out, "\t{}:{}", kg.name(), kg.relation_name(e))?,
                None => write!(out, "\t{t}:{e}")?,
            }
        }
        writeln!(out)?;
    }
    Ok(())
}
