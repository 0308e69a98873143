use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::manifest::Manifest;

use super::{AlignmentSet, DatasetSplit, KnowledgeGraph, Triplet, Vocab};

pub const KG_FORMAT_VERSION: u32 = 1;
const KG_FORMAT: &str = "kgtransfer-kg";

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Splits one tab-separated line into exactly `N` nonempty fields.
fn fields<'a, const N: usize>(line: &'a str, path: &Path, lineno: usize) -> Result<[&'a str; N]> {
    let parts: Vec<&str> = line.split('\t').collect();
    if parts.len() != N {
        return Err(Error::Parse {
            path: path.to_owned(),
            line: lineno,
            message: format!("expected {N} tab-separated fields, found {}", parts.len()),
        });
    }
    if let Some(i) = parts.iter().position(|p| p.trim().is_empty()) {
        return Err(Error::Parse {
            path: path.to_owned(),
            line: lineno,
            message: format!("field {} is empty", i + 1),
        });
    }
    let mut out = [""; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim();
    }
    Ok(out)
}

/// Reads `subject<TAB>relation<TAB>object` lines into `kg`. `source` is only
/// used for error messages.
pub fn parse_triplets(reader: impl BufRead, kg: &mut KnowledgeGraph, source: &Path) -> Result<usize> {
    let mut added = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let [s, r, o] = fields::<3>(line, source, i + 1)?;
        if kg.add_named(s, r, o)?.1 {
            added += 1;
        }
    }
    Ok(added)
}

pub fn load_triplets(path: &Path, name: &str) -> Result<KnowledgeGraph> {
    let mut kg = KnowledgeGraph::new(name);
    parse_triplets(open(path)?, &mut kg, path)?;
    Ok(kg)
}

pub fn write_triplets<'a>(
    path: &Path,
    kg: &KnowledgeGraph,
    triplets: impl IntoIterator<Item = &'a Triplet>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in triplets {
        writeln!(
            w,
            "{}\t{}\t{}",
            kg.entity_name(t.subject),
            kg.relation_name(t.relation),
            kg.entity_name(t.object)
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `left<TAB>right` entity-name pairs resolved against the two graphs.
pub fn load_alignment(path: &Path, left: &KnowledgeGraph, right: &KnowledgeGraph) -> Result<AlignmentSet> {
    let mut a = AlignmentSet::new(left.name(), right.name());
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let [l, r] = fields::<2>(&line, path, i + 1)?;
        let unknown = |side: &str, name: &str| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: format!("unknown {side} entity {name:?}"),
        };
        let li = left.entities().get(l).ok_or_else(|| unknown(left.name(), l))?;
        let ri = right.entities().get(r).ok_or_else(|| unknown(right.name(), r))?;
        a.insert(li, ri);
    }
    Ok(a)
}

pub fn write_alignment(path: &Path, a: &AlignmentSet, left: &KnowledgeGraph, right: &KnowledgeGraph) -> Result<()> {
    let mut out = String::new();
    for &(l, r) in a.pairs() {
        out.push_str(left.entity_name(l));
        out.push('\t');
        out.push_str(right.entity_name(r));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads a train/valid/test triple of files. The returned graph holds the
/// training triplets; valid/test triplets mentioning names unseen in training
/// are dropped and counted in the second return value.
pub fn load_split(train: &Path, valid: &Path, test: &Path, name: &str) -> Result<(KnowledgeGraph, DatasetSplit, usize)> {
    let kg = load_triplets(train, name)?;
    let mut split = DatasetSplit {
        train: kg.triplets().copied().collect(),
        ..Default::default()
    };
    let mut dropped = 0;
    for (path, dest) in [(valid, &mut split.valid), (test, &mut split.test)] {
        let mut seen = std::collections::HashSet::new();
        for (i, line) in open(path)?.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let [s, r, o] = fields::<3>(&line, path, i + 1)?;
            let ids = (
                kg.entities().get(s),
                kg.relations().get(r),
                kg.entities().get(o),
            );
            match ids {
                (Some(s), Some(r), Some(o)) => {
                    let t = Triplet::new(s, r, o);
                    if seen.insert(t) {
                        dest.push(t);
                    }
                }
                _ => dropped += 1,
            }
        }
    }
    split.validate(&kg)?;
    Ok((kg, split, dropped))
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes the directory form: `manifest.txt`, `entities.txt`,
/// `relations.tsv` and `triplets.bin` (little-endian u32 triples).
pub fn save_kg_dir(kg: &KnowledgeGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = Manifest::new(KG_FORMAT, KG_FORMAT_VERSION);
    m.set("name", kg.name());
    m.set("entities", kg.num_entities());
    m.set("relations", kg.num_relations());
    m.set("triplets", kg.len());
    m.set("reverse_closed", kg.reverse_closed());
    m.write(&dir.join("manifest.txt"))?;

    write_lines(&dir.join("entities.txt"), kg.entities().names().iter().cloned())?;
    write_lines(
        &dir.join("relations.tsv"),
        (0..kg.num_relations() as u32).map(|r| {
            let rev = kg
                .reverse_relation(r)
                .map_or_else(|| "-".to_owned(), |x| x.to_string());
            let kind = if kg.is_reverse_relation(r) { "reverse" } else { "forward" };
            format!("{}\t{rev}\t{kind}", kg.relation_name(r))
        }),
    )?;

    let mut bytes = Vec::with_capacity(kg.len() * 12);
    for t in kg.triplets() {
        bytes.extend_from_slice(&t.subject.to_le_bytes());
        bytes.extend_from_slice(&t.relation.to_le_bytes());
        bytes.extend_from_slice(&t.object.to_le_bytes());
    }
    let path = dir.join("triplets.bin");
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

pub fn load_kg_dir(dir: &Path) -> Result<KnowledgeGraph> {
    let m = Manifest::read(&dir.join("manifest.txt"))?;
    m.expect(KG_FORMAT, KG_FORMAT_VERSION)?;
    let n_ent: usize = m.parse_value("entities")?;
    let n_rel: usize = m.parse_value("relations")?;
    let n_tri: usize = m.parse_value("triplets")?;
    let closed: bool = m.parse_value("reverse_closed")?;

    let entities = Vocab::from_names(read_lines(&dir.join("entities.txt"))?)?;
    let rel_path = dir.join("relations.tsv");
    let mut rel_names = Vec::new();
    let mut reverse_of = Vec::new();
    let mut is_reverse = Vec::new();
    for (i, line) in read_lines(&rel_path)?.iter().enumerate() {
        let [name, rev, kind] = fields::<3>(line, &rel_path, i + 1)?;
        rel_names.push(name.to_owned());
        reverse_of.push(if rev == "-" {
            None
        } else {
            Some(rev.parse::<u32>().map_err(|_| Error::Parse {
                path: rel_path.clone(),
                line: i + 1,
                message: format!("bad reverse index {rev:?}"),
            })?)
        });
        is_reverse.push(kind == "reverse");
    }
    let relations = Vocab::from_names(rel_names)?;
    if entities.len() != n_ent || relations.len() != n_rel {
        return Err(Error::Checkpoint(format!(
            "vocabulary sizes disagree with manifest in {}",
            dir.display()
        )));
    }

    let path = dir.join("triplets.bin");
    let mut bytes = Vec::new();
    File::open(&path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&path, e))?;
    if bytes.len() != n_tri * 12 {
        return Err(Error::Checkpoint(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            n_tri * 12
        )));
    }
    let word = |c: &[u8]| u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
    let triplets = bytes
        .chunks_exact(12)
        .map(|c| Triplet::new(word(&c[0..4]), word(&c[4..8]), word(&c[8..12])));
    let mut kg = KnowledgeGraph::from_parts(m.require("name")?, entities, relations, triplets)?;
    if kg.len() != n_tri {
        return Err(Error::Checkpoint("duplicate triplets in triplets.bin".into()));
    }
    kg.set_reverse_pairs(reverse_of, is_reverse, closed);
    kg.validate()?;
    Ok(kg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn parse(text: &str) -> Result<KnowledgeGraph> {
        let mut kg = KnowledgeGraph::new("K");
        parse_triplets(Cursor::new(text), &mut kg, Path::new("mem"))?;
        Ok(kg)
    }

    #[test]
    fn empty_input() {
        let kg = parse("").unwrap();
        assert_eq!((kg.num_entities(), kg.num_relations(), kg.len()), (0, 0, 0));
    }

    #[test]
    fn first_appearance_order_and_dedup() {
        let kg = parse("b\tr\ta\nb\tr\ta\n").unwrap();
        assert_eq!(kg.len(), 1);
        assert_eq!(kg.entities().names(), &["b", "a"]);
        assert_eq!(kg.num_relations(), 1);
        let loop_kg = parse("a\tr\ta\na\tr\ta\n").unwrap();
        assert_eq!((loop_kg.num_entities(), loop_kg.len()), (1, 1));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        match parse("a\tr\tb\na\tr\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match parse("a\tr\tb\n\n\ta\tr\n") {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("empty"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn directory_round_trip() {
        let kg = parse("a\tr\tb\nb\ts\tc\nc\tr\ta\n").unwrap().add_reverse_triplets().unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_kg_dir(&kg, dir.path()).unwrap();
        let back = load_kg_dir(dir.path()).unwrap();
        assert_eq!(back, kg);
    }

    #[test]
    fn truncated_triplet_file_is_rejected() {
        let kg = parse("a\tr\tb\nb\ts\tc\n").unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_kg_dir(&kg, dir.path()).unwrap();
        let p = dir.path().join("triplets.bin");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_kg_dir(dir.path()).is_err());
    }
}
