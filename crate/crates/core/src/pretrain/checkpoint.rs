use std::fs;
use std::path::Path;

use crate::autodiff::Mat;
use crate::encoder::{Encoder, EncoderConfig, EncoderKind, ParameterSet, Precision};
use crate::error::{Error, Result};
use crate::manifest::{sha256_hex, Manifest};
use crate::paths::Tag;

use super::corpus::Vocabulary;

pub const CHECKPOINT_FORMAT: &str = "kgtransfer-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const TENSORS: &str = "tensors.bin";
const VOCAB: &str = "vocab.tsv";
const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub seed: u64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Encoder parameters plus the vocabulary they are indexed by. Teachers and
/// students share this format; students add provenance entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: Encoder,
    pub vocab: Vocabulary,
    pub meta: TrainingMeta,
    pub provenance: Vec<(String, String)>,
}

pub type TeacherCheckpoint = Checkpoint;

fn tensor_bytes(params: &ParameterSet, precision: Precision) -> Vec<u8> {
    let mut out = Vec::new();
    for (_, m) in params.iter() {
        for &x in m.iter() {
            match precision {
                Precision::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                Precision::F64 => out.extend_from_slice(&x.to_le_bytes()),
            }
        }
    }
    out
}

fn vocab_text(vocab: &Vocabulary) -> String {
    let mut s = String::new();
    for (i, g) in vocab.graphs().iter().enumerate() {
        s.push_str(&format!("graph\t{i}\t{g}\n"));
    }
    for (t, n) in vocab.entities() {
        s.push_str(&format!("entity\t{t}\t{n}\n"));
    }
    for (t, n) in vocab.relations() {
        s.push_str(&format!("relation\t{t}\t{n}\n"));
    }
    s
}

fn parse_vocab(text: &str) -> Result<Vocabulary> {
    let bad = |i: usize| Error::Checkpoint(format!("{VOCAB} line {} is malformed", i + 1));
    let mut graphs = Vec::new();
    let mut rest = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut f = line.splitn(3, '\t');
        let (kind, tag, name) = (f.next(), f.next(), f.next());
        let (Some(kind), Some(tag), Some(name)) = (kind, tag, name) else {
            return Err(bad(i));
        };
        let tag: Tag = tag.parse().map_err(|_| bad(i))?;
        match kind {
            "graph" if tag as usize == graphs.len() => graphs.push(name.to_owned()),
            "entity" | "relation" => rest.push((i, kind == "entity", tag, name)),
            _ => return Err(bad(i)),
        }
    }
    let mut v = Vocabulary::new(graphs);
    for (i, is_entity, tag, name) in rest {
        let before = (v.num_entities(), v.num_relations());
        if is_entity {
            v.push_entity(tag, name).map_err(|_| bad(i))?;
        } else {
            v.push_relation(tag, name).map_err(|_| bad(i))?;
        }
        if (v.num_entities(), v.num_relations()) == before {
            return Err(Error::Checkpoint(format!("{VOCAB} line {} repeats an element", i + 1)));
        }
    }
    Ok(v)
}

impl Checkpoint {
    /// Content hash identifying these parameters.
    pub fn checksum(&self) -> String {
        sha256_hex(&tensor_bytes(&self.encoder.params, self.encoder.config.precision))
    }

    pub fn provenance(&self, key: &str) -> Option<&str> {
        self.provenance
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

/// Writes `manifest.txt`, `tensors.bin` (little-endian, row-major, 32- or
/// 64-bit by precision) and `vocab.tsv` into `dir`.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    let enc = &ckpt.encoder;
    if enc.num_entities() != ckpt.vocab.num_entities() || enc.num_relations() != ckpt.vocab.num_relations() {
        return Err(Error::Checkpoint("vocabulary does not match the embedding tables".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors = tensor_bytes(&enc.params, enc.config.precision);
    let vocab = vocab_text(&ckpt.vocab);

    let mut m = Manifest::new(CHECKPOINT_FORMAT, CHECKPOINT_VERSION);
    let c = &enc.config;
    m.set("encoder.kind", c.kind.as_str());
    m.set("encoder.dim", c.dim);
    m.set("encoder.layers", c.layers);
    m.set("encoder.heads", c.heads);
    m.set("encoder.dropout", format!("{:?}", c.dropout));
    m.set("encoder.precision", c.precision.as_str());
    m.set("encoder.max_positions", c.max_positions);
    m.set("vocab.graphs", ckpt.vocab.graphs().len());
    m.set("vocab.entities", ckpt.vocab.num_entities());
    m.set("vocab.relations", ckpt.vocab.num_relations());
    m.set("vocab.sha256", sha256_hex(vocab.as_bytes()));
    m.set("params.count", enc.params.len());
    for (i, (name, t)) in enc.params.iter().enumerate() {
        m.set(&format!("param.{i}.name"), name);
        m.set(&format!("param.{i}.shape"), format!("{}x{}", t.nrows(), t.ncols()));
    }
    m.set("tensors.bytes", tensors.len());
    m.set("tensors.sha256", sha256_hex(&tensors));
    m.set("meta.epochs", ckpt.meta.epochs);
    m.set("meta.seed", ckpt.meta.seed);
    m.set("meta.final_loss", format!("{:?}", ckpt.meta.final_loss));
    let losses: Vec<String> = ckpt.meta.epoch_losses.iter().map(|l| format!("{l:?}")).collect();
    m.set("meta.epoch_losses", losses.join(","));
    for (k, v) in &ckpt.provenance {
        m.set(&format!("provenance.{k}"), v);
    }

    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    write(TENSORS, &tensors)?;
    write(VOCAB, vocab.as_bytes())?;
    m.write(&dir.join(MANIFEST))
}

fn parse_shape(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Checkpoint(format!("invalid tensor shape {s:?}"));
    let (r, c) = s.split_once('x').ok_or_else(bad)?;
    Ok((r.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?))
}

/// Reads a checkpoint directory, verifying version, sizes and checksums
/// before anything is decoded.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let m = Manifest::read(&dir.join(MANIFEST))?;
    m.expect(CHECKPOINT_FORMAT, CHECKPOINT_VERSION)?;
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let tensors = read(TENSORS)?;
    let expected: usize = m.parse_value("tensors.bytes")?;
    if tensors.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{TENSORS} holds {} bytes, manifest expects {expected}",
            tensors.len()
        )));
    }
    if sha256_hex(&tensors) != m.require("tensors.sha256")? {
        return Err(Error::Checkpoint(format!("{TENSORS} checksum mismatch")));
    }
    let vocab_raw = read(VOCAB)?;
    if sha256_hex(&vocab_raw) != m.require("vocab.sha256")? {
        return Err(Error::Checkpoint(format!("{VOCAB} checksum mismatch")));
    }
    let vocab_text = String::from_utf8(vocab_raw)
        .map_err(|_| Error::Checkpoint(format!("{VOCAB} is not UTF-8")))?;
    let vocab = parse_vocab(&vocab_text)?;

    let config = EncoderConfig {
        kind: EncoderKind::parse(m.require("encoder.kind")?)?,
        dim: m.parse_value("encoder.dim")?,
        layers: m.parse_value("encoder.layers")?,
        heads: m.parse_value("encoder.heads")?,
        dropout: m.parse_value("encoder.dropout")?,
        precision: Precision::parse(m.require("encoder.precision")?)?,
        max_positions: m.parse_value("encoder.max_positions")?,
    };
    let width = match config.precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let count: usize = m.parse_value("params.count")?;
    let mut params = ParameterSet::new();
    let mut offset = 0;
    for i in 0..count {
        let name = m.require(&format!("param.{i}.name"))?;
        let (r, c) = parse_shape(m.require(&format!("param.{i}.shape"))?)?;
        let len = r * c * width;
        let chunk = tensors
            .get(offset..offset + len)
            .ok_or_else(|| Error::Checkpoint(format!("{TENSORS} is truncated at {name}")))?;
        offset += len;
        let values: Vec<f64> = match config.precision {
            Precision::F32 => chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            Precision::F64 => chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        };
        let t = Mat::from_shape_vec((r, c), values).expect("shape checked");
        params.insert(name, t)?;
    }
    if offset != tensors.len() {
        return Err(Error::Checkpoint(format!("{TENSORS} has trailing bytes")));
    }
    let encoder = Encoder::from_parameters(config, params)
        .map_err(|e| Error::Checkpoint(format!("inconsistent parameters: {e}")))?;
    if encoder.num_entities() != vocab.num_entities() || encoder.num_relations() != vocab.num_relations() {
        return Err(Error::Checkpoint("vocabulary does not match the embedding tables".into()));
    }
    let losses = m.require("meta.epoch_losses")?;
    let epoch_losses = if losses.is_empty() {
        Vec::new()
    } else {
        losses
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::Checkpoint(format!("bad loss value {s:?}"))))
            .collect::<Result<_>>()?
    };
    let meta = TrainingMeta {
        epochs: m.parse_value("meta.epochs")?,
        seed: m.parse_value("meta.seed")?,
        final_loss: m.parse_value("meta.final_loss")?,
        epoch_losses,
    };
    let provenance = m
        .entries()
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("provenance.").map(|k| (k.to_owned(), v.clone())))
        .collect();
    Ok(Checkpoint {
        encoder,
        vocab,
        meta,
        provenance,
    })
}
