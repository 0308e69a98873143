//! Path encoders (LSTM, RSN, Transformer) over a flat entity/relation
//! vocabulary. Element `p` of a path is an entity when `p` is even and a
//! relation when odd; ids index `embed.entity` and `embed.relation`.

mod params;

use std::collections::HashMap;

use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};

pub use params::{xavier_uniform, GradientSet, ParameterSet};

pub const ENTITY_TABLE: &str = "embed.entity";
pub const RELATION_TABLE: &str = "embed.relation";
pub const BEGIN_TOKEN: &str = "embed.begin";
pub const MASK_TOKEN: &str = "embed.mask";
pub const POSITIONS: &str = "tf.pos";
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Lstm,
    #[default]
    Rsn,
    Transformer,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::Lstm => "lstm",
            EncoderKind::Rsn => "rsn",
            EncoderKind::Transformer => "transformer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(EncoderKind::Lstm),
            "rsn" => Ok(EncoderKind::Rsn),
            "transformer" => Ok(EncoderKind::Transformer),
            _ => Err(Error::config(format!("unknown encoder kind {s:?}"))),
        }
    }

    fn recurrent(self) -> bool {
        !matches!(self, EncoderKind::Transformer)
    }
}

/// Storage precision of parameters. Arithmetic is always 64-bit; with
/// `F32` parameters are rounded to 32-bit floats after every update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::config(format!("unknown precision {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub dim: usize,
    pub layers: usize,
    /// Attention heads; transformer only.
    pub heads: usize,
    pub dropout: f64,
    pub precision: Precision,
    /// Longest path the transformer's position table covers.
    pub max_positions: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Rsn,
            dim: 256,
            layers: 1,
            heads: 4,
            dropout: 0.2,
            precision: Precision::F32,
            max_positions: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::config("dim, layers and heads must be positive"));
        }
        if self.kind == EncoderKind::Transformer && !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_positions < 3 {
            return Err(Error::config("max_positions must be at least 3"));
        }
        Ok(())
    }

    fn ff_dim(&self) -> usize {
        4 * self.dim
    }
}

/// Paths of one length, stored path-major as element ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathBatch {
    length: usize,
    ids: Vec<u32>,
}

impl PathBatch {
    pub fn new(length: usize, ids: Vec<u32>) -> Result<Self> {
        if length == 0 || !ids.len().is_multiple_of(length) {
            return Err(Error::data(format!(
                "{} ids do not form paths of length {length}",
                ids.len()
            )));
        }
        Ok(PathBatch { length, ids })
    }

    pub fn from_paths<'a>(paths: impl IntoIterator<Item = &'a [u32]>) -> Result<Self> {
        let mut ids = Vec::new();
        let mut length = None;
        for p in paths {
            if *length.get_or_insert(p.len()) != p.len() {
                return Err(Error::data("paths in a batch must share one length"));
            }
            ids.extend_from_slice(p);
        }
        PathBatch::new(length.unwrap_or(1), ids)
    }

    pub fn length(&self) -> usize {
        self.length
    }

    /// Number of paths.
    pub fn len(&self) -> usize {
        self.ids.len() / self.length
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, path: usize, position: usize) -> u32 {
        self.ids[path * self.length + position]
    }

    pub fn path(&self, i: usize) -> &[u32] {
        &self.ids[i * self.length..(i + 1) * self.length]
    }

    /// Ids at `position` across the batch.
    pub fn column(&self, position: usize) -> Vec<usize> {
        (0..self.len()).map(|b| self.id(b, position) as usize).collect()
    }
}

/// Per-position outputs for a batch, shape `(batch, t, d)`. For recurrent
/// encoders `begin` holds the begin-of-path state, the context of the first
/// element.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub outputs: Array3<f64>,
    pub begin: Option<Mat>,
    pub masked_position: Option<usize>,
}

/// Dropout is applied only in training mode.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

impl Mode<'_> {
    fn dropout(&mut self, tape: &mut Tape, x: Var, rate: f64) -> Var {
        match self {
            Mode::Train(rng) if rate > 0.0 => {
                let keep = 1.0 - rate;
                let mask = Mat::from_shape_simple_fn(tape.shape(x), || {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                let m = tape.constant(mask);
                tape.mul(x, m)
            }
            _ => x,
        }
    }
}

/// Places a parameter set on a tape. With a `base` slot, parameter `i` is
/// trainable under slot `base + i`; without, everything is a constant.
pub struct Binder<'a> {
    params: &'a ParameterSet,
    base: Option<usize>,
    cache: HashMap<&'a str, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a ParameterSet, base: Option<usize>) -> Self {
        Binder {
            params,
            base,
            cache: HashMap::new(),
        }
    }

    pub fn frozen(params: &'a ParameterSet) -> Self {
        Self::new(params, None)
    }

    pub fn params(&self) -> &'a ParameterSet {
        self.params
    }

    fn slot_of(&self, name: &str) -> Result<Option<usize>> {
        let slot = self
            .params
            .slot(name)
            .ok_or_else(|| Error::data(format!("missing parameter {name}")))?;
        Ok(self.base.map(|b| b + slot))
    }

    pub fn weight(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(v) = self.cache.get(name) {
            return Ok(*v);
        }
        let slot = self.slot_of(name)?;
        let (key, value) = self.params.by_slot(self.params.slot(name).expect("checked"));
        let v = match slot {
            Some(s) => tape.param(value, s),
            None => tape.constant(value.clone()),
        };
        self.cache.insert(key, v);
        Ok(v)
    }

    pub fn rows(&self, tape: &mut Tape, name: &str, rows: &[usize]) -> Result<Var> {
        let slot = self.slot_of(name)?;
        Ok(tape.gather(self.params.require(name)?, slot, rows))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParameterSet,
    num_entities: usize,
    num_relations: usize,
}

/// Builds Xavier-initialized parameters, deterministic under `seed`.
pub fn init_parameters(
    config: &EncoderConfig,
    num_entities: usize,
    num_relations: usize,
    seed: u64,
) -> Result<Encoder> {
    config.validate()?;
    if num_entities == 0 || num_relations == 0 {
        return Err(Error::config("vocabulary sizes must be positive"));
    }
    let d = config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::new();
    // Embedding rows are d-vectors: fan_in = fan_out = d.
    p.insert(ENTITY_TABLE, xavier_uniform(num_entities, d, d, d, &mut rng))?;
    p.insert(RELATION_TABLE, xavier_uniform(num_relations, d, d, d, &mut rng))?;
    if config.kind.recurrent() {
        p.insert(BEGIN_TOKEN, xavier_uniform(1, d, d, d, &mut rng))?;
        for l in 0..config.layers {
            p.insert(format!("lstm.{l}.weight"), xavier_uniform(4 * d, 2 * d, 2 * d, 4 * d, &mut rng))?;
            p.insert(format!("lstm.{l}.bias"), Mat::zeros((1, 4 * d)))?;
        }
        if config.kind == EncoderKind::Rsn {
            p.insert("rsn.w1", xavier_uniform(d, d, d, d, &mut rng))?;
            p.insert("rsn.w2", xavier_uniform(d, d, d, d, &mut rng))?;
        }
    } else {
        let f = config.ff_dim();
        p.insert(MASK_TOKEN, xavier_uniform(1, d, d, d, &mut rng))?;
        p.insert(POSITIONS, xavier_uniform(config.max_positions, d, d, d, &mut rng))?;
        for l in 0..config.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("tf.{l}.{w}"), xavier_uniform(d, d, d, d, &mut rng))?;
            }
            p.insert(format!("tf.{l}.ln1.gain"), Mat::ones((1, d)))?;
            p.insert(format!("tf.{l}.ln1.bias"), Mat::zeros((1, d)))?;
            p.insert(format!("tf.{l}.ff1"), xavier_uniform(f, d, d, f, &mut rng))?;
            p.insert(format!("tf.{l}.ff1.bias"), Mat::zeros((1, f)))?;
            p.insert(format!("tf.{l}.ff2"), xavier_uniform(d, f, f, d, &mut rng))?;
            p.insert(format!("tf.{l}.ff2.bias"), Mat::zeros((1, d)))?;
            p.insert(format!("tf.{l}.ln2.gain"), Mat::ones((1, d)))?;
            p.insert(format!("tf.{l}.ln2.bias"), Mat::zeros((1, d)))?;
        }
    }
    if config.precision == Precision::F32 {
        p.round_to_f32();
    }
    Ok(Encoder {
        config: config.clone(),
        params: p,
        num_entities,
        num_relations,
    })
}

/// True for input-embedding tables (entities, relations); everything else is
/// an encoder weight.
pub fn is_embedding_table(name: &str) -> bool {
    name == ENTITY_TABLE || name == RELATION_TABLE
}

impl Encoder {
    /// Wraps an existing parameter set, checking that it matches `config`.
    pub fn from_parameters(config: EncoderConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let ent = params.require(ENTITY_TABLE)?;
        let rel = params.require(RELATION_TABLE)?;
        let reference = init_parameters(&config, ent.nrows(), rel.nrows(), 0)?;
        for (name, m) in reference.params.iter() {
            let got = params.require(name)?;
            if got.dim() != m.dim() {
                return Err(Error::data(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.dim(),
                    m.dim()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::data("parameter set has unexpected entries"));
        }
        Ok(Encoder {
            num_entities: ent.nrows(),
            num_relations: rel.nrows(),
            config,
            params,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn entity_embedding(&self, e: usize) -> Array1<f64> {
        self.params.get(ENTITY_TABLE).expect("entity table").row(e).to_owned()
    }

    fn check_batch(&self, batch: &PathBatch, upto: usize) -> Result<()> {
        for b in 0..batch.len() {
            for p in 0..upto.min(batch.length()) {
                let id = batch.id(b, p) as usize;
                let (limit, what) = if p % 2 == 0 {
                    (self.num_entities, "entity")
                } else {
                    (self.num_relations, "relation")
                };
                if id >= limit {
                    return Err(Error::data(format!(
                        "{what} id {id} at position {p} outside vocabulary of {limit}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn input_rows(&self, tape: &mut Tape, binder: &Binder, batch: &PathBatch, p: usize) -> Result<Var> {
        let table = if p.is_multiple_of(2) { ENTITY_TABLE } else { RELATION_TABLE };
        binder.rows(tape, table, &batch.column(p))
    }

    /// States `s_0 ..= s_upto`: `s_0` is the begin-of-path output and
    /// `s_{p+1}` the output at element `p`. Only elements `< upto` are read.
    fn recurrent_states(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        batch: &PathBatch,
        upto: usize,
        mode: &mut Mode,
    ) -> Result<Vec<Var>> {
        self.check_batch(batch, upto)?;
        let (n, d) = (batch.len(), self.config.dim);
        let xs: Vec<Var> = (0..upto)
            .map(|p| self.input_rows(tape, binder, batch, p))
            .collect::<Result<_>>()?;
        let begin = binder.rows(tape, BEGIN_TOKEN, &vec![0; n])?;
        let mut seq: Vec<Var> = std::iter::once(begin).chain(xs.iter().copied()).collect();
        for l in 0..self.config.layers {
            let w = binder.weight(tape, &format!("lstm.{l}.weight"))?;
            let bias = binder.weight(tape, &format!("lstm.{l}.bias"))?;
            let mut h = tape.constant(Mat::zeros((n, d)));
            let mut c = tape.constant(Mat::zeros((n, d)));
            let mut out = Vec::with_capacity(seq.len());
            for &x in &seq {
                let x = mode.dropout(tape, x, self.config.dropout);
                let hx = tape.concat_cols(&[h, x]);
                let z = tape.matmul_t(hx, w);
                let z = tape.add_row(z, bias);
                let zi = tape.slice_cols(z, 0, d);
                let zf = tape.slice_cols(z, d, d);
                let zo = tape.slice_cols(z, 2 * d, d);
                let zg = tape.slice_cols(z, 3 * d, d);
                let (i, f, o, g) = (tape.sigmoid(zi), tape.sigmoid(zf), tape.sigmoid(zo), tape.tanh(zg));
                let fc = tape.mul(f, c);
                let ig = tape.mul(i, g);
                c = tape.add(fc, ig);
                let tc = tape.tanh(c);
                h = tape.mul(o, tc);
                out.push(h);
            }
            seq = out;
        }
        if self.config.kind == EncoderKind::Rsn {
            let w1 = binder.weight(tape, "rsn.w1")?;
            let w2 = binder.weight(tape, "rsn.w2")?;
            for p in (1..upto).step_by(2) {
                let a = tape.matmul_t(seq[p + 1], w1);
                let b = tape.matmul_t(xs[p - 1], w2);
                seq[p + 1] = tape.add(a, b);
            }
        }
        Ok(seq)
    }

    /// Transformer outputs, `(batch * t) × d`, where sequence `i` has its
    /// element at `masks[i]` replaced by the mask token.
    fn transformer_outputs(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        batch: &PathBatch,
        masks: &[usize],
        mode: &mut Mode,
    ) -> Result<Var> {
        let t = batch.length();
        if t > self.config.max_positions {
            return Err(Error::data(format!(
                "path length {t} exceeds the {} learned positions",
                self.config.max_positions
            )));
        }
        if let Some(&m) = masks.iter().find(|&&m| m >= t) {
            return Err(Error::data(format!("masked position {m} outside path of length {t}")));
        }
        self.check_batch(batch, t)?;
        let n = batch.len();
        let mut ent_ids = Vec::new();
        let mut rel_ids = Vec::new();
        let mut src = Vec::with_capacity(n * t);
        for b in 0..n {
            for p in 0..t {
                let id = batch.id(b, p) as usize;
                if p == masks[b] {
                    src.push((2u8, 0));
                } else if p % 2 == 0 {
                    src.push((0, ent_ids.len()));
                    ent_ids.push(id);
                } else {
                    src.push((1, rel_ids.len()));
                    rel_ids.push(id);
                }
            }
        }
        let (ne, nr) = (ent_ids.len(), rel_ids.len());
        let mut parts = Vec::new();
        if ne > 0 {
            parts.push(binder.rows(tape, ENTITY_TABLE, &ent_ids)?);
        }
        if nr > 0 {
            parts.push(binder.rows(tape, RELATION_TABLE, &rel_ids)?);
        }
        parts.push(binder.rows(tape, MASK_TOKEN, &[0])?);
        let pool = tape.concat_rows(&parts);
        let order: Vec<usize> = src
            .iter()
            .map(|&(k, i)| match k {
                0 => i,
                1 => ne + i,
                _ => ne + nr,
            })
            .collect();
        let x = tape.gather_rows(pool, &order);
        let pos_rows: Vec<usize> = (0..n).flat_map(|_| 0..t).collect();
        let pos = binder.rows(tape, POSITIONS, &pos_rows)?;
        let mut x = tape.add(x, pos);
        x = mode.dropout(tape, x, self.config.dropout);
        for l in 0..self.config.layers {
            let w = |s: &str| format!("tf.{l}.{s}");
            let (wq, wk, wv, wo) = (
                binder.weight(tape, &w("wq"))?,
                binder.weight(tape, &w("wk"))?,
                binder.weight(tape, &w("wv"))?,
                binder.weight(tape, &w("wo"))?,
            );
            let q = tape.matmul_t(x, wq);
            let k = tape.matmul_t(x, wk);
            let v = tape.matmul_t(x, wv);
            let a = tape.attention(q, k, v, t, self.config.heads);
            let o = tape.matmul_t(a, wo);
            let o = mode.dropout(tape, o, self.config.dropout);
            let r = tape.add(x, o);
            x = self.norm(tape, binder, r, &w("ln1"))?;

            let (f1, b1, f2, b2) = (
                binder.weight(tape, &w("ff1"))?,
                binder.weight(tape, &w("ff1.bias"))?,
                binder.weight(tape, &w("ff2"))?,
                binder.weight(tape, &w("ff2.bias"))?,
            );
            let hdn = tape.matmul_t(x, f1);
            let hdn = tape.add_row(hdn, b1);
            let hdn = tape.relu(hdn);
            let f = tape.matmul_t(hdn, f2);
            let f = tape.add_row(f, b2);
            let f = mode.dropout(tape, f, self.config.dropout);
            let r = tape.add(x, f);
            x = self.norm(tape, binder, r, &w("ln2"))?;
        }
        Ok(x)
    }

    fn norm(&self, tape: &mut Tape, binder: &mut Binder, x: Var, prefix: &str) -> Result<Var> {
        let g = binder.weight(tape, &format!("{prefix}.gain"))?;
        let b = binder.weight(tape, &format!("{prefix}.bias"))?;
        let n = tape.layer_norm(x, LAYER_NORM_EPS);
        let n = tape.mul_row(n, g);
        Ok(tape.add_row(n, b))
    }

    /// Context vectors for every element of every path, position-major:
    /// row `p * batch + b` is the context of element `p` of path `b`.
    pub fn contexts(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        batch: &PathBatch,
        mode: &mut Mode,
    ) -> Result<Var> {
        let (n, t) = (batch.len(), batch.length());
        if self.config.kind.recurrent() {
            let states = self.recurrent_states(tape, binder, batch, t - 1, mode)?;
            Ok(tape.concat_rows(&states))
        } else {
            let mut ids = Vec::with_capacity(n * t * t);
            let mut masks = Vec::with_capacity(n * t);
            for p in 0..t {
                for b in 0..n {
                    ids.extend_from_slice(batch.path(b));
                    masks.push(p);
                }
            }
            let expanded = PathBatch::new(t, ids)?;
            let out = self.transformer_outputs(tape, binder, &expanded, &masks, mode)?;
            let rows: Vec<usize> = (0..t)
                .flat_map(|p| (0..n).map(move |b| (p * n + b) * t + p))
                .collect();
            Ok(tape.gather_rows(out, &rows))
        }
    }

    /// Context of the element at `position` for every path (`batch × d`).
    /// The element itself is never read.
    pub fn context_at(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        batch: &PathBatch,
        position: usize,
        mode: &mut Mode,
    ) -> Result<Var> {
        if position >= batch.length() {
            return Err(Error::data(format!(
                "position {position} outside path of length {}",
                batch.length()
            )));
        }
        if self.config.kind.recurrent() {
            let states = self.recurrent_states(tape, binder, batch, position, mode)?;
            Ok(states[position])
        } else {
            let t = batch.length();
            let masks = vec![position; batch.len()];
            let out = self.transformer_outputs(tape, binder, batch, &masks, mode)?;
            let rows: Vec<usize> = (0..batch.len()).map(|b| b * t + position).collect();
            Ok(tape.gather_rows(out, &rows))
        }
    }

    /// Eval-mode forward pass returning all per-position outputs.
    pub fn forward(&self, batch: &PathBatch, masked_position: Option<usize>) -> Result<HiddenStates> {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(&self.params);
        let (n, t, d) = (batch.len(), batch.length(), self.config.dim);
        let mut outputs = Array3::zeros((n, t, d));
        if self.config.kind.recurrent() {
            let states = self.recurrent_states(&mut tape, &mut binder, batch, t, &mut Mode::Eval)?;
            for p in 0..t {
                outputs
                    .index_axis_mut(ndarray::Axis(1), p)
                    .assign(tape.value(states[p + 1]));
            }
            Ok(HiddenStates {
                outputs,
                begin: Some(tape.value(states[0]).clone()),
                masked_position: None,
            })
        } else {
            let m = masked_position
                .ok_or_else(|| Error::data("transformer forward needs a masked position"))?;
            let masks = vec![m; n];
            let out = self.transformer_outputs(&mut tape, &mut binder, batch, &masks, &mut Mode::Eval)?;
            let v = tape.value(out);
            for b in 0..n {
                for p in 0..t {
                    outputs
                        .slice_mut(ndarray::s![b, p, ..])
                        .assign(&v.row(b * t + p));
                }
            }
            Ok(HiddenStates {
                outputs,
                begin: None,
                masked_position: Some(m),
            })
        }
    }

    pub fn forward_lstm(&self, batch: &PathBatch) -> Result<HiddenStates> {
        self.expect_kind(EncoderKind::Lstm)?;
        self.forward(batch, None)
    }

    pub fn forward_rsn(&self, batch: &PathBatch) -> Result<HiddenStates> {
        self.expect_kind(EncoderKind::Rsn)?;
        self.forward(batch, None)
    }

    pub fn forward_transformer(&self, batch: &PathBatch, masked_position: usize) -> Result<HiddenStates> {
        self.expect_kind(EncoderKind::Transformer)?;
        self.forward(batch, Some(masked_position))
    }

    fn expect_kind(&self, kind: EncoderKind) -> Result<()> {
        if self.config.kind != kind {
            return Err(Error::config(format!(
                "encoder is {}, not {}",
                self.config.kind.as_str(),
                kind.as_str()
            )));
        }
        Ok(())
    }
}

/// Context of the element at 1-based `position` of path `path`: the
/// preceding output for recurrent encoders (the begin-of-path state for
/// position 1), the masked output for the transformer.
pub fn context_representation(
    hiddens: &HiddenStates,
    path: usize,
    position: usize,
    kind: EncoderKind,
) -> Result<Array1<f64>> {
    let t = hiddens.outputs.dim().1;
    if position == 0 || position > t {
        return Err(Error::data(format!("position {position} outside 1..={t}")));
    }
    if kind.recurrent() {
        if position == 1 {
            let begin = hiddens
                .begin
                .as_ref()
                .ok_or_else(|| Error::data("hidden states carry no begin-of-path state"))?;
            Ok(begin.row(path).to_owned())
        } else {
            Ok(hiddens.outputs.slice(ndarray::s![path, position - 2, ..]).to_owned())
        }
    } else {
        if hiddens.masked_position != Some(position - 1) {
            return Err(Error::data(format!(
                "hidden states were computed with mask at {:?}, not {}",
                hiddens.masked_position.map(|m| m + 1),
                position
            )));
        }
        Ok(hiddens.outputs.slice(ndarray::s![path, position - 1, ..]).to_owned())
    }
}
