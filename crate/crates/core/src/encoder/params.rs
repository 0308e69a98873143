use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Mat};
use crate::error::{Error, Result};

/// Named parameter registry. Registration order is stable and doubles as the
/// gradient slot numbering.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    entries: IndexMap<String, Mat>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> Result<usize> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::data(format!("parameter {name} registered twice")));
        }
        Ok(self.entries.insert_full(name, value).0)
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Mat> {
        self.get(name)
            .ok_or_else(|| Error::data(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.entries.get_mut(name)
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn by_slot(&self, slot: usize) -> (&str, &Mat) {
        let (k, v) = self.entries.get_index(slot).expect("slot in range");
        (k.as_str(), v)
    }

    pub fn by_slot_mut(&mut self, slot: usize) -> &mut Mat {
        self.entries.get_index_mut(slot).expect("slot in range").1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Mat)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|m| m.iter().all(|x| x.is_finite()))
    }

    /// Rounds every entry to the nearest 32-bit float.
    pub fn round_to_f32(&mut self) {
        for m in self.entries.values_mut() {
            m.mapv_inplace(|x| x as f32 as f64);
        }
    }
}

/// Dense per-parameter gradients congruent with a [`ParameterSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    grads: Vec<Mat>,
}

impl GradientSet {
    pub fn zeros(params: &ParameterSet) -> Self {
        GradientSet {
            grads: params.iter().map(|(_, m)| Mat::zeros(m.dim())).collect(),
        }
    }

    /// Collects tape gradients for slots `base .. base + params.len()`;
    /// untouched parameters get zero gradients.
    pub fn from_tape(grads: &Gradients, params: &ParameterSet, base: usize) -> Result<Self> {
        let mut out = Self::zeros(params);
        for (i, g) in out.grads.iter_mut().enumerate() {
            if let Some(src) = grads.get(base + i) {
                if src.dim() != g.dim() {
                    return Err(Error::numeric(format!(
                        "gradient shape {:?} does not match parameter {}",
                        src.dim(),
                        params.by_slot(i).0
                    )));
                }
                g.assign(src);
            }
        }
        if !out.all_finite() {
            return Err(Error::numeric("non-finite gradient"));
        }
        Ok(out)
    }

    /// Wraps explicit gradient arrays; shapes must match `params`.
    pub fn from_parts(params: &ParameterSet, grads: Vec<Mat>) -> Result<Self> {
        if grads.len() != params.len()
            || grads.iter().zip(params.iter()).any(|(g, (_, p))| g.dim() != p.dim())
        {
            return Err(Error::numeric("gradient shapes do not match the parameter set"));
        }
        Ok(GradientSet { grads })
    }

    pub fn get(&self, slot: usize) -> &Mat {
        &self.grads[slot]
    }

    pub fn named<'a>(&'a self, params: &'a ParameterSet, name: &str) -> Option<&'a Mat> {
        params.slot(name).map(|s| &self.grads[s])
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Mat> {
        self.grads.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|m| m.iter().all(|x| x.is_finite()))
    }

    /// Adds `other` into `self`; used to merge per-batch gradients.
    pub fn accumulate(&mut self, other: &GradientSet) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }
}

/// Xavier-uniform entries in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Mat {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Mat::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..=bound))
}
