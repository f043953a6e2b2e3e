use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::tensor::Tensor;
use crate::{Error, Result};

/// Index of a parameter inside a [`ParameterSet`]. Ids follow the
/// lexicographic order of parameter paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named collection of tensors, iterated in lexicographic path order.
///
/// Gradients use the same type: [`ParameterSet::zeros_like`] yields a set with
/// one slot of identical shape per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

pub const CHECKPOINT_HEADER: &str = "klan-params v1";

impl ParameterSet {
    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        let (names, tensors) = map.into_iter().unzip();
        Self { names, tensors }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, path: &str) -> Result<ParamId> {
        self.names
            .binary_search_by(|n| n.as_str().cmp(path))
            .map(ParamId)
            .map_err(|_| Error::Config(format!("unknown parameter `{path}`")))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_path(&self, path: &str) -> Result<&Tensor> {
        Ok(self.get(self.id(path)?))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn zeros_like(&self) -> Self {
        Self { names: self.names.clone(), tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }

    pub fn zero(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.fill(0.0));
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Adds `scale * other` into `self`. Both sets must share a layout.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        debug_assert_eq!(self.names, other.names);
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    /// Squared L2 norm over every parameter whose path starts with `prefix`.
    pub fn sq_norm_prefix(&self, prefix: &str) -> f64 {
        self.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.sq_norm()).sum()
    }

    /// Serializes to the versioned text checkpoint format.
    ///
    /// One line per parameter: `path<TAB>d0xd1...<TAB>v v v ...`. Values use
    /// the shortest decimal form that parses back to the same `f64`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_HEADER);
        out.push('\n');
        for (name, t) in self.iter() {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = write!(out, "{name}\t{}\t", shape.join("x"));
            for (i, v) in t.data().iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{v:?}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses lines produced by [`to_text`](Self::to_text). Lines starting
    /// with `#` and blank lines are skipped so callers may add metadata.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == CHECKPOINT_HEADER => {}
            other => return Err(Error::Parse(format!("expected header `{CHECKPOINT_HEADER}`, found {other:?}"))),
        }
        let mut map = BTreeMap::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let (Some(name), Some(shape), Some(values)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Parse(format!("line {}: expected 3 fields", lineno + 2)));
            };
            let shape = shape
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("line {}: bad shape: {e}", lineno + 2)))?;
            let data = values
                .split_ascii_whitespace()
                .map(str::parse::<f64>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("line {}: bad value: {e}", lineno + 2)))?;
            if map.insert(name.to_string(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::Parse(format!("duplicate parameter `{name}`")));
            }
        }
        Ok(Self::from_map(map))
    }
}

/// Collects named tensors before freezing them into a [`ParameterSet`].
#[derive(Default)]
pub struct ParamBuilder {
    map: BTreeMap<String, Tensor>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) {
        let path = path.into();
        let prev = self.map.insert(path.clone(), t);
        assert!(prev.is_none(), "duplicate parameter path `{path}`");
    }

    pub fn build(self) -> ParameterSet {
        ParameterSet::from_map(self.map)
    }
}
