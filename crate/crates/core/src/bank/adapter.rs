use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use super::container::{self, Container, Tensor};
use super::AdapterError;

pub const DEFAULT_RANK: usize = 32;
pub const DEFAULT_SCALING_ALPHA: f64 = 32.0;

const DOWN_SUFFIX: &str = ".down";
const UP_SUFFIX: &str = ".up";
const DELTA_SUFFIX: &str = ".delta";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Down,
    Up,
    Delta,
}

impl TensorRole {
    /// Splits `"<layer>.<role>"`.
    pub fn parse(name: &str) -> Option<(&str, TensorRole)> {
        if let Some(layer) = name.strip_suffix(DOWN_SUFFIX) {
            Some((layer, TensorRole::Down))
        } else if let Some(layer) = name.strip_suffix(UP_SUFFIX) {
            Some((layer, TensorRole::Up))
        } else {
            name.strip_suffix(DELTA_SUFFIX).map(|l| (l, TensorRole::Delta))
        }
        .filter(|(layer, _)| !layer.is_empty())
    }
}

pub fn down_name(layer: &str) -> String {
    format!("{layer}{DOWN_SUFFIX}")
}

pub fn up_name(layer: &str) -> String {
    format!("{layer}{UP_SUFFIX}")
}

pub fn delta_name(layer: &str) -> String {
    format!("{layer}{DELTA_SUFFIX}")
}

/// A low-rank adapter: per layer a `down` factor of shape `(r, d_in)` and an
/// `up` factor of shape `(d_out, r)`. The effective weight delta of a layer is
/// `(scaling_alpha / r) · up · down`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    adapter_id: String,
    rank: usize,
    scaling_alpha: f64,
    tensors: BTreeMap<String, Tensor>,
}

/// Borrowed view of one layer's factor pair.
#[derive(Debug, Clone, Copy)]
pub struct LayerFactors<'a> {
    pub name: &'a str,
    pub down: &'a Tensor,
    pub up: &'a Tensor,
}

impl LayerFactors<'_> {
    pub fn d_in(&self) -> usize {
        self.down.shape[1]
    }

    pub fn d_out(&self) -> usize {
        self.up.shape[0]
    }
}

pub(crate) fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_iterator(t.shape[0], t.shape[1], t.data.iter().map(|v| *v as f64))
}

impl AdapterSet {
    pub fn new(
        adapter_id: impl Into<String>,
        rank: usize,
        scaling_alpha: f64,
        tensors: BTreeMap<String, Tensor>,
    ) -> Result<Self, AdapterError> {
        let set = Self {
            adapter_id: adapter_id.into(),
            rank,
            scaling_alpha,
            tensors,
        };
        set.check()?;
        Ok(set)
    }

    /// Builds a set from `(layer, up, down)` matrices, truncating to f32.
    pub fn from_factors<'a>(
        adapter_id: impl Into<String>,
        scaling_alpha: f64,
        layers: impl IntoIterator<Item = (&'a str, &'a DMatrix<f64>, &'a DMatrix<f64>)>,
    ) -> Result<Self, AdapterError> {
        let mut tensors = BTreeMap::new();
        let mut rank = None;
        for (layer, up, down) in layers {
            rank.get_or_insert(down.nrows());
            tensors.insert(down_name(layer), from_matrix(down));
            tensors.insert(up_name(layer), from_matrix(up));
        }
        let rank = rank.ok_or_else(|| AdapterError::InvariantViolation("adapter has no layers".into()))?;
        Self::new(adapter_id, rank, scaling_alpha, tensors)
    }

    fn check(&self) -> Result<(), AdapterError> {
        let inv = |m: String| Err(AdapterError::InvariantViolation(m));
        let pairing = |m: String| Err(AdapterError::PairingError(m));
        if self.rank == 0 {
            return inv("rank must be > 0".into());
        }
        if !self.scaling_alpha.is_finite() {
            return inv(format!("scaling_alpha {} is not finite", self.scaling_alpha));
        }
        if self.tensors.is_empty() {
            return inv("adapter has no tensors".into());
        }
        for (name, t) in &self.tensors {
            if t.shape.len() != 2 {
                return pairing(format!("{name}: expected a 2-D factor, got shape {:?}", t.shape));
            }
            if t.numel() != t.data.len() {
                return inv(format!("{name}: shape/data length mismatch"));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return inv(format!("{name}: non-finite value"));
            }
            match TensorRole::parse(name) {
                Some((layer, TensorRole::Down)) => {
                    let Some(up) = self.tensors.get(&up_name(layer)) else {
                        return pairing(format!("{name} has no matching up factor"));
                    };
                    if t.shape[0] != self.rank || up.shape.len() != 2 || up.shape[1] != self.rank {
                        return pairing(format!(
                            "layer {layer}: down {:?} and up {:?} must share inner rank {}",
                            t.shape, up.shape, self.rank
                        ));
                    }
                }
                Some((layer, TensorRole::Up)) => {
                    if !self.tensors.contains_key(&down_name(layer)) {
                        return pairing(format!("{name} has no matching down factor"));
                    }
                }
                _ => return pairing(format!("{name}: tensor name must end in .down or .up")),
            }
        }
        Ok(())
    }

    pub fn adapter_id(&self) -> &str {
        &self.adapter_id
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scaling_alpha(&self) -> f64 {
        self.scaling_alpha
    }

    /// `scaling_alpha / rank`.
    pub fn scaling(&self) -> f64 {
        self.scaling_alpha / self.rank as f64
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn with_adapter_id(mut self, id: impl Into<String>) -> Self {
        self.adapter_id = id.into();
        self
    }

    /// Layers in name order.
    pub fn layers(&self) -> impl Iterator<Item = LayerFactors<'_>> {
        self.tensors.iter().filter_map(move |(name, down)| match TensorRole::parse(name) {
            Some((layer, TensorRole::Down)) => Some(LayerFactors {
                name: layer,
                down,
                up: &self.tensors[&up_name(layer)],
            }),
            _ => None,
        })
    }

    pub fn layer(&self, name: &str) -> Option<LayerFactors<'_>> {
        let (name, down) = self.tensors.get_key_value(&down_name(name))?;
        let layer = TensorRole::parse(name)?.0;
        Some(LayerFactors {
            name: layer,
            down,
            up: &self.tensors[&up_name(layer)],
        })
    }

    /// Effective delta `(alpha/r)·up·down` of one layer in f64.
    pub fn layer_delta(&self, layer: &LayerFactors<'_>) -> DMatrix<f64> {
        (to_matrix(layer.up) * to_matrix(layer.down)) * self.scaling()
    }

    /// True when `other` has the same tensor names, shapes, rank and scaling,
    /// so the factors can be blended directly.
    pub fn factor_compatible(&self, other: &AdapterSet) -> bool {
        self.rank == other.rank
            && self.scaling_alpha == other.scaling_alpha
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape == tb.shape)
    }

    /// Per-layer `(d_out, d_in)`.
    pub fn layer_dims(&self) -> BTreeMap<String, (usize, usize)> {
        self.layers()
            .map(|l| (l.name.to_string(), (l.d_out(), l.d_in())))
            .collect()
    }

    pub fn bit_eq(&self, other: &AdapterSet) -> bool {
        self.adapter_id == other.adapter_id
            && self.rank == other.rank
            && self.scaling_alpha.to_bits() == other.scaling_alpha.to_bits()
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }

    pub fn to_container(&self) -> Container {
        let mut metadata = BTreeMap::new();
        metadata.insert("adapter_id".to_string(), self.adapter_id.clone());
        metadata.insert("rank".to_string(), self.rank.to_string());
        metadata.insert("scaling_alpha".to_string(), self.scaling_alpha.to_string());
        Container {
            metadata,
            tensors: self.tensors.clone(),
        }
    }

    pub fn from_container(c: Container) -> Result<Self, AdapterError> {
        let meta = |k: &str| {
            c.metadata
                .get(k)
                .ok_or_else(|| AdapterError::CorruptHeader(format!("metadata lacks `{k}`")))
        };
        let adapter_id = meta("adapter_id")?.clone();
        let rank = meta("rank")?
            .parse::<usize>()
            .map_err(|e| AdapterError::CorruptHeader(format!("metadata rank: {e}")))?;
        let scaling_alpha = meta("scaling_alpha")?
            .parse::<f64>()
            .map_err(|e| AdapterError::CorruptHeader(format!("metadata scaling_alpha: {e}")))?;
        Self::new(adapter_id, rank, scaling_alpha, c.tensors)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, AdapterError> {
        container::encode(&self.to_container())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AdapterError> {
        Self::from_container(container::decode(bytes)?)
    }
}

pub(crate) fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            data.push(m[(r, c)] as f32);
        }
    }
    Tensor::new(vec![m.nrows(), m.ncols()], data)
}

pub fn write_adapter(set: &AdapterSet, path: impl AsRef<Path>) -> Result<(), AdapterError> {
    set.check()?;
    let bytes = set.to_bytes()?;
    write_file(path.as_ref(), &bytes)
}

pub fn read_adapter(path: impl AsRef<Path>) -> Result<AdapterSet, AdapterError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| AdapterError::Io(path.display().to_string(), e))?;
    AdapterSet::from_bytes(&bytes)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), AdapterError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    crate::fsutil::write_atomic(dir, path, bytes)
        .map_err(|e| AdapterError::Io(path.display().to_string(), e))
}
