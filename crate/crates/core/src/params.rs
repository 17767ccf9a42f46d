//! Layered parameter containers and the vector algebra used on them.
//!
//! A [`ParamSet`] is an ordered list of named layers, each a shaped block of
//! finite `f64` values. Two sets are congruent when layer ids, order, and
//! shapes all match; every cross-set operation requires congruence. Sets are
//! immutable once constructed: operations return new sets.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// One named, shaped block of parameters. Values are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    id: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Layer {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Ordered collection of layers; the unit the simulator moves around.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    layers: Vec<Layer>,
}

impl ParamSet {
    /// Build a set from `(id, shape, values)` triples.
    ///
    /// Rejects an empty layer list, empty layers, duplicate ids, a value
    /// count not matching the shape product, and non-finite values.
    pub fn new(layers: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Structural("parameter set must have at least one layer".into()));
        }
        let mut out = Vec::with_capacity(layers.len());
        for (id, shape, values) in layers {
            if id.is_empty() {
                return Err(Error::Structural("layer id must be non-empty".into()));
            }
            if out.iter().any(|l: &Layer| l.id == id) {
                return Err(Error::Structural(format!("duplicate layer id {id:?}")));
            }
            let expect: usize = shape.iter().product();
            if shape.is_empty() || expect == 0 {
                return Err(Error::Structural(format!("layer {id:?} has an empty shape")));
            }
            if values.len() != expect {
                return Err(Error::Structural(format!(
                    "layer {id:?} expects {expect} values for shape {shape:?}, got {}",
                    values.len()
                )));
            }
            if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "layer {id:?} holds a non-finite value at index {pos}"
                )));
            }
            out.push(Layer { id, shape, values });
        }
        Ok(ParamSet { layers: out })
    }

    /// All-zero set with the same layout as `template`.
    pub fn zeros_like(template: &ParamSet) -> ParamSet {
        ParamSet {
            layers: template
                .layers
                .iter()
                .map(|l| Layer {
                    id: l.id.clone(),
                    shape: l.shape.clone(),
                    values: vec![0.0; l.values.len()],
                })
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, idx: usize) -> &Layer {
        &self.layers[idx]
    }

    /// Layer lookup by id.
    pub fn layer_by_id(&self, id: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Total number of scalar parameters across layers.
    pub fn total_len(&self) -> usize {
        self.layers.iter().map(|l| l.values.len()).sum()
    }

    pub fn layer_ids(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.id.clone()).collect()
    }

    /// True when ids, order, and shapes all match.
    pub fn congruent(&self, other: &ParamSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.id == b.id && a.shape == b.shape)
    }

    pub fn ensure_congruent(&self, other: &ParamSet) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Structural(format!(
                "layer count mismatch: {} vs {}",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.id != b.id {
                return Err(Error::Structural(format!(
                    "layer id mismatch: {:?} vs {:?}",
                    a.id, b.id
                )));
            }
            if a.shape != b.shape {
                return Err(Error::Structural(format!(
                    "layer {:?} shape mismatch: {:?} vs {:?}",
                    a.id, a.shape, b.shape
                )));
            }
        }
        Ok(())
    }

    /// Flat binary encoding, little-endian throughout:
    /// magic `FSP1`, u32 layer count, then per layer
    /// u32 id length, id bytes, u32 rank, u32 dims, u64 value count, f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.total_len() * 8);
        buf.extend_from_slice(b"FSP1");
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            buf.extend_from_slice(&(l.id.len() as u32).to_le_bytes());
            buf.extend_from_slice(l.id.as_bytes());
            buf.extend_from_slice(&(l.shape.len() as u32).to_le_bytes());
            for d in &l.shape {
                buf.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            buf.extend_from_slice(&(l.values.len() as u64).to_le_bytes());
            for v in &l.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet> {
        let mut cursor = Cursor { bytes, pos: 0 };
        let magic = cursor.take(4)?;
        if magic != b"FSP1" {
            return Err(Error::Serialization("bad parameter checkpoint magic".into()));
        }
        let n = cursor.u32()? as usize;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let id_len = cursor.u32()? as usize;
            let id = String::from_utf8(cursor.take(id_len)?.to_vec())
                .map_err(|e| Error::Serialization(format!("layer id not utf-8: {e}")))?;
            let rank = cursor.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cursor.u32()? as usize);
            }
            let count = cursor.u64()? as usize;
            let mut values = Vec::with_capacity(count);
            for _ in 0..count {
                let raw = cursor.take(8)?;
                values.push(f64::from_le_bytes(raw.try_into().unwrap()));
            }
            layers.push((id, shape, values));
        }
        if cursor.pos != bytes.len() {
            return Err(Error::Serialization("trailing bytes in parameter checkpoint".into()));
        }
        ParamSet::new(layers)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Serialization("truncated parameter checkpoint".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn check_norm_order(p: f64) -> Result<()> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::Domain(format!("norm order must be a finite real >= 1, got {p}")));
    }
    Ok(())
}

fn p_norm(diffs: impl Iterator<Item = f64>, p: f64) -> f64 {
    if p == 2.0 {
        diffs.map(|d| d * d).sum::<f64>().sqrt()
    } else if p == 1.0 {
        diffs.map(f64::abs).sum()
    } else {
        diffs.map(|d| d.abs().powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

/// Per-layer p-norm of the elementwise difference `a - b`.
///
/// Identical sets give exact zeros for every p: each summand is `|0|^p = 0`.
pub fn layer_norm_diff(a: &ParamSet, b: &ParamSet, p: f64) -> Result<Vec<f64>> {
    check_norm_order(p)?;
    a.ensure_congruent(b)?;
    Ok(a.layers
        .iter()
        .zip(&b.layers)
        .map(|(la, lb)| p_norm(la.values.iter().zip(&lb.values).map(|(x, y)| x - y), p))
        .collect())
}

/// `base + sum_i coeff_i * delta_i`, all sets congruent with `base`.
///
/// An empty term list returns `base` unchanged. Produces a numeric error
/// naming the layer if any output value is non-finite.
pub fn axpy_combine(base: &ParamSet, terms: &[(f64, &ParamSet)]) -> Result<ParamSet> {
    for (coeff, delta) in terms {
        if !coeff.is_finite() {
            return Err(Error::Domain(format!("combination coefficient {coeff} is not finite")));
        }
        base.ensure_congruent(delta)?;
    }
    let mut layers = Vec::with_capacity(base.layers.len());
    for (li, l) in base.layers.iter().enumerate() {
        let mut values = l.values.clone();
        for (coeff, delta) in terms {
            let dv = &delta.layers[li].values;
            for (v, d) in values.iter_mut().zip(dv) {
                *v += coeff * d;
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "layer {:?} became non-finite during combination",
                l.id
            )));
        }
        layers.push(Layer { id: l.id.clone(), shape: l.shape.clone(), values });
    }
    Ok(ParamSet { layers })
}

/// Set shaped like `template` filled with draws from `N(0, sigma^2)`.
///
/// `sigma = 0` returns exact zeros without consuming the stream.
pub fn gaussian_like<R: Rng>(template: &ParamSet, sigma: f64, rng: &mut R) -> Result<ParamSet> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("sigma must be a finite real >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(ParamSet::zeros_like(template));
    }
    let layers = template
        .layers
        .iter()
        .map(|l| Layer {
            id: l.id.clone(),
            shape: l.shape.clone(),
            values: (0..l.values.len())
                .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        })
        .collect();
    Ok(ParamSet { layers })
}
