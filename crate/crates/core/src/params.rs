//! Named parameter collections and the tensor archive format.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use gradgraph::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ARCHIVE_VERSION: &str = "tdgn/1";

/// Ordered collection of named tensors.
///
/// Cloning is cheap and deep in effect: tensors are immutable, and every
/// update builds new tensors, so a clone never observes later changes.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

#[derive(Clone, Debug)]
pub struct ParamSnapshot(Vec<(String, Vec<usize>, Vec<f64>)>);

impl ParamSnapshot {
    pub fn restore(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (name, shape, data) in &self.0 {
            p.insert(name.clone(), Tensor::from_vec(shape, data.clone()));
        }
        p
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        match self.index.get(name) {
            Some(&i) => &self.tensors[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Same names, new tensors.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Self {
        assert_eq!(tensors.len(), self.len());
        for (a, b) in self.tensors.iter().zip(&tensors) {
            assert_eq!(a.shape(), b.shape(), "shape mismatch in parameter update");
        }
        Self {
            names: self.names.clone(),
            tensors,
            index: self.index.clone(),
        }
    }

    pub fn map(&self, f: impl FnMut(&Tensor) -> Tensor) -> Self {
        self.with_tensors(self.tensors.iter().map(f).collect())
    }

    pub fn zip_map(&self, other: &ParamSet, f: impl Fn(&Tensor, &Tensor) -> Tensor) -> Self {
        self.check_same_layout(other);
        self.with_tensors(self.tensors.iter().zip(&other.tensors).map(|(a, b)| f(a, b)).collect())
    }

    fn check_same_layout(&self, other: &ParamSet) {
        assert_eq!(self.names, other.names, "parameter sets have different layouts");
    }

    pub fn add(&self, other: &ParamSet) -> Self {
        self.zip_map(other, Tensor::add)
    }

    pub fn sub(&self, other: &ParamSet) -> Self {
        self.zip_map(other, Tensor::sub)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|t| t.scale(c))
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|t| Tensor::zeros(t.shape()))
    }

    /// Fresh leaves that record gradients.
    pub fn variables(&self) -> Self {
        self.map(Tensor::detach_variable)
    }

    /// Constant copies cut from any graph.
    pub fn detached(&self) -> Self {
        self.map(Tensor::detach)
    }

    /// Plain-data copy that can cross threads.
    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot(
            self.iter()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.to_vec()))
                .collect(),
        )
    }

    /// Rounds every value to the nearest `f32` so archives are lossless.
    pub fn rounded_f32(&self) -> Self {
        self.map(|t| Tensor::from_vec(t.shape(), t.data().iter().map(|&v| v as f32 as f64).collect()))
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn from_flat(&self, values: &[f64]) -> Self {
        assert_eq!(values.len(), self.num_scalars());
        let mut at = 0;
        self.map(|t| {
            let n = t.numel();
            let out = Tensor::from_vec(t.shape(), values[at..at + n].to_vec());
            at += n;
            out
        })
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Names starting with `prefix` followed by a dot.
    pub fn group_names(&self, prefix: &str) -> Vec<&str> {
        let p = format!("{prefix}.");
        self.names.iter().filter(|n| n.starts_with(&p)).map(String::as_str).collect()
    }

    /// Exact equality of names, shapes and values.
    pub fn same_values(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape() && a.data() == b.data())
    }

    /// Adds every tensor of `other` under `prefix/`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (n, t) in other.iter() {
            self.insert(format!("{prefix}/{n}"), t.clone());
        }
    }

    /// Tensors stored under `prefix/`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        let p = format!("{prefix}/");
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            if let Some(rest) = n.strip_prefix(&p) {
                out.insert(rest, t.clone());
            }
        }
        out
    }
}

/// Builds parameters in a fixed order from one random stream.
pub struct ParamBuilder<'a, R: Rng> {
    pub params: ParamSet,
    rng: &'a mut R,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(rng: &'a mut R) -> Self {
        Self {
            params: ParamSet::new(),
            rng,
        }
    }

    /// 3x3 (or `k x k`) convolution with fan-in scaled uniform weights and
    /// zero bias. `zero` gives an all-zero layer.
    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, zero: bool) {
        let n = c_out * c_in * k * k;
        let bound = (3.0 / (c_in * k * k) as f64).sqrt();
        let w: Vec<f64> = if zero {
            vec![0.0; n]
        } else {
            (0..n).map(|_| self.rng.gen_range(-bound..bound) as f32 as f64).collect()
        };
        self.params.insert(format!("{name}.w"), Tensor::from_vec(&[c_out, c_in, k, k], w));
        self.params.insert(format!("{name}.b"), Tensor::zeros(&[c_out]));
    }

    pub fn finish(self) -> ParamSet {
        self.params
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveHeader {
    version: String,
    kind: String,
    #[serde(default)]
    config: serde_json::Value,
    #[serde(default)]
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Contents of one archive file.
#[derive(Debug)]
pub struct Archive {
    pub kind: String,
    pub config: serde_json::Value,
    pub extra: serde_json::Value,
    pub params: ParamSet,
}

/// Serializes `[u64 header length][JSON header][f32 LE payload]`.
pub fn encode_archive(
    kind: &str,
    config: serde_json::Value,
    extra: serde_json::Value,
    params: &ParamSet,
) -> Result<Vec<u8>> {
    let header = ArchiveHeader {
        version: ARCHIVE_VERSION.into(),
        kind: kind.into(),
        config,
        extra,
        tensors: params
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let head = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(8 + head.len() + 4 * params.num_scalars());
    bytes.extend_from_slice(&(head.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&head);
    for t in params.tensors() {
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn decode_archive(bytes: &[u8], path: &Path) -> Result<Archive> {
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let head = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: ArchiveHeader =
        serde_json::from_slice(head).map_err(|e| bad(&format!("bad header: {e}")))?;
    if header.version != ARCHIVE_VERSION {
        return Err(bad(&format!("unsupported version {}", header.version)));
    }
    let mut at = 8 + hlen;
    let mut params = ParamSet::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let chunk = bytes.get(at..at + 4 * n).ok_or_else(|| bad("truncated payload"))?;
        let data = chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.insert(entry.name, Tensor::from_vec(&entry.shape, data));
        at += 4 * n;
    }
    if at != bytes.len() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok(Archive {
        kind: header.kind,
        config: header.config,
        extra: header.extra,
        params,
    })
}

pub fn save_archive(
    path: &Path,
    kind: &str,
    config: serde_json::Value,
    extra: serde_json::Value,
    params: &ParamSet,
) -> Result<()> {
    let bytes = encode_archive(kind, config, extra, params)?;
    crate::synth::write_atomic(path, &bytes)
}

pub fn load_archive(path: &Path) -> Result<Archive> {
    if !path.exists() {
        return Err(Error::CheckpointNotFound(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_archive(&bytes, path)
}
