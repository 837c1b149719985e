//! Named parameter storage with frozen/trainable flags and checkpoint IO.
//!
//! Checkpoint layout (version 1): a UTF-8 text manifest terminated by a line
//! `end`, followed by the raw little-endian payload of every entry in manifest
//! order.
//!
//! ```text
//! TSSAM-CHECKPOINT v1
//! dtype=f32
//! entries=2
//! payload_bytes=136
//! payload_sha256=<hex>
//! entry name=csa.layers.0.expand.conv.weight dtype=f32 shape=32,16,1,1 frozen=0 kind=param offset=0 bytes=2048
//! ...
//! end
//! <payload>
//! ```

use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Error, Result};
use crate::tensor::{hex_digest, DType, Float, Tensor};

pub const CHECKPOINT_MAGIC: &str = "TSSAM-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Learned parameters are optimized and counted; buffers (batch-norm running
/// statistics) are only updated by forward passes in train mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Param,
    Buffer,
}

impl EntryKind {
    fn as_str(self) -> &'static str {
        match self {
            EntryKind::Param => "param",
            EntryKind::Buffer => "buffer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CountFilter {
    #[default]
    All,
    Trainable,
    Frozen,
}

impl std::str::FromStr for CountFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(CountFilter::All),
            "trainable" => Ok(CountFilter::Trainable),
            "frozen" => Ok(CountFilter::Frozen),
            other => Err(Error::Config(format!(
                "unknown parameter filter `{other}` (expected all, trainable or frozen)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T: Float> {
    pub tensor: Tensor<T>,
    pub frozen: bool,
    pub kind: EntryKind,
}

impl<T: Float> ParamEntry<T> {
    /// True for entries the optimizer may update.
    pub fn is_trainable(&self) -> bool {
        !self.frozen && self.kind == EntryKind::Param
    }
}

/// Insertion-ordered map from parameter name to tensor plus flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Float> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, frozen: bool, kind: EntryKind) -> Result<()> {
        if !valid_name(name) {
            return Err(Error::Config(format!("invalid parameter name `{name}`")));
        }
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.entries
            .insert(name.to_string(), ParamEntry { tensor, frozen, kind });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.entry(name)?.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    /// Replaces the tensor of an existing entry; the shape must not change.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let slot = self.tensor_mut(name)?;
        if slot.shape() != tensor.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, refusing {:?}",
                slot.shape(),
                tensor.shape()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.iter()
            .filter(|(_, e)| e.is_trainable())
            .map(|(n, _)| n.to_string())
            .collect()
    }

    /// Number of learned scalars matching `filter`. Buffers are never counted.
    pub fn count(&self, filter: CountFilter) -> usize {
        self.count_where(|_, e| match filter {
            CountFilter::All => true,
            CountFilter::Trainable => !e.frozen,
            CountFilter::Frozen => e.frozen,
        })
    }

    /// Like [`ParamStore::count`], restricted to names starting with `prefix`.
    pub fn count_prefix(&self, prefix: &str, filter: CountFilter) -> usize {
        self.count_where(|n, e| {
            n.starts_with(prefix)
                && match filter {
                    CountFilter::All => true,
                    CountFilter::Trainable => !e.frozen,
                    CountFilter::Frozen => e.frozen,
                }
        })
    }

    fn count_where(&self, pred: impl Fn(&str, &ParamEntry<T>) -> bool) -> usize {
        self.iter()
            .filter(|(n, e)| e.kind == EntryKind::Param && pred(n, e))
            .map(|(_, e)| e.tensor.numel())
            .sum()
    }

    /// Top-level module prefixes (`backbone`, `csa`, ...) in insertion order.
    pub fn modules(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for name in self.names() {
            let m = name.split('.').next().unwrap_or(name).to_string();
            if !out.contains(&m) {
                out.push(m);
            }
        }
        out
    }

    /// SHA-256 over names, flags, shapes and bytes of all entries under `prefix`.
    pub fn checksum_prefix(&self, prefix: &str) -> String {
        let mut hasher = Sha256::new();
        for (name, e) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            hasher.update(name.as_bytes());
            hasher.update([e.frozen as u8, (e.kind == EntryKind::Param) as u8]);
            for &d in e.tensor.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            hasher.update(e.tensor.le_bytes());
        }
        hex_digest(hasher)
    }

    pub fn checksum(&self) -> String {
        self.checksum_prefix("")
    }

    /// Exact equality of names, order, flags, shapes and element bits.
    pub fn bit_identical(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.iter().zip(other.iter()).all(|((na, a), (nb, b))| {
                na == nb
                    && a.frozen == b.frozen
                    && a.kind == b.kind
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor.le_bytes() == b.tensor.le_bytes()
            })
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            tensor: e.tensor.cast(),
                            frozen: e.frozen,
                            kind: e.kind,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let size = T::DTYPE.size_in_bytes();
        let mut payload = Vec::new();
        let mut lines = String::new();
        for (name, e) in self.iter() {
            let offset = payload.len();
            payload.extend(e.tensor.le_bytes());
            let shape: Vec<String> = e.tensor.shape().iter().map(|d| d.to_string()).collect();
            writeln!(
                lines,
                "entry name={name} dtype={} shape={} frozen={} kind={} offset={offset} bytes={}",
                T::DTYPE,
                shape.join(","),
                e.frozen as u8,
                e.kind.as_str(),
                e.tensor.numel() * size
            )
            .unwrap();
        }
        let mut hasher = Sha256::new();
        hasher.update(&payload);
        let mut out = format!(
            "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}\ndtype={}\nentries={}\npayload_bytes={}\npayload_sha256={}\n",
            T::DTYPE,
            self.len(),
            payload.len(),
            hex_digest(hasher)
        )
        .into_bytes();
        out.extend(lines.into_bytes());
        out.extend(b"end\n");
        out.extend(payload);
        out
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_checkpoint_bytes(&bytes)?)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let header = read_header(bytes)?;
        if header.dtype != T::DTYPE {
            return Err(CheckpointError::DType {
                found: header.dtype.to_string(),
                requested: T::DTYPE.to_string(),
            });
        }
        let payload = &bytes[header.payload_start..];
        let size = T::DTYPE.size_in_bytes();
        let mut store = ParamStore::new();
        for m in header.entries {
            let chunk = &payload[m.offset..m.offset + m.bytes];
            let data: Vec<T> = chunk.chunks_exact(size).map(T::from_le_slice).collect();
            let tensor = Tensor::from_vec(&m.shape, data).map_err(|e| CheckpointError::Manifest {
                entry: m.name.clone(),
                reason: e.to_string(),
            })?;
            store
                .insert(&m.name, tensor, m.frozen, m.kind)
                .map_err(|e| CheckpointError::Manifest {
                    entry: m.name.clone(),
                    reason: e.to_string(),
                })?;
        }
        Ok(store)
    }
}

/// One `entry` line of a checkpoint manifest.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub kind: EntryKind,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug)]
pub struct CheckpointHeader {
    pub dtype: DType,
    pub entries: Vec<ManifestEntry>,
    payload_start: usize,
}

/// Parses and validates the manifest of a checkpoint without decoding tensors.
pub fn read_header(bytes: &[u8]) -> Result<CheckpointHeader, CheckpointError> {
    let mut lines = Vec::new();
    let mut pos = 0;
    let payload_start = loop {
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(CheckpointError::Integrity(
                "file ends inside the manifest".into(),
            ));
        };
        let line = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| CheckpointError::Header(format!("non UTF-8 manifest line at byte {pos}")))?;
        pos += nl + 1;
        if line == "end" {
            break pos;
        }
        lines.push(line);
        if lines.len() == 1 {
            check_magic(line)?;
        }
    };
    if lines.is_empty() {
        return Err(CheckpointError::Header("empty manifest".into()));
    }

    let mut dtype = None;
    let mut n_entries = None;
    let mut payload_bytes = None;
    let mut payload_sha = None;
    let mut entries = Vec::new();
    for line in &lines[1..] {
        if let Some(rest) = line.strip_prefix("entry ") {
            entries.push(parse_entry(rest)?);
        } else if let Some((k, v)) = line.split_once('=') {
            match k {
                "dtype" => dtype = DType::parse(v),
                "entries" => n_entries = v.parse::<usize>().ok(),
                "payload_bytes" => payload_bytes = v.parse::<usize>().ok(),
                "payload_sha256" => payload_sha = Some(v.to_string()),
                other => return Err(CheckpointError::Header(format!("unknown key `{other}`"))),
            }
        } else {
            return Err(CheckpointError::Header(format!("unparsable line `{line}`")));
        }
    }
    let dtype = dtype.ok_or_else(|| CheckpointError::Header("missing or invalid dtype".into()))?;
    let n_entries = n_entries.ok_or_else(|| CheckpointError::Header("missing entries count".into()))?;
    let payload_bytes =
        payload_bytes.ok_or_else(|| CheckpointError::Header("missing payload_bytes".into()))?;
    let payload_sha = payload_sha.ok_or_else(|| CheckpointError::Header("missing payload_sha256".into()))?;
    if entries.len() != n_entries {
        return Err(CheckpointError::Header(format!(
            "manifest declares {n_entries} entries but lists {}",
            entries.len()
        )));
    }

    let payload = &bytes[payload_start..];
    if payload.len() != payload_bytes {
        return Err(CheckpointError::Integrity(format!(
            "payload is {} bytes, manifest declares {payload_bytes}",
            payload.len()
        )));
    }
    let mut hasher = Sha256::new();
    hasher.update(payload);
    if hex_digest(hasher) != payload_sha {
        return Err(CheckpointError::Integrity("payload checksum mismatch".into()));
    }

    let mut expected_offset = 0;
    for e in &entries {
        let manifest_err = |reason: String| CheckpointError::Manifest {
            entry: e.name.clone(),
            reason,
        };
        if e.dtype != dtype {
            return Err(manifest_err(format!("entry dtype {} differs from file dtype {dtype}", e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        if numel * dtype.size_in_bytes() != e.bytes {
            return Err(manifest_err(format!(
                "shape {:?} implies {} bytes but entry spans {}",
                e.shape,
                numel * dtype.size_in_bytes(),
                e.bytes
            )));
        }
        if e.offset != expected_offset {
            return Err(manifest_err(format!(
                "offset {} but previous entries end at {expected_offset}",
                e.offset
            )));
        }
        expected_offset += e.bytes;
    }
    if expected_offset != payload_bytes {
        return Err(CheckpointError::Manifest {
            entry: entries.last().map(|e| e.name.clone()).unwrap_or_default(),
            reason: format!("entries cover {expected_offset} of {payload_bytes} payload bytes"),
        });
    }
    Ok(CheckpointHeader {
        dtype,
        entries,
        payload_start,
    })
}

fn check_magic(line: &str) -> Result<(), CheckpointError> {
    let Some(version) = line
        .strip_prefix(CHECKPOINT_MAGIC)
        .and_then(|r| r.strip_prefix(' '))
    else {
        return Err(CheckpointError::Header(format!("not a checkpoint file (first line `{line}`)")));
    };
    if version != format!("v{CHECKPOINT_VERSION}") {
        return Err(CheckpointError::Version {
            found: version.to_string(),
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok(())
}

fn parse_entry(rest: &str) -> Result<ManifestEntry, CheckpointError> {
    let mut name = None;
    let mut dtype = None;
    let mut shape = None;
    let mut frozen = None;
    let mut kind = None;
    let mut offset = None;
    let mut nbytes = None;
    for field in rest.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| CheckpointError::Header(format!("bad entry field `{field}`")))?;
        match k {
            "name" => name = Some(v.to_string()),
            "dtype" => dtype = DType::parse(v),
            "shape" => {
                shape = v
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .ok()
            }
            "frozen" => {
                frozen = match v {
                    "0" => Some(false),
                    "1" => Some(true),
                    _ => None,
                }
            }
            "kind" => {
                kind = match v {
                    "param" => Some(EntryKind::Param),
                    "buffer" => Some(EntryKind::Buffer),
                    _ => None,
                }
            }
            "offset" => offset = v.parse().ok(),
            "bytes" => nbytes = v.parse().ok(),
            _ => return Err(CheckpointError::Header(format!("unknown entry field `{k}`"))),
        }
    }
    let name = name.ok_or_else(|| CheckpointError::Header("entry without name".into()))?;
    let missing = |what: &str| CheckpointError::Manifest {
        entry: name.clone(),
        reason: format!("missing or invalid {what}"),
    };
    Ok(ManifestEntry {
        dtype: dtype.ok_or_else(|| missing("dtype"))?,
        shape: shape.ok_or_else(|| missing("shape"))?,
        frozen: frozen.ok_or_else(|| missing("frozen flag"))?,
        kind: kind.ok_or_else(|| missing("kind"))?,
        offset: offset.ok_or_else(|| missing("offset"))?,
        bytes: nbytes.ok_or_else(|| missing("bytes"))?,
        name,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("backbone.w", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5), true, EntryKind::Param)
            .unwrap();
        s.insert("csa.w", Tensor::from_fn(&[32, 16, 1, 1], |i| (i as f32).sin()), false, EntryKind::Param)
            .unwrap();
        s.insert("csa.b", Tensor::full(&[32], 0.25), false, EntryKind::Param)
            .unwrap();
        s.insert("csa.bn.running_var", Tensor::ones(&[32]), false, EntryKind::Buffer)
            .unwrap();
        s
    }

    #[test]
    fn empty_store_counts_zero() {
        let s = ParamStore::<f32>::new();
        assert_eq!(s.count(CountFilter::All), 0);
    }

    #[test]
    fn single_conv_block_count() {
        // (32,16,1,1) weight + (32) bias + (32)+(32) batch-norm affine
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::zeros(&[32, 16, 1, 1]), false, EntryKind::Param).unwrap();
        s.insert("b", Tensor::zeros(&[32]), false, EntryKind::Param).unwrap();
        s.insert("g", Tensor::zeros(&[32]), false, EntryKind::Param).unwrap();
        s.insert("beta", Tensor::zeros(&[32]), false, EntryKind::Param).unwrap();
        s.insert("rm", Tensor::zeros(&[32]), false, EntryKind::Buffer).unwrap();
        assert_eq!(s.count(CountFilter::All), 608);
    }

    #[test]
    fn partition_identity() {
        let s = sample_store();
        assert_eq!(
            s.count(CountFilter::Trainable) + s.count(CountFilter::Frozen),
            s.count(CountFilter::All)
        );
        assert_eq!(s.count(CountFilter::Frozen), 6);
        assert_eq!(s.count_prefix("csa.", CountFilter::All), 512 + 32);
    }

    #[test]
    fn duplicate_and_invalid_names_rejected() {
        let mut s = sample_store();
        assert!(s.insert("csa.w", Tensor::zeros(&[1]), false, EntryKind::Param).is_err());
        assert!(s.insert("has space", Tensor::zeros(&[1]), false, EntryKind::Param).is_err());
        assert!(s.insert("", Tensor::zeros(&[1]), false, EntryKind::Param).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_bit_identical() {
        let s = sample_store();
        let bytes = s.to_checkpoint_bytes();
        let back = ParamStore::<f32>::from_checkpoint_bytes(&bytes).unwrap();
        assert!(s.bit_identical(&back));
        assert_eq!(back.names().collect::<Vec<_>>(), s.names().collect::<Vec<_>>());
        let f64_store = s.cast::<f64>();
        let back64 = ParamStore::<f64>::from_checkpoint_bytes(&f64_store.to_checkpoint_bytes()).unwrap();
        assert!(f64_store.bit_identical(&back64));
    }

    #[test]
    fn truncated_payload_is_integrity_error() {
        let bytes = sample_store().to_checkpoint_bytes();
        let cut = &bytes[..bytes.len() - 10];
        let err = ParamStore::<f32>::from_checkpoint_bytes(cut).unwrap_err();
        assert!(matches!(err, CheckpointError::Integrity(_)), "{err}");
        let cut_header = &bytes[..40];
        let err = ParamStore::<f32>::from_checkpoint_bytes(cut_header).unwrap_err();
        assert!(matches!(err, CheckpointError::Integrity(_)), "{err}");
    }

    #[test]
    fn edited_manifest_shape_names_entry() {
        let bytes = sample_store().to_checkpoint_bytes();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let needle = "shape=32,16,1,1";
        let pos = text.find(needle).unwrap();
        let mut edited = bytes.clone();
        // 32,16,1,1 -> 32,15,1,1 keeps the byte length of the manifest line
        edited[pos + "shape=32,1".len()] = b'5';
        let err = ParamStore::<f32>::from_checkpoint_bytes(&edited).unwrap_err();
        match err {
            CheckpointError::Manifest { entry, .. } => assert_eq!(entry, "csa.w"),
            other => panic!("expected manifest error, got {other}"),
        }
    }

    #[test]
    fn version_and_dtype_mismatch() {
        let bytes = sample_store().to_checkpoint_bytes();
        let mut v2 = bytes.clone();
        let p = CHECKPOINT_MAGIC.len() + 2;
        v2[p] = b'2';
        assert!(matches!(
            ParamStore::<f32>::from_checkpoint_bytes(&v2).unwrap_err(),
            CheckpointError::Version { .. }
        ));
        assert!(matches!(
            ParamStore::<f64>::from_checkpoint_bytes(&bytes).unwrap_err(),
            CheckpointError::DType { .. }
        ));
        let codes = [
            CheckpointError::Integrity(String::new()).code(),
            CheckpointError::Version { found: String::new(), expected: 1 }.code(),
            CheckpointError::Manifest { entry: String::new(), reason: String::new() }.code(),
        ];
        assert_ne!(codes[0], codes[1]);
        assert_ne!(codes[1], codes[2]);
        assert_ne!(codes[0], codes[2]);
    }

    #[test]
    fn corrupted_payload_detected() {
        let mut bytes = sample_store().to_checkpoint_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        assert!(matches!(
            ParamStore::<f32>::from_checkpoint_bytes(&bytes).unwrap_err(),
            CheckpointError::Integrity(_)
        ));
    }
}
