//! Single-file checkpoints.
//!
//! Layout: an 8-byte little-endian `u64` manifest length, the manifest as
//! UTF-8 JSON, then every tensor as little-endian `f32` values in manifest
//! order. Tensor offsets are relative to the first payload byte; the
//! checksum is the SHA-256 of the whole payload.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attention::{AttentionParams, DhaTopology, LayerAttention, LayerTopology, ModelConfig};
use crate::fusion::{FusionOperator, KindFusion, LayerFusion};
use crate::linalg::Matrix;
use crate::model::{FeedForward, ToyModel};
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f32";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checksum mismatch: manifest says {expected}, payload hashes to {found}")]
    ChecksumMismatch { expected: String, found: String },
    #[error("truncated checkpoint: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("tensor {tensor:?} lies outside the payload (offset {offset}, length {length}, payload {payload})")]
    OutOfBounds {
        tensor: String,
        offset: u64,
        length: u64,
        payload: u64,
    },
    #[error("expected a {expected} checkpoint, found {found}")]
    VariantMismatch {
        expected: TopologyVariant,
        found: TopologyVariant,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("manifest is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type CkResult<T> = std::result::Result<T, CheckpointError>;

fn manifest_err(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Manifest(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyVariant {
    Mha,
    Gqa,
    Dha,
}

impl std::fmt::Display for TopologyVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mha => "mha",
            Self::Gqa => "gqa",
            Self::Dha => "dha",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyRecord {
    pub variant: TopologyVariant,
    /// Present for `gqa` and `dha`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerTopology>>,
}

impl TopologyRecord {
    pub fn mha() -> Self {
        Self {
            variant: TopologyVariant::Mha,
            layers: None,
        }
    }

    /// `mha` for identity maps, `gqa` when every layer uses the same
    /// contiguous grouping for keys and values, `dha` otherwise.
    pub fn classify(topo: &DhaTopology) -> Self {
        if topo.is_identity() {
            return Self::mha();
        }
        let variant = match topo.uniform_groups() {
            Some(_) => TopologyVariant::Gqa,
            None => TopologyVariant::Dha,
        };
        Self {
            variant,
            layers: Some(topo.layers.clone()),
        }
    }

    fn topology(&self, config: &ModelConfig) -> CkResult<DhaTopology> {
        match (self.variant, &self.layers) {
            (TopologyVariant::Mha, _) => {
                Ok(DhaTopology::identity(config.n_layers, config.n_query_heads))
            }
            (_, Some(layers)) => Ok(DhaTopology {
                layers: layers.clone(),
            }),
            (v, None) => Err(manifest_err(format!("{v} topology without layer maps"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionLayerRecord {
    pub key_groups: Vec<Vec<usize>>,
    pub value_groups: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionRecord {
    pub layers: Vec<FusionLayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: Option<ModelConfig>,
    pub topology: TopologyRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionRecord>,
    pub tensors: Vec<TensorEntry>,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Container contents without model semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint {
    pub config: Option<ModelConfig>,
    pub topology: TopologyRecord,
    pub fusion: Option<FusionRecord>,
    pub tensors: Vec<NamedTensor>,
}

impl RawCheckpoint {
    pub fn to_bytes(&self) -> CkResult<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let n: usize = t.shape.iter().product();
            if n != t.data.len() {
                return Err(manifest_err(format!(
                    "tensor {:?} has shape {:?} but {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            let offset = payload.len() as u64;
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: DTYPE.into(),
                byte_offset: offset,
                byte_length: payload.len() as u64 - offset,
            });
        }
        let manifest = CheckpointManifest {
            format_version: FORMAT_VERSION,
            config: self.config,
            topology: self.topology.clone(),
            fusion: self.fusion.clone(),
            tensors: entries,
            checksum: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(8 + header.len() + payload.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> CkResult<Self> {
        let manifest = read_manifest(bytes)?;
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let payload = &bytes[8 + header_len as usize..];
        let payload_len = payload.len() as u64;

        let mut expected_end = 0u64;
        for e in &manifest.tensors {
            let end = e.byte_offset.checked_add(e.byte_length);
            if end.map_or(true, |end| end > payload_len) {
                if e.byte_offset <= payload_len && e.byte_offset == expected_end {
                    // well-placed tensor that runs past the end: the file was cut short
                    let total: u64 = manifest.tensors.iter().map(|t| t.byte_length).sum();
                    return Err(CheckpointError::Truncated {
                        expected: 8 + header_len + total,
                        found: bytes.len() as u64,
                    });
                }
                return Err(CheckpointError::OutOfBounds {
                    tensor: e.name.clone(),
                    offset: e.byte_offset,
                    length: e.byte_length,
                    payload: payload_len,
                });
            }
            if e.byte_offset != expected_end {
                return Err(manifest_err(format!(
                    "tensor {:?} starts at {} but the previous tensor ends at {expected_end}",
                    e.name, e.byte_offset
                )));
            }
            expected_end += e.byte_length;
        }
        if expected_end != payload_len {
            return Err(manifest_err(format!(
                "payload has {payload_len} bytes, tensors account for {expected_end}"
            )));
        }
        let found = hex::encode(Sha256::digest(payload));
        if found != manifest.checksum {
            return Err(CheckpointError::ChecksumMismatch {
                expected: manifest.checksum,
                found,
            });
        }

        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.dtype != DTYPE {
                return Err(manifest_err(format!(
                    "tensor {:?} has dtype {:?}, only {DTYPE} is supported",
                    e.name, e.dtype
                )));
            }
            let n: usize = e.shape.iter().product();
            if n as u64 * 4 != e.byte_length {
                return Err(manifest_err(format!(
                    "tensor {:?}: shape {:?} needs {} bytes, entry has {}",
                    e.name,
                    e.shape,
                    n * 4,
                    e.byte_length
                )));
            }
            let start = e.byte_offset as usize;
            let data = payload[start..start + e.byte_length as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data,
            });
        }
        Ok(Self {
            config: manifest.config,
            topology: manifest.topology,
            fusion: manifest.fusion,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> CkResult<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> CkResult<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Parses and version-checks the manifest without touching the payload.
pub fn read_manifest(bytes: &[u8]) -> CkResult<CheckpointManifest> {
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated {
            expected: 8,
            found: bytes.len() as u64,
        });
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let header_end = 8u64.saturating_add(header_len);
    if header_end > bytes.len() as u64 {
        return Err(CheckpointError::Truncated {
            expected: header_end,
            found: bytes.len() as u64,
        });
    }
    let header = &bytes[8..header_end as usize];
    // Peek at the version first so a future layout reports the version, not a
    // schema error.
    let probe: serde_json::Value = serde_json::from_slice(header)?;
    let version = probe
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| manifest_err("missing format_version"))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(CheckpointError::UnsupportedVersion {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            supported: FORMAT_VERSION,
        });
    }
    Ok(serde_json::from_value(probe)?)
}

/// A model as stored on disk, with its fusion operator when one was saved.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ToyModel<T>,
    pub fusion: Option<FusionOperator<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn variant(&self) -> TopologyVariant {
        TopologyRecord::classify(&self.model.topology).variant
    }

    /// Errors unless the stored topology has the `expected` variant.
    pub fn expect_variant(&self, expected: TopologyVariant) -> CkResult<()> {
        let found = self.variant();
        if found == expected {
            Ok(())
        } else {
            Err(CheckpointError::VariantMismatch { expected, found })
        }
    }
}

fn to_tensor<T: Scalar>(name: String, m: &Matrix<T>) -> NamedTensor {
    NamedTensor {
        name,
        shape: vec![m.rows(), m.cols()],
        data: m.data().iter().map(|v| v.as_f64() as f32).collect(),
    }
}

fn model_tensors<T: Scalar>(
    model: &ToyModel<T>,
    op: Option<&FusionOperator<T>>,
) -> Vec<NamedTensor> {
    let mut out = vec![
        to_tensor("tok_emb".into(), &model.tok_emb),
        to_tensor("pos_emb".into(), &model.pos_emb),
    ];
    for (l, (a, f)) in model.attn.layers.iter().zip(&model.ff).enumerate() {
        for (kind, heads) in [("w_q", &a.w_q), ("w_k", &a.w_k), ("w_v", &a.w_v)] {
            for (h, m) in heads.iter().enumerate() {
                out.push(to_tensor(format!("layers.{l}.attn.{kind}.{h}"), m));
            }
        }
        out.push(to_tensor(format!("layers.{l}.attn.w_o"), &a.w_o));
        out.push(to_tensor(format!("layers.{l}.ff.w1"), &f.w1));
        out.push(to_tensor(format!("layers.{l}.ff.w2"), &f.w2));
    }
    out.push(to_tensor("out_proj".into(), &model.out_proj));
    if let Some(op) = op {
        for (l, lf) in op.layers.iter().enumerate() {
            for (kind, kf) in [("key", &lf.key), ("value", &lf.value)] {
                for (h, m) in kf.omega().iter().enumerate() {
                    out.push(to_tensor(format!("layers.{l}.fusion.{kind}.omega.{h}"), m));
                }
            }
        }
    }
    out
}

/// Encodes a model (and optional fusion operator) as a raw checkpoint.
pub fn to_raw<T: Scalar>(model: &ToyModel<T>, op: Option<&FusionOperator<T>>) -> RawCheckpoint {
    RawCheckpoint {
        config: Some(model.config),
        topology: TopologyRecord::classify(&model.topology),
        fusion: op.map(|op| FusionRecord {
            layers: op
                .layers
                .iter()
                .map(|l| FusionLayerRecord {
                    key_groups: l.key.groups().to_vec(),
                    value_groups: l.value.groups().to_vec(),
                })
                .collect(),
        }),
        tensors: model_tensors(model, op),
    }
}

pub fn save_checkpoint<T: Scalar>(
    model: &ToyModel<T>,
    op: Option<&FusionOperator<T>>,
    path: impl AsRef<Path>,
) -> crate::Result<()> {
    model.validate()?;
    to_raw(model, op).save(path)?;
    Ok(())
}

struct TensorTable {
    by_name: HashMap<String, NamedTensor>,
}

impl TensorTable {
    fn new(tensors: Vec<NamedTensor>) -> CkResult<Self> {
        let mut by_name = HashMap::with_capacity(tensors.len());
        for t in tensors {
            let name = t.name.clone();
            if by_name.insert(name.clone(), t).is_some() {
                return Err(manifest_err(format!("tensor {name:?} appears twice")));
            }
        }
        Ok(Self { by_name })
    }

    fn take<T: Scalar>(&mut self, name: &str, rows: usize, cols: usize) -> CkResult<Matrix<T>> {
        let t = self
            .by_name
            .remove(name)
            .ok_or_else(|| manifest_err(format!("missing tensor {name:?}")))?;
        if t.shape != [rows, cols] {
            return Err(manifest_err(format!(
                "tensor {name:?} has shape {:?}, expected [{rows}, {cols}]",
                t.shape
            )));
        }
        Matrix::from_vec(
            rows,
            cols,
            t.data.iter().map(|&v| T::lit(f64::from(v))).collect(),
        )
        .map_err(|e| manifest_err(e.to_string()))
    }

    fn finish(self) -> CkResult<()> {
        let mut extra: Vec<_> = self.by_name.into_keys().collect();
        if extra.is_empty() {
            return Ok(());
        }
        extra.sort();
        Err(manifest_err(format!("unexpected tensors {extra:?}")))
    }
}

/// Rebuilds a model (and operator) from a raw checkpoint.
pub fn from_raw<T: Scalar>(raw: RawCheckpoint) -> crate::Result<Checkpoint<T>> {
    let config = raw
        .config
        .ok_or_else(|| manifest_err("checkpoint has no model config"))?;
    config.validate()?;
    let topology = raw.topology.topology(&config)?;
    topology.validate(config.n_query_heads)?;
    let (d, dk) = (config.d_model, config.head_dim);
    let mut table = TensorTable::new(raw.tensors)?;

    let tok_emb = table.take("tok_emb", config.vocab_size, d)?;
    let pos_emb = table.take("pos_emb", config.max_seq, d)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    let mut ff = Vec::with_capacity(config.n_layers);
    for (l, t) in topology.layers.iter().enumerate() {
        let mut heads = |kind: &str, n: usize| -> CkResult<Vec<Matrix<T>>> {
            (0..n)
                .map(|h| table.take(&format!("layers.{l}.attn.{kind}.{h}"), d, dk))
                .collect()
        };
        let w_q = heads("w_q", config.n_query_heads)?;
        let w_k = heads("w_k", t.key_heads)?;
        let w_v = heads("w_v", t.value_heads)?;
        layers.push(LayerAttention {
            w_q,
            w_k,
            w_v,
            w_o: table.take(&format!("layers.{l}.attn.w_o"), d, d)?,
        });
        ff.push(FeedForward {
            w1: table.take(&format!("layers.{l}.ff.w1"), d, config.d_ff)?,
            w2: table.take(&format!("layers.{l}.ff.w2"), config.d_ff, d)?,
        });
    }
    let out_proj = table.take("out_proj", d, config.vocab_size)?;

    let fusion = match raw.fusion {
        None => None,
        Some(rec) => {
            if rec.layers.len() != config.n_layers {
                return Err(manifest_err("fusion record layer count differs from config").into());
            }
            let mut fl = Vec::with_capacity(rec.layers.len());
            for (l, r) in rec.layers.into_iter().enumerate() {
                let mut kind =
                    |name: &str, groups: Vec<Vec<usize>>| -> crate::Result<KindFusion<T>> {
                        let g = groups.first().map_or(0, Vec::len);
                        let width = table
                            .by_name
                            .get(&format!("layers.{l}.fusion.{name}.omega.0"))
                            .and_then(|t| t.shape.get(1).copied())
                            .unwrap_or(1);
                        let omega = (0..config.n_query_heads)
                            .map(|h| {
                                table.take(&format!("layers.{l}.fusion.{name}.omega.{h}"), g, width)
                            })
                            .collect::<CkResult<Vec<_>>>()?;
                        KindFusion::from_parts(groups, omega)
                    };
                let key = kind("key", r.key_groups)?;
                let value = kind("value", r.value_groups)?;
                fl.push(LayerFusion { key, value });
            }
            Some(FusionOperator { layers: fl })
        }
    };
    table.finish()?;

    let model = ToyModel {
        config,
        tok_emb,
        pos_emb,
        attn: AttentionParams { layers },
        topology,
        ff,
        out_proj,
    };
    model.validate()?;
    Ok(Checkpoint { model, fusion })
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> crate::Result<Checkpoint<T>> {
    from_raw(RawCheckpoint::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{init_identity, OmegaMode};
    use crate::search::Grouping;

    fn tiny() -> ToyModel<f64> {
        let cfg = ModelConfig::new(2, 4, 2, 7, 6).unwrap();
        ToyModel::init(cfg, 3).unwrap()
    }

    #[test]
    fn empty_container_is_valid() {
        let raw = RawCheckpoint {
            config: None,
            topology: TopologyRecord::mha(),
            fusion: None,
            tensors: vec![],
        };
        let bytes = raw.to_bytes().unwrap();
        let m = read_manifest(&bytes).unwrap();
        assert!(m.tensors.is_empty());
        let header = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        assert_eq!(header + 8, bytes.len() as u64);
        assert_eq!(RawCheckpoint::from_bytes(&bytes).unwrap(), raw);
        assert!(from_raw::<f64>(raw).is_err());
    }

    #[test]
    fn model_round_trip_is_byte_stable() {
        let model = tiny();
        let bytes = to_raw(&model, None).to_bytes().unwrap();
        let back: Checkpoint<f64> = from_raw(RawCheckpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert!(back.fusion.is_none());
        assert_eq!(to_raw(&back.model, None).to_bytes().unwrap(), bytes);
        for (a, b) in model.matrices().zip(back.model.matrices()) {
            assert!(a.max_abs_diff(b) <= 1e-7);
        }
        back.expect_variant(TopologyVariant::Mha).unwrap();
        assert!(matches!(
            back.expect_variant(TopologyVariant::Dha),
            Err(CheckpointError::VariantMismatch { .. })
        ));
    }

    #[test]
    fn fusion_operator_round_trip() {
        let model = tiny();
        let g = vec![Grouping::new(vec![vec![0, 1], vec![2, 3]]); 2];
        let v = vec![Grouping::new(vec![vec![0, 1, 2, 3]]); 2];
        let op = init_identity(&model.attn, &g, &v, OmegaMode::PerChannel).unwrap();
        let bytes = to_raw(&model, Some(&op)).to_bytes().unwrap();
        let back: Checkpoint<f64> = from_raw(RawCheckpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.fusion.as_ref(), Some(&op));
        assert_eq!(
            to_raw(&back.model, back.fusion.as_ref())
                .to_bytes()
                .unwrap(),
            bytes
        );
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = to_raw(&tiny(), None).to_bytes().unwrap();
        let mut tampered = bytes.clone();
        let last = tampered.len() - 1;
        tampered[last] ^= 0x40;
        assert!(matches!(
            RawCheckpoint::from_bytes(&tampered),
            Err(CheckpointError::ChecksumMismatch { .. })
        ));
        assert!(matches!(
            RawCheckpoint::from_bytes(&bytes[..bytes.len() - 10]),
            Err(CheckpointError::Truncated { .. })
        ));
        assert!(matches!(
            RawCheckpoint::from_bytes(&bytes[..4]),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    fn rewrite_manifest(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let mut v: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        edit(&mut v);
        let header = serde_json::to_vec(&v).unwrap();
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(&header);
        out.extend_from_slice(&bytes[8 + n..]);
        out
    }

    #[test]
    fn version_and_bounds_errors() {
        let bytes = to_raw(&tiny(), None).to_bytes().unwrap();
        let newer = rewrite_manifest(&bytes, |v| {
            v["format_version"] = (FORMAT_VERSION + 1).into();
        });
        assert!(matches!(
            RawCheckpoint::from_bytes(&newer),
            Err(CheckpointError::UnsupportedVersion { found, .. }) if found == FORMAT_VERSION + 1
        ));
        let oob = rewrite_manifest(&bytes, |v| {
            v["tensors"][3]["byte_offset"] = 1_000_000_000u64.into();
        });
        match RawCheckpoint::from_bytes(&oob) {
            Err(e @ CheckpointError::OutOfBounds { .. }) => {
                assert!(e.to_string().contains("layers.0.attn.w_q.1"), "{e}");
            }
            other => panic!("expected bounds error, got {other:?}"),
        }
    }

    #[test]
    fn tensor_names_are_unique_and_complete() {
        let raw = to_raw(&tiny(), None);
        let mut names: Vec<_> = raw.tensors.iter().map(|t| t.name.clone()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert_eq!(n, 2 + 2 * (4 * 3 + 3) + 1);
        let mut missing = raw.clone();
        missing.tensors.retain(|t| t.name != "layers.1.ff.w2");
        assert!(from_raw::<f64>(missing).is_err());
    }
}
