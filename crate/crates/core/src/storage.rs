//! The `.qz` checkpoint container.
//!
//! Layout: the 4-byte magic `QRNZ`, a version byte, a little-endian `u32`
//! manifest length, the UTF-8 JSON manifest, then the payload of
//! little-endian tensors packed back to back in manifest order. See
//! FORMAT.md for the full description.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use half::f16;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gates::HardConcreteGates;
use crate::model::{Gate, ModelConfig, ModelError, QrnnLayerWeights, QrnnModel};
use crate::pruning::{ActivationStats, PruneMask};
use crate::sru::{apply_sru, gate_index, ElementWidth, RankOne, SruError, SruTag, SruUpdate};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"QRNZ";
pub const VERSION: u8 = 1;
/// Magic, version byte and manifest length.
pub const HEADER_BYTES: usize = 4 + 1 + 4;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a .qz checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported .qz version {0} (this build reads version {VERSION})")]
    UnsupportedVersion(u8),
    #[error("checkpoint truncated: need {needed} bytes, file has {actual}")]
    Truncated { needed: usize, actual: usize },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("tensor `{name}` has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("tensor `{0}` appears twice")]
    DuplicateTensor(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(#[from] ModelError),
    #[error("rank-1 update trained for mask {expected}, stored with mask {got}")]
    SruMaskMismatch { expected: String, got: String },
    #[error(transparent)]
    Sru(#[from] SruError),
}

/// How a pruned checkpoint was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub base_config: ModelConfig,
    pub mask: PruneMask,
    pub method: String,
    pub target_flops: f64,
    pub achieved_flops: f64,
}

/// One trained gate set, keyed by a user-chosen tag.
#[derive(Debug, Clone, PartialEq)]
pub struct GateEntry {
    pub tag: String,
    pub gates: HardConcreteGates<f32>,
}

/// One rank-1 update and the mask it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct SruEntry {
    pub mask: PruneMask,
    pub update: SruUpdate<f32>,
    pub width: ElementWidth,
}

/// Everything a `.qz` file can hold.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: QrnnModel<f32>,
    pub vocab_hash: Option<String>,
    pub prune: Option<PruneRecord>,
    pub stats: Option<ActivationStats>,
    pub gates: Vec<GateEntry>,
    pub sru: Vec<SruEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    F16,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }
}

impl From<ElementWidth> for Dtype {
    fn from(w: ElementWidth) -> Self {
        match w {
            ElementWidth::F32 => Dtype::F32,
            ElementWidth::F16 => Dtype::F16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Role {
    Embedding,
    Weight,
    Stats,
    Gate,
    SruFactor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: Role,
    shape: Vec<usize>,
    dtype: Dtype,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GateMeta {
    tag: String,
    lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SruMeta {
    tag: SruTag,
    mask: PruneMask,
    width: ElementWidth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    vocab_hash: Option<String>,
    prune: Option<PruneRecord>,
    stats_tokens: Option<usize>,
    gates: Vec<GateMeta>,
    sru: Vec<SruMeta>,
    tensors: Vec<TensorEntry>,
}

fn layer_name(l: usize, g: Gate) -> String {
    format!("layer{l}.w_{}", g.name())
}

fn sru_name(i: usize, l: usize, g: Gate, factor: &str) -> String {
    format!("sru{i}.layer{l}.{}.{factor}", g.name())
}

struct Writer {
    entries: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl Writer {
    fn push(&mut self, name: String, role: Role, shape: Vec<usize>, dtype: Dtype, data: &[f32]) {
        let offset = self.payload.len();
        for &x in data {
            match dtype {
                Dtype::F32 => self.payload.extend_from_slice(&x.to_le_bytes()),
                Dtype::F16 => self
                    .payload
                    .extend_from_slice(&f16::from_f32(x).to_le_bytes()),
            }
        }
        self.entries.push(TensorEntry {
            name,
            role,
            shape,
            dtype,
            offset,
            len: self.payload.len() - offset,
        });
    }
}

impl Checkpoint {
    pub fn new(model: QrnnModel<f32>) -> Self {
        Self {
            model,
            vocab_hash: None,
            prune: None,
            stats: None,
            gates: Vec::new(),
            sru: Vec::new(),
        }
    }

    /// Config of the unpruned model this checkpoint descends from.
    pub fn base_config(&self) -> &ModelConfig {
        self.prune
            .as_ref()
            .map_or(self.model.config(), |p| &p.base_config)
    }

    /// The mask relating the stored model to its base (full when unpruned).
    pub fn mask(&self) -> PruneMask {
        self.prune
            .as_ref()
            .map_or_else(|| PruneMask::full(self.model.config()), |p| p.mask.clone())
    }

    pub fn gates(&self, tag: &str) -> Option<&HardConcreteGates<f32>> {
        self.gates.iter().find(|g| g.tag == tag).map(|g| &g.gates)
    }

    /// Replaces or adds a gate set under `tag`.
    pub fn set_gates(&mut self, tag: &str, gates: HardConcreteGates<f32>) {
        self.gates.retain(|g| g.tag != tag);
        self.gates.push(GateEntry {
            tag: tag.to_string(),
            gates,
        });
    }

    /// The stored model with the rank-1 update for its own mask applied.
    /// Fails when no stored update was trained for this model's mask.
    pub fn model_with_sru(&self) -> Result<QrnnModel<f32>, StorageError> {
        let mask = self.mask();
        let hash = mask.hash();
        let entry = self
            .sru
            .iter()
            .find(|s| s.update.tag.mask_hash == hash)
            .ok_or_else(|| StorageError::SruMaskMismatch {
                expected: hash.clone(),
                got: self.sru.first().map_or_else(
                    || "none stored".to_string(),
                    |s| s.update.tag.mask_hash.clone(),
                ),
            })?;
        Ok(apply_sru(&self.model, &mask, &entry.update)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, StorageError> {
        let mut w = Writer {
            entries: Vec::new(),
            payload: Vec::new(),
        };
        let cfg = self.model.config();
        w.push(
            "embedding".into(),
            Role::Embedding,
            vec![cfg.vocab_size, cfg.embed_dim],
            Dtype::F32,
            self.model.embedding().data(),
        );
        for (l, layer) in self.model.layers().iter().enumerate() {
            for g in Gate::ALL {
                let m = layer.gate(g);
                w.push(
                    layer_name(l, g),
                    Role::Weight,
                    vec![m.rows(), m.cols()],
                    Dtype::F32,
                    m.data(),
                );
            }
        }
        if let Some(stats) = &self.stats {
            for (l, s) in stats.per_layer.iter().enumerate() {
                w.push(
                    format!("stats.layer{l}"),
                    Role::Stats,
                    vec![s.len()],
                    Dtype::F32,
                    s,
                );
            }
        }
        let mut tags = HashSet::new();
        for entry in &self.gates {
            if !tags.insert(entry.tag.as_str()) {
                return Err(StorageError::DuplicateTensor(format!(
                    "gates.{}",
                    entry.tag
                )));
            }
            for (l, la) in entry.gates.log_alpha.iter().enumerate() {
                w.push(
                    format!("gates.{}.layer{l}", entry.tag),
                    Role::Gate,
                    vec![la.len()],
                    Dtype::F32,
                    la,
                );
            }
        }
        for (i, entry) in self.sru.iter().enumerate() {
            for (l, factors) in entry.update.layers.iter().enumerate() {
                for g in Gate::ALL {
                    let r = &factors[gate_index(g)];
                    let dtype = entry.width.into();
                    w.push(
                        sru_name(i, l, g, "u"),
                        Role::SruFactor,
                        vec![r.u.len()],
                        dtype,
                        &r.u,
                    );
                    w.push(
                        sru_name(i, l, g, "v"),
                        Role::SruFactor,
                        vec![r.v.len()],
                        dtype,
                        &r.v,
                    );
                }
            }
        }
        let manifest = Manifest {
            config: cfg.clone(),
            vocab_hash: self.vocab_hash.clone(),
            prune: self.prune.clone(),
            stats_tokens: self.stats.as_ref().map(|s| s.tokens),
            gates: self
                .gates
                .iter()
                .map(|g| GateMeta {
                    tag: g.tag.clone(),
                    lambda: g.gates.lambda,
                })
                .collect(),
            sru: self
                .sru
                .iter()
                .map(|s| SruMeta {
                    tag: s.update.tag.clone(),
                    mask: s.mask.clone(),
                    width: s.width,
                })
                .collect(),
            tensors: w.entries,
        };
        let json =
            serde_json::to_vec(&manifest).map_err(|e| StorageError::Manifest(e.to_string()))?;
        let mut out = Vec::with_capacity(HEADER_BYTES + json.len() + w.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&w.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StorageError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(StorageError::BadMagic);
        }
        if bytes.len() < HEADER_BYTES {
            return Err(StorageError::Truncated {
                needed: HEADER_BYTES,
                actual: bytes.len(),
            });
        }
        if bytes[4] != VERSION {
            return Err(StorageError::UnsupportedVersion(bytes[4]));
        }
        let manifest_len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let payload_start = HEADER_BYTES + manifest_len;
        if bytes.len() < payload_start {
            return Err(StorageError::Truncated {
                needed: payload_start,
                actual: bytes.len(),
            });
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_BYTES..payload_start])
            .map_err(|e| StorageError::Manifest(e.to_string()))?;
        let payload = &bytes[payload_start..];
        let expected = validate_manifest(&manifest)?;
        check_layout(&manifest.tensors, &expected, payload, payload_start)?;

        let mut tensors = manifest.tensors.iter();
        let mut next = || -> Vec<f32> {
            let e = tensors.next().expect("layout checked");
            decode(&payload[e.offset..e.offset + e.len], e.dtype)
        };
        let cfg = manifest.config.clone();
        let embedding =
            Matrix::from_vec(cfg.vocab_size, cfg.embed_dim, next()).map_err(ModelError::from)?;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let (m, s) = (cfg.hidden_sizes[l], cfg.stacked_dim(l));
            let z = Matrix::from_vec(m, s, next()).map_err(ModelError::from)?;
            let f = Matrix::from_vec(m, s, next()).map_err(ModelError::from)?;
            let o = Matrix::from_vec(m, s, next()).map_err(ModelError::from)?;
            layers.push(QrnnLayerWeights::new(
                z,
                f,
                o,
                cfg.input_dim(l),
                cfg.window_sizes[l],
            )?);
        }
        let model = QrnnModel::new(cfg.clone(), embedding, layers)?;
        let stats = manifest.stats_tokens.map(|tokens| ActivationStats {
            per_layer: (0..cfg.num_layers).map(|_| next()).collect(),
            tokens,
        });
        let prunable = cfg.num_layers - 1;
        let gates = manifest
            .gates
            .iter()
            .map(|g| GateEntry {
                tag: g.tag.clone(),
                gates: HardConcreteGates {
                    log_alpha: (0..prunable).map(|_| next()).collect(),
                    lambda: g.lambda,
                },
            })
            .collect();
        let sru = manifest
            .sru
            .iter()
            .map(|meta| {
                let layers = (0..cfg.num_layers)
                    .map(|_| {
                        let mut factors = Vec::with_capacity(3);
                        for _ in Gate::ALL {
                            let u = next();
                            let v = next();
                            factors.push(RankOne { u, v });
                        }
                        factors.try_into().expect("three gates")
                    })
                    .collect();
                SruEntry {
                    mask: meta.mask.clone(),
                    update: SruUpdate {
                        layers,
                        tag: meta.tag.clone(),
                    },
                    width: meta.width,
                }
            })
            .collect();
        Ok(Self {
            model,
            vocab_hash: manifest.vocab_hash,
            prune: manifest.prune,
            stats,
            gates,
            sru,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), StorageError> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|source| StorageError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, StorageError> {
        let bytes = fs::read(path).map_err(|source| StorageError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn decode(bytes: &[u8], dtype: Dtype) -> Vec<f32> {
    match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes(c.try_into().expect("2 bytes")).to_f32())
            .collect(),
    }
}

/// Checks the manifest's metadata against the model config and returns the
/// tensor list it implies: `(name, shape, dtype)` in payload order.
fn validate_manifest(
    manifest: &Manifest,
) -> Result<Vec<(String, Vec<usize>, Dtype)>, StorageError> {
    let cfg = &manifest.config;
    cfg.validate()?;
    let mut out = vec![(
        "embedding".to_string(),
        vec![cfg.vocab_size, cfg.embed_dim],
        Dtype::F32,
    )];
    for l in 0..cfg.num_layers {
        for g in Gate::ALL {
            out.push((
                layer_name(l, g),
                vec![cfg.hidden_sizes[l], cfg.stacked_dim(l)],
                Dtype::F32,
            ));
        }
    }
    if manifest.stats_tokens.is_some() {
        for l in 0..cfg.num_layers {
            out.push((
                format!("stats.layer{l}"),
                vec![cfg.hidden_sizes[l]],
                Dtype::F32,
            ));
        }
    }
    let mut tags = HashSet::new();
    for g in &manifest.gates {
        if !tags.insert(g.tag.as_str()) {
            return Err(StorageError::DuplicateTensor(format!("gates.{}", g.tag)));
        }
        for l in 0..cfg.num_layers - 1 {
            out.push((
                format!("gates.{}.layer{l}", g.tag),
                vec![cfg.hidden_sizes[l]],
                Dtype::F32,
            ));
        }
    }
    let base = match &manifest.prune {
        Some(p) => {
            p.base_config.validate()?;
            p.mask
                .validate()
                .map_err(|e| StorageError::Manifest(e.to_string()))?;
            if p.mask.pruned_config(&p.base_config) != *cfg {
                return Err(StorageError::Manifest(
                    "stored model shape does not match its prune mask".into(),
                ));
            }
            p.base_config.clone()
        }
        None => cfg.clone(),
    };
    for (i, s) in manifest.sru.iter().enumerate() {
        s.mask
            .validate()
            .map_err(|e| StorageError::Manifest(e.to_string()))?;
        let hash = s.mask.hash();
        if hash != s.tag.mask_hash {
            return Err(StorageError::SruMaskMismatch {
                expected: s.tag.mask_hash.clone(),
                got: hash,
            });
        }
        if s.mask.base_hidden() != base.hidden_sizes.as_slice() {
            return Err(StorageError::Manifest(format!(
                "rank-1 update {i} belongs to a different base model"
            )));
        }
        let pruned = s.mask.pruned_config(&base);
        for l in 0..pruned.num_layers {
            for g in Gate::ALL {
                let dtype = s.width.into();
                out.push((sru_name(i, l, g, "u"), vec![pruned.hidden_sizes[l]], dtype));
                out.push((sru_name(i, l, g, "v"), vec![pruned.stacked_dim(l)], dtype));
            }
        }
    }
    Ok(out)
}

/// Tensors must appear exactly as expected, tile the payload without gaps
/// or overlap, and fit inside it.
fn check_layout(
    entries: &[TensorEntry],
    expected: &[(String, Vec<usize>, Dtype)],
    payload: &[u8],
    payload_start: usize,
) -> Result<(), StorageError> {
    let mut seen = HashSet::new();
    for e in entries {
        if !seen.insert(e.name.as_str()) {
            return Err(StorageError::DuplicateTensor(e.name.clone()));
        }
    }
    if entries.len() != expected.len() {
        return Err(StorageError::Manifest(format!(
            "{} tensors listed, {} expected",
            entries.len(),
            expected.len()
        )));
    }
    let mut cursor = 0usize;
    for (e, (name, shape, dtype)) in entries.iter().zip(expected) {
        if &e.name != name {
            return Err(StorageError::Manifest(format!(
                "expected tensor `{name}`, found `{}`",
                e.name
            )));
        }
        if &e.shape != shape {
            return Err(StorageError::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                got: e.shape.clone(),
            });
        }
        if e.dtype != *dtype {
            return Err(StorageError::Manifest(format!(
                "tensor `{name}` has an unexpected element type"
            )));
        }
        let elements: usize = e.shape.iter().product();
        if e.len != elements * e.dtype.width() {
            return Err(StorageError::Manifest(format!(
                "tensor `{name}` is {} bytes, shape implies {}",
                e.len,
                elements * e.dtype.width()
            )));
        }
        if e.offset != cursor {
            return Err(StorageError::Manifest(format!(
                "tensor `{name}` at offset {} overlaps or leaves a gap (expected {cursor})",
                e.offset
            )));
        }
        cursor += e.len;
    }
    if payload.len() < cursor {
        return Err(StorageError::Truncated {
            needed: payload_start + cursor,
            actual: payload_start + payload.len(),
        });
    }
    if payload.len() > cursor {
        return Err(StorageError::Manifest(format!(
            "{} trailing bytes after the last tensor",
            payload.len() - cursor
        )));
    }
    Ok(())
}
