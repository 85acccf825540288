//! Checkpoint files, group deltas, storage accounting, and embedding
//! surgery (restoring a parent's embeddings, composing zero-shot models).
//!
//! File layout, shared by full checkpoints and deltas:
//!
//! ```text
//! bytes  0..4   magic: "XATN" (full model) or "XATD" (group delta)
//! bytes  4..8   u32 LE format version (currently 1)
//! bytes  8..16  u64 LE manifest byte length
//! bytes 16..24  u64 LE integrity hash: FNV-1a64 over manifest ++ payload
//! bytes 24..    manifest, then payload
//! ```
//!
//! The manifest is UTF-8 `key=value` lines with keys in sorted order;
//! parameter keys embed zero-padded indices so sorted order equals payload
//! order. The payload is the little-endian f64 data of every listed
//! parameter, concatenated. A model's *lineage* is the FNV-1a64 hash of its
//! full payload: two models share a lineage exactly when every parameter is
//! bit-identical.
//!
//! A delta stores only the parameter groups its fine-tuning regime trained,
//! plus the parent lineage it applies to; loading one replays the group
//! transplant against the parent and reproduces the child bit-for-bit.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{param_specs, GroupTag, Model, ModelConfig};
use crate::rng::Fnv64;
use crate::tensor::Tensor;
use crate::train::{check_compatible, Child, FineTuneRegime, RegimeSetting, TransferSide};

const MAGIC_FULL: &[u8; 4] = b"XATN";
const MAGIC_DELTA: &[u8; 4] = b"XATD";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

// ── lineage ─────────────────────────────────────────────────────────

/// FNV-1a64 over the model's full parameter payload (little-endian f64
/// bytes, canonical parameter order). The identity of a trained model.
pub fn lineage_hash(model: &Model) -> u64 {
    let mut h = Fnv64::new();
    for p in model.registry().iter() {
        for v in p.tensor.data() {
            h.update(&v.to_le_bytes());
        }
    }
    h.finish()
}

// ── manifest plumbing ───────────────────────────────────────────────

fn shape_string(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|d| {
            d.parse::<usize>().map_err(|_| Error::Format {
                offset: HEADER_LEN as u64,
                msg: format!("bad shape {s:?} in manifest"),
            })
        })
        .collect()
}

fn config_entries(cfg: &ModelConfig, manifest: &mut BTreeMap<String, String>) {
    manifest.insert("config.d_model".into(), cfg.d_model.to_string());
    manifest.insert("config.n_heads".into(), cfg.n_heads.to_string());
    manifest.insert("config.n_enc_layers".into(), cfg.n_enc_layers.to_string());
    manifest.insert("config.n_dec_layers".into(), cfg.n_dec_layers.to_string());
    manifest.insert("config.d_ff".into(), cfg.d_ff.to_string());
    manifest.insert("config.max_len".into(), cfg.max_len.to_string());
    manifest.insert("config.dropout".into(), format!("{:?}", cfg.dropout));
    manifest.insert("config.src_vocab_size".into(), cfg.src_vocab_size.to_string());
    manifest.insert("config.tgt_vocab_size".into(), cfg.tgt_vocab_size.to_string());
}

struct ManifestReader<'a> {
    entries: &'a BTreeMap<String, String>,
}

impl<'a> ManifestReader<'a> {
    fn get(&self, key: &str) -> Result<&'a str> {
        self.entries.get(key).map(String::as_str).ok_or_else(|| Error::Format {
            offset: HEADER_LEN as u64,
            msg: format!("manifest is missing key {key:?}"),
        })
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.parse().map_err(|_| Error::Format {
            offset: HEADER_LEN as u64,
            msg: format!("manifest value for {key:?} does not parse"),
        })
    }

    fn config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            d_model: self.parse("config.d_model")?,
            n_heads: self.parse("config.n_heads")?,
            n_enc_layers: self.parse("config.n_enc_layers")?,
            n_dec_layers: self.parse("config.n_dec_layers")?,
            d_ff: self.parse("config.d_ff")?,
            max_len: self.parse("config.max_len")?,
            dropout: self.parse("config.dropout")?,
            src_vocab_size: self.parse("config.src_vocab_size")?,
            tgt_vocab_size: self.parse("config.tgt_vocab_size")?,
        })
    }

    fn hex_u64(&self, key: &str) -> Result<u64> {
        let s = self.get(key)?;
        u64::from_str_radix(s, 16).map_err(|_| Error::Format {
            offset: HEADER_LEN as u64,
            msg: format!("manifest value for {key:?} is not a hex hash"),
        })
    }
}

fn render_manifest(entries: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out
}

fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut entries = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
            offset: HEADER_LEN as u64,
            msg: format!("manifest line without '=': {line:?}"),
        })?;
        if entries.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Format {
                offset: HEADER_LEN as u64,
                msg: format!("duplicate manifest key {k:?}"),
            });
        }
    }
    Ok(entries)
}

// ── file encode / decode ────────────────────────────────────────────

fn encode_file(magic: &[u8; 4], manifest: &str, payload: &[u8]) -> Vec<u8> {
    let mut integrity = Fnv64::new();
    integrity.update(manifest.as_bytes());
    integrity.update(payload);

    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&integrity.finish().to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(payload);
    out
}

struct DecodedFile {
    is_delta: bool,
    entries: BTreeMap<String, String>,
    payload: Vec<u8>,
    payload_offset: u64,
}

fn decode_file(bytes: &[u8]) -> Result<DecodedFile> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("file is {} bytes, shorter than the header", bytes.len()),
        });
    }
    let is_delta = match &bytes[0..4] {
        m if m == MAGIC_FULL => false,
        m if m == MAGIC_DELTA => true,
        m => {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {m:?}"),
            })
        }
    };
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported format version {version}"),
        });
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let stored_integrity = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let manifest_end = HEADER_LEN.checked_add(manifest_len).ok_or(Error::Format {
        offset: 8,
        msg: "manifest length overflows".into(),
    })?;
    if manifest_end > bytes.len() {
        return Err(Error::Format {
            offset: 8,
            msg: format!(
                "manifest length {manifest_len} exceeds the file ({} bytes)",
                bytes.len()
            ),
        });
    }
    let manifest_bytes = &bytes[HEADER_LEN..manifest_end];
    let payload = &bytes[manifest_end..];

    let mut integrity = Fnv64::new();
    integrity.update(manifest_bytes);
    integrity.update(payload);
    if integrity.finish() != stored_integrity {
        return Err(Error::Format {
            offset: 16,
            msg: "integrity hash mismatch: the file is corrupt".into(),
        });
    }

    let manifest_text = std::str::from_utf8(manifest_bytes).map_err(|_| Error::Format {
        offset: HEADER_LEN as u64,
        msg: "manifest is not UTF-8".into(),
    })?;
    Ok(DecodedFile {
        is_delta,
        entries: parse_manifest(manifest_text)?,
        payload: payload.to_vec(),
        payload_offset: manifest_end as u64,
    })
}

fn payload_of<'a>(params: impl Iterator<Item = &'a Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    for t in params {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn tensors_from_payload(payload: &[u8], shapes: &[Vec<usize>], payload_offset: u64) -> Result<Vec<Tensor>> {
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if payload.len() != total * 8 {
        return Err(Error::Format {
            offset: payload_offset,
            msg: format!(
                "payload is {} bytes but the manifest describes {} values",
                payload.len(),
                total
            ),
        });
    }
    let mut tensors = Vec::with_capacity(shapes.len());
    let mut cursor = 0;
    for shape in shapes {
        let len: usize = shape.iter().product();
        let data: Vec<f64> = payload[cursor..cursor + len * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cursor += len * 8;
        tensors.push(Tensor::new(shape.clone(), data)?);
    }
    Ok(tensors)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Check the manifest's parameter entries against the canonical layout for
/// `config`, restricted to `keep`. Returns the expected shapes in order.
fn validate_param_entries(
    entries: &BTreeMap<String, String>,
    config: &ModelConfig,
    keep: impl Fn(GroupTag) -> bool,
) -> Result<Vec<Vec<usize>>> {
    let expected: Vec<_> = param_specs(config)
        .into_iter()
        .filter(|s| keep(s.tag))
        .collect();
    let listed = entries.keys().filter(|k| k.starts_with("param.")).count();
    if listed != expected.len() * 3 {
        return Err(Error::Format {
            offset: HEADER_LEN as u64,
            msg: format!(
                "manifest lists {listed} param keys, expected {}",
                expected.len() * 3
            ),
        });
    }
    let reader = ManifestReader { entries };
    let mut shapes = Vec::with_capacity(expected.len());
    for (i, spec) in expected.iter().enumerate() {
        let name = reader.get(&format!("param.{i:04}.name"))?;
        let shape = parse_shape(reader.get(&format!("param.{i:04}.shape"))?)?;
        let tag = GroupTag::parse(reader.get(&format!("param.{i:04}.tag"))?).map_err(|_| {
            Error::Format {
                offset: HEADER_LEN as u64,
                msg: format!("param.{i:04}.tag is not a group label"),
            }
        })?;
        if name != spec.name || shape != spec.shape || tag != spec.tag {
            return Err(Error::Format {
                offset: HEADER_LEN as u64,
                msg: format!(
                    "param.{i:04} is ({name}, {}, {tag}) but this configuration requires ({}, {}, {})",
                    shape_string(&shape),
                    spec.name,
                    shape_string(&spec.shape),
                    spec.tag
                ),
            });
        }
        shapes.push(shape);
    }
    Ok(shapes)
}

fn param_entries(
    manifest: &mut BTreeMap<String, String>,
    params: impl Iterator<Item = (String, GroupTag, Vec<usize>)>,
) {
    for (i, (name, tag, shape)) in params.enumerate() {
        manifest.insert(format!("param.{i:04}.name"), name);
        manifest.insert(format!("param.{i:04}.shape"), shape_string(&shape));
        manifest.insert(format!("param.{i:04}.tag"), tag.label().to_string());
    }
}

// ── full checkpoints ────────────────────────────────────────────────

/// Write a full checkpoint: configuration, every parameter, and the lineage
/// hash. Byte-for-byte deterministic for a given model.
pub fn save_full(path: &Path, model: &Model) -> Result<()> {
    let mut manifest = BTreeMap::new();
    config_entries(&model.config, &mut manifest);
    manifest.insert("kind".into(), "full".into());
    manifest.insert("lineage".into(), format!("{:016x}", lineage_hash(model)));
    param_entries(
        &mut manifest,
        model
            .registry()
            .iter()
            .map(|p| (p.name.clone(), p.tag, p.tensor.shape().to_vec())),
    );
    let payload = payload_of(model.registry().iter().map(|p| &p.tensor));
    write_file(path, &encode_file(MAGIC_FULL, &render_manifest(&manifest), &payload))
}

/// Load a full checkpoint. The manifest must describe exactly the canonical
/// parameter layout of its configuration, and the stored lineage must match
/// the payload.
pub fn load_full(path: &Path) -> Result<Model> {
    let decoded = decode_file(&read_file(path)?)?;
    if decoded.is_delta {
        return Err(Error::Format {
            offset: 0,
            msg: "expected a full checkpoint, found a delta".into(),
        });
    }
    let reader = ManifestReader { entries: &decoded.entries };
    if reader.get("kind")? != "full" {
        return Err(Error::Format {
            offset: HEADER_LEN as u64,
            msg: "magic says full checkpoint but manifest kind disagrees".into(),
        });
    }
    let config = reader.config()?;
    let stored_lineage = reader.hex_u64("lineage")?;
    let shapes = validate_param_entries(&decoded.entries, &config, |_| true)?;
    let tensors = tensors_from_payload(&decoded.payload, &shapes, decoded.payload_offset)?;
    let model = Model::from_parts(config, tensors)?;
    if lineage_hash(&model) != stored_lineage {
        return Err(Error::Format {
            offset: HEADER_LEN as u64,
            msg: "stored lineage does not match the payload".into(),
        });
    }
    Ok(model)
}

// ── deltas ──────────────────────────────────────────────────────────

/// Canonical order for a set of groups: the fixed `GroupTag::ALL` order.
fn canonical_groups(tags: &[GroupTag]) -> Vec<GroupTag> {
    GroupTag::ALL
        .into_iter()
        .filter(|t| tags.contains(t))
        .collect()
}

/// Write a delta checkpoint for a fine-tuned child: only the groups its
/// regime trained, plus the child configuration and parent lineage.
pub fn save_delta(path: &Path, child: &Child) -> Result<()> {
    let groups = canonical_groups(&child.regime.trainable_tags());
    let group_csv: Vec<&str> = groups.iter().map(|t| t.label()).collect();

    let mut manifest = BTreeMap::new();
    config_entries(&child.model.config, &mut manifest);
    manifest.insert("kind".into(), "delta".into());
    manifest.insert("groups".into(), group_csv.join(","));
    manifest.insert("parent_lineage".into(), format!("{:016x}", child.parent_lineage));
    manifest.insert("regime".into(), child.regime.setting.label().into());
    manifest.insert("side".into(), child.regime.side.label().into());

    let stored: Vec<_> = child
        .model
        .registry()
        .iter()
        .filter(|p| groups.contains(&p.tag))
        .collect();
    param_entries(
        &mut manifest,
        stored.iter().map(|p| (p.name.clone(), p.tag, p.tensor.shape().to_vec())),
    );
    let payload = payload_of(stored.iter().map(|p| &p.tensor));
    write_file(path, &encode_file(MAGIC_DELTA, &render_manifest(&manifest), &payload))
}

/// Load a delta against the parent it was saved from, reproducing the child
/// bit-for-bit. The parent's lineage must match the delta's record.
pub fn load_delta(path: &Path, parent: &Model) -> Result<Child> {
    let decoded = decode_file(&read_file(path)?)?;
    if !decoded.is_delta {
        return Err(Error::Format {
            offset: 0,
            msg: "expected a delta, found a full checkpoint".into(),
        });
    }
    let reader = ManifestReader { entries: &decoded.entries };
    if reader.get("kind")? != "delta" {
        return Err(Error::Format {
            offset: HEADER_LEN as u64,
            msg: "magic says delta but manifest kind disagrees".into(),
        });
    }
    let config = reader.config()?;
    let setting = RegimeSetting::parse(reader.get("regime")?).map_err(|e| Error::Format {
        offset: HEADER_LEN as u64,
        msg: e.to_string(),
    })?;
    let side = TransferSide::parse(reader.get("side")?).map_err(|e| Error::Format {
        offset: HEADER_LEN as u64,
        msg: e.to_string(),
    })?;
    let regime = FineTuneRegime::new(setting, side);
    let parent_lineage = reader.hex_u64("parent_lineage")?;

    let groups: Vec<GroupTag> = reader
        .get("groups")?
        .split(',')
        .map(GroupTag::parse)
        .collect::<Result<_>>()
        .map_err(|e| Error::Format {
            offset: HEADER_LEN as u64,
            msg: e.to_string(),
        })?;
    if groups != canonical_groups(&regime.trainable_tags()) {
        return Err(Error::Format {
            offset: HEADER_LEN as u64,
            msg: format!(
                "stored groups {:?} do not match regime {}",
                groups,
                regime.label()
            ),
        });
    }

    if lineage_hash(parent) != parent_lineage {
        return Err(Error::Transfer(format!(
            "delta was saved against parent lineage {parent_lineage:016x}, \
             but this parent hashes to {:016x}",
            lineage_hash(parent)
        )));
    }
    check_compatible(&parent.config, &config, side)?;

    let shapes = validate_param_entries(&decoded.entries, &config, |t| groups.contains(&t))?;
    let stored = tensors_from_payload(&decoded.payload, &shapes, decoded.payload_offset)?;

    let mut stored_iter = stored.into_iter();
    let tensors: Vec<Tensor> = param_specs(&config)
        .into_iter()
        .map(|spec| {
            if groups.contains(&spec.tag) {
                Ok(stored_iter.next().expect("validated count"))
            } else {
                let idx = parent.registry().index_of(&spec.name).ok_or_else(|| {
                    Error::Transfer(format!("parent has no parameter named {:?}", spec.name))
                })?;
                Ok(parent.registry().get(idx).tensor.clone())
            }
        })
        .collect::<Result<_>>()?;

    Ok(Child {
        model: Model::from_parts(config, tensors)?,
        regime,
        parent_lineage,
    })
}

// ── storage accounting ──────────────────────────────────────────────

/// How much a delta over `groups` stores, relative to a full checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct StorageReport {
    pub total_params: usize,
    pub stored_params: usize,
    pub payload_bytes: u64,
    pub fraction: f64,
}

/// Storage accounting for a configuration and a set of groups, by exact
/// enumeration of the parameter layout (no tensors are allocated, so this
/// works at any scale).
pub fn storage_report(config: &ModelConfig, groups: &[GroupTag]) -> Result<StorageReport> {
    if groups.is_empty() {
        return Err(Error::Config("storage report over no groups".into()));
    }
    let counts = Model::count_by_group(config);
    let total_params: usize = counts.values().sum();
    let stored_params: usize = canonical_groups(groups)
        .iter()
        .map(|t| counts[t])
        .sum();
    Ok(StorageReport {
        total_params,
        stored_params,
        payload_bytes: stored_params as u64 * 8,
        fraction: stored_params as f64 / total_params as f64,
    })
}

// ── embedding surgery ───────────────────────────────────────────────

/// Give a fine-tuned child its parent's embeddings back on the transferred
/// side, yielding a model that speaks the parent's language again through
/// the child's (possibly updated) body. The parent must be the exact model
/// the child was derived from.
pub fn restore_parent_embeddings(child: &Child, parent: &Model) -> Result<Model> {
    let actual = lineage_hash(parent);
    if actual != child.parent_lineage {
        return Err(Error::Transfer(format!(
            "child was derived from parent lineage {:016x}, but this parent hashes to {actual:016x}",
            child.parent_lineage
        )));
    }
    let emb_group = child.regime.side.new_embedding_group();

    // The restored side reverts to the parent's vocabulary.
    let mut config = child.model.config.clone();
    match child.regime.side {
        TransferSide::NewSource => config.src_vocab_size = parent.config.src_vocab_size,
        TransferSide::NewTarget => config.tgt_vocab_size = parent.config.tgt_vocab_size,
    }

    let tensors: Vec<Tensor> = param_specs(&config)
        .into_iter()
        .map(|spec| {
            let donor = if spec.tag == emb_group { parent } else { &child.model };
            let idx = donor.registry().index_of(&spec.name).ok_or_else(|| {
                Error::Transfer(format!("no parameter named {:?} to restore", spec.name))
            })?;
            Ok(donor.registry().get(idx).tensor.clone())
        })
        .collect::<Result<_>>()?;
    Model::from_parts(config, tensors)
}

/// Compose a zero-shot model from two children of the same parent: the
/// new-target child's model with its source embeddings replaced by the
/// new-source child's. Neither child ever saw the composed pair.
///
/// By default this insists on the intended shape of the experiment — a
/// NEW_SOURCE child, a NEW_TARGET child, cross-attention-style regimes, and
/// one shared parent. `allow_mismatch` skips those checks (architectural
/// compatibility is always enforced) for deliberately off-label
/// compositions.
pub fn compose_zero_shot(
    source_child: &Child,
    target_child: &Child,
    allow_mismatch: bool,
) -> Result<Model> {
    if !allow_mismatch {
        if source_child.regime.side != TransferSide::NewSource {
            return Err(Error::Composition(format!(
                "source child has side {}, need NEW_SOURCE",
                source_child.regime.side.label()
            )));
        }
        if target_child.regime.side != TransferSide::NewTarget {
            return Err(Error::Composition(format!(
                "target child has side {}, need NEW_TARGET",
                target_child.regime.side.label()
            )));
        }
        for (who, child) in [("source", source_child), ("target", target_child)] {
            if !matches!(
                child.regime.setting,
                RegimeSetting::EmbXattn | RegimeSetting::EmbRandXattn
            ) {
                return Err(Error::Composition(format!(
                    "{who} child trained under {}, which does not preserve a \
                     parent-aligned interface (override to compose anyway)",
                    child.regime.setting.label()
                )));
            }
        }
        if source_child.parent_lineage != target_child.parent_lineage {
            return Err(Error::Composition(format!(
                "children come from different parents: {:016x} vs {:016x}",
                source_child.parent_lineage, target_child.parent_lineage
            )));
        }
    }

    let (src_cfg, tgt_cfg) = (&source_child.model.config, &target_child.model.config);
    let same_arch = src_cfg.d_model == tgt_cfg.d_model
        && src_cfg.n_heads == tgt_cfg.n_heads
        && src_cfg.n_enc_layers == tgt_cfg.n_enc_layers
        && src_cfg.n_dec_layers == tgt_cfg.n_dec_layers
        && src_cfg.d_ff == tgt_cfg.d_ff
        && src_cfg.max_len == tgt_cfg.max_len;
    if !same_arch {
        return Err(Error::Composition(
            "children disagree on architecture; their parts cannot be joined".into(),
        ));
    }

    let mut config = tgt_cfg.clone();
    config.src_vocab_size = src_cfg.src_vocab_size;

    let tensors: Vec<Tensor> = param_specs(&config)
        .into_iter()
        .map(|spec| {
            let donor = if spec.tag == GroupTag::Src {
                &source_child.model
            } else {
                &target_child.model
            };
            let idx = donor.registry().index_of(&spec.name).ok_or_else(|| {
                Error::Composition(format!("no parameter named {:?} to compose", spec.name))
            })?;
            Ok(donor.registry().get(idx).tensor.clone())
        })
        .collect::<Result<_>>()?;
    Model::from_parts(config, tensors)
}
