//! Single-archive checkpoint format ("fsrw-v1"): a JSON header describing
//! the architecture, anchors, class names and parameter table, followed by
//! named parameter arrays in little-endian IEEE-754 single precision, and
//! optionally the serialized class codebook.

use crate::config::ModelConfig;
use crate::geometry::Anchor;
use crate::model::{ClassCodebook, FewShotDetector, PlainDetector};
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const FORMAT_TAG: &str = "fsrw-v1";
const MAGIC: &[u8; 8] = b"FSRWCKPT";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format '{0}' (expected '{FORMAT_TAG}')")]
    BadFormat(String),
    #[error("architecture mismatch at parameter '{name}': header declares shape {header:?}, model expects {model:?}")]
    ArchMismatch { name: String, header: Vec<usize>, model: Vec<usize> },
    #[error("parameter checksum mismatch: header {header}, computed {computed}")]
    ChecksumMismatch { header: String, computed: String },
    #[error("checkpoint ended early while reading '{0}'")]
    Truncated(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Fewshot,
    Plain,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CodebookEntryHeader {
    class_id: usize,
    dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    kind: ModelKind,
    model: ModelConfig,
    anchors: Vec<(f64, f64)>,
    class_names: Vec<String>,
    n_classes: usize,
    shot_count: Option<usize>,
    params: Vec<ParamEntry>,
    param_sha256: String,
    codebook_k: Option<usize>,
    codebook: Vec<CodebookEntryHeader>,
}

/// A trained model plus the metadata needed to use it.
pub enum CheckpointModel {
    FewShot(FewShotDetector),
    Plain(PlainDetector),
}

pub struct CheckpointBundle {
    pub model: CheckpointModel,
    pub class_names: Vec<String>,
    pub shot_count: Option<usize>,
    pub codebook: Option<ClassCodebook>,
    /// Hex SHA-256 of the parameter byte stream, as recorded in the header.
    pub param_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn push_f32(out: &mut Vec<u8>, values: impl Iterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn param_table(model: &CheckpointModel) -> (Vec<ParamEntry>, Vec<u8>) {
    let (layers, names): (Vec<&crate::nn::Conv2d>, Vec<String>) = match model {
        CheckpointModel::FewShot(m) => (m.layers(), m.layer_names()),
        CheckpointModel::Plain(m) => (m.layers(), m.layer_names()),
    };
    let mut entries = Vec::new();
    let mut bytes = Vec::new();
    for (layer, name) in layers.iter().zip(names) {
        let (o, i, kh, kw) = layer.weight.dim();
        entries.push(ParamEntry { name: format!("{name}.weight"), shape: vec![o, i, kh, kw] });
        push_f32(&mut bytes, layer.weight.iter().copied());
        entries.push(ParamEntry { name: format!("{name}.bias"), shape: vec![layer.bias.len()] });
        push_f32(&mut bytes, layer.bias.iter().copied());
        if layer.normalize {
            entries.push(ParamEntry { name: format!("{name}.gamma"), shape: vec![layer.gamma.len()] });
            push_f32(&mut bytes, layer.gamma.iter().copied());
        }
    }
    (entries, bytes)
}

/// Write a model (and optional codebook) as one archive.
pub fn save_checkpoint(
    path: &Path,
    model: &CheckpointModel,
    class_names: &[String],
    shot_count: Option<usize>,
    codebook: Option<&ClassCodebook>,
) -> Result<(), CheckpointError> {
    let (params, mut bytes) = param_table(model);
    let mut codebook_headers = Vec::new();
    if let Some(cb) = codebook {
        for (class_id, v) in &cb.entries {
            codebook_headers.push(CodebookEntryHeader { class_id: *class_id, dim: v.len() });
            push_f32(&mut bytes, v.iter().copied());
        }
    }
    let digest = hex(&Sha256::digest(&bytes));

    let (cfg, kind, n_classes, anchors) = match model {
        CheckpointModel::FewShot(m) => (&m.cfg, ModelKind::Fewshot, 0, &m.anchors),
        CheckpointModel::Plain(m) => (&m.cfg, ModelKind::Plain, m.n_classes, &m.anchors),
    };
    let header = Header {
        format: FORMAT_TAG.into(),
        kind,
        model: cfg.clone(),
        anchors: anchors.iter().map(|a| (a.pw, a.ph)).collect(),
        class_names: class_names.to_vec(),
        n_classes,
        shot_count,
        params,
        param_sha256: digest,
        codebook_k: codebook.map(|cb| cb.k),
        codebook: codebook_headers,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    file.write_all(&bytes)?;
    Ok(())
}

fn read_f32_block(
    reader: &mut impl Read,
    count: usize,
    what: &str,
) -> Result<Vec<f64>, CheckpointError> {
    let mut buf = vec![0u8; count * 4];
    reader
        .read_exact(&mut buf)
        .map_err(|_| CheckpointError::Truncated(what.into()))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Reconstruct a model from an archive, verifying format, architecture and
/// the recorded parameter checksum.
pub fn load_checkpoint(path: &Path) -> Result<CheckpointBundle, CheckpointError> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len_buf = [0u8; 8];
    file.read_exact(&mut len_buf).map_err(|_| CheckpointError::Truncated("header length".into()))?;
    let header_len = u64::from_le_bytes(len_buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes).map_err(|_| CheckpointError::Truncated("header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.format != FORMAT_TAG {
        return Err(CheckpointError::BadFormat(header.format));
    }

    let anchors: Vec<Anchor> = header.anchors.iter().map(|&(pw, ph)| Anchor { pw, ph }).collect();
    let mut model = match header.kind {
        ModelKind::Fewshot => {
            CheckpointModel::FewShot(FewShotDetector::new(header.model.clone(), anchors)?)
        }
        ModelKind::Plain => CheckpointModel::Plain(PlainDetector::new(
            header.model.clone(),
            anchors,
            header.n_classes,
        )?),
    };

    // read the full payload once so the checksum can be verified up front
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    let computed = hex(&Sha256::digest(&payload));
    if computed != header.param_sha256 {
        return Err(CheckpointError::ChecksumMismatch {
            header: header.param_sha256.clone(),
            computed,
        });
    }
    let mut cursor = std::io::Cursor::new(payload);

    {
        let (layers, names): (Vec<&mut crate::nn::Conv2d>, Vec<String>) = match &mut model {
            CheckpointModel::FewShot(m) => {
                let names = m.layer_names();
                (m.layers_mut(), names)
            }
            CheckpointModel::Plain(m) => {
                let names = m.layer_names();
                (m.layers_mut(), names)
            }
        };
        let mut expected = Vec::new();
        for (layer, name) in layers.iter().zip(&names) {
            let (o, i, kh, kw) = layer.weight.dim();
            expected.push((format!("{name}.weight"), vec![o, i, kh, kw]));
            expected.push((format!("{name}.bias"), vec![layer.bias.len()]));
            if layer.normalize {
                expected.push((format!("{name}.gamma"), vec![layer.gamma.len()]));
            }
        }
        if header.params.len() != expected.len() {
            return Err(CheckpointError::ArchMismatch {
                name: format!("<parameter count {}>", header.params.len()),
                header: vec![header.params.len()],
                model: vec![expected.len()],
            });
        }
        for (entry, (name, shape)) in header.params.iter().zip(&expected) {
            if &entry.name != name || &entry.shape != shape {
                return Err(CheckpointError::ArchMismatch {
                    name: entry.name.clone(),
                    header: entry.shape.clone(),
                    model: shape.clone(),
                });
            }
        }
        let mut layers = layers;
        for layer in layers.iter_mut() {
            let wlen = layer.weight.len();
            let values = read_f32_block(&mut cursor, wlen, "weight block")?;
            for (dst, src) in layer.weight.iter_mut().zip(values) {
                *dst = src;
            }
            let values = read_f32_block(&mut cursor, layer.bias.len(), "bias block")?;
            for (dst, src) in layer.bias.iter_mut().zip(values) {
                *dst = src;
            }
            if layer.normalize {
                let values = read_f32_block(&mut cursor, layer.gamma.len(), "gamma block")?;
                for (dst, src) in layer.gamma.iter_mut().zip(values) {
                    *dst = src;
                }
            }
        }
    }

    let codebook = if let Some(k) = header.codebook_k {
        let mut entries = Vec::new();
        for e in &header.codebook {
            let values = read_f32_block(&mut cursor, e.dim, "codebook vector")?;
            entries.push((e.class_id, Array1::from_vec(values)));
        }
        Some(ClassCodebook { entries, k })
    } else {
        None
    };

    Ok(CheckpointBundle {
        model,
        class_names: header.class_names,
        shot_count: header.shot_count,
        codebook,
        param_sha256: header.param_sha256,
    })
}
