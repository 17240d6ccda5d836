//! JSON documents on disk: prompt checkpoints, their binary sidecars and
//! frozen backbones.
//!
//! Floats are written in shortest round-trip form and parsed with exact
//! round-tripping, so a save/load cycle reproduces every bit.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use compt_core::checkpoint::{PromptCheckpoint, FORMAT_VERSION};
use compt_core::pretrain::{CertificationReport, PretrainConfig};
use compt_core::{BackboneParams, Error as CoreError, PromptModel};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::WorldConfig;
use crate::error::{Error, Result};

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

pub fn save_checkpoint(path: &Path, checkpoint: &PromptCheckpoint) -> Result<()> {
    write_json(path, checkpoint)
}

/// Loads a checkpoint, checking the format version before the schema and the
/// backbone fingerprint when one is given.
pub fn load_checkpoint(path: &Path, backbone_sha256: Option<&str>) -> Result<PromptCheckpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let malformed = |detail: String| Error::Core(CoreError::MalformedCheckpoint(format!("{}: {detail}", path.display())));
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| malformed("missing format_version".into()))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(CoreError::CheckpointVersion {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let checkpoint: PromptCheckpoint = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
    if let Some(fp) = backbone_sha256 {
        checkpoint.check_backbone(fp)?;
    }
    Ok(checkpoint)
}

/// Loads a checkpoint and rebuilds its model.
pub fn load_model(path: &Path, backbone_sha256: Option<&str>) -> Result<(PromptCheckpoint, PromptModel)> {
    let checkpoint = load_checkpoint(path, backbone_sha256)?;
    let model = checkpoint.to_model()?;
    Ok((checkpoint, model))
}

const SIDECAR_MAGIC: &[u8; 8] = b"COMPTBIN";

/// Path of the binary sidecar next to a checkpoint.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("bin")
}

fn rows_mut(ck: &mut PromptCheckpoint) -> Vec<&mut Vec<f64>> {
    let mut out: Vec<&mut Vec<f64>> = Vec::new();
    for s in &mut ck.sources {
        out.extend(s.iter_mut());
    }
    for p in ck.privates.values_mut() {
        out.extend(p.iter_mut());
    }
    if let Some(r) = &mut ck.router_logits {
        out.extend(r.iter_mut());
    }
    for e in ck.encoders.sources.iter_mut().chain(ck.encoders.privates.values_mut()) {
        out.extend(e.w1.iter_mut());
        out.push(&mut e.b1);
        out.extend(e.w2.iter_mut());
        out.push(&mut e.b2);
    }
    out
}

/// Every float of the checkpoint in a fixed order: sources, privates by task
/// id, router logits, then source and private encoders.
pub fn flat_values(checkpoint: &PromptCheckpoint) -> Vec<f64> {
    let mut ck = checkpoint.clone();
    rows_mut(&mut ck).into_iter().flat_map(|r| r.iter().copied()).collect()
}

/// Writes the checkpoint's floats as little-endian `f64` after an 8-byte
/// magic and a `u64` count.
pub fn write_sidecar(path: &Path, checkpoint: &PromptCheckpoint) -> Result<()> {
    let values = flat_values(checkpoint);
    let mut bytes = Vec::with_capacity(16 + 8 * values.len());
    bytes.extend_from_slice(SIDECAR_MAGIC);
    bytes.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Overwrites the checkpoint's floats with the sidecar's; shapes come from the JSON.
pub fn read_sidecar(path: &Path, checkpoint: &mut PromptCheckpoint) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != SIDECAR_MAGIC {
        return Err(Error::parse(path, "not a checkpoint sidecar"));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() != 8 * count {
        return Err(Error::parse(path, "sidecar length does not match its header"));
    }
    let mut rows = rows_mut(checkpoint);
    let expected: usize = rows.iter().map(|r| r.len()).sum();
    if expected != count {
        return Err(Error::Sidecar {
            path: path.into(),
            expected,
            found: count,
        });
    }
    let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for row in rows.iter_mut() {
        for x in row.iter_mut() {
            *x = values.next().expect("count checked");
        }
    }
    Ok(())
}

pub const BACKBONE_FORMAT_VERSION: u32 = 1;

/// A frozen, certified backbone together with the world it was trained for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneFile {
    pub format_version: u32,
    pub backbone_sha256: String,
    pub world: WorldConfig,
    pub pretrain: PretrainConfig,
    pub certification: CertificationReport,
    pub params: BackboneParams,
}

impl BackboneFile {
    pub fn new(
        params: BackboneParams,
        world: WorldConfig,
        pretrain: PretrainConfig,
        certification: CertificationReport,
    ) -> Self {
        Self {
            format_version: BACKBONE_FORMAT_VERSION,
            backbone_sha256: params.fingerprint(),
            world,
            pretrain,
            certification,
            params,
        }
    }
}

pub fn save_backbone(path: &Path, file: &BackboneFile) -> Result<()> {
    write_json(path, file)
}

/// Loads a backbone and verifies that its parameters still hash to the recorded fingerprint.
pub fn load_backbone(path: &Path) -> Result<BackboneFile> {
    let file: BackboneFile = read_json(path)?;
    if file.format_version != BACKBONE_FORMAT_VERSION {
        return Err(Error::parse(
            path,
            format!("backbone format version {} (expected {BACKBONE_FORMAT_VERSION})", file.format_version),
        ));
    }
    let actual = file.params.fingerprint();
    if actual != file.backbone_sha256 {
        return Err(CoreError::FingerprintMismatch {
            expected: file.backbone_sha256,
            found: actual,
        }
        .into());
    }
    if !file.params.frozen {
        return Err(Error::parse(path, "backbone is not frozen"));
    }
    Ok(file)
}
