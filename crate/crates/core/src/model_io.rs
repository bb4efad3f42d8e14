//! Versioned, checksummed JSON envelopes for fitted models and reports.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_NAME: &str = "sepsis-mbrl";
pub const FORMAT_VERSION: u32 = 1;

/// Provenance stored next to the payload.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    format: String,
    version: u32,
    kind: String,
    #[serde(flatten)]
    meta: ArtifactMeta,
    checksum: String,
    payload: Value,
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Checksum of a JSON value in its compact serialization (object keys
/// sorted).
pub fn value_checksum(value: &Value) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

pub fn to_envelope_string<T: Serialize>(kind: &str, payload: &T, meta: &ArtifactMeta) -> Result<String> {
    let payload = serde_json::to_value(payload)?;
    let envelope = Envelope {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        kind: kind.into(),
        meta: meta.clone(),
        checksum: value_checksum(&payload)?,
        payload,
    };
    Ok(serde_json::to_string_pretty(&envelope)?)
}

pub fn save_model<T: Serialize>(path: &Path, kind: &str, payload: &T, meta: &ArtifactMeta) -> Result<()> {
    let text = to_envelope_string(kind, payload, meta)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Parses an envelope, checking format, version, kind and checksum before
/// decoding the payload.
pub fn from_envelope_str<T: DeserializeOwned>(text: &str, kind: &str) -> Result<(T, ArtifactMeta)> {
    let envelope: Envelope =
        serde_json::from_str(text).map_err(|e| Error::ModelFormat(format!("not a model envelope: {e}")))?;
    if envelope.format != FORMAT_NAME {
        return Err(Error::ModelFormat(format!("unknown format `{}`", envelope.format)));
    }
    if envelope.version != FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            envelope.version
        )));
    }
    if envelope.kind != kind {
        return Err(Error::ModelFormat(format!("expected a `{kind}` artifact, found `{}`", envelope.kind)));
    }
    let actual = value_checksum(&envelope.payload)?;
    if actual != envelope.checksum {
        return Err(Error::ModelFormat(format!(
            "checksum mismatch (stored {}, computed {actual})",
            envelope.checksum
        )));
    }
    let payload = serde_json::from_value(envelope.payload)
        .map_err(|e| Error::ModelFormat(format!("payload does not decode as `{kind}`: {e}")))?;
    Ok((payload, envelope.meta))
}

pub fn load_model<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<(T, ArtifactMeta)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_envelope_str(&text, kind)
}
