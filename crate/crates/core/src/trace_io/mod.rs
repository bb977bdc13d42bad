//! Artifact serialization and ingestion of external retirement traces.
//!
//! Documents are JSON envelopes `{content, digest, format, version}` whose
//! digest is the SHA-256 of the canonical content: object keys sorted, no
//! whitespace, every integer a lowercase `0x` hex string.

mod documents;
mod rvfi;

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::{evaluate_traces, EvalResult};
use crate::template::Template;

pub use documents::{ContractFile, ResultsFile, SuiteFile};
pub use rvfi::{format_rvfi, parse_rvfi, read_rvfi, write_rvfi, RvfiRecord};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum TraceIoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: field {field}: {message}")]
    Parse { line: usize, field: String, message: String },
    #[error("line {line}: illegal instruction {word:#010x}")]
    IllegalInstruction { line: usize, word: u32 },
    #[error("malformed document: {0}")]
    Schema(String),
    #[error("expected a {expected} document, found {found}")]
    WrongFormat { expected: String, found: String },
    #[error("unsupported document version {0}")]
    UnsupportedVersion(String),
    #[error("digest mismatch: recorded {recorded}, computed {computed}")]
    DigestMismatch { recorded: String, computed: String },
}

impl TraceIoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TraceIoError::Io { path: path.to_path_buf(), source }
    }

    fn schema(message: impl std::fmt::Display) -> Self {
        TraceIoError::Schema(message.to_string())
    }
}

/// An integer serialized as a lowercase `0x` hex string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Hex(pub u64);

impl Hex {
    fn narrow<T: TryFrom<u64>>(self, what: &str) -> Result<T, TraceIoError> {
        T::try_from(self.0).map_err(|_| TraceIoError::schema(format!("{what} {:#x} out of range", self.0)))
    }
}

impl<T: Into<u64>> From<T> for Hex {
    fn from(v: T) -> Self {
        Hex(v.into())
    }
}

impl Serialize for Hex {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{:#x}", self.0))
    }
}

impl<'de> Deserialize<'de> for Hex {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let digits = text
            .strip_prefix("0x")
            .filter(|h| !h.is_empty() && h.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)))
            .ok_or_else(|| serde::de::Error::custom(format!("{text:?} is not a lowercase 0x hex integer")))?;
        u64::from_str_radix(digits, 16)
            .map(Hex)
            .map_err(|e| serde::de::Error::custom(format!("{text:?}: {e}")))
    }
}

/// A typed document with a wire form.
pub trait Document: Sized {
    const FORMAT: &'static str;
    type Wire: Serialize + DeserializeOwned;

    fn to_wire(&self) -> Result<Self::Wire, TraceIoError>;
    fn from_wire(wire: Self::Wire) -> Result<Self, TraceIoError>;
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    content: serde_json::Value,
    digest: String,
    format: String,
    version: Hex,
}

fn digest_value(content: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(content).expect("JSON values serialize");
    format!("sha256:{}", hex::encode(Sha256::digest(canonical.as_bytes())))
}

fn content_value<D: Document>(doc: &D) -> Result<serde_json::Value, TraceIoError> {
    serde_json::to_value(doc.to_wire()?).map_err(TraceIoError::schema)
}

/// Digest of the canonical content of `doc`.
pub fn digest<D: Document>(doc: &D) -> Result<String, TraceIoError> {
    Ok(digest_value(&content_value(doc)?))
}

/// Serializes `doc` into its envelope; returns the text and the digest.
pub fn to_json<D: Document>(doc: &D) -> Result<(String, String), TraceIoError> {
    let content = content_value(doc)?;
    let digest = digest_value(&content);
    let envelope = Envelope {
        content,
        digest: digest.clone(),
        format: D::FORMAT.to_string(),
        version: Hex(FORMAT_VERSION),
    };
    let value = serde_json::to_value(envelope).map_err(TraceIoError::schema)?;
    let mut text = serde_json::to_string_pretty(&value).map_err(TraceIoError::schema)?;
    text.push('\n');
    Ok((text, digest))
}

/// Parses and verifies an envelope; returns the document and its digest.
pub fn from_json<D: Document>(text: &str) -> Result<(D, String), TraceIoError> {
    let envelope: Envelope = serde_json::from_str(text).map_err(TraceIoError::schema)?;
    if envelope.format != D::FORMAT {
        return Err(TraceIoError::WrongFormat { expected: D::FORMAT.to_string(), found: envelope.format });
    }
    if envelope.version.0 != FORMAT_VERSION {
        return Err(TraceIoError::UnsupportedVersion(format!("{:#x}", envelope.version.0)));
    }
    let computed = digest_value(&envelope.content);
    if computed != envelope.digest {
        return Err(TraceIoError::DigestMismatch { recorded: envelope.digest, computed });
    }
    let wire: D::Wire = serde_json::from_value(envelope.content).map_err(TraceIoError::schema)?;
    Ok((D::from_wire(wire)?, computed))
}

pub fn write_document<D: Document>(doc: &D, path: &Path) -> Result<String, TraceIoError> {
    let (text, digest) = to_json(doc)?;
    std::fs::write(path, text).map_err(|e| TraceIoError::io(path, e))?;
    Ok(digest)
}

pub fn read_document<D: Document>(path: &Path) -> Result<(D, String), TraceIoError> {
    let text = std::fs::read_to_string(path).map_err(|e| TraceIoError::io(path, e))?;
    from_json(&text)
}

/// Evaluates a pair of recorded traces exactly as the evaluator would.
pub fn ingest_pair(
    testcase_id: u64,
    path_a: &Path,
    path_b: &Path,
    template: &Template,
) -> Result<EvalResult, TraceIoError> {
    let first = read_rvfi(path_a)?;
    let second = read_rvfi(path_b)?;
    Ok(evaluate_traces(testcase_id, &first, &second, template))
}
