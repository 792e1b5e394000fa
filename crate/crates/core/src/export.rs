//! Multi-turn SFT export.
//!
//! One JSON object per line, keys in this order:
//!
//! ```text
//! {"id", "images": [..], "conversations": [{"role", "content", "loss_mask"}], "meta": {"rounds", "domain", "kind"}}
//! ```
//!
//! Every image appears in the text as an `<image>` placeholder, in order.
//! Only assistant messages carry `loss_mask: true`. A reflective chain
//! becomes one user/assistant pair per round: the first user message holds
//! the original image and question, later ones hold the previous round's
//! marked image and its tool status line. A QA sample is a single pair.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{DatasetSample, Domain, ImageStore, PipelineError};
use crate::prompts::{fill, PromptTemplates};
use crate::protocol::TurnOutput;
use crate::render::{decode_image, encode_png};

pub const IMAGE_PLACEHOLDER: &str = "<image>";
pub const SFT_FILE: &str = "sft.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_VERSION: &str = "sft-v1";

/// Field layout the schema hash is computed from. Changing the record
/// layout means changing this string, and with it the hash.
const SCHEMA_DESCRIPTOR: &str = "sft-v1\n\
record: id:string, images:[string], conversations:[message], meta:meta\n\
message: role:user|assistant, content:string, loss_mask:bool\n\
meta: rounds:int, domain:general_qa|ocr|doc|chart, kind:reflective_chain|truncated_qa\n\
placeholder: <image>\n";

pub fn schema_hash() -> String {
    hex::encode(Sha256::digest(SCHEMA_DESCRIPTOR.as_bytes()))
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("schema violation{}: {reason}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    SchemaViolation { line: Option<usize>, reason: String },
    #[error(transparent)]
    Image(#[from] PipelineError),
}

fn violation(reason: impl Into<String>) -> ExportError {
    ExportError::SchemaViolation { line: None, reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftMessage {
    pub role: String,
    pub content: String,
    pub loss_mask: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftMeta {
    pub rounds: usize,
    pub domain: Domain,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftRecord {
    pub id: String,
    pub images: Vec<String>,
    pub conversations: Vec<SftMessage>,
    pub meta: SftMeta,
}

impl SftRecord {
    pub fn check(&self) -> Result<(), String> {
        let placeholders: usize = self.conversations.iter().map(|m| m.content.matches(IMAGE_PLACEHOLDER).count()).sum();
        if placeholders != self.images.len() {
            return Err(format!("{placeholders} image placeholder(s) for {} image(s)", self.images.len()));
        }
        if self.conversations.is_empty() || !self.conversations.len().is_multiple_of(2) {
            return Err(format!("{} messages do not form user/assistant pairs", self.conversations.len()));
        }
        for (i, m) in self.conversations.iter().enumerate() {
            let expected = if i % 2 == 0 { "user" } else { "assistant" };
            if m.role != expected {
                return Err(format!("message {i} has role {}, expected {expected}", m.role));
            }
            if m.loss_mask != (m.role == "assistant") {
                return Err(format!("message {i} ({}) has loss_mask {}", m.role, m.loss_mask));
            }
        }
        if self.meta.rounds * 2 != self.conversations.len() {
            return Err(format!("meta.rounds is {} for {} messages", self.meta.rounds, self.conversations.len()));
        }
        if !matches!(self.meta.kind.as_str(), "reflective_chain" | "truncated_qa") {
            return Err(format!("unknown kind {}", self.meta.kind));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub file: String,
    pub schema_version: String,
    pub schema_hash: String,
    pub records: usize,
    pub counts: BTreeMap<String, usize>,
    pub images: usize,
    /// SHA-256 of the JSONL file.
    pub content_sha256: String,
}

fn user(content: String) -> SftMessage {
    SftMessage { role: "user".into(), content, loss_mask: false }
}

fn assistant(content: String) -> SftMessage {
    SftMessage { role: "assistant".into(), content, loss_mask: true }
}

fn with_image(text: &str) -> String {
    format!("{IMAGE_PLACEHOLDER}\n{text}")
}

/// Builds the record for one sample. `image` maps a source reference and
/// its position to the exported file name.
fn to_record(
    sample: &DatasetSample,
    prompts: &PromptTemplates,
    mut image: impl FnMut(&str, usize) -> Result<String, ExportError>,
) -> Result<SftRecord, ExportError> {
    match sample {
        DatasetSample::TruncatedQa { payload, provenance } => Ok(SftRecord {
            id: provenance.record_id.clone(),
            images: vec![image(&payload.image, 0)?],
            conversations: vec![user(with_image(&payload.question)), assistant(payload.answer.clone())],
            meta: SftMeta { rounds: 1, domain: payload.domain, kind: sample.kind().into() },
        }),
        DatasetSample::ReflectiveChain { payload, provenance } => {
            if payload.rounds.is_empty() {
                return Err(violation(format!("chain {} has no rounds", provenance.record_id)));
            }
            let mut images = vec![image(&payload.source.image, 0)?];
            let mut conversations = Vec::with_capacity(payload.rounds.len() * 2);
            for (k, round) in payload.rounds.iter().enumerate() {
                if k == 0 {
                    conversations.push(user(with_image(&payload.source.question)));
                } else {
                    let prev = &payload.rounds[k - 1];
                    let marked = prev
                        .image
                        .as_deref()
                        .ok_or_else(|| violation(format!("round {k} of {} has no marker image", provenance.record_id)))?;
                    images.push(image(marked, k)?);
                    let count = prev.points.len().max(1).to_string();
                    let status = fill(
                        &prompts.loop_tool_status,
                        &[
                            ("color", prev.tool_call.color.as_str()),
                            ("shape", prev.tool_call.shape.as_str()),
                            ("anchor", &prev.tool_call.anchor),
                            ("count", &count),
                        ],
                    );
                    conversations.push(user(with_image(&status)));
                }
                let turn = TurnOutput {
                    answer: round.answer.clone(),
                    reflection: round.reflection.clone(),
                    tool_call: Some(round.tool_call.clone()),
                    round_index: k as u32 + 1,
                };
                let text = turn.to_text().map_err(|e| violation(format!("round {} of {}: {e}", k + 1, provenance.record_id)))?;
                conversations.push(assistant(text));
            }
            Ok(SftRecord {
                id: provenance.record_id.clone(),
                images,
                conversations,
                meta: SftMeta { rounds: payload.rounds.len(), domain: payload.source.domain, kind: sample.kind().into() },
            })
        }
    }
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// Writes `sft.jsonl`, the referenced images under `images/`, and
/// `manifest.json` into `out_dir`. Images are read through `store` and
/// re-encoded as PNG when they are in another format.
pub fn export_sft(
    samples: &[DatasetSample],
    store: &ImageStore,
    prompts: &PromptTemplates,
    out_dir: &Path,
) -> Result<ExportManifest, ExportError> {
    fs::create_dir_all(out_dir)?;
    let sink = ImageStore::new(store.write_root(), out_dir);
    let mut body = String::new();
    let mut counts = BTreeMap::new();
    let mut image_count = 0;
    for (i, sample) in samples.iter().enumerate() {
        let stem = format!("{i:05}_{}", file_stem(&sample.provenance().record_id));
        let record = to_record(sample, prompts, |reference, k| {
            let bytes = store.load(reference)?;
            let png = if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
                bytes
            } else {
                let img = decode_image(&bytes).map_err(|e| violation(format!("{reference}: {e}")))?;
                encode_png(&img).map_err(|e| violation(format!("{reference}: {e}")))?
            };
            Ok(sink.save(&format!("{stem}_{k}.png"), &png)?)
        })?;
        record
            .check()
            .map_err(|reason| ExportError::SchemaViolation { line: Some(i + 1), reason })?;
        image_count += record.images.len();
        *counts.entry(record.meta.kind.clone()).or_insert(0) += 1;
        body.push_str(&serde_json::to_string(&record).map_err(|e| violation(e.to_string()))?);
        body.push('\n');
    }
    fs::write(out_dir.join(SFT_FILE), &body)?;
    let manifest = ExportManifest {
        file: SFT_FILE.into(),
        schema_version: SCHEMA_VERSION.into(),
        schema_hash: schema_hash(),
        records: samples.len(),
        counts,
        images: image_count,
        content_sha256: hex::encode(Sha256::digest(body.as_bytes())),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| violation(e.to_string()))?;
    fs::write(out_dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(manifest)
}

/// Parses and checks exported JSONL. Errors name the 1-based line.
pub fn read_sft_jsonl(text: &str) -> Result<Vec<SftRecord>, ExportError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |reason: String| ExportError::SchemaViolation { line: Some(i + 1), reason };
        let record: SftRecord = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        record.check().map_err(at)?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_sft_file(path: &Path) -> Result<Vec<SftRecord>, ExportError> {
    read_sft_jsonl(&fs::read_to_string(path)?)
}
