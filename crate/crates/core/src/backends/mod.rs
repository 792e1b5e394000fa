//! Contracts for the four model roles: chat VLM, grounder, segmenter and
//! judge.
//!
//! Each role is a trait returning the service's raw reply. The free
//! functions in this module ([`chat`], [`ground`], [`segment`],
//! [`judge_score`], [`judge_consistency`], ...) check preconditions and
//! validate replies, so HTTP clients and mocks are held to the same
//! contract.

pub mod chat_judge;
pub mod http;
pub mod mock;

use std::fmt;
use std::sync::Arc;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::protocol::RawModelText;
use crate::render::{rle_decode, MaskRle, Point, RleError};

pub use chat_judge::ChatJudge;
pub use http::{BackendEndpoints, HttpBackends};
pub use mock::{FixtureGrounder, MockJudge, ScriptedChat, StubSegmenter};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("service returned status {code} after {attempts} attempt(s)")]
    BadStatus { code: u16, attempts: u32 },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("service reply breaks the contract: {0}")]
    ContractViolation(String),
    #[error("coordinates ({x}, {y}) outside [0,1]")]
    InvalidCoordinates { x: f64, y: f64 },
    #[error("segmentation mask is empty")]
    EmptyMask,
    #[error("judge verdict has no usable score: {0:?}")]
    NonNumericVerdict(String),
    #[error("judge verdict is neither yes nor no: {0:?}")]
    NonBooleanVerdict(String),
    #[error("{role} script exhausted")]
    ScriptExhausted { role: &'static str },
}

impl BackendError {
    /// Failures worth retrying: the request may succeed if sent again.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Timeout { .. } | BackendError::Transport { .. } => true,
            BackendError::BadStatus { code, .. } => *code >= 500 || *code == 429,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        })
    }
}

/// PNG bytes attached to a chat message.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageAttachment(pub Arc<Vec<u8>>);

impl ImageAttachment {
    pub fn new(png: Vec<u8>) -> Self {
        ImageAttachment(Arc::new(png))
    }

    pub fn bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn to_base64(&self) -> String {
        base64::engine::general_purpose::STANDARD.encode(self.bytes())
    }
}

impl fmt::Debug for ImageAttachment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageAttachment({} bytes)", self.0.len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatMessage {
    pub role: Role,
    pub text: String,
    pub images: Vec<ImageAttachment>,
}

impl ChatMessage {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        ChatMessage { role, text: text.into(), images: Vec::new() }
    }

    pub fn with_image(role: Role, text: impl Into<String>, png: ImageAttachment) -> Self {
        ChatMessage { role, text: text.into(), images: vec![png] }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub score: u8,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub verdict: bool,
    pub rationale: String,
}

/// Logical coherence and visual validity, each 1..=5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityScore {
    pub logic: u8,
    pub visual: u8,
}

/// Raw grounder reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundReply {
    pub points: Vec<Point>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxReply {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Raw segmenter reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReply {
    pub width: u32,
    pub height: u32,
    pub runs: Vec<u32>,
    /// May be null when the mask is empty.
    #[serde(rename = "box", default)]
    pub bbox: Option<BoxReply>,
}

/// A judge reply before validation. `verdict` may be a number, a boolean
/// or free text, depending on the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawVerdict {
    pub verdict: Value,
    #[serde(default)]
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawQuality {
    pub logic: Value,
    pub visual: Value,
    #[serde(default)]
    pub rationale: String,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<RawModelText, BackendError>;
}

pub trait Grounder: Send + Sync {
    fn locate(&self, image_png: &[u8], query: &str) -> Result<GroundReply, BackendError>;
}

pub trait Segmenter: Send + Sync {
    fn segment(&self, image_png: &[u8], points: &[Point]) -> Result<SegmentReply, BackendError>;
}

pub trait Judge: Send + Sync {
    fn score(&self, question: &str, candidate: &str, ground_truth: &str) -> Result<RawVerdict, BackendError>;
    fn consistency(&self, marked_png: &[u8], reflection: &str) -> Result<RawVerdict, BackendError>;
    fn alignment(&self, question: &str, answer: &str, ground_truth: &str) -> Result<RawVerdict, BackendError>;
    fn quality(&self, sample: &str, image_png: Option<&[u8]>) -> Result<RawQuality, BackendError>;
}

/// One handle per model role.
#[derive(Clone)]
pub struct Backends {
    pub chat: Arc<dyn ChatBackend>,
    pub grounder: Arc<dyn Grounder>,
    pub segmenter: Arc<dyn Segmenter>,
    pub judge: Arc<dyn Judge>,
}

impl fmt::Debug for Backends {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backends").finish_non_exhaustive()
    }
}

/// Validated segmentation: the mask and its tight bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub mask: MaskRle,
    pub bbox: [Point; 2],
}

pub fn chat(backend: &dyn ChatBackend, messages: &[ChatMessage]) -> Result<RawModelText, BackendError> {
    if messages.is_empty() {
        return Err(BackendError::Precondition("chat needs at least one message".into()));
    }
    backend.complete(messages)
}

pub fn ground(grounder: &dyn Grounder, image_png: &[u8], anchor: &str) -> Result<Vec<Point>, BackendError> {
    if anchor.trim().is_empty() {
        return Err(BackendError::Precondition("anchor is empty".into()));
    }
    let reply = grounder.locate(image_png, anchor)?;
    if let Some(p) = reply.points.iter().find(|p| !p.in_unit_square()) {
        return Err(BackendError::InvalidCoordinates { x: p.x, y: p.y });
    }
    Ok(reply.points)
}

fn png_dimensions(png: &[u8]) -> Result<(u32, u32), BackendError> {
    image::ImageReader::new(std::io::Cursor::new(png))
        .with_guessed_format()
        .map_err(|e| BackendError::Precondition(format!("unreadable image: {e}")))?
        .into_dimensions()
        .map_err(|e| BackendError::Precondition(format!("unreadable image: {e}")))
}

pub fn segment(segmenter: &dyn Segmenter, image_png: &[u8], points: &[Point]) -> Result<Segmentation, BackendError> {
    if points.is_empty() {
        return Err(BackendError::Precondition("segment needs at least one point".into()));
    }
    let (width, height) = png_dimensions(image_png)?;
    let reply = segmenter.segment(image_png, points)?;
    if (reply.width, reply.height) != (width, height) {
        return Err(BackendError::ContractViolation(format!(
            "mask is {}x{}, image is {width}x{height}",
            reply.width, reply.height
        )));
    }
    if let Some(b) = reply.bbox {
        for (x, y) in [(b.x0, b.y0), (b.x1, b.y1)] {
            if !Point::new(x, y).in_unit_square() {
                return Err(BackendError::InvalidCoordinates { x, y });
            }
        }
    }
    let mask = MaskRle { width: reply.width, height: reply.height, runs: reply.runs };
    let bitmap = rle_decode(&mask).map_err(|e: RleError| BackendError::ContractViolation(e.to_string()))?;
    let Some(tight) = bitmap.bounding_box() else {
        return Err(BackendError::EmptyMask);
    };
    // The box is recomputed from the mask so downstream code never sees a
    // box that disagrees with it.
    let bbox = [
        Point::from_pixel(tight.x0, tight.y0, width, height),
        Point::from_pixel(tight.x1, tight.y1, width, height),
    ];
    Ok(Segmentation { mask, bbox })
}

fn require_non_empty(fields: &[(&str, &str)]) -> Result<(), BackendError> {
    match fields.iter().find(|(_, v)| v.trim().is_empty()) {
        Some((name, _)) => Err(BackendError::Precondition(format!("{name} is empty"))),
        None => Ok(()),
    }
}

pub fn judge_score(judge: &dyn Judge, question: &str, candidate: &str, ground_truth: &str) -> Result<JudgeScore, BackendError> {
    require_non_empty(&[("question", question), ("candidate", candidate), ("ground_truth", ground_truth)])?;
    let raw = judge.score(question, candidate, ground_truth)?;
    let score = parse_score_verdict(&raw.verdict, 0, 10)?;
    Ok(JudgeScore { score, rationale: raw.rationale })
}

pub fn judge_consistency(judge: &dyn Judge, marked_png: &[u8], reflection: &str) -> Result<JudgeVerdict, BackendError> {
    require_non_empty(&[("reflection", reflection)])?;
    let raw = judge.consistency(marked_png, reflection)?;
    Ok(JudgeVerdict { verdict: parse_bool_verdict(&raw.verdict)?, rationale: raw.rationale })
}

pub fn judge_alignment(judge: &dyn Judge, question: &str, answer: &str, ground_truth: &str) -> Result<JudgeVerdict, BackendError> {
    require_non_empty(&[("question", question), ("answer", answer), ("ground_truth", ground_truth)])?;
    let raw = judge.alignment(question, answer, ground_truth)?;
    Ok(JudgeVerdict { verdict: parse_bool_verdict(&raw.verdict)?, rationale: raw.rationale })
}

pub fn judge_quality(judge: &dyn Judge, sample: &str, image_png: Option<&[u8]>) -> Result<QualityScore, BackendError> {
    require_non_empty(&[("sample", sample)])?;
    let raw = judge.quality(sample, image_png)?;
    Ok(QualityScore {
        logic: parse_score_verdict(&raw.logic, 1, 5)?,
        visual: parse_score_verdict(&raw.visual, 1, 5)?,
    })
}

/// Reads an integer score in `[lo, hi]` from a number or from the first
/// integer in a text reply ("7", "7/10", "Score: 7 because ...").
pub fn parse_score_verdict(value: &Value, lo: u8, hi: u8) -> Result<u8, BackendError> {
    let fail = || BackendError::NonNumericVerdict(value_text(value));
    let n = match value {
        Value::Number(n) => n.as_u64().or_else(|| {
            n.as_f64().filter(|f| f.fract() == 0.0 && *f >= 0.0).map(|f| f as u64)
        }),
        Value::String(s) => first_integer(s),
        _ => None,
    }
    .ok_or_else(fail)?;
    if n < lo as u64 || n > hi as u64 {
        return Err(fail());
    }
    Ok(n as u8)
}

fn first_integer(s: &str) -> Option<u64> {
    let start = s.find(|c: char| c.is_ascii_digit())?;
    let digits: String = s[start..].chars().take_while(char::is_ascii_digit).collect();
    // "7.5" is not an integer score.
    if s[start + digits.len()..].starts_with('.')
        && s[start + digits.len() + 1..].starts_with(|c: char| c.is_ascii_digit())
    {
        return None;
    }
    digits.parse().ok()
}

/// Reads a yes/no verdict from a boolean or from the first word of a text
/// reply.
pub fn parse_bool_verdict(value: &Value) -> Result<bool, BackendError> {
    match value {
        Value::Bool(b) => Ok(*b),
        Value::String(s) => {
            let first = s
                .split(|c: char| !c.is_alphanumeric())
                .find(|w| !w.is_empty())
                .map(str::to_ascii_lowercase);
            match first.as_deref() {
                Some("yes" | "true" | "consistent" | "aligned") => Ok(true),
                Some("no" | "false" | "inconsistent" | "misaligned") => Ok(false),
                _ => Err(BackendError::NonBooleanVerdict(s.clone())),
            }
        }
        other => Err(BackendError::NonBooleanVerdict(value_text(other))),
    }
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}
