//! Model-output grammar: answer text, a `<reflection>` block and a single
//! `<tool_call>` block carrying the visual prompt request.
//!
//! Parsing is strict. Anything the grammar does not describe is reported as
//! a typed [`ProtocolError`]; recovery is the caller's business.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// The only tool the model may call.
pub const TOOL_NAME: &str = "Visual Prompt Generator";

pub const REFLECTION_OPEN: &str = "<reflection>";
pub const REFLECTION_CLOSE: &str = "</reflection>";
pub const TOOL_CALL_OPEN: &str = "<tool_call>";
pub const TOOL_CALL_CLOSE: &str = "</tool_call>";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("answer is empty once reflection and tool-call blocks are removed")]
    EmptyAnswer,
    #[error("empty model output")]
    EmptyInput,
    #[error("malformed tool call at byte {offset}: {reason}")]
    MalformedToolCall { offset: usize, reason: String },
    #[error("`{tag}` opened at byte {offset} is never closed")]
    UnclosedBlock { tag: &'static str, offset: usize },
    #[error("second `{tag}` block at byte {offset}")]
    DuplicateBlock { tag: &'static str, offset: usize },
    #[error("tool call is missing field `{0}`")]
    MissingField(String),
    #[error("unknown value {value:?} for field `{field}`")]
    UnknownEnumValue { field: String, value: String },
    #[error("tool call body is not a key-value object")]
    NotAnObject,
    #[error("tool call violates its invariants: {0}")]
    InvariantViolation(String),
}

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident, $field:literal { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = ProtocolError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(ProtocolError::UnknownEnumValue {
                        field: $field.to_string(),
                        value: other.to_string(),
                    }),
                }
            }
        }
    };
}

string_enum!(
    /// Marker colors the generator can render.
    MarkerColor, "color" {
        Red => "red",
        Green => "green",
        Blue => "blue",
        Yellow => "yellow",
        Cyan => "cyan",
        Magenta => "magenta",
        Purple => "purple",
        Orange => "orange",
    }
);

string_enum!(
    /// Marker shapes the generator can render.
    MarkerShape, "shape" {
        Point => "point",
        Circle => "circle",
        Ellipse => "ellipse",
        Box => "box",
        Mask => "mask",
    }
);

impl MarkerColor {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            MarkerColor::Red => [255, 0, 0],
            MarkerColor::Green => [0, 255, 0],
            MarkerColor::Blue => [0, 0, 255],
            MarkerColor::Yellow => [255, 255, 0],
            MarkerColor::Cyan => [0, 255, 255],
            MarkerColor::Magenta => [255, 0, 255],
            MarkerColor::Purple => [128, 0, 128],
            MarkerColor::Orange => [255, 165, 0],
        }
    }
}

impl MarkerShape {
    /// Shapes whose geometry comes from a segmentation mask when available.
    pub fn wants_mask(self) -> bool {
        matches!(self, MarkerShape::Ellipse | MarkerShape::Box | MarkerShape::Mask)
    }
}

/// A request to the visual prompt generator.
///
/// `flag = true` asks for a region to be verified; `flag = false` means the
/// reflection accepts the current answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub flag: bool,
    pub anchor: String,
    pub color: MarkerColor,
    pub shape: MarkerShape,
}

impl ToolCall {
    pub fn verify(anchor: impl Into<String>, color: MarkerColor, shape: MarkerShape) -> Self {
        ToolCall { flag: true, anchor: anchor.into(), color, shape }
    }

    pub fn validate_answer(color: MarkerColor, shape: MarkerShape) -> Self {
        ToolCall { flag: false, anchor: String::new(), color, shape }
    }

    pub fn check(&self) -> Result<(), ProtocolError> {
        if self.flag && self.anchor.trim().is_empty() {
            return Err(ProtocolError::InvariantViolation(
                "flag=true requires a non-empty anchor".into(),
            ));
        }
        Ok(())
    }
}

/// One parsed model turn: answer, reflection and optional tool call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnOutput {
    pub answer: String,
    pub reflection: String,
    pub tool_call: Option<ToolCall>,
    pub round_index: u32,
}

impl TurnOutput {
    /// Text form used both for chat history and as a training target.
    pub fn to_text(&self) -> Result<String, ProtocolError> {
        let mut out = self.answer.clone();
        if !self.reflection.is_empty() {
            out.push('\n');
            out.push_str(REFLECTION_OPEN);
            out.push_str(&self.reflection);
            out.push_str(REFLECTION_CLOSE);
        }
        if let Some(call) = &self.tool_call {
            out.push('\n');
            out.push_str(&serialize_tool_call(call)?);
        }
        Ok(out)
    }
}

/// Verbatim generation returned by a chat backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawModelText {
    pub text: String,
    /// Completion token count, when the backend reports usage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u32>,
}

impl RawModelText {
    pub fn new(text: impl Into<String>) -> Self {
        RawModelText { text: text.into(), completion_tokens: None }
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    start: usize,
    body_start: usize,
    body_end: usize,
    end: usize,
}

fn find_block(
    text: &str,
    open: &'static str,
    close: &'static str,
) -> Result<Option<Block>, ProtocolError> {
    let Some(start) = text.find(open) else {
        return Ok(None);
    };
    let body_start = start + open.len();
    let Some(rel) = text[body_start..].find(close) else {
        return Err(ProtocolError::UnclosedBlock { tag: open, offset: start });
    };
    let body_end = body_start + rel;
    let end = body_end + close.len();
    if let Some(dup) = text[end..].find(open) {
        return Err(ProtocolError::DuplicateBlock { tag: open, offset: end + dup });
    }
    Ok(Some(Block { start, body_start, body_end, end }))
}

/// Splits raw model text into answer, reflection and tool call.
pub fn parse_turn_output(raw: &RawModelText, round_index: u32) -> Result<TurnOutput, ProtocolError> {
    let text = raw.text.as_str();
    if text.trim().is_empty() {
        return Err(ProtocolError::EmptyInput);
    }

    let reflection_block = find_block(text, REFLECTION_OPEN, REFLECTION_CLOSE)?;
    let tool_block = find_block(text, TOOL_CALL_OPEN, TOOL_CALL_CLOSE)?;

    // A stray closing tag without its opener is as ambiguous as a missing closer.
    for (open, close, block) in [
        (REFLECTION_OPEN, REFLECTION_CLOSE, reflection_block),
        (TOOL_CALL_OPEN, TOOL_CALL_CLOSE, tool_block),
    ] {
        if let Some(pos) = text.find(close) {
            if block.is_none_or(|b| pos != b.body_end) {
                return Err(ProtocolError::UnclosedBlock { tag: open, offset: pos });
            }
        }
    }

    let mut blocks: Vec<Block> = reflection_block.into_iter().chain(tool_block).collect();
    blocks.sort_by_key(|b| b.start);
    if let [a, b] = blocks.as_slice() {
        if b.start < a.end {
            return Err(ProtocolError::MalformedToolCall {
                offset: b.start,
                reason: "reflection and tool-call blocks overlap".into(),
            });
        }
    }

    let reflection = reflection_block
        .map(|b| text[b.body_start..b.body_end].trim().to_string())
        .unwrap_or_default();

    let mut answer = String::with_capacity(text.len());
    let mut cursor = 0;
    for b in &blocks {
        answer.push_str(&text[cursor..b.start]);
        answer.push(' ');
        cursor = b.end;
    }
    answer.push_str(&text[cursor..]);
    let answer = answer.trim().to_string();
    if answer.is_empty() {
        return Err(ProtocolError::EmptyAnswer);
    }

    let tool_call = match tool_block {
        Some(b) => {
            let call = parse_tool_call(&text[b.body_start..b.body_end]).map_err(|e| {
                ProtocolError::MalformedToolCall { offset: b.body_start, reason: e.to_string() }
            })?;
            if reflection.is_empty() {
                return Err(ProtocolError::MalformedToolCall {
                    offset: b.start,
                    reason: "tool call without a reflection".into(),
                });
            }
            Some(call)
        }
        None => None,
    };

    Ok(TurnOutput { answer, reflection, tool_call, round_index })
}

fn take_field<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a Value, ProtocolError> {
    obj.get(key).ok_or_else(|| ProtocolError::MissingField(key.to_string()))
}

fn expect_str<'a>(value: &'a Value, field: &str) -> Result<&'a str, ProtocolError> {
    value.as_str().ok_or_else(|| ProtocolError::UnknownEnumValue {
        field: field.to_string(),
        value: value.to_string(),
    })
}

fn reject_extra_keys(obj: &Map<String, Value>, allowed: &[&str]) -> Result<(), ProtocolError> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(extra) => Err(ProtocolError::UnknownEnumValue {
            field: "key".into(),
            value: extra.clone(),
        }),
        None => Ok(()),
    }
}

/// Parses the JSON body found between the tool-call tags.
pub fn parse_tool_call(block_body: &str) -> Result<ToolCall, ProtocolError> {
    let value: Value =
        serde_json::from_str(block_body.trim()).map_err(|_| ProtocolError::NotAnObject)?;
    let Value::Object(obj) = value else {
        return Err(ProtocolError::NotAnObject);
    };

    let name = expect_str(take_field(&obj, "name")?, "name")?;
    let flag_value = take_field(&obj, "flag")?;
    let anchor_value = take_field(&obj, "anchor")?;
    let args_value = take_field(&obj, "args")?;
    reject_extra_keys(&obj, &["name", "flag", "anchor", "args"])?;

    if name != TOOL_NAME {
        return Err(ProtocolError::UnknownEnumValue { field: "name".into(), value: name.into() });
    }
    let flag = flag_value.as_bool().ok_or_else(|| ProtocolError::UnknownEnumValue {
        field: "flag".into(),
        value: flag_value.to_string(),
    })?;
    let anchor = expect_str(anchor_value, "anchor")?.to_string();

    let Value::Object(args) = args_value else {
        return Err(ProtocolError::NotAnObject);
    };
    let color = expect_str(take_field(args, "color")?, "color")?.parse()?;
    let shape = expect_str(take_field(args, "shape")?, "shape")?.parse()?;
    reject_extra_keys(args, &["color", "shape"])?;

    let call = ToolCall { flag, anchor, color, shape };
    call.check()?;
    Ok(call)
}

/// Canonical wire form: fixed key order, no insignificant whitespace.
pub fn serialize_tool_call(call: &ToolCall) -> Result<String, ProtocolError> {
    call.check()?;
    // serde_json escapes the anchor; key order is spelled out here rather
    // than left to a map implementation.
    let anchor = serde_json::to_string(&call.anchor).expect("string serialization is infallible");
    Ok(format!(
        "{TOOL_CALL_OPEN}{{\"name\":\"{TOOL_NAME}\",\"flag\":{},\"anchor\":{anchor},\"args\":{{\"color\":\"{}\",\"shape\":\"{}\"}}}}{TOOL_CALL_CLOSE}",
        call.flag, call.color, call.shape,
    ))
}

/// Removes the surrounding tool-call tags from a serialized call.
pub fn strip_tool_call_tags(text: &str) -> Option<&str> {
    text.strip_prefix(TOOL_CALL_OPEN)?.strip_suffix(TOOL_CALL_CLOSE)
}
