//! Deterministic scripted backends. Every test in the workspace runs on
//! these; none of them touch the network.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Mutex;

use sha2::{Digest, Sha256};
use serde_json::{json, Value};

use super::{
    BackendError, ChatBackend, ChatMessage, GroundReply, Grounder, Judge, RawQuality, RawVerdict,
    SegmentReply, Segmenter, BoxReply,
};
use crate::protocol::RawModelText;
use crate::render::{rle_encode, Bitmap, Point};

/// One scripted chat reply.
#[derive(Debug, Clone, PartialEq)]
pub enum ScriptStep {
    Reply(String),
    Fail(BackendError),
}

/// Replays a fixed script and records every request it receives.
#[derive(Debug, Default)]
pub struct ScriptedChat {
    script: Vec<ScriptStep>,
    cycle: bool,
    state: Mutex<ChatState>,
}

#[derive(Debug, Default)]
struct ChatState {
    cursor: usize,
    requests: Vec<Vec<ChatMessage>>,
}

impl ScriptedChat {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::from_steps(replies.into_iter().map(|s| ScriptStep::Reply(s.into())).collect())
    }

    pub fn from_steps(script: Vec<ScriptStep>) -> Self {
        ScriptedChat { script, cycle: false, state: Mutex::default() }
    }

    /// Restarts from the top instead of running dry.
    pub fn cycling(mut self) -> Self {
        self.cycle = true;
        self
    }

    pub fn requests(&self) -> Vec<Vec<ChatMessage>> {
        self.state.lock().unwrap().requests.clone()
    }

    pub fn calls(&self) -> usize {
        self.state.lock().unwrap().requests.len()
    }
}

impl ChatBackend for ScriptedChat {
    fn complete(&self, messages: &[ChatMessage]) -> Result<RawModelText, BackendError> {
        let mut state = self.state.lock().unwrap();
        state.requests.push(messages.to_vec());
        if state.cursor >= self.script.len() {
            if !self.cycle || self.script.is_empty() {
                return Err(BackendError::ScriptExhausted { role: "chat" });
            }
            state.cursor = 0;
        }
        let step = self.script[state.cursor].clone();
        state.cursor += 1;
        match step {
            ScriptStep::Reply(text) => Ok(RawModelText::new(text)),
            ScriptStep::Fail(err) => Err(err),
        }
    }
}

/// Maps anchor text to fixed points; unknown anchors ground to nothing.
#[derive(Debug, Default)]
pub struct FixtureGrounder {
    fixtures: BTreeMap<String, Vec<Point>>,
    calls: Mutex<Vec<String>>,
}

impl FixtureGrounder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, anchor: impl Into<String>, points: Vec<Point>) -> Self {
        self.fixtures.insert(anchor.into(), points);
        self
    }

    pub fn queries(&self) -> Vec<String> {
        self.calls.lock().unwrap().clone()
    }
}

impl Grounder for FixtureGrounder {
    fn locate(&self, _image_png: &[u8], query: &str) -> Result<GroundReply, BackendError> {
        self.calls.lock().unwrap().push(query.to_string());
        Ok(GroundReply { points: self.fixtures.get(query).cloned().unwrap_or_default() })
    }
}

/// Answers every request with a filled square whose top-left corner sits
/// at the first prompt point (shifted inward when it would leave the
/// image). A side of zero produces an all-zero mask.
#[derive(Debug, Clone)]
pub struct StubSegmenter {
    pub side_px: u32,
}

impl StubSegmenter {
    pub fn square(side_px: u32) -> Self {
        StubSegmenter { side_px }
    }

    pub fn empty() -> Self {
        StubSegmenter { side_px: 0 }
    }
}

impl Segmenter for StubSegmenter {
    fn segment(&self, image_png: &[u8], points: &[Point]) -> Result<SegmentReply, BackendError> {
        let (width, height) = super::png_dimensions(image_png)?;
        let mut bits = Bitmap::zeros(width, height);
        if let (Some(p), true) = (points.first(), self.side_px > 0) {
            let (px, py) = p.to_pixel(width, height);
            let side_x = self.side_px.min(width);
            let side_y = self.side_px.min(height);
            let x0 = px.min(width - side_x);
            let y0 = py.min(height - side_y);
            for y in y0..y0 + side_y {
                for x in x0..x0 + side_x {
                    bits.set(x, y, true);
                }
            }
        }
        let bbox = bits.bounding_box().map(|b| BoxReply {
                x0: b.x0 as f64 / width as f64,
                y0: b.y0 as f64 / height as f64,
                x1: b.x1 as f64 / width as f64,
                y1: b.y1 as f64 / height as f64,
            });
        let rle = rle_encode(&bits).map_err(|e| BackendError::ContractViolation(e.to_string()))?;
        Ok(SegmentReply { width, height, runs: rle.runs, bbox })
    }
}

fn normalize(s: &str) -> String {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Rule- and fixture-driven judge.
///
/// * score: pops the next scripted score if any; otherwise 10 when the
///   normalized candidate equals the ground truth, 2 when they share no
///   word, 5 otherwise.
/// * consistency: fixture keyed on (sha256 of the image, reflection text),
///   falling back to `default_consistency`.
/// * alignment: scripted verdicts first; otherwise whether the normalized
///   answer contains the normalized ground truth.
/// * quality: first fixture whose key occurs in the sample text.
#[derive(Debug)]
pub struct MockJudge {
    scores: Mutex<VecDeque<Value>>,
    alignments: Mutex<VecDeque<Value>>,
    consistency: BTreeMap<(String, String), Value>,
    default_consistency: Value,
    quality: Vec<(String, (Value, Value))>,
    default_quality: (Value, Value),
}

impl Default for MockJudge {
    fn default() -> Self {
        MockJudge {
            scores: Mutex::default(),
            alignments: Mutex::default(),
            consistency: BTreeMap::new(),
            default_consistency: Value::Bool(true),
            quality: Vec::new(),
            default_quality: (json!(3), json!(3)),
        }
    }
}

impl MockJudge {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_scores(self, scores: impl IntoIterator<Item = u8>) -> Self {
        self.with_raw_scores(scores.into_iter().map(|s| json!(s)))
    }

    /// Scripted raw verdicts, e.g. free text to exercise parsing.
    pub fn with_raw_scores(self, scores: impl IntoIterator<Item = Value>) -> Self {
        self.scores.lock().unwrap().extend(scores);
        self
    }

    pub fn with_alignments(self, verdicts: impl IntoIterator<Item = Value>) -> Self {
        self.alignments.lock().unwrap().extend(verdicts);
        self
    }

    pub fn with_consistency(mut self, image_png: &[u8], reflection: &str, verdict: Value) -> Self {
        self.consistency.insert((sha256_hex(image_png), reflection.to_string()), verdict);
        self
    }

    pub fn with_consistency_hash(mut self, image_sha256: &str, reflection: &str, verdict: Value) -> Self {
        self.consistency.insert((image_sha256.to_string(), reflection.to_string()), verdict);
        self
    }

    pub fn default_consistency(mut self, verdict: Value) -> Self {
        self.default_consistency = verdict;
        self
    }

    pub fn with_quality(mut self, needle: impl Into<String>, logic: u8, visual: u8) -> Self {
        self.quality.push((needle.into(), (json!(logic), json!(visual))));
        self
    }
}

impl Judge for MockJudge {
    fn score(&self, _question: &str, candidate: &str, ground_truth: &str) -> Result<RawVerdict, BackendError> {
        if let Some(v) = self.scores.lock().unwrap().pop_front() {
            return Ok(RawVerdict { verdict: v, rationale: "scripted".into() });
        }
        let (c, g) = (normalize(candidate), normalize(ground_truth));
        let score = if c == g {
            10
        } else if c.split(' ').all(|w| !g.split(' ').any(|x| x == w)) {
            2
        } else {
            5
        };
        Ok(RawVerdict { verdict: json!(score), rationale: "rule".into() })
    }

    fn consistency(&self, marked_png: &[u8], reflection: &str) -> Result<RawVerdict, BackendError> {
        let key = (sha256_hex(marked_png), reflection.to_string());
        let verdict = self.consistency.get(&key).cloned().unwrap_or_else(|| self.default_consistency.clone());
        Ok(RawVerdict { verdict, rationale: "fixture".into() })
    }

    fn alignment(&self, _question: &str, answer: &str, ground_truth: &str) -> Result<RawVerdict, BackendError> {
        if let Some(v) = self.alignments.lock().unwrap().pop_front() {
            return Ok(RawVerdict { verdict: v, rationale: "scripted".into() });
        }
        let aligned = normalize(answer).contains(&normalize(ground_truth));
        Ok(RawVerdict { verdict: Value::Bool(aligned), rationale: "rule".into() })
    }

    fn quality(&self, sample: &str, _image_png: Option<&[u8]>) -> Result<RawQuality, BackendError> {
        let (logic, visual) = self
            .quality
            .iter()
            .find(|(needle, _)| sample.contains(needle.as_str()))
            .map(|(_, q)| q.clone())
            .unwrap_or_else(|| self.default_quality.clone());
        Ok(RawQuality { logic, visual, rationale: "fixture".into() })
    }
}
