//! The reflection loop: draft an answer, reflect on it, have the visual
//! prompt generator mark the region the reflection asks about, and revise
//! against the marked image. The loop ends when a reflection validates the
//! answer (a `flag=false` call or no call at all) or the round cap is hit.

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use base64::Engine as _;
use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info};

use crate::backends::{self, BackendError, Backends, ChatMessage, ImageAttachment, Role};
use crate::prompts::{fill, PromptTemplates};
use crate::protocol::{parse_turn_output, MarkerColor, ToolCall, TurnOutput};
use crate::render::{
    compose_visual_context, decode_image, encode_png, ComposeError, ImageCodecError, Marker,
    OverlayMode, RenderStyle, VisualContext,
};

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("could not decode input image: {0}")]
    ImageDecode(#[from] ImageCodecError),
    #[error("question is empty")]
    EmptyQuestion,
    #[error("invalid loop config: {0}")]
    InvalidConfig(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("trajectory document error: {0}")]
    Document(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundingFailurePolicy {
    /// Tell the model nothing was found and let it continue.
    #[default]
    Feedback,
    Terminate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MalformedOutputPolicy {
    /// Report the format error to the model and ask again. Costs a round.
    #[default]
    Reprompt,
    Terminate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageHistory {
    /// Only the most recent image is attached; earlier rounds stay as text.
    #[default]
    Latest,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub max_rounds: u32,
    pub overlay_mode: OverlayMode,
    pub on_empty_grounding: GroundingFailurePolicy,
    pub on_malformed_output: MalformedOutputPolicy,
    pub image_history: ImageHistory,
    /// When non-empty, round k's markers use `color_cycle[(k - 1) % len]`
    /// instead of the color the model asked for.
    pub color_cycle: Vec<MarkerColor>,
    pub render: RenderStyle,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            max_rounds: 5,
            overlay_mode: OverlayMode::Fresh,
            on_empty_grounding: GroundingFailurePolicy::Feedback,
            on_malformed_output: MalformedOutputPolicy::Reprompt,
            image_history: ImageHistory::Latest,
            color_cycle: Vec::new(),
            render: RenderStyle::default(),
        }
    }
}

impl LoopConfig {
    pub fn check(&self) -> Result<(), LoopError> {
        if self.max_rounds == 0 {
            return Err(LoopError::InvalidConfig("max_rounds must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Validated,
    NoToolCall,
    RoundCap,
    GroundingFailed,
    BackendError,
    /// The model never produced output that follows the grammar.
    MalformedOutput,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Validated => "validated",
            Termination::NoToolCall => "no_tool_call",
            Termination::RoundCap => "round_cap",
            Termination::GroundingFailed => "grounding_failed",
            Termination::BackendError => "backend_error",
            Termination::MalformedOutput => "malformed_output",
        }
    }
}

/// Decides whether the loop stops after `turn`, produced in `round`.
pub fn should_terminate(turn: &TurnOutput, round: u32, cfg: &LoopConfig) -> Option<Termination> {
    match &turn.tool_call {
        None => Some(Termination::NoToolCall),
        Some(call) if !call.flag => Some(Termination::Validated),
        Some(_) if round >= cfg.max_rounds => Some(Termination::RoundCap),
        Some(_) => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GroundingAction {
    /// Append this tool message, keep the previous image and continue.
    Feedback { message: String },
    Terminate,
}

pub fn handle_grounding_failure(anchor: &str, cfg: &LoopConfig, prompts: &PromptTemplates) -> GroundingAction {
    match cfg.on_empty_grounding {
        GroundingFailurePolicy::Feedback => GroundingAction::Feedback {
            message: fill(&prompts.loop_grounding_failed, &[("anchor", anchor)]),
        },
        GroundingFailurePolicy::Terminate => GroundingAction::Terminate,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatErrorRecord {
    pub round_index: u32,
    pub reason: String,
    pub raw: String,
}

/// Time source for trajectory timing. Injected so replays are exact.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug)]
pub struct SystemClock(Instant);

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock(Instant::now())
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.0.elapsed().as_millis() as u64
    }
}

/// Always reports the same instant.
#[derive(Debug, Default, Clone, Copy)]
pub struct FixedClock;

impl Clock for FixedClock {
    fn now_ms(&self) -> u64 {
        0
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub query: String,
    pub initial_image: Arc<RgbImage>,
    pub turns: Vec<TurnOutput>,
    /// `contexts[i]` is the image turn `i + 1` saw.
    pub contexts: Vec<VisualContext>,
    pub termination: Termination,
    pub wall_time_ms: u64,
    /// Completion tokens per turn; whitespace-separated words when the
    /// backend does not report usage.
    pub token_counts: Vec<u32>,
    pub format_errors: Vec<FormatErrorRecord>,
    /// Set when termination is `backend_error`.
    pub error: Option<String>,
}

impl Trajectory {
    /// The last turn's answer, verbatim.
    pub fn final_answer(&self) -> Option<&str> {
        self.turns.last().map(|t| t.answer.as_str())
    }
}

pub struct Engine {
    backends: Backends,
    cfg: LoopConfig,
    prompts: PromptTemplates,
    clock: Arc<dyn Clock>,
}

enum UpdateError {
    NothingFound,
    Backend(BackendError),
    Compose(ComposeError),
}

impl Engine {
    pub fn new(backends: Backends, cfg: LoopConfig, prompts: PromptTemplates) -> Result<Self, LoopError> {
        cfg.check()?;
        Ok(Engine { backends, cfg, prompts, clock: Arc::new(SystemClock::default()) })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn config(&self) -> &LoopConfig {
        &self.cfg
    }

    /// Runs one trajectory on encoded image bytes.
    pub fn run_trajectory(&self, image: &[u8], question: &str) -> Result<Trajectory, LoopError> {
        let base = decode_image(image)?;
        self.run_image(Arc::new(base), question)
    }

    /// Runs independent trajectories on up to `jobs` threads. Results come
    /// back in input order.
    pub fn run_batch(&self, inputs: &[(Vec<u8>, String)], jobs: usize) -> Vec<Result<Trajectory, LoopError>> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().expect("thread pool");
        pool.install(|| inputs.par_iter().map(|(img, q)| self.run_trajectory(img, q)).collect())
    }

    fn request_view(&self, history: &[ChatMessage]) -> Vec<ChatMessage> {
        let mut view = history.to_vec();
        if self.cfg.image_history == ImageHistory::Latest {
            if let Some(last) = view.iter().rposition(|m| !m.images.is_empty()) {
                for m in &mut view[..last] {
                    m.images.clear();
                }
            }
        }
        view
    }

    fn visual_update(
        &self,
        call: &ToolCall,
        round: u32,
        base_png: &[u8],
        prior: &VisualContext,
    ) -> Result<VisualContext, UpdateError> {
        let points = backends::ground(self.backends.grounder.as_ref(), base_png, &call.anchor)
            .map_err(UpdateError::Backend)?;
        if points.is_empty() {
            return Err(UpdateError::NothingFound);
        }
        let mask = if call.shape.wants_mask() {
            match backends::segment(self.backends.segmenter.as_ref(), base_png, &points) {
                Ok(seg) => Some(seg.mask),
                Err(BackendError::EmptyMask) => return Err(UpdateError::NothingFound),
                Err(e) => return Err(UpdateError::Backend(e)),
            }
        } else {
            None
        };
        compose_visual_context(
            &prior.base_image,
            call,
            &points,
            mask.as_ref(),
            round,
            self.cfg.overlay_mode,
            Some(prior),
            &self.cfg.render,
        )
        .map_err(|e| match e {
            ComposeError::NoEvidence => UpdateError::NothingFound,
            other => UpdateError::Compose(other),
        })
    }

    pub fn run_image(&self, base: Arc<RgbImage>, question: &str) -> Result<Trajectory, LoopError> {
        if question.trim().is_empty() {
            return Err(LoopError::EmptyQuestion);
        }
        let started = self.clock.now_ms();
        let base_png = encode_png(&base)?;

        let mut contexts = vec![VisualContext::initial(base.clone())];
        let mut history = Vec::new();
        if !self.prompts.loop_system.is_empty() {
            history.push(ChatMessage::text(Role::System, self.prompts.loop_system.clone()));
        }
        history.push(ChatMessage::with_image(Role::User, question, ImageAttachment::new(base_png.clone())));

        let mut turns: Vec<TurnOutput> = Vec::new();
        let mut token_counts = Vec::new();
        let mut format_errors = Vec::new();
        let mut error = None;
        let mut round = 0u32;

        let termination = loop {
            round += 1;
            let raw = match backends::chat(self.backends.chat.as_ref(), &self.request_view(&history)) {
                Ok(raw) => raw,
                Err(e) => {
                    error = Some(e.to_string());
                    break Termination::BackendError;
                }
            };

            let turn = match parse_turn_output(&raw, round) {
                Ok(turn) => turn,
                Err(e) => {
                    debug!(round, error = %e, "unparsable model output");
                    format_errors.push(FormatErrorRecord { round_index: round, reason: e.to_string(), raw: raw.text.clone() });
                    if round >= self.cfg.max_rounds {
                        break if turns.is_empty() { Termination::MalformedOutput } else { Termination::RoundCap };
                    }
                    if self.cfg.on_malformed_output == MalformedOutputPolicy::Terminate {
                        break Termination::MalformedOutput;
                    }
                    history.push(ChatMessage::text(Role::Assistant, raw.text));
                    let reason = e.to_string();
                    history.push(ChatMessage::text(Role::Tool, fill(&self.prompts.loop_format_error, &[("reason", &reason)])));
                    continue;
                }
            };

            token_counts.push(raw.completion_tokens.unwrap_or_else(|| raw.text.split_whitespace().count() as u32));
            history.push(ChatMessage::text(
                Role::Assistant,
                turn.to_text().expect("parsed tool calls satisfy their invariants"),
            ));
            let stop = should_terminate(&turn, round, &self.cfg);
            let call = turn.tool_call.clone();
            turns.push(turn);
            if let Some(reason) = stop {
                break reason;
            }
            let mut call = call.expect("a turn that does not stop carries a tool call");
            if !self.cfg.color_cycle.is_empty() {
                call.color = self.cfg.color_cycle[(round as usize - 1) % self.cfg.color_cycle.len()];
            }

            let prior = contexts.last().expect("contexts start with the input image").clone();
            match self.visual_update(&call, round, &base_png, &prior) {
                Ok(ctx) => {
                    let png = encode_png(&ctx.rendered)?;
                    let count = ctx.markers.iter().filter(|m| m.round_index == round).count().to_string();
                    let status = fill(
                        &self.prompts.loop_tool_status,
                        &[
                            ("color", call.color.as_str()),
                            ("shape", call.shape.as_str()),
                            ("anchor", &call.anchor),
                            ("count", &count),
                        ],
                    );
                    history.push(ChatMessage::with_image(Role::Tool, status, ImageAttachment::new(png)));
                    contexts.push(ctx);
                }
                Err(UpdateError::NothingFound) => match handle_grounding_failure(&call.anchor, &self.cfg, &self.prompts) {
                    GroundingAction::Feedback { message } => {
                        let png = encode_png(&prior.rendered)?;
                        history.push(ChatMessage::with_image(Role::Tool, message, ImageAttachment::new(png)));
                        contexts.push(prior.carried_to(round));
                    }
                    GroundingAction::Terminate => break Termination::GroundingFailed,
                },
                Err(UpdateError::Backend(e)) => {
                    error = Some(e.to_string());
                    break Termination::BackendError;
                }
                Err(UpdateError::Compose(e)) => {
                    error = Some(e.to_string());
                    break Termination::BackendError;
                }
            }
        };

        // Contexts produced for a turn that never happened are dropped.
        contexts.truncate(turns.len().max(1));
        let wall_time_ms = self.clock.now_ms().saturating_sub(started);
        info!(turns = turns.len(), termination = termination.as_str(), "trajectory finished");
        Ok(Trajectory {
            query: question.to_string(),
            initial_image: base,
            turns,
            contexts,
            termination,
            wall_time_ms,
            token_counts,
            format_errors,
            error,
        })
    }
}

/// How images appear in a trajectory document.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageEncoding {
    /// `round_{k}.png` file names next to the document.
    Files,
    /// Base64 PNG inline.
    Inline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    #[serde(flatten)]
    pub turn: TurnOutput,
    pub token_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub round_index: u32,
    pub markers: Vec<Marker>,
    /// File name or base64 PNG, per the document's encoding.
    pub image: String,
}

/// Serializable form of a [`Trajectory`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDocument {
    pub query: String,
    pub termination: Termination,
    pub final_answer: Option<String>,
    pub rounds: usize,
    pub wall_time_ms: u64,
    pub turns: Vec<TurnRecord>,
    pub contexts: Vec<ContextRecord>,
    #[serde(default)]
    pub format_errors: Vec<FormatErrorRecord>,
    #[serde(default)]
    pub error: Option<String>,
}

/// A file name and its bytes.
pub type NamedFile = (String, Vec<u8>);

pub fn round_image_name(index: usize) -> String {
    format!("round_{index}.png")
}

impl Trajectory {
    pub fn to_document(&self, encoding: ImageEncoding) -> Result<(TrajectoryDocument, Vec<NamedFile>), LoopError> {
        let mut files = Vec::new();
        let mut contexts = Vec::with_capacity(self.contexts.len());
        for (i, ctx) in self.contexts.iter().enumerate() {
            let png = encode_png(&ctx.rendered)?;
            let image = match encoding {
                ImageEncoding::Files => {
                    let name = round_image_name(i);
                    files.push((name.clone(), png));
                    name
                }
                ImageEncoding::Inline => base64::engine::general_purpose::STANDARD.encode(&png),
            };
            contexts.push(ContextRecord { round_index: ctx.round_index, markers: ctx.markers.clone(), image });
        }
        let turns = self
            .turns
            .iter()
            .zip(self.token_counts.iter().copied().chain(std::iter::repeat(0)))
            .map(|(t, n)| TurnRecord { turn: t.clone(), token_count: n })
            .collect();
        let doc = TrajectoryDocument {
            query: self.query.clone(),
            termination: self.termination,
            final_answer: self.final_answer().map(str::to_string),
            rounds: self.turns.len(),
            wall_time_ms: self.wall_time_ms,
            turns,
            contexts,
            format_errors: self.format_errors.clone(),
            error: self.error.clone(),
        };
        Ok((doc, files))
    }

    /// Writes `trajectory.json` and `round_{k}.png` into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<TrajectoryDocument, LoopError> {
        fs::create_dir_all(dir)?;
        let (doc, files) = self.to_document(ImageEncoding::Files)?;
        for (name, bytes) in files {
            fs::write(dir.join(name), bytes)?;
        }
        let json = serde_json::to_string_pretty(&doc).map_err(|e| LoopError::Document(e.to_string()))?;
        fs::write(dir.join("trajectory.json"), json)?;
        Ok(doc)
    }
}

pub fn load_trajectory_document(path: &Path) -> Result<TrajectoryDocument, LoopError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| LoopError::Document(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::MarkerShape;

    fn turn(call: Option<ToolCall>) -> TurnOutput {
        TurnOutput { answer: "a".into(), reflection: "r".into(), tool_call: call, round_index: 1 }
    }

    #[test]
    fn termination_rules() {
        let cfg = LoopConfig::default();
        assert_eq!(should_terminate(&turn(None), 1, &cfg), Some(Termination::NoToolCall));
        let done = ToolCall::validate_answer(MarkerColor::Red, MarkerShape::Point);
        assert_eq!(should_terminate(&turn(Some(done)), 2, &cfg), Some(Termination::Validated));
        let verify = ToolCall::verify("x", MarkerColor::Red, MarkerShape::Point);
        assert_eq!(should_terminate(&turn(Some(verify.clone())), cfg.max_rounds, &cfg), Some(Termination::RoundCap));
        assert_eq!(should_terminate(&turn(Some(verify)), 1, &cfg), None);
    }

    #[test]
    fn grounding_failure_policies() {
        let prompts = PromptTemplates::default();
        let cfg = LoopConfig::default();
        assert_eq!(
            handle_grounding_failure("red cup", &cfg, &prompts),
            GroundingAction::Feedback { message: "no region found for: red cup".into() }
        );
        let cfg = LoopConfig { on_empty_grounding: GroundingFailurePolicy::Terminate, ..cfg };
        assert_eq!(handle_grounding_failure("red cup", &cfg, &prompts), GroundingAction::Terminate);
    }

    #[test]
    fn zero_rounds_rejected() {
        assert!(LoopConfig { max_rounds: 0, ..Default::default() }.check().is_err());
    }
}
