//! Training-data construction. Dialogues between a student and a teacher
//! model are simulated, filtered, turned into reflective chains with
//! rendered markers, verified, and finally mixed with plain QA pairs at a
//! configurable multi-turn ratio.
//!
//! Stage order: simulate, filter, ground, convert, verify, adapt. Each
//! stage works on one record at a time; [`parallel_map`] runs a stage over
//! a batch without changing output order.

mod chain;
mod simulate;
mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::BackendError;
use crate::protocol::{MarkerColor, MarkerShape, ToolCall};
use crate::render::{ComposeError, MaskRle, Point, RenderStyle};

pub use chain::{
    build_chain, convert_chain, convert_to_self_reflection, extract_keywords, inject_visual_caption,
    is_second_person, verify_chain, verify_stage, ChainOutcome,
};
pub use simulate::{simulate_dialogue, SimulationError};
pub use store::{ImageStore, IMAGE_DIR};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("no anchor could be extracted")]
    EmptyAnchor,
    #[error("rewrite still addresses the reader after {attempts} attempt(s)")]
    ConversionRejected { attempts: u32 },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("image `{reference}`: {reason}")]
    Image { reference: String, reason: String },
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    GeneralQa,
    Ocr,
    Doc,
    Chart,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::GeneralQa, Domain::Ocr, Domain::Doc, Domain::Chart];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::GeneralQa => "general_qa",
            Domain::Ocr => "ocr",
            Domain::Doc => "doc",
            Domain::Chart => "chart",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One input example. `image` is a path, a base64 string or a `data:` URI.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSample {
    pub id: String,
    pub image: String,
    pub question: String,
    pub ground_truth: String,
    pub domain: Domain,
}

impl SourceSample {
    pub fn check(&self) -> Result<(), PipelineError> {
        for (name, value) in [
            ("id", &self.id),
            ("image", &self.image),
            ("question", &self.question),
            ("ground_truth", &self.ground_truth),
        ] {
            if value.trim().is_empty() {
                return Err(PipelineError::Precondition(format!("{name} is empty")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub student_response: String,
    pub teacher_feedback: String,
    pub score: u8,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub source: SourceSample,
    pub turns: Vec<DialogueTurn>,
    /// Judge verdict on the final response against the ground truth,
    /// stored so filtering needs no backend.
    pub gt_aligned: bool,
    /// Set when a backend error cut the simulation short.
    #[serde(default, skip_serializing_if = "is_false")]
    pub incomplete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl DialogueRecord {
    pub fn scores(&self) -> Vec<u8> {
        self.turns.iter().map(|t| t.score).collect()
    }

    pub fn check(&self) -> Result<(), PipelineError> {
        self.source.check()?;
        if let Some(t) = self.turns.iter().find(|t| t.score > 10) {
            return Err(PipelineError::Precondition(format!("score {} is outside 0..=10", t.score)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    NoTurns,
    Incomplete,
    NotStrictlyAscending,
    FinalNotPerfect,
    NotGtAligned,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::NoTurns => "no_turns",
            RejectReason::Incomplete => "incomplete",
            RejectReason::NotStrictlyAscending => "not_strictly_ascending",
            RejectReason::FinalNotPerfect => "final_not_perfect",
            RejectReason::NotGtAligned => "not_gt_aligned",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Keep,
    Reject(RejectReason),
}

/// Keeps a dialogue whose scores rise strictly every turn, end at 10, and
/// whose final answer agrees with the ground truth. A rejection names the
/// first rule broken, checked in that order.
pub fn filter_dialogue(r: &DialogueRecord) -> FilterDecision {
    let Some(last) = r.turns.last() else {
        return FilterDecision::Reject(RejectReason::NoTurns);
    };
    if r.incomplete {
        return FilterDecision::Reject(RejectReason::Incomplete);
    }
    if r.turns.windows(2).any(|w| w[1].score <= w[0].score) {
        return FilterDecision::Reject(RejectReason::NotStrictlyAscending);
    }
    if last.score != 10 {
        return FilterDecision::Reject(RejectReason::FinalNotPerfect);
    }
    if !r.gt_aligned {
        return FilterDecision::Reject(RejectReason::NotGtAligned);
    }
    FilterDecision::Keep
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelStage {
    pub stage: String,
    pub count: usize,
}

/// Record counts after each stage plus rejection counts by reason.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelReport {
    pub stages: Vec<FunnelStage>,
    pub rejections: BTreeMap<String, usize>,
}

impl FunnelReport {
    pub fn push(&mut self, stage: impl Into<String>, count: usize) {
        self.stages.push(FunnelStage { stage: stage.into(), count });
    }

    pub fn reject(&mut self, reason: impl Into<String>) {
        *self.rejections.entry(reason.into()).or_default() += 1;
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<24} {:>8} {:>8}\n", "stage", "count", "kept");
        let first = self.stages.first().map_or(0, |s| s.count);
        for s in &self.stages {
            let pct = if first == 0 { 0.0 } else { 100.0 * s.count as f64 / first as f64 };
            out.push_str(&format!("{:<24} {:>8} {:>7.1}%\n", s.stage, s.count, pct));
        }
        if !self.rejections.is_empty() {
            out.push_str("\nrejected by\n");
            for (reason, n) in &self.rejections {
                out.push_str(&format!("  {reason:<22} {n:>8}\n"));
            }
        }
        out
    }
}

/// Funnel over a set of simulated dialogues: all records, those passing
/// the score rules, and those also aligned with the ground truth.
pub fn dialogue_funnel(records: &[DialogueRecord]) -> FunnelReport {
    let mut report = FunnelReport::default();
    let mut response_ok = 0;
    let mut kept = 0;
    for r in records {
        match filter_dialogue(r) {
            FilterDecision::Keep => {
                response_ok += 1;
                kept += 1;
            }
            FilterDecision::Reject(reason) => {
                if reason == RejectReason::NotGtAligned {
                    response_ok += 1;
                }
                report.reject(reason.as_str());
            }
        }
    }
    report.push("original", records.len());
    report.push("response_filtered", response_ok);
    report.push("gt_filtered", kept);
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Target share of multi-turn samples in the final mix.
    pub rho: f64,
    pub seed: u64,
    /// Domains whose anchors come from the ground truth.
    pub dense_domains: Vec<Domain>,
    pub max_teacher_rounds: u32,
    /// Dialogues longer than this are not turned into chains.
    pub max_chain_rounds: usize,
    /// Marker color of round k is `marker_colors[k % len]`.
    pub marker_colors: Vec<MarkerColor>,
    pub marker_shape: MarkerShape,
    /// Extra attempts when a rewrite still uses second person.
    pub conversion_retries: u32,
    pub render: RenderStyle,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            rho: 0.75,
            seed: 0,
            dense_domains: vec![Domain::Ocr, Domain::Doc, Domain::Chart],
            max_teacher_rounds: 4,
            max_chain_rounds: 5,
            marker_colors: MarkerColor::ALL.to_vec(),
            marker_shape: MarkerShape::Point,
            conversion_retries: 1,
            render: RenderStyle::default(),
        }
    }
}

impl PipelineConfig {
    pub fn check(&self) -> Result<(), PipelineError> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(PipelineError::InvalidConfig(format!("rho {} is outside [0, 1]", self.rho)));
        }
        if self.max_teacher_rounds == 0 {
            return Err(PipelineError::InvalidConfig("max_teacher_rounds must be at least 1".into()));
        }
        if self.marker_colors.is_empty() {
            return Err(PipelineError::InvalidConfig("marker_colors is empty".into()));
        }
        Ok(())
    }

    /// floor(rho * n). The small slack keeps decimal ratios such as 0.29
    /// from landing one below the intended count.
    pub fn multi_turn_target(&self, n: usize) -> usize {
        ((self.rho * n as f64) + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainStage {
    Grounded,
    Converted,
    Verified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRound {
    pub answer: String,
    /// Teacher feedback the reflection is written from.
    pub feedback: String,
    pub score: u8,
    pub reflection: String,
    pub tool_call: ToolCall,
    /// Marker image for this round. The final round has none.
    pub image: Option<String>,
    pub points: Vec<Point>,
    pub mask: Option<MaskRle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectiveChain {
    pub source: SourceSample,
    pub rounds: Vec<ChainRound>,
    pub final_answer: String,
    pub stage: ChainStage,
}

impl ReflectiveChain {
    /// The dialogue this chain was built from.
    pub fn to_dialogue(&self) -> DialogueRecord {
        DialogueRecord {
            source: self.source.clone(),
            turns: self
                .rounds
                .iter()
                .map(|r| DialogueTurn {
                    student_response: r.answer.clone(),
                    teacher_feedback: r.feedback.clone(),
                    score: r.score,
                })
                .collect(),
            gt_aligned: true,
            incomplete: false,
            error: None,
        }
    }

    pub fn marker_rounds(&self) -> impl Iterator<Item = &ChainRound> {
        self.rounds.iter().filter(|r| r.image.is_some())
    }
}

/// Why a kept dialogue could not become a verified chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailReason {
    SingleTurn,
    RoundBudget,
    EmptyAnchor,
    GroundingEmpty,
    ConversionRejected,
    VerificationFailed,
}

impl FailReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FailReason::SingleTurn => "single_turn",
            FailReason::RoundBudget => "round_budget",
            FailReason::EmptyAnchor => "empty_anchor",
            FailReason::GroundingEmpty => "grounding_empty",
            FailReason::ConversionRejected => "conversion_rejected",
            FailReason::VerificationFailed => "verification_failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedRecord {
    pub record: DialogueRecord,
    pub reason: FailReason,
}

/// A line in the intermediate files between `ground` and `adapt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PipelineItem {
    Chain(ReflectiveChain),
    Failed(FailedRecord),
}

impl PipelineItem {
    pub fn id(&self) -> &str {
        match self {
            PipelineItem::Chain(c) => &c.source.id,
            PipelineItem::Failed(f) => &f.record.source.id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncatedQa {
    pub image: String,
    pub question: String,
    pub answer: String,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub record_id: String,
    pub decisions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSample {
    ReflectiveChain { payload: ReflectiveChain, provenance: Provenance },
    TruncatedQa { payload: TruncatedQa, provenance: Provenance },
}

impl DatasetSample {
    pub fn kind(&self) -> &'static str {
        match self {
            DatasetSample::ReflectiveChain { .. } => "reflective_chain",
            DatasetSample::TruncatedQa { .. } => "truncated_qa",
        }
    }

    pub fn provenance(&self) -> &Provenance {
        match self {
            DatasetSample::ReflectiveChain { provenance, .. } | DatasetSample::TruncatedQa { provenance, .. } => provenance,
        }
    }
}

/// Fewer verified chains than the ratio asks for; all of them were kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnderTargetWarning {
    pub target: usize,
    pub available: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapted {
    pub samples: Vec<DatasetSample>,
    pub warning: Option<UnderTargetWarning>,
}

impl Adapted {
    pub fn multi_turn_count(&self) -> usize {
        self.samples.iter().filter(|s| matches!(s, DatasetSample::ReflectiveChain { .. })).count()
    }
}

fn chain_decisions() -> Vec<String> {
    ["filter:keep", "ground", "convert", "verify:pass"].map(String::from).to_vec()
}

/// Mixes verified chains and failed records so that
/// `min(|verified|, floor(rho * N))` chains stay multi-turn. Surplus chains
/// are picked by a seeded shuffle and collapsed to QA on their final
/// answer; failed records become QA on the ground truth. Output keeps
/// input order: verified first, then failed.
pub fn adapt_trajectories(
    verified: Vec<ReflectiveChain>,
    failed: Vec<FailedRecord>,
    cfg: &PipelineConfig,
) -> Result<Adapted, PipelineError> {
    cfg.check()?;
    if let Some(c) = verified.iter().find(|c| c.stage != ChainStage::Verified) {
        return Err(PipelineError::Precondition(format!("chain {} has not been verified", c.source.id)));
    }
    let verified_ids: BTreeSet<&str> = verified.iter().map(|c| c.source.id.as_str()).collect();
    if let Some(f) = failed.iter().find(|f| verified_ids.contains(f.record.source.id.as_str())) {
        return Err(PipelineError::Precondition(format!(
            "record {} is both verified and failed",
            f.record.source.id
        )));
    }

    let n = verified.len() + failed.len();
    let target = cfg.multi_turn_target(n);
    let (surplus, warning) = if verified.len() > target {
        (verified.len() - target, None)
    } else {
        (0, Some(UnderTargetWarning { target, available: verified.len() }))
    };
    let mut order: Vec<usize> = (0..verified.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let collapse: BTreeSet<usize> = order.into_iter().take(surplus).collect();

    let mut samples = Vec::with_capacity(n);
    for (i, chain) in verified.into_iter().enumerate() {
        let mut decisions = chain_decisions();
        if collapse.contains(&i) {
            decisions.push("adapt:surplus_to_qa".into());
            samples.push(DatasetSample::TruncatedQa {
                provenance: Provenance { record_id: chain.source.id.clone(), decisions },
                payload: TruncatedQa {
                    image: chain.source.image,
                    question: chain.source.question,
                    answer: chain.final_answer,
                    domain: chain.source.domain,
                },
            });
        } else {
            decisions.push("adapt:kept_chain".into());
            samples.push(DatasetSample::ReflectiveChain {
                provenance: Provenance { record_id: chain.source.id.clone(), decisions },
                payload: chain,
            });
        }
    }
    for f in failed {
        let decisions = vec![format!("failed:{}", f.reason.as_str()), "adapt:failed_to_qa".into()];
        let s = f.record.source;
        samples.push(DatasetSample::TruncatedQa {
            provenance: Provenance { record_id: s.id, decisions },
            payload: TruncatedQa { image: s.image, question: s.question, answer: s.ground_truth, domain: s.domain },
        });
    }
    Ok(Adapted { samples, warning })
}

/// Applies `f` to every item on a pool of `jobs` threads. Results come
/// back in input order.
pub fn parallel_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    match rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => items.iter().map(f).collect(),
    }
}
