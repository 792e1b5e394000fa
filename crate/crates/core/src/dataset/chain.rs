use std::sync::Arc;

use super::{
    filter_dialogue, ChainRound, ChainStage, DialogueRecord, FailReason, FailedRecord, FilterDecision, ImageStore,
    PipelineConfig, PipelineError, PipelineItem, ReflectiveChain,
};
use crate::backends::{chat, ground, judge_consistency, segment, BackendError, Backends, ChatBackend, ChatMessage, Judge, Role};
use crate::prompts::{fill, PromptTemplates};
use crate::protocol::{MarkerColor, MarkerShape, ToolCall};
use crate::render::{compose_visual_context, decode_image, encode_png, OverlayMode};

/// Result of a stage that may route a record out of the chain pool.
#[derive(Debug, Clone, PartialEq)]
pub enum ChainOutcome {
    Chain(ReflectiveChain),
    Failed(FailedRecord),
}

impl From<ChainOutcome> for PipelineItem {
    fn from(o: ChainOutcome) -> Self {
        match o {
            ChainOutcome::Chain(c) => PipelineItem::Chain(c),
            ChainOutcome::Failed(f) => PipelineItem::Failed(f),
        }
    }
}

/// First non-empty line, without list bullets, quotes or a closing period.
fn clean_phrase(text: &str) -> String {
    let line = text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let line = line.trim_start_matches(['-', '*', '•', ' ']);
    let line = line.trim_matches(|c: char| matches!(c, '"' | '\'' | '`' | '“' | '”' | '.') || c.is_whitespace());
    line.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn ask(backend: &dyn ChatBackend, prompt: String) -> Result<String, PipelineError> {
    Ok(chat(backend, &[ChatMessage::text(Role::User, prompt)])?.text)
}

/// The localization phrase for the correction made at `turn_index`.
///
/// Dense-text domains take it from the ground truth through the subject
/// template, and the answer text itself is kept in the phrase since that
/// is what appears in the image. Other domains list the objects the
/// feedback mentions, then merge them into one caption.
pub fn extract_keywords(
    r: &DialogueRecord,
    turn_index: usize,
    cfg: &PipelineConfig,
    prompts: &PromptTemplates,
    backend: &dyn ChatBackend,
) -> Result<String, PipelineError> {
    let turn = r
        .turns
        .get(turn_index)
        .ok_or_else(|| PipelineError::Precondition(format!("turn {turn_index} does not exist")))?;
    if turn.teacher_feedback.trim().is_empty() {
        return Err(PipelineError::Precondition(format!("turn {turn_index} has no feedback")));
    }
    let s = &r.source;
    let anchor = if cfg.dense_domains.contains(&s.domain) {
        let prompt = fill(&prompts.subject_extraction, &[("question", &s.question), ("ground_truth", &s.ground_truth)]);
        let subject = clean_phrase(&ask(backend, prompt)?);
        let gt = s.ground_truth.trim();
        if subject.is_empty() || subject.to_lowercase().contains(&gt.to_lowercase()) {
            subject
        } else {
            format!("{subject} {gt}")
        }
    } else {
        let prompt = fill(&prompts.object_identification, &[("feedback", &turn.teacher_feedback)]);
        let listed = ask(backend, prompt)?;
        let objects: Vec<String> = listed.lines().map(clean_phrase).filter(|l| !l.is_empty()).collect();
        if objects.is_empty() {
            return Err(PipelineError::EmptyAnchor);
        }
        let prompt = fill(&prompts.caption_merge, &[("objects", &objects.join("\n"))]);
        clean_phrase(&ask(backend, prompt)?)
    };
    if anchor.is_empty() {
        return Err(PipelineError::EmptyAnchor);
    }
    Ok(anchor)
}

/// Adds the marker phrase (", as indicated by the red point") to the end
/// of the first sentence. Text already holding the phrase is returned
/// unchanged.
pub fn inject_visual_caption(text: &str, color: MarkerColor, shape: MarkerShape, template: &str) -> String {
    let phrase = fill(template, &[("color", color.as_str()), ("shape", shape.as_str())]);
    if text.contains(&phrase) {
        return text.to_string();
    }
    let text = text.trim_end();
    if text.is_empty() {
        return phrase;
    }
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let is_stop = |c: char| matches!(c, '.' | '!' | '?');
    let mut i = 0;
    while i < chars.len() {
        if is_stop(chars[i].1) {
            // A run like "..." or "?!" ends the sentence only when followed
            // by whitespace or the end of the text.
            let mut j = i;
            while j < chars.len() && is_stop(chars[j].1) {
                j += 1;
            }
            if j == chars.len() || chars[j].1.is_whitespace() {
                let at = chars[i].0;
                let head = text[..at].trim_end_matches([',', ';', ':', ' ']);
                return format!("{head}, {phrase}{}", &text[at..]);
            }
            i = j;
        } else {
            i += 1;
        }
    }
    format!("{}, {phrase}", text.trim_end_matches([',', ';', ':']))
}

const SECOND_PERSON: [&str; 9] = ["you", "your", "yours", "yourself", "yourselves", "you're", "you've", "you'll", "you'd"];

/// True when the text addresses the reader outside double quotes.
pub fn is_second_person(text: &str) -> bool {
    let mut outside = String::with_capacity(text.len());
    let mut quoted = false;
    for c in text.chars() {
        match c {
            '"' => quoted = !quoted,
            '“' => quoted = true,
            '”' => quoted = false,
            _ if !quoted => outside.push(c),
            _ => {}
        }
    }
    outside
        .to_lowercase()
        .replace('’', "'")
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|w| w.trim_matches('\''))
        .any(|w| SECOND_PERSON.contains(&w))
}

/// Rewrites teacher feedback as the answerer's own first-person thought.
/// A rewrite that still speaks to "you" is retried `retries` times, then
/// rejected.
pub fn convert_to_self_reflection(
    feedback: &str,
    backend: &dyn ChatBackend,
    prompts: &PromptTemplates,
    retries: u32,
) -> Result<String, PipelineError> {
    if feedback.trim().is_empty() {
        return Err(PipelineError::Precondition("feedback is empty".into()));
    }
    let base = fill(&prompts.self_reflection, &[("feedback", feedback.trim())]);
    let attempts = retries + 1;
    for attempt in 0..attempts {
        let prompt = if attempt == 0 {
            base.clone()
        } else {
            format!("{base}\nThe previous rewrite still addressed the reader. Use first person only.")
        };
        let reply = ask(backend, prompt)?;
        let reply = reply.trim();
        if !reply.is_empty() && !is_second_person(reply) {
            return Ok(reply.to_string());
        }
    }
    Err(PipelineError::ConversionRejected { attempts })
}

fn fail(record: DialogueRecord, reason: FailReason) -> ChainOutcome {
    ChainOutcome::Failed(FailedRecord { record, reason })
}

/// Turns a kept dialogue into a chain with one marker round per
/// correction plus a closing round that confirms the final answer.
///
/// Every marker is drawn fresh over the original image from points found
/// for the extracted anchor (and a mask, for shapes that need one). The
/// images are written through `store`. Reflections are filled in later by
/// [`convert_chain`].
pub fn build_chain(
    record: &DialogueRecord,
    cfg: &PipelineConfig,
    prompts: &PromptTemplates,
    backends: &Backends,
    store: &ImageStore,
) -> Result<ChainOutcome, PipelineError> {
    if let FilterDecision::Reject(reason) = filter_dialogue(record) {
        return Err(PipelineError::Precondition(format!(
            "record {} did not pass the filter ({})",
            record.source.id,
            reason.as_str()
        )));
    }
    let n = record.turns.len();
    if n == 1 {
        return Ok(fail(record.clone(), FailReason::SingleTurn));
    }
    if n > cfg.max_chain_rounds {
        return Ok(fail(record.clone(), FailReason::RoundBudget));
    }

    let bytes = store.load(&record.source.image)?;
    let base = Arc::new(decode_image(&bytes).map_err(|e| PipelineError::Image {
        reference: record.source.image.clone(),
        reason: e.to_string(),
    })?);
    let base_png = encode_png(&base).map_err(|e| PipelineError::Image {
        reference: record.source.image.clone(),
        reason: e.to_string(),
    })?;

    let mut rounds = Vec::with_capacity(n);
    for (k, turn) in record.turns[..n - 1].iter().enumerate() {
        let anchor = match extract_keywords(record, k, cfg, prompts, backends.chat.as_ref()) {
            Ok(a) => a,
            Err(PipelineError::EmptyAnchor) => return Ok(fail(record.clone(), FailReason::EmptyAnchor)),
            Err(e) => return Err(e),
        };
        let color = cfg.marker_colors[k % cfg.marker_colors.len()];
        let call = ToolCall::verify(anchor.clone(), color, cfg.marker_shape);
        let points = ground(backends.grounder.as_ref(), &base_png, &anchor)?;
        if points.is_empty() {
            return Ok(fail(record.clone(), FailReason::GroundingEmpty));
        }
        let mask = if cfg.marker_shape.wants_mask() {
            match segment(backends.segmenter.as_ref(), &base_png, &points) {
                Ok(seg) => Some(seg.mask),
                Err(BackendError::EmptyMask) => return Ok(fail(record.clone(), FailReason::GroundingEmpty)),
                Err(e) => return Err(e.into()),
            }
        } else {
            None
        };
        let round_index = k as u32 + 1;
        let ctx = compose_visual_context(
            &base,
            &call,
            &points,
            mask.as_ref(),
            round_index,
            OverlayMode::Fresh,
            None,
            &cfg.render,
        )?;
        let png = encode_png(&ctx.rendered).map_err(|e| PipelineError::Image {
            reference: record.source.id.clone(),
            reason: e.to_string(),
        })?;
        let image = store.save(&format!("{}_r{round_index}.png", record.source.id), &png)?;
        rounds.push(ChainRound {
            answer: turn.student_response.clone(),
            feedback: turn.teacher_feedback.clone(),
            score: turn.score,
            reflection: String::new(),
            tool_call: call,
            image: Some(image),
            points,
            mask,
        });
    }
    let last = &record.turns[n - 1];
    let last_color = rounds.last().map_or(cfg.marker_colors[0], |r| r.tool_call.color);
    rounds.push(ChainRound {
        answer: last.student_response.clone(),
        feedback: last.teacher_feedback.clone(),
        score: last.score,
        reflection: prompts.validation_reflection.clone(),
        tool_call: ToolCall::validate_answer(last_color, cfg.marker_shape),
        image: None,
        points: Vec::new(),
        mask: None,
    });
    Ok(ChainOutcome::Chain(ReflectiveChain {
        source: record.source.clone(),
        rounds,
        final_answer: last.student_response.clone(),
        stage: ChainStage::Grounded,
    }))
}

/// Writes the first-person reflection for every marker round and adds the
/// marker phrase to it.
pub fn convert_chain(
    mut chain: ReflectiveChain,
    cfg: &PipelineConfig,
    prompts: &PromptTemplates,
    backend: &dyn ChatBackend,
) -> Result<ChainOutcome, PipelineError> {
    if chain.stage != ChainStage::Grounded {
        return Err(PipelineError::Precondition(format!("chain {} is not at the grounded stage", chain.source.id)));
    }
    for i in 0..chain.rounds.len() {
        if chain.rounds[i].image.is_none() {
            continue;
        }
        let reflection = match convert_to_self_reflection(&chain.rounds[i].feedback, backend, prompts, cfg.conversion_retries) {
            Ok(r) => r,
            Err(PipelineError::ConversionRejected { .. }) => {
                return Ok(fail(chain.to_dialogue(), FailReason::ConversionRejected));
            }
            Err(e) => return Err(e),
        };
        let round = &mut chain.rounds[i];
        round.reflection =
            inject_visual_caption(&reflection, round.tool_call.color, round.tool_call.shape, &prompts.attribute_phrase);
    }
    chain.stage = ChainStage::Converted;
    Ok(ChainOutcome::Chain(chain))
}

/// True when the judge finds every marker image consistent with its
/// round's reflection.
pub fn verify_chain(chain: &ReflectiveChain, judge: &dyn Judge, store: &ImageStore) -> Result<bool, PipelineError> {
    if chain.marker_rounds().next().is_none() {
        return Err(PipelineError::Precondition(format!("chain {} has no marker images", chain.source.id)));
    }
    for round in chain.marker_rounds() {
        let png = store.load(round.image.as_deref().unwrap_or_default())?;
        if !judge_consistency(judge, &png, &round.reflection)?.verdict {
            return Ok(false);
        }
    }
    Ok(true)
}

/// The verify stage: a passing chain is marked verified, a failing one is
/// routed to the failed pool.
pub fn verify_stage(mut chain: ReflectiveChain, judge: &dyn Judge, store: &ImageStore) -> Result<ChainOutcome, PipelineError> {
    if chain.stage != ChainStage::Converted {
        return Err(PipelineError::Precondition(format!("chain {} is not at the converted stage", chain.source.id)));
    }
    if verify_chain(&chain, judge, store)? {
        chain.stage = ChainStage::Verified;
        Ok(ChainOutcome::Chain(chain))
    } else {
        Ok(fail(chain.to_dialogue(), FailReason::VerificationFailed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ScriptedChat;
    use crate::dataset::{DialogueTurn, Domain, SourceSample};

    fn record(domain: Domain, gt: &str) -> DialogueRecord {
        DialogueRecord {
            source: SourceSample {
                id: "r1".into(),
                image: "img.png".into(),
                question: "What city is labelled?".into(),
                ground_truth: gt.into(),
                domain,
            },
            turns: vec![
                DialogueTurn { student_response: "Lyon".into(), teacher_feedback: "Your answer misses the label near the top.".into(), score: 3 },
                DialogueTurn { student_response: gt.into(), teacher_feedback: String::new(), score: 10 },
            ],
            gt_aligned: true,
            incomplete: false,
            error: None,
        }
    }

    #[test]
    fn dense_anchor_keeps_ground_truth() {
        let cfg = PipelineConfig::default();
        let p = PromptTemplates::default();
        let chat = ScriptedChat::new(["capital label", "\"Paris label\"."]);
        let r = record(Domain::Chart, "Paris");
        assert_eq!(extract_keywords(&r, 0, &cfg, &p, &chat).unwrap(), "capital label Paris");
        assert_eq!(extract_keywords(&r, 0, &cfg, &p, &chat).unwrap(), "Paris label");
        assert!(chat.requests()[0][0].text.contains("Answer: Paris"));
    }

    #[test]
    fn general_anchor_uses_two_steps() {
        let cfg = PipelineConfig::default();
        let p = PromptTemplates::default();
        let chat = ScriptedChat::new(["- cylinder\n- green object", "green cylinder"]);
        let r = record(Domain::GeneralQa, "3");
        assert_eq!(extract_keywords(&r, 0, &cfg, &p, &chat).unwrap(), "green cylinder");
        assert!(chat.requests()[1][0].text.contains("cylinder\ngreen object"));

        let chat = ScriptedChat::new(["  \n ", "x"]);
        assert!(matches!(extract_keywords(&r, 0, &cfg, &p, &chat), Err(PipelineError::EmptyAnchor)));
        let chat = ScriptedChat::new(["cup", "   "]);
        assert!(matches!(extract_keywords(&r, 0, &cfg, &p, &chat), Err(PipelineError::EmptyAnchor)));
        // The last turn has no correction.
        assert!(matches!(extract_keywords(&r, 1, &cfg, &p, &chat), Err(PipelineError::Precondition(_))));
    }

    #[test]
    fn caption_examples() {
        let t = PromptTemplates::default().attribute_phrase;
        let once = inject_visual_caption("I missed the cup.", MarkerColor::Red, MarkerShape::Point, &t);
        assert_eq!(once, "I missed the cup, as indicated by the red point.");
        assert_eq!(inject_visual_caption(&once, MarkerColor::Red, MarkerShape::Point, &t), once);
        let blue = inject_visual_caption("There is more. Look", MarkerColor::Blue, MarkerShape::Circle, &t);
        assert_eq!(blue, "There is more, as indicated by the blue circle. Look");
        assert_eq!(
            inject_visual_caption("No stop here", MarkerColor::Cyan, MarkerShape::Box, &t),
            "No stop here, as indicated by the cyan box"
        );
        assert_eq!(
            inject_visual_caption("It was wrong... really.", MarkerColor::Red, MarkerShape::Mask, &t),
            "It was wrong, as indicated by the red mask... really."
        );
        assert_eq!(
            inject_visual_caption("Version 2.5 is shown.", MarkerColor::Red, MarkerShape::Point, &t),
            "Version 2.5 is shown, as indicated by the red point."
        );
    }

    #[test]
    fn second_person_guard() {
        assert!(is_second_person("No, your answer is incorrect."));
        assert!(is_second_person("You're close"));
        assert!(!is_second_person("I think my response is wrong."));
        assert!(!is_second_person("The sign reads \"thank you\"."));
        assert!(!is_second_person("The youth holds a bayou map."));
    }

    #[test]
    fn conversion_examples() {
        let p = PromptTemplates::default();
        let fb = "No, your answer is incorrect. Look at the left side.";
        let good = "Wait, upon closer inspection, I realize my previous answer was incorrect.";
        let chat = ScriptedChat::new([good]);
        assert_eq!(convert_to_self_reflection(fb, &chat, &p, 1).unwrap(), good);

        let echo = ScriptedChat::new([fb, fb]);
        assert!(matches!(
            convert_to_self_reflection(fb, &echo, &p, 1),
            Err(PipelineError::ConversionRejected { attempts: 2 })
        ));
        assert_eq!(echo.calls(), 2);

        let retry = ScriptedChat::new([fb, good]);
        assert_eq!(convert_to_self_reflection(fb, &retry, &p, 1).unwrap(), good);

        let first_person = "I should recount the cylinders.";
        let same = ScriptedChat::new([first_person]);
        assert_eq!(convert_to_self_reflection(first_person, &same, &p, 0).unwrap(), first_person);
    }
}
