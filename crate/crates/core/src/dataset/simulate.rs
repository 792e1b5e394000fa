use thiserror::Error;

use super::{DialogueRecord, DialogueTurn, PipelineError, SourceSample};
use crate::backends::{chat, judge_alignment, judge_score, Backends, ChatMessage, ImageAttachment, Role};
use crate::prompts::{fill, PromptTemplates};

/// A simulation cut short. `partial` holds the turns completed so far and
/// is marked incomplete.
#[derive(Debug, Error)]
#[error("dialogue {} stopped after {} turn(s): {source}", partial.source.id, partial.turns.len())]
pub struct SimulationError {
    pub partial: Box<DialogueRecord>,
    pub source: PipelineError,
}

/// Runs a student/teacher exchange until the student scores 10 or
/// `max_teacher_rounds` answers have been given.
///
/// Each turn the student answers (seeing the image, the question and all
/// feedback so far), the judge scores the answer against the ground truth,
/// and the teacher writes feedback for anything short of a perfect score.
/// The final answer is then checked for agreement with the ground truth.
pub fn simulate_dialogue(
    source: &SourceSample,
    image_png: &[u8],
    backends: &Backends,
    prompts: &PromptTemplates,
    max_teacher_rounds: u32,
) -> Result<DialogueRecord, SimulationError> {
    let mut record = DialogueRecord {
        source: source.clone(),
        turns: Vec::new(),
        gt_aligned: false,
        incomplete: false,
        error: None,
    };
    match run(&mut record, image_png, backends, prompts, max_teacher_rounds) {
        Ok(()) => Ok(record),
        Err(e) => {
            record.incomplete = true;
            record.error = Some(e.to_string());
            Err(SimulationError { partial: Box::new(record), source: e })
        }
    }
}

fn run(
    record: &mut DialogueRecord,
    image_png: &[u8],
    backends: &Backends,
    prompts: &PromptTemplates,
    max_rounds: u32,
) -> Result<(), PipelineError> {
    record.source.check()?;
    if max_rounds == 0 {
        return Err(PipelineError::Precondition("max_teacher_rounds must be at least 1".into()));
    }
    let s = record.source.clone();
    let mut history = vec![
        ChatMessage::text(Role::System, prompts.student_system.clone()),
        ChatMessage::with_image(
            Role::User,
            fill(&prompts.student_first, &[("question", &s.question)]),
            ImageAttachment::new(image_png.to_vec()),
        ),
    ];
    for _ in 0..max_rounds {
        let response = chat(backends.chat.as_ref(), &history)?.text.trim().to_string();
        let score = judge_score(backends.judge.as_ref(), &s.question, &response, &s.ground_truth)?.score;
        let feedback = if score < 10 {
            let prompt = fill(
                &prompts.teacher,
                &[("question", &s.question), ("ground_truth", &s.ground_truth), ("response", &response)],
            );
            chat(backends.chat.as_ref(), &[ChatMessage::text(Role::User, prompt)])?.text.trim().to_string()
        } else {
            String::new()
        };
        history.push(ChatMessage::text(Role::Assistant, response.clone()));
        history.push(ChatMessage::text(Role::User, fill(&prompts.student_retry, &[("feedback", &feedback)])));
        record.turns.push(DialogueTurn { student_response: response, teacher_feedback: feedback, score });
        if score == 10 {
            break;
        }
    }
    let last = &record.turns[record.turns.len() - 1].student_response;
    record.gt_aligned = judge_alignment(backends.judge.as_ref(), &s.question, last, &s.ground_truth)?.verdict;
    Ok(())
}
