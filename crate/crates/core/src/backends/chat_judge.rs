use std::sync::Arc;

use serde_json::Value;

use super::{BackendError, ChatBackend, ChatMessage, ImageAttachment, Judge, RawQuality, RawVerdict, Role};
use crate::prompts::{fill, PromptTemplates};

/// A judge that asks a chat model, using the judge prompt templates. The
/// reply text is handed back verbatim and parsed by the `judge_*`
/// functions like any other verdict.
pub struct ChatJudge {
    chat: Arc<dyn ChatBackend>,
    prompts: PromptTemplates,
}

impl ChatJudge {
    pub fn new(chat: Arc<dyn ChatBackend>, prompts: PromptTemplates) -> Self {
        ChatJudge { chat, prompts }
    }

    fn ask(&self, prompt: String, image: Option<&[u8]>) -> Result<String, BackendError> {
        let message = match image {
            Some(png) => ChatMessage::with_image(Role::User, prompt, ImageAttachment::new(png.to_vec())),
            None => ChatMessage::text(Role::User, prompt),
        };
        Ok(self.chat.complete(&[message])?.text)
    }

    fn verdict(&self, prompt: String, image: Option<&[u8]>) -> Result<RawVerdict, BackendError> {
        let text = self.ask(prompt, image)?;
        Ok(RawVerdict { verdict: Value::String(text.clone()), rationale: text })
    }
}

/// Text following `label` up to the next label or end of line.
fn labelled(text: &str, label: &str) -> Value {
    let lower = text.to_ascii_lowercase();
    match lower.find(label) {
        Some(i) => Value::String(text[i + label.len()..].chars().take(16).collect()),
        None => Value::Null,
    }
}

impl Judge for ChatJudge {
    fn score(&self, question: &str, candidate: &str, ground_truth: &str) -> Result<RawVerdict, BackendError> {
        let prompt = fill(
            &self.prompts.judge_score,
            &[("question", question), ("candidate", candidate), ("ground_truth", ground_truth)],
        );
        self.verdict(prompt, None)
    }

    fn consistency(&self, marked_png: &[u8], reflection: &str) -> Result<RawVerdict, BackendError> {
        let prompt = fill(&self.prompts.judge_consistency, &[("reflection", reflection)]);
        self.verdict(prompt, Some(marked_png))
    }

    fn alignment(&self, question: &str, answer: &str, ground_truth: &str) -> Result<RawVerdict, BackendError> {
        let prompt = fill(
            &self.prompts.judge_alignment,
            &[("question", question), ("answer", answer), ("ground_truth", ground_truth)],
        );
        self.verdict(prompt, None)
    }

    fn quality(&self, sample: &str, image_png: Option<&[u8]>) -> Result<RawQuality, BackendError> {
        let prompt = fill(&self.prompts.judge_quality, &[("sample", sample)]);
        let text = self.ask(prompt, image_png)?;
        Ok(RawQuality { logic: labelled(&text, "logic"), visual: labelled(&text, "visual"), rationale: text })
    }
}
