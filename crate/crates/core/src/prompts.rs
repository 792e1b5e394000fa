//! Prompt templates used by the loop, the judge and the dataset pipeline.
//!
//! Templates use `{name}` placeholders. Every template can be overridden
//! from the `[prompts]` table of the config file.

use serde::{Deserialize, Serialize};

/// Substitutes `{key}` placeholders. Unknown placeholders are left as-is.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let key = &after[..close];
                match vars.iter().find(|(k, _)| *k == key) {
                    Some((_, v)) => out.push_str(v),
                    None => {
                        out.push('{');
                        out.push_str(key);
                        out.push('}');
                    }
                }
                rest = &after[close + 1..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplates {
    /// System prompt for the reflective reasoning loop.
    pub loop_system: String,
    /// Tool message after a successful render. Vars: color, shape, anchor, count.
    pub loop_tool_status: String,
    /// Tool message when grounding found nothing. Vars: anchor.
    pub loop_grounding_failed: String,
    /// Tool message after an output that does not follow the grammar. Vars: reason.
    pub loop_format_error: String,

    pub student_system: String,
    /// Vars: question.
    pub student_first: String,
    /// Vars: feedback.
    pub student_retry: String,
    /// Vars: question, ground_truth, response.
    pub teacher: String,

    /// Vars: question, candidate, ground_truth.
    pub judge_score: String,
    /// Vars: reflection.
    pub judge_consistency: String,
    /// Vars: question, answer, ground_truth.
    pub judge_alignment: String,
    /// Vars: sample.
    pub judge_quality: String,

    /// Dense domains. Vars: question, ground_truth.
    pub subject_extraction: String,
    /// General QA, step one. Vars: feedback.
    pub object_identification: String,
    /// General QA, step two. Vars: objects.
    pub caption_merge: String,
    /// Phrase inserted into reflections. Vars: color, shape.
    pub attribute_phrase: String,
    /// Vars: feedback.
    pub self_reflection: String,
    /// Reflection for the last round of a chain, where the answer stands.
    pub validation_reflection: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            loop_system: "You answer questions about an image and then check your own answer.\n\
Reply with your answer first. Then write a self-check inside <reflection></reflection>.\n\
If the self-check finds something that needs to be re-examined in the image, finish with\n\
<tool_call>{\"name\":\"Visual Prompt Generator\",\"flag\":true,\"anchor\":\"<what to look at>\",\"args\":{\"color\":\"<color>\",\"shape\":\"<shape>\"}}</tool_call>\n\
where color is one of red, green, blue, yellow, cyan, magenta, purple, orange and shape is one of point, circle, ellipse, box, mask.\n\
The marked image will be returned to you. When the self-check confirms the answer, emit the same tool call with \"flag\":false and an empty anchor."
                .into(),
            loop_tool_status: "Marked {count} region(s) for \"{anchor}\" with a {color} {shape}. Re-check your answer against the marked image.".into(),
            loop_grounding_failed: "no region found for: {anchor}".into(),
            loop_format_error: "Your last reply did not follow the output format ({reason}). Reply again using the format.".into(),

            student_system: "You are a student answering questions about an image. Give a short answer.".into(),
            student_first: "{question}".into(),
            student_retry: "Your teacher says: {feedback}\nAnswer the question again.".into(),
            teacher: "You are a teacher. Question: {question}\nReference answer: {ground_truth}\nStudent answer: {response}\n\
Give brief feedback that helps the student find the mistake without revealing the reference answer."
                .into(),

            judge_score: "Question: {question}\nReference answer: {ground_truth}\nCandidate answer: {candidate}\n\
Rate the candidate from 0 to 10, where 10 means fully correct. Reply with the number first, then a one-sentence rationale."
                .into(),
            judge_consistency: "The image contains drawn markers. Text: {reflection}\n\
Do the markers highlight the entities the text refers to? Reply yes or no first, then a one-sentence rationale."
                .into(),
            judge_alignment: "Question: {question}\nReference answer: {ground_truth}\nFinal answer: {answer}\n\
Is the final answer semantically consistent with the reference? Reply yes or no first, then a one-sentence rationale."
                .into(),
            judge_quality: "Rate this reasoning trajectory on two axes from 1 to 5.\n{sample}\n\
Reply as `logic: <n> visual: <n>` where logic is logical coherence and visual is the validity of the visual evidence."
                .into(),

            subject_extraction: "Question: {question}\nAnswer: {ground_truth}\n\
List the core subject of the question with its key modifiers as a short noun phrase that names where the answer appears. Reply with the phrase only."
                .into(),
            object_identification: "Feedback: {feedback}\nList the physical objects this feedback refers to, one per line.".into(),
            caption_merge: "Objects:\n{objects}\nMerge these into one short descriptive caption. Reply with the caption only.".into(),
            attribute_phrase: "as indicated by the {color} {shape}".into(),
            self_reflection: "Rewrite the following feedback as the first-person thoughts of the person who gave the answer, \
as if they noticed the problem themselves. Do not address anyone as \"you\".\nFeedback: {feedback}"
                .into(),
            validation_reflection: "Checking the image again, the evidence supports my answer.".into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fills_known_placeholders_only() {
        assert_eq!(fill("a {x} b {y} {z}", &[("x", "1"), ("y", "2")]), "a 1 b 2 {z}");
        assert_eq!(fill("json {\"k\": 1", &[]), "json {\"k\": 1");
        assert_eq!(fill("{x}{x}", &[("x", "ab")]), "abab");
    }

    #[test]
    fn values_are_not_rescanned() {
        assert_eq!(fill("{a}", &[("a", "{b}"), ("b", "no")]), "{b}");
    }
}
