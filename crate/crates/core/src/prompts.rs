//! Instruction/input/response prompt layout shared by generation, label
//! scoring and the exported training files.

use crate::model::Conversation;
use crate::segmenter::ContextWindow;

/// Task directive carried by every feedback prompt and SFT record.
pub const FEEDBACK_INSTRUCTION: &str = "You are supervising a peer counselor. Read the conversation context and \
the helper's latest response. Decide whether the response is appropriate. If it is not, state the goal of this \
part of the conversation and how the response should align with it, list the skill categories to improve, and \
suggest an alternative goal-aligned response. Optionally list the categories the helper did well.";

const PREAMBLE: &str = "Below is an instruction that describes a task, paired with an input that provides further \
context. Write a response that appropriately completes the request.";

/// Input block for one helper utterance: its context window followed by
/// the response under assessment.
pub fn render_input(conv: &Conversation, window: &ContextWindow, response_text: &str) -> String {
    let context = conv.render(window.range());
    let context = if context.is_empty() { "(none)\n".to_string() } else { context };
    format!("Context:\n{context}\nHelper response: {response_text}")
}

pub fn instruction_prompt(instruction: &str, input: &str) -> String {
    format!("{PREAMBLE}\n\n### Instruction:\n{instruction}\n\n### Input:\n{input}\n\n### Response:\n")
}

pub fn feedback_prompt(input: &str) -> String {
    instruction_prompt(FEEDBACK_INSTRUCTION, input)
}

/// Feedback prompt with the response primed at the label field, so the
/// next token is the appropriateness label.
pub fn label_prompt(input: &str) -> String {
    let mut p = feedback_prompt(input);
    p.push_str("appropriate:");
    p
}
