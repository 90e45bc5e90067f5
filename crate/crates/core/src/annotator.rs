//! Chunked model pre-annotation of helper utterances.
//!
//! Helper utterances are requested in overlapping windows of five with a
//! stride of three. The first window keeps all of its records; later
//! windows drop the first two, whose context lies mostly outside the
//! window.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{parse_valid_blocks, Gateway, GatewayError, RequestKey};
use crate::grammar::{BLOCK_HEADER, FORMAT_DESCRIPTION};
use crate::model::{AnnotatedConversation, Conversation, Feedback, SkillCategory, Speaker};
use crate::segmenter::{context_for, Segmentation};

pub const WINDOW: usize = 5;
pub const STRIDE: usize = 3;
pub const DISCARD: usize = 2;

/// Template placeholders; each must appear at least once.
pub const PLACEHOLDERS: [&str; 5] = ["taxonomy", "examples", "context", "conversation", "format"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnnotateError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("template is missing placeholder {{{0}}}")]
    MissingPlaceholder(String),
    #[error("utterance {index} received feedback from chunks {first} and {second}")]
    MergeConflict { index: usize, first: usize, second: usize },
    #[error("chunk {chunk} (utterances {first_index}..={last_index}): {source}")]
    Chunk { chunk: usize, first_index: usize, last_index: usize, source: GatewayError },
}

/// One request window. Both lists hold utterance indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub window: Vec<usize>,
    pub kept: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub chunks: Vec<Chunk>,
}

pub fn plan_chunks(helper_indices: &[usize]) -> Result<ChunkPlan, AnnotateError> {
    if helper_indices.is_empty() {
        return Err(AnnotateError::Precondition("no helper utterances to plan".into()));
    }
    if helper_indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AnnotateError::Precondition("helper indices must be strictly increasing".into()));
    }
    let h = helper_indices.len();
    let mut chunks = Vec::new();
    let mut start = 0;
    let mut covered = 0;
    while covered < h {
        let end = (start + WINDOW).min(h);
        let keep_from = if start == 0 { 0 } else { start + DISCARD };
        chunks.push(Chunk {
            window: helper_indices[start..end].to_vec(),
            kept: helper_indices[keep_from..end].to_vec(),
        });
        covered = end;
        start += STRIDE;
    }
    Ok(ChunkPlan { chunks })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkillEntry {
    pub name: SkillCategory,
    pub definition: String,
    pub example_mistakes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkillCatalog {
    pub categories: Vec<SkillEntry>,
}

const SKILLS_JSON: &str = include_str!("../data/skills.json");

impl SkillCatalog {
    pub fn bundled() -> Self {
        serde_json::from_str(SKILLS_JSON).expect("bundled skills catalog is valid")
    }

    /// Taxonomy text for prompts.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.categories {
            out.push_str(&format!("- {}: {}\n", e.name, e.definition));
            if !e.example_mistakes.is_empty() {
                out.push_str(&format!("  Common mistakes: {}.\n", e.example_mistakes.join("; ")));
            }
        }
        out
    }
}

/// Output format instructions for a chunk covering `targets`.
pub fn chunk_format(targets: &[usize]) -> String {
    let list = targets.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ");
    format!(
        "Give one block per helper utterance marked with [index], for indices {list}. \
Start each block with a line \"{BLOCK_HEADER}<index>\" and follow it with the record.\n{FORMAT_DESCRIPTION}"
    )
}

/// Substitutes `{name}` placeholders in one pass; substituted text is
/// never rescanned. Unknown braces are left as they are.
fn substitute(template: &str, values: &BTreeMap<&str, String>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}').and_then(|close| values.get(&after[..close]).map(|v| (close, v))) {
            Some((close, v)) => {
                out.push_str(v);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Fills a prompt template for one chunk. `span` holds the utterances from
/// the first to the last target; targets are the helper utterances in it.
pub fn assemble_prompt(
    template: &str,
    catalog: &SkillCatalog,
    examples: &str,
    context: &str,
    span: &[crate::model::Utterance],
) -> Result<String, AnnotateError> {
    for p in PLACEHOLDERS {
        if !template.contains(&format!("{{{p}}}")) {
            return Err(AnnotateError::MissingPlaceholder(p.to_string()));
        }
    }
    let targets: Vec<usize> = span.iter().filter(|u| u.speaker == Speaker::Helper).map(|u| u.index).collect();
    if targets.is_empty() {
        return Err(AnnotateError::Precondition("chunk has no helper utterances".into()));
    }
    let mut conversation = String::new();
    for u in span {
        if u.speaker == Speaker::Helper {
            conversation.push_str(&format!("[{}] ", u.index));
        }
        conversation.push_str(&format!("{}: {}\n", u.speaker.label(), u.text));
    }
    let context = if context.is_empty() { "(none)\n".to_string() } else { context.to_string() };
    let values = BTreeMap::from([
        ("taxonomy", catalog.render()),
        ("examples", examples.to_string()),
        ("context", context),
        ("conversation", conversation),
        ("format", chunk_format(&targets)),
    ]);
    Ok(substitute(template, &values))
}

/// Template, catalog and in-context examples used for every chunk.
#[derive(Debug, Clone)]
pub struct AnnotatorConfig {
    pub template: String,
    pub catalog: SkillCatalog,
    pub examples: String,
}

/// Result of annotating one conversation. On failure `annotated` holds the
/// records from chunks that succeeded.
#[derive(Debug, Clone)]
pub struct AnnotationOutcome {
    pub annotated: AnnotatedConversation,
    pub failures: Vec<AnnotateError>,
}

impl AnnotationOutcome {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Annotates every helper utterance of `conv` chunk by chunk. A failed
/// chunk is recorded and the remaining chunks still run.
pub fn annotate_conversation(
    conv: &Conversation,
    seg: &Segmentation,
    cfg: &AnnotatorConfig,
    gateway: &Gateway,
) -> Result<AnnotationOutcome, AnnotateError> {
    seg.validate(conv.len()).map_err(|e| AnnotateError::Precondition(e.to_string()))?;
    let helpers = conv.helper_indices();
    if helpers.is_empty() {
        return Ok(AnnotationOutcome { annotated: AnnotatedConversation::unannotated(conv.clone()), failures: vec![] });
    }
    let plan = plan_chunks(&helpers)?;
    let mut merged: BTreeMap<usize, (usize, Feedback)> = BTreeMap::new();
    let mut failures = Vec::new();
    for (k, chunk) in plan.chunks.iter().enumerate() {
        let first = chunk.window[0];
        let last = *chunk.window.last().expect("non-empty window");
        let context = conv.render(context_for(first, seg).range());
        let prompt = assemble_prompt(&cfg.template, &cfg.catalog, &cfg.examples, &context, &conv.utterances[first..=last])?;
        let key = RequestKey::chunk(&conv.id, k, first, &context);
        match gateway.generate_with(&key, &prompt, 0, &chunk.window, |t| parse_valid_blocks(t, &chunk.window)) {
            Ok(mut blocks) => {
                for &i in &chunk.kept {
                    let fb = blocks.remove(&i).expect("parse_valid_blocks checked every target");
                    if let Some((prev, _)) = merged.get(&i) {
                        return Err(AnnotateError::MergeConflict { index: i, first: *prev, second: k });
                    }
                    merged.insert(i, (k, fb));
                }
            }
            Err(source) => {
                tracing::warn!(conversation = %conv.id, chunk = k, error = %source, "chunk failed");
                failures.push(AnnotateError::Chunk { chunk: k, first_index: first, last_index: last, source });
            }
        }
    }
    let annotated = AnnotatedConversation {
        conversation: conv.clone(),
        feedback: merged.into_iter().map(|(i, (_, fb))| (i, fb)).collect(),
    };
    Ok(AnnotationOutcome { annotated, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::{GenerationEntry, MockBackend, MockFailure, MockResponse, MockScript};
    use crate::gateway::BackendProfile;
    use std::sync::Arc;

    const TEMPLATE: &str = "T:\n{taxonomy}\nE:\n{examples}\nC:\n{context}\nD:\n{conversation}\nF:\n{format}";

    fn positions(plan: &ChunkPlan) -> Vec<(Vec<usize>, Vec<usize>)> {
        plan.chunks.iter().map(|c| (c.window.clone(), c.kept.clone())).collect()
    }

    #[test]
    fn nine_helpers() {
        let idx: Vec<usize> = (1..=9).collect();
        let plan = plan_chunks(&idx).unwrap();
        assert_eq!(
            positions(&plan),
            vec![
                (vec![1, 2, 3, 4, 5], vec![1, 2, 3, 4, 5]),
                (vec![4, 5, 6, 7, 8], vec![6, 7, 8]),
                (vec![7, 8, 9], vec![9]),
            ]
        );
    }

    #[test]
    fn small_plans() {
        assert_eq!(positions(&plan_chunks(&[7]).unwrap()), vec![(vec![7], vec![7])]);
        let five = plan_chunks(&[1, 3, 5, 7, 9]).unwrap();
        assert_eq!(five.chunks.len(), 1);
        assert_eq!(five.chunks[0].kept, vec![1, 3, 5, 7, 9]);
        assert!(plan_chunks(&[]).is_err());
        assert!(plan_chunks(&[2, 2]).is_err());
    }

    #[test]
    fn catalog_has_every_category_once() {
        let c = SkillCatalog::bundled();
        let names: Vec<_> = c.categories.iter().map(|e| e.name).collect();
        assert_eq!(names, SkillCategory::ALL.to_vec());
        assert!(c.categories.iter().all(|e| !e.definition.is_empty() && !e.example_mistakes.is_empty()));
    }

    fn conv(n_helpers: usize) -> Conversation {
        let mut turns = Vec::new();
        for k in 0..n_helpers {
            turns.push((Speaker::Seeker, format!("seeker line {k}.")));
            turns.push((Speaker::Helper, format!("helper line {k}?")));
        }
        Conversation::from_turns("c1", "t", turns)
    }

    #[test]
    fn prompt_is_stable_and_checked() {
        let c = conv(3);
        let cat = SkillCatalog::bundled();
        let a = assemble_prompt(TEMPLATE, &cat, "ex", "Seeker: hi\n", &c.utterances[1..=5]).unwrap();
        let b = assemble_prompt(TEMPLATE, &cat, "ex", "Seeker: hi\n", &c.utterances[1..=5]).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("[1] Helper: helper line 0?\nSeeker: seeker line 1.\n[3] Helper"));
        assert!(a.contains("for indices 1, 3, 5."));
        let missing = TEMPLATE.replace("{format}", "");
        assert_eq!(
            assemble_prompt(&missing, &cat, "", "", &c.utterances[1..2]),
            Err(AnnotateError::MissingPlaceholder("format".into()))
        );
        assert!(matches!(assemble_prompt(TEMPLATE, &cat, "", "", &[]), Err(AnnotateError::Precondition(_))));
        assert!(matches!(
            assemble_prompt(TEMPLATE, &cat, "", "", &c.utterances[0..1]),
            Err(AnnotateError::Precondition(_))
        ));
    }

    #[test]
    fn substituted_text_is_not_rescanned() {
        let values = BTreeMap::from([("a", "{b}".to_string()), ("b", "x".to_string())]);
        assert_eq!(substitute("{a}-{b}-{c}", &values), "{b}-x-{c}");
    }

    fn cfg() -> AnnotatorConfig {
        AnnotatorConfig { template: TEMPLATE.into(), catalog: SkillCatalog::bundled(), examples: String::new() }
    }

    fn gateway(script: MockScript) -> Gateway {
        let profile = BackendProfile { backoff_ms: 0, retries: 1, ..BackendProfile::default() };
        Gateway::new(Arc::new(MockBackend::new(script, 16)), profile).unwrap()
    }

    #[test]
    fn every_helper_gets_one_record() {
        let c = conv(9);
        let out = annotate_conversation(&c, &Segmentation::single(), &cfg(), &gateway(MockScript::default())).unwrap();
        assert!(out.is_complete());
        assert_eq!(out.annotated.feedback.keys().copied().collect::<Vec<_>>(), c.helper_indices());
        out.annotated.validate().unwrap();
        let again = annotate_conversation(&c, &Segmentation::single(), &cfg(), &gateway(MockScript::default())).unwrap();
        assert_eq!(out.annotated, again.annotated);
    }

    #[test]
    fn failed_chunk_is_reported_and_others_kept() {
        let c = conv(9);
        let script = MockScript {
            generations: vec![GenerationEntry {
                chunk: Some(1),
                responses: Some(vec![MockResponse::Error(MockFailure::Unavailable)]),
                ..Default::default()
            }],
            ..Default::default()
        };
        let out = annotate_conversation(&c, &Segmentation::single(), &cfg(), &gateway(script)).unwrap();
        assert_eq!(out.failures.len(), 1);
        assert!(matches!(out.failures[0], AnnotateError::Chunk { chunk: 1, first_index: 7, last_index: 15, .. }));
        let helpers = c.helper_indices();
        let expected: Vec<usize> = helpers[..5].iter().chain(&helpers[8..]).copied().collect();
        assert_eq!(out.annotated.feedback.keys().copied().collect::<Vec<_>>(), expected);
    }

    #[test]
    fn no_helpers_gives_empty_map() {
        let c = Conversation::from_turns("s", "", [(Speaker::Seeker, "alone")]);
        let out = annotate_conversation(&c, &Segmentation::single(), &cfg(), &gateway(MockScript::default())).unwrap();
        assert!(out.annotated.feedback.is_empty() && out.is_complete());
    }
}
