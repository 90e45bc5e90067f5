//! Self-scoring by substitution, preference pairs and training-file export.
//!
//! A feedback generation is scored by substituting its alternative for the
//! helper's original response and asking the model how likely it is to
//! label the result appropriate. Generations that endorse the original
//! response are scored on the original.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError, RequestKey};
use crate::grammar::serialize_feedback;
use crate::model::{ensure_valid, AnnotatedConversation, Conversation, Feedback, InvalidFeedback, Speaker};
use crate::prompts::{feedback_prompt, render_input, FEEDBACK_INSTRUCTION};
use crate::segmenter::{context_for, Segmentation};

/// Probability at or above which the original response counts as
/// appropriate and no pair is built.
pub const GATE: f64 = 0.5;
pub const DEFAULT_SAMPLES: usize = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelfImproveError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("conversation {id:?}: utterance {index} is not a helper utterance")]
    NotHelperUtterance { id: String, index: usize },
    #[error(transparent)]
    InvalidFeedback(#[from] InvalidFeedback),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{id:?} utterance {index}: {reason}")]
    InvalidPair { id: String, index: usize, reason: String },
    #[error("{id:?} utterance {index}: sample {sample} has no score")]
    MissingScores { id: String, index: usize, sample: usize },
    #[error("{id:?} utterance {index}: no generations")]
    EmptyGenerations { id: String, index: usize },
    #[error("no segmentation for conversation {0:?}")]
    MissingSegmentation(String),
}

fn check_helper(conv: &Conversation, i: usize) -> Result<(), SelfImproveError> {
    match conv.utterances.get(i) {
        Some(u) if u.speaker == Speaker::Helper => Ok(()),
        _ => Err(SelfImproveError::NotHelperUtterance { id: conv.id.clone(), index: i }),
    }
}

/// Copy of `conv` with utterance `i` replaced by `alternative` (trimmed).
pub fn substitute(conv: &Conversation, i: usize, alternative: &str) -> Result<Conversation, SelfImproveError> {
    check_helper(conv, i)?;
    let text = alternative.trim();
    if text.is_empty() {
        return Err(SelfImproveError::Precondition("alternative must be non-empty".into()));
    }
    let mut out = conv.clone();
    out.utterances[i].text = text.to_string();
    Ok(out)
}

/// A helper utterance together with its context window.
#[derive(Debug, Clone, Copy)]
pub struct Target<'a> {
    pub conv: &'a Conversation,
    pub seg: &'a Segmentation,
    pub index: usize,
}

impl<'a> Target<'a> {
    pub fn new(conv: &'a Conversation, seg: &'a Segmentation, index: usize) -> Result<Self, SelfImproveError> {
        check_helper(conv, index)?;
        seg.validate(conv.len()).map_err(|e| SelfImproveError::Precondition(e.to_string()))?;
        Ok(Target { conv, seg, index })
    }

    fn context(&self) -> String {
        self.conv.render(context_for(self.index, self.seg).range())
    }

    pub fn key(&self) -> RequestKey {
        RequestKey::utterance(&self.conv.id, self.index, &self.context())
    }

    /// Prompt input showing this target's original response.
    pub fn input(&self) -> String {
        self.input_for(self.conv)
    }

    fn input_for(&self, conv: &Conversation) -> String {
        render_input(conv, &context_for(self.index, self.seg), &conv.utterances[self.index].text)
    }

    /// Appropriateness probability of the unmodified response.
    pub fn p_original(&self, gateway: &Gateway) -> Result<f64, SelfImproveError> {
        let text = &self.conv.utterances[self.index].text;
        Ok(gateway.appropriateness_prob(&self.key(), &self.input(), text)?.p_true)
    }
}

/// Self-score of one feedback generation for `target`.
pub fn self_score(target: &Target, fb: &Feedback, gateway: &Gateway) -> Result<f64, SelfImproveError> {
    ensure_valid(fb)?;
    let conv = match (&fb.appropriate, &fb.alternative) {
        (false, Some(alt)) => substitute(target.conv, target.index, alt)?,
        _ => target.conv.clone(),
    };
    let text = &conv.utterances[target.index].text;
    Ok(gateway.appropriateness_prob(&target.key(), &target.input_for(&conv), text)?.p_true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_index: usize,
    pub feedback: Feedback,
    pub sigma: f64,
}

/// Indices of the highest and lowest score, ties going to the earlier
/// sample. `None` when fewer than two samples or all scores are equal.
pub fn select_extremes(sigmas: &[f64]) -> Option<(usize, usize)> {
    if sigmas.len() < 2 {
        return None;
    }
    let (mut hi, mut lo) = (0, 0);
    for (k, &s) in sigmas.iter().enumerate() {
        if s > sigmas[hi] {
            hi = k;
        }
        if s < sigmas[lo] {
            lo = k;
        }
    }
    (sigmas[hi] > sigmas[lo]).then_some((hi, lo))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub conversation_id: String,
    pub utterance_index: usize,
    /// Prompt input: context window and the original response.
    pub input: String,
    pub p_original: f64,
    pub chosen: ScoredSample,
    pub rejected: ScoredSample,
}

impl PreferencePair {
    /// NaN scores fail these checks.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn check(&self) -> Result<(), SelfImproveError> {
        let bad = |reason: String| SelfImproveError::InvalidPair {
            id: self.conversation_id.clone(),
            index: self.utterance_index,
            reason,
        };
        if !(self.p_original < GATE) {
            return Err(bad(format!("p_original {} is not below {GATE}", self.p_original)));
        }
        if !(self.chosen.sigma > self.rejected.sigma) {
            return Err(bad(format!("chosen sigma {} not above rejected {}", self.chosen.sigma, self.rejected.sigma)));
        }
        let chosen = serialize_feedback(&self.chosen.feedback)?;
        if chosen == serialize_feedback(&self.rejected.feedback)? {
            return Err(bad("chosen and rejected serialize identically".into()));
        }
        Ok(())
    }
}

/// What happened for one utterance during pair construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub conversation_id: String,
    pub utterance_index: usize,
    pub p_original: f64,
    /// Empty when the gate skipped sampling.
    pub samples: Vec<ScoredSample>,
    pub pair: Option<PreferencePair>,
}

/// Gate, sample, score and select for one helper utterance.
pub fn pair_outcome(target: &Target, n: usize, gateway: &Gateway) -> Result<PairOutcome, SelfImproveError> {
    if n < 2 {
        return Err(SelfImproveError::Precondition("pair construction needs n >= 2 samples".into()));
    }
    let p_original = target.p_original(gateway)?;
    let mut out = PairOutcome {
        conversation_id: target.conv.id.clone(),
        utterance_index: target.index,
        p_original,
        samples: Vec::new(),
        pair: None,
    };
    if p_original >= GATE {
        return Ok(out);
    }
    let input = target.input();
    let generations = gateway.sample_feedback(&target.key(), &input, n)?;
    for (sample_index, feedback) in generations.into_iter().enumerate() {
        let sigma = self_score(target, &feedback, gateway)?;
        out.samples.push(ScoredSample { sample_index, feedback, sigma });
    }
    let sigmas: Vec<f64> = out.samples.iter().map(|s| s.sigma).collect();
    if let Some((hi, lo)) = select_extremes(&sigmas) {
        out.pair = Some(PreferencePair {
            conversation_id: target.conv.id.clone(),
            utterance_index: target.index,
            input,
            p_original,
            chosen: out.samples[hi].clone(),
            rejected: out.samples[lo].clone(),
        });
    }
    Ok(out)
}

pub fn build_pair(target: &Target, n: usize, gateway: &Gateway) -> Result<Option<PreferencePair>, SelfImproveError> {
    Ok(pair_outcome(target, n, gateway)?.pair)
}

/// Every helper utterance of every conversation, in corpus order.
pub fn targets<'a>(
    convs: &'a [Conversation],
    segments: &'a BTreeMap<String, Segmentation>,
) -> Result<Vec<Target<'a>>, SelfImproveError> {
    let mut out = Vec::new();
    for conv in convs {
        let seg = segments.get(&conv.id).ok_or_else(|| SelfImproveError::MissingSegmentation(conv.id.clone()))?;
        for i in conv.helper_indices() {
            out.push(Target::new(conv, seg, i)?);
        }
    }
    Ok(out)
}

/// Runs [`pair_outcome`] over all targets in parallel; results keep
/// target order. The first error in target order is returned.
pub fn pair_outcomes(targets: &[Target], n: usize, gateway: &Gateway) -> Result<Vec<PairOutcome>, SelfImproveError> {
    targets.par_iter().map(|t| pair_outcome(t, n, gateway)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoRecord {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
}

/// One DPO record per pair, ordered by (conversation id, utterance index).
pub fn export_dpo(pairs: &[PreferencePair]) -> Result<Vec<DpoRecord>, SelfImproveError> {
    if pairs.is_empty() {
        tracing::warn!("no preference pairs to export");
    }
    let mut sorted: Vec<&PreferencePair> = pairs.iter().collect();
    sorted.sort_by(|a, b| (&a.conversation_id, a.utterance_index).cmp(&(&b.conversation_id, b.utterance_index)));
    sorted
        .into_iter()
        .map(|p| {
            p.check()?;
            Ok(DpoRecord {
                prompt: feedback_prompt(&p.input),
                chosen: serialize_feedback(&p.chosen.feedback)?,
                rejected: serialize_feedback(&p.rejected.feedback)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

impl SftRecord {
    pub fn new(input: String, fb: &Feedback) -> Result<Self, SelfImproveError> {
        Ok(SftRecord { instruction: FEEDBACK_INSTRUCTION.to_string(), input, output: serialize_feedback(fb)? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SftMode {
    /// Expert annotations.
    Expert,
    /// The first model generation per utterance.
    Gens,
    /// The highest-scored generation per utterance.
    Best,
}

impl std::str::FromStr for SftMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "expert" => Ok(SftMode::Expert),
            "gens" => Ok(SftMode::Gens),
            "best" => Ok(SftMode::Best),
            _ => Err(format!("unknown SFT mode {s:?} (expected expert, gens or best)")),
        }
    }
}

/// One generated sample, scored or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_index: usize,
    pub feedback: Feedback,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

/// Generations for one helper utterance; one line of a generations file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceSamples {
    pub conversation_id: String,
    pub utterance_index: usize,
    pub input: String,
    pub samples: Vec<SampleRecord>,
}

/// Draws `n` generations for a target and optionally self-scores them.
pub fn sample_target(target: &Target, n: usize, score: bool, gateway: &Gateway) -> Result<UtteranceSamples, SelfImproveError> {
    let input = target.input();
    let generations = gateway.sample_feedback(&target.key(), &input, n)?;
    let mut samples = Vec::with_capacity(n);
    for (sample_index, feedback) in generations.into_iter().enumerate() {
        let sigma = if score { Some(self_score(target, &feedback, gateway)?) } else { None };
        samples.push(SampleRecord { sample_index, feedback, sigma });
    }
    Ok(UtteranceSamples {
        conversation_id: target.conv.id.clone(),
        utterance_index: target.index,
        input,
        samples,
    })
}

/// One SFT record per expert-annotated helper utterance.
pub fn export_sft_expert(
    annotated: &[AnnotatedConversation],
    segments: &BTreeMap<String, Segmentation>,
) -> Result<Vec<SftRecord>, SelfImproveError> {
    let mut out = Vec::new();
    for a in annotated {
        let conv = &a.conversation;
        let seg = segments.get(&conv.id).ok_or_else(|| SelfImproveError::MissingSegmentation(conv.id.clone()))?;
        for (&i, fb) in &a.feedback {
            let target = Target::new(conv, seg, i)?;
            out.push(SftRecord::new(target.input(), fb)?);
        }
    }
    Ok(out)
}

/// One SFT record per utterance from model generations.
pub fn export_sft_generations(gens: &[UtteranceSamples], mode: SftMode) -> Result<Vec<SftRecord>, SelfImproveError> {
    let mut out = Vec::with_capacity(gens.len());
    for u in gens {
        let empty = || SelfImproveError::EmptyGenerations { id: u.conversation_id.clone(), index: u.utterance_index };
        let pick = match mode {
            SftMode::Expert => {
                return Err(SelfImproveError::Precondition("expert mode reads annotations, not generations".into()))
            }
            SftMode::Gens => u.samples.iter().min_by_key(|s| s.sample_index).ok_or_else(empty)?,
            SftMode::Best => {
                let mut sorted: Vec<&SampleRecord> = u.samples.iter().collect();
                sorted.sort_by_key(|s| s.sample_index);
                let mut best: Option<(&SampleRecord, f64)> = None;
                for s in sorted {
                    let sigma = s.sigma.ok_or_else(|| SelfImproveError::MissingScores {
                        id: u.conversation_id.clone(),
                        index: u.utterance_index,
                        sample: s.sample_index,
                    })?;
                    if best.is_none_or(|(_, b)| sigma > b) {
                        best = Some((s, sigma));
                    }
                }
                best.ok_or_else(empty)?.0
            }
        };
        out.push(SftRecord::new(u.input.clone(), &pick.feedback)?);
    }
    Ok(out)
}
