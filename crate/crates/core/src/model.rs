//! Conversations, multi-level feedback records and their validation.
//!
//! A [`Feedback`] record carries the five feedback components for one helper
//! utterance. Records are plain values; [`validate_feedback`] reports every
//! broken invariant as data instead of failing on the first one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

/// The eight communication-skill categories used for areas of improvement
/// and positive reinforcement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SkillCategory {
    Reflections,
    Questions,
    Suggestions,
    Validation,
    #[serde(rename = "Self-disclosure")]
    SelfDisclosure,
    Empathy,
    Professionalism,
    Structure,
}

impl SkillCategory {
    pub const ALL: [SkillCategory; 8] = [
        SkillCategory::Reflections,
        SkillCategory::Questions,
        SkillCategory::Suggestions,
        SkillCategory::Validation,
        SkillCategory::SelfDisclosure,
        SkillCategory::Empathy,
        SkillCategory::Professionalism,
        SkillCategory::Structure,
    ];

    /// Canonical display name, as used in the text grammar and JSON files.
    pub fn name(self) -> &'static str {
        match self {
            SkillCategory::Reflections => "Reflections",
            SkillCategory::Questions => "Questions",
            SkillCategory::Suggestions => "Suggestions",
            SkillCategory::Validation => "Validation",
            SkillCategory::SelfDisclosure => "Self-disclosure",
            SkillCategory::Empathy => "Empathy",
            SkillCategory::Professionalism => "Professionalism",
            SkillCategory::Structure => "Structure",
        }
    }
}

impl fmt::Display for SkillCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown skill category {0:?}")]
pub struct UnknownCategory(pub String);

impl FromStr for SkillCategory {
    type Err = UnknownCategory;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SkillCategory::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| UnknownCategory(s.to_string()))
    }
}

pub type CategorySet = BTreeSet<SkillCategory>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    #[serde(alias = "usr", alias = "Seeker")]
    Seeker,
    #[serde(alias = "supporter", alias = "sys", alias = "Helper", alias = "Supporter")]
    Helper,
}

impl Speaker {
    pub fn label(self) -> &'static str {
        match self {
            Speaker::Seeker => "Seeker",
            Speaker::Helper => "Helper",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub index: usize,
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    #[serde(default)]
    pub source_tag: String,
    pub utterances: Vec<Utterance>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConversationError {
    #[error("conversation {0:?} has no utterances")]
    Empty(String),
    #[error("conversation {id:?}: utterance at position {position} has index {index}")]
    IndexMismatch { id: String, position: usize, index: usize },
    #[error("conversation {id:?}: utterance {index} has empty text")]
    EmptyText { id: String, index: usize },
    #[error("conversation {id:?}: utterance {index} has surrounding whitespace")]
    UnnormalizedText { id: String, index: usize },
}

impl Conversation {
    /// Builds a conversation from `(speaker, text)` turns, trimming text and
    /// assigning contiguous indices. Turns whose text is blank are dropped.
    pub fn from_turns<I, S>(id: impl Into<String>, source_tag: impl Into<String>, turns: I) -> Self
    where
        I: IntoIterator<Item = (Speaker, S)>,
        S: AsRef<str>,
    {
        let utterances = turns
            .into_iter()
            .map(|(speaker, text)| (speaker, text.as_ref().trim().to_string()))
            .filter(|(_, text)| !text.is_empty())
            .enumerate()
            .map(|(index, (speaker, text))| Utterance { index, speaker, text })
            .collect();
        Conversation {
            id: id.into(),
            source_tag: source_tag.into(),
            utterances,
        }
    }

    pub fn validate(&self) -> Result<(), ConversationError> {
        if self.utterances.is_empty() {
            return Err(ConversationError::Empty(self.id.clone()));
        }
        for (position, u) in self.utterances.iter().enumerate() {
            if u.index != position {
                return Err(ConversationError::IndexMismatch {
                    id: self.id.clone(),
                    position,
                    index: u.index,
                });
            }
            if u.text.is_empty() {
                return Err(ConversationError::EmptyText { id: self.id.clone(), index: u.index });
            }
            if u.text.trim() != u.text {
                return Err(ConversationError::UnnormalizedText { id: self.id.clone(), index: u.index });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn helper_indices(&self) -> Vec<usize> {
        self.utterances
            .iter()
            .filter(|u| u.speaker == Speaker::Helper)
            .map(|u| u.index)
            .collect()
    }

    /// Renders utterances in `range` as `Speaker: text` lines.
    pub fn render(&self, range: std::ops::Range<usize>) -> String {
        let mut out = String::new();
        for u in &self.utterances[range] {
            out.push_str(u.speaker.label());
            out.push_str(": ");
            out.push_str(&u.text);
            out.push('\n');
        }
        out
    }
}

/// Multi-level feedback for one helper utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub appropriate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_alignment: Option<String>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        deserialize_with = "category_set_strict"
    )]
    pub areas_for_improvement: Option<CategorySet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alternative: Option<String>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        deserialize_with = "category_set_strict"
    )]
    pub positive_areas: Option<CategorySet>,
}

fn category_set_strict<'de, D>(deserializer: D) -> Result<Option<CategorySet>, D::Error>
where
    D: Deserializer<'de>,
{
    let list: Option<Vec<SkillCategory>> = Option::deserialize(deserializer)?;
    match list {
        None => Ok(None),
        Some(list) => {
            let mut set = CategorySet::new();
            for c in list {
                if !set.insert(c) {
                    return Err(serde::de::Error::custom(format!("duplicate category {c}")));
                }
            }
            Ok(Some(set))
        }
    }
}

impl Feedback {
    /// An "appropriate" verdict with no further components.
    pub fn appropriate() -> Self {
        Feedback {
            appropriate: true,
            goal_alignment: None,
            areas_for_improvement: None,
            alternative: None,
            positive_areas: None,
        }
    }

    pub fn needs_improvement(
        goal: impl Into<String>,
        areas: impl IntoIterator<Item = SkillCategory>,
        alternative: impl Into<String>,
    ) -> Self {
        Feedback {
            appropriate: false,
            goal_alignment: Some(goal.into()),
            areas_for_improvement: Some(areas.into_iter().collect()),
            alternative: Some(alternative.into()),
            positive_areas: None,
        }
    }

    pub fn with_positive(mut self, areas: impl IntoIterator<Item = SkillCategory>) -> Self {
        self.positive_areas = Some(areas.into_iter().collect());
        self
    }
}

/// One broken feedback invariant.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("goal present on appropriate")]
    GoalOnAppropriate,
    #[error("areas present on appropriate")]
    AreasOnAppropriate,
    #[error("alternative present on appropriate")]
    AlternativeOnAppropriate,
    #[error("missing goal")]
    MissingGoal,
    #[error("empty goal")]
    EmptyGoal,
    #[error("missing areas")]
    MissingAreas,
    #[error("empty areas")]
    EmptyAreas,
    #[error("missing alternative")]
    MissingAlternative,
    #[error("empty alternative")]
    EmptyAlternative,
    #[error("empty positive areas")]
    EmptyPositiveAreas,
    #[error("{0} is both an area for improvement and a positive area")]
    Overlap(SkillCategory),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid feedback: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "))]
pub struct InvalidFeedback(pub Vec<Violation>);

fn blank(s: &str) -> bool {
    s.trim().is_empty()
}

/// Lists every invariant `fb` breaks. An empty list means the record is valid.
pub fn validate_feedback(fb: &Feedback) -> Vec<Violation> {
    let mut out = Vec::new();
    if fb.appropriate {
        if fb.goal_alignment.is_some() {
            out.push(Violation::GoalOnAppropriate);
        }
        if fb.areas_for_improvement.is_some() {
            out.push(Violation::AreasOnAppropriate);
        }
        if fb.alternative.is_some() {
            out.push(Violation::AlternativeOnAppropriate);
        }
    } else {
        match &fb.areas_for_improvement {
            None => out.push(Violation::MissingAreas),
            Some(a) if a.is_empty() => out.push(Violation::EmptyAreas),
            Some(_) => {}
        }
        match &fb.goal_alignment {
            None => out.push(Violation::MissingGoal),
            Some(g) if blank(g) => out.push(Violation::EmptyGoal),
            Some(_) => {}
        }
        match &fb.alternative {
            None => out.push(Violation::MissingAlternative),
            Some(a) if blank(a) => out.push(Violation::EmptyAlternative),
            Some(_) => {}
        }
    }
    if let Some(pos) = &fb.positive_areas {
        if pos.is_empty() {
            out.push(Violation::EmptyPositiveAreas);
        }
        if let Some(neg) = &fb.areas_for_improvement {
            out.extend(neg.intersection(pos).map(|c| Violation::Overlap(*c)));
        }
    }
    out
}

pub fn ensure_valid(fb: &Feedback) -> Result<(), InvalidFeedback> {
    let v = validate_feedback(fb);
    if v.is_empty() {
        Ok(())
    } else {
        Err(InvalidFeedback(v))
    }
}

/// A conversation together with feedback keyed by helper-utterance index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedConversation {
    #[serde(flatten)]
    pub conversation: Conversation,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub feedback: BTreeMap<usize, Feedback>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnnotationError {
    #[error(transparent)]
    Conversation(#[from] ConversationError),
    #[error("conversation {id:?}: feedback keyed at {index}, which is not a helper utterance")]
    NotHelper { id: String, index: usize },
    #[error("conversation {id:?}: feedback at {index}: {source}")]
    Invalid { id: String, index: usize, source: InvalidFeedback },
}

impl AnnotatedConversation {
    pub fn unannotated(conversation: Conversation) -> Self {
        AnnotatedConversation { conversation, feedback: BTreeMap::new() }
    }

    pub fn validate(&self) -> Result<(), AnnotationError> {
        self.conversation.validate()?;
        let id = &self.conversation.id;
        for (&index, fb) in &self.feedback {
            match self.conversation.utterances.get(index) {
                Some(u) if u.speaker == Speaker::Helper => {}
                _ => return Err(AnnotationError::NotHelper { id: id.clone(), index }),
            }
            ensure_valid(fb).map_err(|source| AnnotationError::Invalid {
                id: id.clone(),
                index,
                source,
            })?;
        }
        Ok(())
    }
}

/// Whitespace-token word count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Counts and mean lengths over a feedback dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_sessions: usize,
    /// Utterances carrying a feedback record.
    pub n_utterances: usize,
    pub n_appropriate: usize,
    pub n_inappropriate: usize,
    pub avg_alt_len: f64,
    pub avg_goal_len: f64,
    pub improvement_counts: BTreeMap<SkillCategory, usize>,
    pub positive_counts: BTreeMap<SkillCategory, usize>,
}

fn mean_or_zero(total: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        total as f64 / n as f64
    }
}

/// Computes dataset statistics. Category counts are per utterance; length
/// averages run over records where the field is present.
pub fn dataset_stats(dataset: &[AnnotatedConversation]) -> Result<DatasetStats, AnnotationError> {
    let zeroed = || SkillCategory::ALL.iter().map(|c| (*c, 0usize)).collect::<BTreeMap<_, _>>();
    let mut stats = DatasetStats {
        n_sessions: dataset.len(),
        n_utterances: 0,
        n_appropriate: 0,
        n_inappropriate: 0,
        avg_alt_len: 0.0,
        avg_goal_len: 0.0,
        improvement_counts: zeroed(),
        positive_counts: zeroed(),
    };
    let (mut alt_words, mut alt_n, mut goal_words, mut goal_n) = (0usize, 0usize, 0usize, 0usize);
    for conv in dataset {
        conv.validate()?;
        for fb in conv.feedback.values() {
            stats.n_utterances += 1;
            if fb.appropriate {
                stats.n_appropriate += 1;
            } else {
                stats.n_inappropriate += 1;
            }
            if let Some(alt) = &fb.alternative {
                alt_words += word_count(alt);
                alt_n += 1;
            }
            if let Some(goal) = &fb.goal_alignment {
                goal_words += word_count(goal);
                goal_n += 1;
            }
            for c in fb.areas_for_improvement.iter().flatten() {
                *stats.improvement_counts.entry(*c).or_default() += 1;
            }
            for c in fb.positive_areas.iter().flatten() {
                *stats.positive_counts.entry(*c).or_default() += 1;
            }
        }
    }
    stats.avg_alt_len = mean_or_zero(alt_words, alt_n);
    stats.avg_goal_len = mean_or_zero(goal_words, goal_n);
    Ok(stats)
}

impl DatasetStats {
    /// Plain-text summary table.
    pub fn render(&self) -> String {
        let pct = |k: usize| 100.0 * mean_or_zero(k, self.n_utterances);
        let mut out = String::new();
        out.push_str(&format!("{:<38}{:>8}\n", "Number of sessions", self.n_sessions));
        out.push_str(&format!("{:<38}{:>8}\n", "Number of utterances", self.n_utterances));
        out.push_str(&format!(
            "{:<38}{:>8}  ({:.1}%)\n",
            "Number of appropriate utterances",
            self.n_appropriate,
            pct(self.n_appropriate)
        ));
        out.push_str(&format!(
            "{:<38}{:>8}  ({:.1}%)\n",
            "Number of inappropriate utterances",
            self.n_inappropriate,
            pct(self.n_inappropriate)
        ));
        out.push_str(&format!("{:<38}{:>8.1}\n", "Avg. length of alternative response", self.avg_alt_len));
        out.push_str(&format!("{:<38}{:>8.1}\n", "Avg. length of goal alignment", self.avg_goal_len));
        out.push_str(&format!("{:<38}{:>8}{:>8}\n", "Categories", "-", "+"));
        for c in SkillCategory::ALL {
            out.push_str(&format!(
                "{:<38}{:>8}{:>8}\n",
                c.name(),
                self.improvement_counts.get(&c).copied().unwrap_or(0),
                self.positive_counts.get(&c).copied().unwrap_or(0)
            ));
        }
        out
    }
}
