//! Corpus ingestion: artifact scrubbing, rule-based quality flags and
//! reproducible seeded splits.
//!
//! The quality flags are mechanical proxies for criteria that were applied
//! by hand on the original corpus. They are surfaced for review and never
//! drop or modify a conversation.

use std::collections::{BTreeMap, HashSet};

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Conversation, Speaker};

/// Conversation-finishing artifacts removed from utterances by default.
pub const DEFAULT_KEYWORDS: [&str; 4] = ["survey", "quit", "we need to chat", "button"];

/// Meta-talk and crowd-work keywords used by the meta-conversation flag.
pub const DEFAULT_META_KEYWORDS: [&str; 12] = [
    "mturk",
    "turker",
    "amazon",
    "survey",
    "quit",
    "button",
    "bonus",
    "are you there",
    "still there",
    "seen your message",
    "see your message",
    "we need to chat",
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("keyword list is empty")]
    NoKeywords,
    #[error("invalid keyword {0:?}")]
    BadKeyword(String),
    #[error("invalid split spec: {0}")]
    BadSplitSpec(String),
    #[error("split sizes sum to {requested} but the corpus has {available} conversations")]
    SpecTooLarge { requested: usize, available: usize },
}

/// Case-insensitive whole-word keyword matcher.
#[derive(Debug, Clone)]
pub struct KeywordMatcher {
    keywords: Vec<String>,
    patterns: Vec<Regex>,
}

impl KeywordMatcher {
    pub fn new<I, S>(keywords: I) -> Result<Self, IngestError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out = KeywordMatcher { keywords: Vec::new(), patterns: Vec::new() };
        for kw in keywords {
            let kw = kw.as_ref().trim();
            if kw.is_empty() {
                continue;
            }
            let words: Vec<String> = kw.split_whitespace().map(regex::escape).collect();
            let pattern = format!(r"\b{}\b", words.join(r"\s+"));
            let re = RegexBuilder::new(&pattern)
                .case_insensitive(true)
                .build()
                .map_err(|_| IngestError::BadKeyword(kw.to_string()))?;
            out.keywords.push(kw.to_string());
            out.patterns.push(re);
        }
        if out.keywords.is_empty() {
            return Err(IngestError::NoKeywords);
        }
        Ok(out)
    }

    pub fn default_artifacts() -> Self {
        Self::new(DEFAULT_KEYWORDS).expect("default keywords are valid")
    }

    /// Parses a keyword file: one keyword per line, `#` starts a comment.
    pub fn from_file_contents(contents: &str) -> Result<Self, IngestError> {
        Self::new(
            contents
                .lines()
                .map(|l| l.split('#').next().unwrap_or("").trim())
                .filter(|l| !l.is_empty()),
        )
    }

    pub fn keywords(&self) -> &[String] {
        &self.keywords
    }

    /// First configured keyword found in `text`.
    pub fn first_match(&self, text: &str) -> Option<&str> {
        self.patterns
            .iter()
            .position(|re| re.is_match(text))
            .map(|i| self.keywords[i].as_str())
    }
}

/// Splits text into sentences. A sentence ends with a run of `.`, `!` or
/// `?` followed by whitespace or end of text; trailing whitespace stays with
/// the sentence so concatenating the pieces reproduces the input.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((_, c)) = chars.next() {
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        while chars.peek().is_some_and(|(_, c)| matches!(c, '.' | '!' | '?')) {
            chars.next();
        }
        match chars.peek() {
            None => {}
            Some((_, c)) if c.is_whitespace() => {
                while chars.peek().is_some_and(|(_, c)| c.is_whitespace()) {
                    chars.next();
                }
            }
            Some(_) => continue,
        }
        let end = chars.peek().map_or(text.len(), |(i, _)| *i);
        out.push(&text[start..end]);
        start = end;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitAction {
    RemovedSpan,
    Flagged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceHit {
    pub keyword: String,
    pub action: HitAction,
    pub sentence: String,
}

/// Removes every sentence containing a keyword. When that would leave the
/// utterance empty, the text is kept and the hits are marked as flagged.
pub fn scrub_utterance(text: &str, keywords: &KeywordMatcher) -> (String, Vec<SentenceHit>) {
    let text = text.trim();
    let mut kept = String::new();
    let mut hits = Vec::new();
    for sentence in split_sentences(text) {
        match keywords.first_match(sentence) {
            Some(kw) => hits.push(SentenceHit {
                keyword: kw.to_string(),
                action: HitAction::RemovedSpan,
                sentence: sentence.trim().to_string(),
            }),
            None => kept.push_str(sentence),
        }
    }
    let kept = kept.trim();
    if kept.is_empty() && !hits.is_empty() {
        for h in &mut hits {
            h.action = HitAction::Flagged;
        }
        return (text.to_string(), hits);
    }
    (kept.to_string(), hits)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScrubHit {
    pub utterance_index: usize,
    pub keyword: String,
    pub action: HitAction,
    pub sentence: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScrubReport {
    pub conversation_id: String,
    pub hits: Vec<ScrubHit>,
}

/// Scrubs every utterance of a conversation. Utterance count and order are
/// unchanged.
pub fn scrub_conversation(conv: &Conversation, keywords: &KeywordMatcher) -> (Conversation, ScrubReport) {
    let mut out = conv.clone();
    let mut hits = Vec::new();
    for u in &mut out.utterances {
        let (text, h) = scrub_utterance(&u.text, keywords);
        u.text = text;
        hits.extend(h.into_iter().map(|h| ScrubHit {
            utterance_index: u.index,
            keyword: h.keyword,
            action: h.action,
            sentence: h.sentence,
        }));
    }
    (out, ScrubReport { conversation_id: conv.id.clone(), hits })
}

/// Thresholds for the mechanical quality proxies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlagRules {
    pub meta_keywords: Vec<String>,
    /// Flag when strictly more than this fraction of utterances hit a meta keyword.
    pub meta_fraction: f64,
    pub min_utterances: usize,
    pub min_helper_utterances: usize,
    pub min_mean_words: f64,
}

impl Default for FlagRules {
    fn default() -> Self {
        FlagRules {
            meta_keywords: DEFAULT_META_KEYWORDS.iter().map(|s| s.to_string()).collect(),
            meta_fraction: 0.3,
            min_utterances: 6,
            min_helper_utterances: 3,
            min_mean_words: 3.0,
        }
    }
}

pub const FLAG_META: &str = "meta-conversation";
pub const FLAG_TOO_SHORT: &str = "too short";
pub const FLAG_FEW_HELPER: &str = "few helper turns";
pub const FLAG_SHORT_UTTERANCES: &str = "short utterances";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationFlag {
    pub rule: String,
    pub detail: String,
}

pub fn flag_conversation(conv: &Conversation, rules: &FlagRules) -> Result<Vec<ConversationFlag>, IngestError> {
    let mut flags = Vec::new();
    let n = conv.utterances.len();
    if !rules.meta_keywords.is_empty() && n > 0 {
        let meta = KeywordMatcher::new(&rules.meta_keywords)?;
        let hits = conv.utterances.iter().filter(|u| meta.first_match(&u.text).is_some()).count();
        let fraction = hits as f64 / n as f64;
        if fraction > rules.meta_fraction {
            flags.push(ConversationFlag {
                rule: FLAG_META.into(),
                detail: format!("{hits} of {n} utterances contain meta keywords"),
            });
        }
    }
    if n < rules.min_utterances {
        flags.push(ConversationFlag {
            rule: FLAG_TOO_SHORT.into(),
            detail: format!("{n} utterances, minimum {}", rules.min_utterances),
        });
    }
    let helpers = conv.utterances.iter().filter(|u| u.speaker == Speaker::Helper).count();
    if helpers < rules.min_helper_utterances {
        flags.push(ConversationFlag {
            rule: FLAG_FEW_HELPER.into(),
            detail: format!("{helpers} helper utterances, minimum {}", rules.min_helper_utterances),
        });
    }
    if n > 0 {
        let words: usize = conv.utterances.iter().map(|u| crate::model::word_count(&u.text)).sum();
        let mean = words as f64 / n as f64;
        if mean < rules.min_mean_words {
            flags.push(ConversationFlag {
                rule: FLAG_SHORT_UTTERANCES.into(),
                detail: format!("mean utterance length {mean:.2} words, minimum {}", rules.min_mean_words),
            });
        }
    }
    Ok(flags)
}

/// SplitMix64 generator (Steele, Lea and Flood). Small, fully specified and
/// easy to reimplement, so split membership is reproducible anywhere.
/// Seed 0 yields `0xe220a8397b1dcdaf, 0x6e789e6aa1b965f4, ...`.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform integer in `0..bound` by rejection of the biased low zone.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let r = self.next_u64();
            if r >= threshold {
                return r % bound;
            }
        }
    }

    /// Fisher–Yates permutation of `0..n`, swapping from the top down.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i as u64 + 1) as usize;
            p.swap(i, j);
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub sizes: Vec<(String, usize)>,
}

impl SplitSpec {
    /// Parses `name=count,name=count`.
    pub fn parse(spec: &str, seed: u64) -> Result<Self, IngestError> {
        let mut sizes = Vec::new();
        let mut seen = HashSet::new();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, count) = part
                .split_once('=')
                .ok_or_else(|| IngestError::BadSplitSpec(format!("{part:?} is not name=count")))?;
            let name = name.trim();
            if name.is_empty() {
                return Err(IngestError::BadSplitSpec(format!("empty split name in {part:?}")));
            }
            let count: usize = count
                .trim()
                .parse()
                .map_err(|_| IngestError::BadSplitSpec(format!("bad count in {part:?}")))?;
            if !seen.insert(name.to_string()) {
                return Err(IngestError::BadSplitSpec(format!("duplicate split name {name:?}")));
            }
            sizes.push((name.to_string(), count));
        }
        if sizes.is_empty() {
            return Err(IngestError::BadSplitSpec("no splits given".into()));
        }
        Ok(SplitSpec { seed, sizes })
    }

    pub fn total(&self) -> usize {
        self.sizes.iter().map(|(_, n)| n).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedSplit {
    pub name: String,
    /// Corpus positions, ascending.
    pub indices: Vec<usize>,
}

/// Assigns corpus positions to splits: a seeded permutation is cut into
/// consecutive runs of the requested sizes, and each run is restored to
/// corpus order.
pub fn split_dataset(corpus_len: usize, spec: &SplitSpec) -> Result<Vec<NamedSplit>, IngestError> {
    let requested = spec.total();
    if requested > corpus_len {
        return Err(IngestError::SpecTooLarge { requested, available: corpus_len });
    }
    let perm = SplitMix64::new(spec.seed).permutation(corpus_len);
    let mut offset = 0;
    let mut out = Vec::with_capacity(spec.sizes.len());
    for (name, count) in &spec.sizes {
        let mut indices = perm[offset..offset + count].to_vec();
        indices.sort_unstable();
        offset += count;
        out.push(NamedSplit { name: name.clone(), indices });
    }
    Ok(out)
}

/// One turn of a raw corpus record. Accepts ESConv field names.
#[derive(Debug, Clone, Deserialize)]
pub struct RawTurn {
    pub speaker: Speaker,
    #[serde(alias = "content")]
    pub text: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct RawConversation {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default, alias = "split")]
    pub source_tag: Option<String>,
    #[serde(alias = "dialog")]
    pub utterances: Vec<RawTurn>,
}

impl RawConversation {
    /// Normalizes into a [`Conversation`]; `fallback_id` names records
    /// without an id.
    pub fn into_conversation(self, fallback_id: String, default_tag: &str) -> Conversation {
        Conversation::from_turns(
            self.id.unwrap_or(fallback_id),
            self.source_tag.unwrap_or_else(|| default_tag.to_string()),
            self.utterances.into_iter().map(|t| (t.speaker, t.text)),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationReport {
    pub id: String,
    pub hits: Vec<ScrubHit>,
    pub flags: Vec<ConversationFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub keywords: Vec<String>,
    pub note: String,
    pub conversations: Vec<ConversationReport>,
    pub splits: BTreeMap<String, Vec<String>>,
}

pub struct IngestOutput {
    pub clean: Vec<Conversation>,
    pub splits: Vec<NamedSplit>,
    pub report: IngestReport,
}

/// Scrubs and flags every conversation, then splits when a spec is given.
pub fn ingest_corpus(
    corpus: Vec<Conversation>,
    keywords: &KeywordMatcher,
    rules: &FlagRules,
    split: Option<&SplitSpec>,
) -> Result<IngestOutput, IngestError> {
    let mut clean = Vec::with_capacity(corpus.len());
    let mut reports = Vec::with_capacity(corpus.len());
    for conv in &corpus {
        let (scrubbed, scrub) = scrub_conversation(conv, keywords);
        let flags = flag_conversation(&scrubbed, rules)?;
        reports.push(ConversationReport { id: scrubbed.id.clone(), hits: scrub.hits, flags });
        clean.push(scrubbed);
    }
    let splits = match split {
        Some(spec) => split_dataset(clean.len(), spec)?,
        None => Vec::new(),
    };
    let split_ids = splits
        .iter()
        .map(|s| (s.name.clone(), s.indices.iter().map(|&i| clean[i].id.clone()).collect()))
        .collect();
    let report = IngestReport {
        keywords: keywords.keywords().to_vec(),
        note: "quality flags are keyword and length proxies for manual review criteria; \
               flagged conversations are kept for human review"
            .into(),
        conversations: reports,
        splits: split_ids,
    };
    Ok(IngestOutput { clean, splits, report })
}
