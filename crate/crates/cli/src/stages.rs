//! One function per pipeline stage. Subcommands and `run` both call these.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use peerfeedback_core::annotator::{annotate_conversation, AnnotatorConfig, SkillCatalog};
use peerfeedback_core::eval::{build_report, generate_eval_scores, EvalEntry, EvalSampleSet, ReportConfig};
use peerfeedback_core::gateway::{BackendProfile, Gateway};
use peerfeedback_core::ingest::{ingest_corpus, FlagRules, KeywordMatcher, RawConversation, SplitSpec};
use peerfeedback_core::io::{read_jsonl, to_jsonl, write_atomic, write_json_pretty, write_jsonl};
use peerfeedback_core::model::{dataset_stats, AnnotatedConversation, Conversation};
use peerfeedback_core::segmenter::{segment_embeddings, SegmentRecord, Segmentation, SegmenterConfig};
use peerfeedback_core::selfimprove::{
    export_dpo, export_sft_expert, export_sft_generations, pair_outcomes, sample_target, targets, SftMode,
    UtteranceSamples,
};

use crate::error::{require, CliError};

/// Counts reported by a stage, for logs and the run summary.
pub type Summary = Value;

pub fn gateway(profile: Option<&Path>, max_concurrency: Option<usize>) -> Result<Gateway, CliError> {
    let mut p = match profile {
        Some(path) => {
            require(path, "backend profile")?;
            BackendProfile::load(path)?
        }
        None => BackendProfile::default(),
    };
    if let Some(n) = max_concurrency {
        p.max_concurrency = n;
    }
    Ok(Gateway::from_profile(p)?)
}

/// Reads conversations from a clean or annotated dataset file.
pub fn read_conversations(path: &Path, what: &str) -> Result<Vec<Conversation>, CliError> {
    Ok(read_annotated(path, what)?.into_iter().map(|a| a.conversation).collect())
}

pub fn read_annotated(path: &Path, what: &str) -> Result<Vec<AnnotatedConversation>, CliError> {
    require(path, what)?;
    let records: Vec<AnnotatedConversation> = read_jsonl(path)?;
    for r in &records {
        r.validate().map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    }
    Ok(records)
}

pub fn read_segments(path: Option<&Path>, convs: &[Conversation]) -> Result<BTreeMap<String, Segmentation>, CliError> {
    let path = path.ok_or_else(|| {
        CliError::Usage("missing segments file: pass --segments <segments.jsonl> (produced by `segment`)".into())
    })?;
    require(path, "segments file")?;
    let records: Vec<SegmentRecord> = read_jsonl(path)?;
    let mut out = BTreeMap::new();
    for r in records {
        out.insert(r.id, Segmentation { boundaries: r.boundaries });
    }
    for c in convs {
        let seg = out
            .get(&c.id)
            .ok_or_else(|| CliError::Validation(format!("{}: no segmentation for {:?}", path.display(), c.id)))?;
        seg.validate(c.len()).map_err(|e| CliError::Validation(format!("{}: {:?}: {e}", path.display(), c.id)))?;
    }
    Ok(out)
}

fn write_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CliError> {
    Ok(write_jsonl(path, records)?)
}

fn timed<T>(stage: &str, f: impl FnOnce() -> Result<(T, Summary), CliError>) -> Result<(T, Summary), CliError> {
    let start = Instant::now();
    let out = f();
    let ms = start.elapsed().as_secs_f64() * 1e3;
    match &out {
        Ok((_, s)) => tracing::info!(stage, elapsed_ms = ms, summary = %s, "stage done"),
        Err(e) => tracing::error!(stage, elapsed_ms = ms, error = %e, "stage failed"),
    }
    out
}

pub struct IngestArgs {
    pub input: PathBuf,
    pub out: PathBuf,
    pub report: PathBuf,
    pub keywords: Option<PathBuf>,
    pub split: Option<String>,
    pub seed: u64,
    /// Writes `<name>.jsonl` per split here.
    pub split_dir: Option<PathBuf>,
}

pub fn ingest(a: &IngestArgs) -> Result<Summary, CliError> {
    timed("ingest", || {
        require(&a.input, "raw corpus")?;
        let keywords = match &a.keywords {
            Some(p) => {
                require(p, "keyword file")?;
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                KeywordMatcher::from_file_contents(&text)?
            }
            None => KeywordMatcher::default_artifacts(),
        };
        let spec = a.split.as_deref().map(|s| SplitSpec::parse(s, a.seed)).transpose()?;
        let raw: Vec<RawConversation> = read_jsonl(&a.input)?;
        let mut corpus = Vec::with_capacity(raw.len());
        for (k, r) in raw.into_iter().enumerate() {
            let conv = r.into_conversation(format!("conv-{:05}", k + 1), "");
            conv.validate().map_err(|e| CliError::Validation(format!("{}: record {}: {e}", a.input.display(), k + 1)))?;
            corpus.push(conv);
        }
        let output = ingest_corpus(corpus, &keywords, &FlagRules::default(), spec.as_ref())?;
        write_lines(&a.out, &output.clean)?;
        write_json_pretty(&a.report, &output.report)?;
        if let Some(dir) = &a.split_dir {
            for s in &output.splits {
                let convs: Vec<&Conversation> = s.indices.iter().map(|&i| &output.clean[i]).collect();
                write_lines(&dir.join(format!("{}.jsonl", s.name)), &convs)?;
            }
        }
        let hits: usize = output.report.conversations.iter().map(|c| c.hits.len()).sum();
        let flagged = output.report.conversations.iter().filter(|c| !c.flags.is_empty()).count();
        let splits: BTreeMap<&str, usize> = output.splits.iter().map(|s| (s.name.as_str(), s.indices.len())).collect();
        Ok(((), json!({"conversations": output.clean.len(), "scrub_hits": hits, "flagged": flagged, "splits": splits})))
    })
    .map(|(_, s)| s)
}

pub struct SegmentArgs {
    pub input: PathBuf,
    pub out: PathBuf,
    pub config: SegmenterConfig,
}

pub fn segment(a: &SegmentArgs, gw: &Gateway) -> Result<Summary, CliError> {
    timed("segment", || {
        let convs = read_conversations(&a.input, "conversation file")?;
        let records: Vec<SegmentRecord> = convs
            .par_iter()
            .map(|c| {
                let texts: Vec<String> = c.utterances.iter().map(|u| u.text.clone()).collect();
                let e = gw.embed(&texts)?;
                let seg = segment_embeddings(&e, &a.config)
                    .map_err(|err| CliError::Validation(format!("{:?}: {err}", c.id)))?;
                Ok(SegmentRecord { id: c.id.clone(), boundaries: seg.boundaries })
            })
            .collect::<Result<_, CliError>>()?;
        write_lines(&a.out, &records)?;
        let segments: usize = records.iter().map(|r| r.boundaries.len()).sum();
        Ok(((), json!({"conversations": records.len(), "segments": segments})))
    })
    .map(|(_, s)| s)
}

pub struct AnnotateArgs {
    pub input: PathBuf,
    pub segments: Option<PathBuf>,
    pub template: PathBuf,
    pub examples: Option<PathBuf>,
    pub out: PathBuf,
    pub partial_out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ChunkFailure {
    conversation_id: String,
    error: String,
}

fn read_text(path: &Path, what: &str) -> Result<String, CliError> {
    require(path, what)?;
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn annotate(a: &AnnotateArgs, gw: &Gateway) -> Result<Summary, CliError> {
    timed("annotate", || {
        let convs = read_conversations(&a.input, "conversation file")?;
        let segs = read_segments(a.segments.as_deref(), &convs)?;
        let cfg = AnnotatorConfig {
            template: read_text(&a.template, "prompt template")?,
            catalog: SkillCatalog::bundled(),
            examples: match &a.examples {
                Some(p) => read_text(p, "examples file")?,
                None => String::new(),
            },
        };
        let outcomes = convs
            .par_iter()
            .map(|c| annotate_conversation(c, &segs[&c.id], &cfg, gw))
            .collect::<Result<Vec<_>, _>>()?;
        let failures: Vec<ChunkFailure> = outcomes
            .iter()
            .flat_map(|o| {
                o.failures.iter().map(|e| ChunkFailure {
                    conversation_id: o.annotated.conversation.id.clone(),
                    error: e.to_string(),
                })
            })
            .collect();
        let annotated: Vec<AnnotatedConversation> = outcomes.into_iter().map(|o| o.annotated).collect();
        let records: usize = annotated.iter().map(|x| x.feedback.len()).sum();
        if !failures.is_empty() {
            let partial = a.partial_out.clone().unwrap_or_else(|| a.out.with_extension("partial.jsonl"));
            write_lines(&partial, &annotated)?;
            write_json_pretty(&partial.with_extension("failures.json"), &failures)?;
            let first = &failures[0];
            return Err(CliError::Partial(format!(
                "{} chunk(s) failed, first in {:?}: {}; partial annotations in {}",
                failures.len(),
                first.conversation_id,
                first.error,
                partial.display()
            )));
        }
        write_lines(&a.out, &annotated)?;
        Ok(((), json!({"conversations": annotated.len(), "feedback_records": records})))
    })
    .map(|(_, s)| s)
}

pub struct PairsArgs {
    pub input: PathBuf,
    pub segments: Option<PathBuf>,
    pub n: usize,
    pub out: PathBuf,
    pub outcomes: Option<PathBuf>,
}

pub fn pairs(a: &PairsArgs, gw: &Gateway) -> Result<Summary, CliError> {
    timed("pairs", || {
        let convs = read_conversations(&a.input, "conversation file")?;
        let segs = read_segments(a.segments.as_deref(), &convs)?;
        let ts = targets(&convs, &segs)?;
        let outcomes = pair_outcomes(&ts, a.n, gw)?;
        let pairs: Vec<_> = outcomes.iter().filter_map(|o| o.pair.clone()).collect();
        let records = export_dpo(&pairs)?;
        write_lines(&a.out, &records)?;
        if let Some(p) = &a.outcomes {
            write_lines(p, &outcomes)?;
        }
        let gated = outcomes.iter().filter(|o| o.samples.is_empty()).count();
        Ok(((), json!({"utterances": outcomes.len(), "gated_out": gated, "pairs": records.len()})))
    })
    .map(|(_, s)| s)
}

pub struct SampleArgs {
    pub input: PathBuf,
    pub segments: Option<PathBuf>,
    pub n: usize,
    pub score: bool,
    pub out: PathBuf,
}

pub fn sample(a: &SampleArgs, gw: &Gateway) -> Result<Summary, CliError> {
    timed("sample", || {
        let convs = read_conversations(&a.input, "conversation file")?;
        let segs = read_segments(a.segments.as_deref(), &convs)?;
        let ts = targets(&convs, &segs)?;
        let gens = ts
            .par_iter()
            .map(|t| sample_target(t, a.n, a.score, gw))
            .collect::<Result<Vec<UtteranceSamples>, _>>()?;
        write_lines(&a.out, &gens)?;
        Ok(((), json!({"utterances": gens.len(), "samples": gens.len() * a.n})))
    })
    .map(|(_, s)| s)
}

pub struct SftArgs {
    pub mode: SftMode,
    pub input: Option<PathBuf>,
    pub segments: Option<PathBuf>,
    pub gens: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn sft(a: &SftArgs) -> Result<Summary, CliError> {
    timed("sft-export", || {
        let records = match a.mode {
            SftMode::Expert => {
                let path = a.input.as_deref().ok_or_else(|| {
                    CliError::Usage("expert mode needs --in <annotated.jsonl> and --segments".into())
                })?;
                let annotated = read_annotated(path, "annotated file")?;
                let convs: Vec<Conversation> = annotated.iter().map(|x| x.conversation.clone()).collect();
                let segs = read_segments(a.segments.as_deref(), &convs)?;
                export_sft_expert(&annotated, &segs)?
            }
            SftMode::Gens | SftMode::Best => {
                let path = a
                    .gens
                    .as_deref()
                    .ok_or_else(|| CliError::Usage("gens and best modes need --gens <generations.jsonl>".into()))?;
                require(path, "generations file")?;
                let gens: Vec<UtteranceSamples> = read_jsonl(path)?;
                export_sft_generations(&gens, a.mode)?
            }
        };
        write_lines(&a.out, &records)?;
        Ok(((), json!({"records": records.len()})))
    })
    .map(|(_, s)| s)
}

pub struct ScoreArgs {
    pub input: PathBuf,
    pub segments: Option<PathBuf>,
    pub k: usize,
    pub out: PathBuf,
    pub resume: bool,
}

pub fn eval_score(a: &ScoreArgs, gw: &Gateway) -> Result<Summary, CliError> {
    timed("eval-score", || {
        let convs = read_conversations(&a.input, "conversation file")?;
        let segs = read_segments(a.segments.as_deref(), &convs)?;
        let ts = targets(&convs, &segs)?;
        let resume = if a.resume && a.out.exists() {
            Some(EvalSampleSet { entries: read_jsonl::<EvalEntry>(&a.out)? })
        } else {
            None
        };
        match generate_eval_scores(&ts, a.k, gw, resume.as_ref()) {
            Ok(set) => {
                write_lines(&a.out, &set.entries)?;
                Ok(((), json!({"utterances": ts.len(), "entries": set.entries.len()})))
            }
            Err(stop) => {
                write_lines(&a.out, &stop.partial.entries)?;
                let cause: CliError = stop.error.into();
                Err(CliError::Partial(format!(
                    "{cause}; {} entries checkpointed to {} (rerun with --resume)",
                    stop.partial.entries.len(),
                    a.out.display()
                )))
            }
        }
    })
    .map(|(_, s)| s)
}

pub struct ReportArgs {
    /// (system name, scores file), in column order.
    pub systems: Vec<(String, PathBuf)>,
    pub baseline: String,
    pub alpha: f64,
    pub bins: usize,
    /// Output stem; `.json`, `.txt` and `.hist.csv` are appended.
    pub out: PathBuf,
}

pub fn parse_systems(spec: &str) -> Result<Vec<(String, PathBuf)>, CliError> {
    spec.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (name, path) = p
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("expected name=path in --scores, got {p:?}")))?;
            Ok((name.trim().to_string(), PathBuf::from(path.trim())))
        })
        .collect()
}

/// `report.json` and `report` both give the stem `report`.
pub fn report_stem(out: &Path) -> PathBuf {
    match out.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("txt") => out.with_extension(""),
        _ => out.to_path_buf(),
    }
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn eval_report(a: &ReportArgs) -> Result<Summary, CliError> {
    timed("eval-report", || {
        if a.systems.is_empty() {
            return Err(CliError::Usage("--scores needs at least one name=path".into()));
        }
        let mut systems = Vec::new();
        for (name, path) in &a.systems {
            require(path, &format!("scores file for {name}"))?;
            systems.push((name.clone(), EvalSampleSet { entries: read_jsonl(path)? }));
        }
        let cfg = ReportConfig { alpha: a.alpha, bins: a.bins, ..ReportConfig::new(a.baseline.clone()) };
        let report = build_report(&systems, &cfg)?;
        let stem = report_stem(&a.out);
        write_json_pretty(&with_suffix(&stem, ".json"), &report)?;
        write_atomic(&with_suffix(&stem, ".txt"), report.render_table().as_bytes())?;
        write_atomic(&with_suffix(&stem, ".hist.csv"), report.histogram_csv().as_bytes())?;
        let stars = report.comparisons.iter().filter(|c| c.significant).count();
        Ok(((), json!({"systems": systems.len(), "significant": stars})))
    })
    .map(|(_, s)| s)
}

pub fn stats(input: &Path, out: Option<&Path>) -> Result<String, CliError> {
    let data = read_annotated(input, "annotated file")?;
    let s = dataset_stats(&data).map_err(|e| CliError::Validation(e.to_string()))?;
    if let Some(p) = out {
        write_json_pretty(p, &s)?;
    }
    Ok(s.render())
}

/// Encodes records the way every stage writes them; used by tests.
pub fn encode<T: Serialize>(records: &[T]) -> Vec<u8> {
    to_jsonl(records).expect("records serialize")
}
