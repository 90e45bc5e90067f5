//! Pipeline config file and the `run` command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use peerfeedback_core::io::{to_jsonl, write_atomic};
use peerfeedback_core::segmenter::{SegmenterConfig, StopRule};
use peerfeedback_core::selfimprove::{SftMode, DEFAULT_SAMPLES};

use crate::error::{require, CliError};
use crate::stages::{self, Summary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Segment,
    Annotate,
    Pairs,
    SftExport,
    EvalScore,
    EvalReport,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Segment,
        Stage::Annotate,
        Stage::Pairs,
        Stage::SftExport,
        Stage::EvalScore,
        Stage::EvalReport,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Segment => "segment",
            Stage::Annotate => "annotate",
            Stage::Pairs => "pairs",
            Stage::SftExport => "sft-export",
            Stage::EvalScore => "eval-score",
            Stage::EvalReport => "eval-report",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub ingest: bool,
    pub segment: bool,
    pub annotate: bool,
    pub pairs: bool,
    pub sft_export: bool,
    pub eval_score: bool,
    pub eval_report: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            ingest: true,
            segment: true,
            annotate: true,
            pairs: true,
            sft_export: true,
            eval_score: true,
            eval_report: true,
        }
    }
}

impl StageToggles {
    fn enabled(&self, s: Stage) -> bool {
        match s {
            Stage::Ingest => self.ingest,
            Stage::Segment => self.segment,
            Stage::Annotate => self.annotate,
            Stage::Pairs => self.pairs,
            Stage::SftExport => self.sft_export,
            Stage::EvalScore => self.eval_score,
            Stage::EvalReport => self.eval_report,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentSection {
    pub mask: usize,
    pub min_seg: usize,
    pub c: f64,
    pub boundaries: Option<usize>,
}

impl Default for SegmentSection {
    fn default() -> Self {
        SegmentSection { mask: 11, min_seg: 2, c: 1.2, boundaries: None }
    }
}

impl SegmentSection {
    fn config(&self) -> SegmenterConfig {
        let stop = match self.boundaries {
            Some(count) => StopRule::FixedBoundaries { count },
            None => StopRule::GradientThreshold { c: self.c },
        };
        SegmenterConfig { mask: self.mask, min_seg: self.min_seg, stop }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub baseline: String,
    /// System name to backend profile.
    pub systems: BTreeMap<String, PathBuf>,
    pub alpha: f64,
    pub bins: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { baseline: String::new(), systems: BTreeMap::new(), alpha: 0.01, bins: 20 }
    }
}

/// Contents of `pipeline.toml`. Relative paths resolve against the
/// config file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub raw: PathBuf,
    #[serde(default)]
    pub keywords: Option<PathBuf>,
    /// Split spec; the `annotate`, `prefs` and `test` splits feed the
    /// matching stages. Without it every stage reads the full corpus.
    #[serde(default)]
    pub split: Option<String>,
    pub template: PathBuf,
    #[serde(default)]
    pub examples: Option<PathBuf>,
    pub profile: PathBuf,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_samples")]
    pub eval_k: usize,
    #[serde(default)]
    pub max_concurrency: Option<usize>,
    #[serde(default)]
    pub stages: StageToggles,
    #[serde(default)]
    pub segment: SegmentSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_samples() -> usize {
    DEFAULT_SAMPLES
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        require(path, "pipeline config")?;
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        cfg.check()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| *p = base.join(&*p);
        fix(&mut self.out_dir);
        fix(&mut self.raw);
        fix(&mut self.template);
        fix(&mut self.profile);
        self.keywords.iter_mut().for_each(fix);
        self.examples.iter_mut().for_each(fix);
        self.eval.systems.values_mut().for_each(fix);
    }

    /// Input files must exist before any stage runs.
    fn check(&self) -> Result<(), CliError> {
        require(&self.raw, "raw corpus")?;
        require(&self.template, "prompt template")?;
        require(&self.profile, "backend profile")?;
        if let Some(k) = &self.keywords {
            require(k, "keyword file")?;
        }
        if let Some(e) = &self.examples {
            require(e, "examples file")?;
        }
        for (name, p) in &self.eval.systems {
            require(p, &format!("backend profile for system {name}"))?;
        }
        if self.stages.eval_report && !self.eval.systems.is_empty() && !self.eval.systems.contains_key(&self.eval.baseline)
        {
            return Err(CliError::Validation(format!("eval.baseline {:?} is not in eval.systems", self.eval.baseline)));
        }
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn split_file(&self, split: &str) -> PathBuf {
        match &self.split {
            Some(_) => self.out_dir.join("splits").join(format!("{split}.jsonl")),
            None => self.path("clean.jsonl"),
        }
    }

    fn scores_file(&self, system: &str) -> PathBuf {
        self.out_dir.join("scores").join(format!("{system}.jsonl"))
    }
}

fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<Summary, CliError> {
    let gw = || stages::gateway(Some(&cfg.profile), cfg.max_concurrency);
    let segments = Some(cfg.path("segments.jsonl"));
    match stage {
        Stage::Ingest => stages::ingest(&stages::IngestArgs {
            input: cfg.raw.clone(),
            out: cfg.path("clean.jsonl"),
            report: cfg.path("scrub_report.json"),
            keywords: cfg.keywords.clone(),
            split: cfg.split.clone(),
            seed: cfg.seed,
            split_dir: cfg.split.as_ref().map(|_| cfg.path("splits")),
        }),
        Stage::Segment => stages::segment(
            &stages::SegmentArgs {
                input: cfg.path("clean.jsonl"),
                out: cfg.path("segments.jsonl"),
                config: cfg.segment.config(),
            },
            &gw()?,
        ),
        Stage::Annotate => stages::annotate(
            &stages::AnnotateArgs {
                input: cfg.split_file("annotate"),
                segments,
                template: cfg.template.clone(),
                examples: cfg.examples.clone(),
                out: cfg.path("annotated.jsonl"),
                partial_out: Some(cfg.path("annotated.partial.jsonl")),
            },
            &gw()?,
        ),
        Stage::Pairs => stages::pairs(
            &stages::PairsArgs {
                input: cfg.split_file("prefs"),
                segments,
                n: cfg.samples,
                out: cfg.path("pairs.dpo.jsonl"),
                outcomes: Some(cfg.path("pair_outcomes.jsonl")),
            },
            &gw()?,
        ),
        Stage::SftExport => stages::sft(&stages::SftArgs {
            mode: SftMode::Expert,
            input: Some(cfg.path("annotated.jsonl")),
            segments,
            gens: None,
            out: cfg.path("train.sft.jsonl"),
        }),
        Stage::EvalScore => {
            let mut per_system = serde_json::Map::new();
            for (name, profile) in &cfg.eval.systems {
                let gw = stages::gateway(Some(profile), cfg.max_concurrency)?;
                let s = stages::eval_score(
                    &stages::ScoreArgs {
                        input: cfg.split_file("test"),
                        segments: segments.clone(),
                        k: cfg.eval_k,
                        out: cfg.scores_file(name),
                        resume: true,
                    },
                    &gw,
                )?;
                per_system.insert(name.clone(), s);
            }
            Ok(Value::Object(per_system))
        }
        Stage::EvalReport => {
            let systems = cfg.eval.systems.keys().map(|n| (n.clone(), cfg.scores_file(n))).collect();
            stages::eval_report(&stages::ReportArgs {
                systems,
                baseline: cfg.eval.baseline.clone(),
                alpha: cfg.eval.alpha,
                bins: cfg.eval.bins,
                out: cfg.path("report"),
            })
        }
    }
}

/// Runs the requested stages (all enabled ones when `only` is empty) in
/// pipeline order and appends one line per stage to `run_log.jsonl`.
pub fn run_pipeline(cfg: &PipelineConfig, only: &[Stage]) -> Result<Summary, CliError> {
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    let selected: Vec<Stage> = Stage::ALL
        .into_iter()
        .filter(|s| if only.is_empty() { cfg.stages.enabled(*s) } else { only.contains(s) })
        .filter(|s| !matches!(s, Stage::EvalScore | Stage::EvalReport) || !cfg.eval.systems.is_empty())
        .collect();
    let mut log = Vec::new();
    let mut summary = serde_json::Map::new();
    let mut failure = None;
    for stage in selected {
        let start = Instant::now();
        let result = run_stage(cfg, stage);
        let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
        match result {
            Ok(s) => {
                log.push(json!({"stage": stage.name(), "status": "ok", "elapsed_ms": elapsed_ms, "summary": s}));
                summary.insert(stage.name().to_string(), s);
            }
            Err(e) => {
                log.push(json!({"stage": stage.name(), "status": "failed", "elapsed_ms": elapsed_ms, "error": e.to_string()}));
                failure = Some(e);
                break;
            }
        }
    }
    append_log(&cfg.path("run_log.jsonl"), &log)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(json!({ "out_dir": cfg.out_dir, "stages": summary })),
    }
}

fn append_log(path: &Path, lines: &[Value]) -> Result<(), CliError> {
    let mut bytes = std::fs::read(path).unwrap_or_default();
    bytes.extend(to_jsonl(lines).map_err(|e| CliError::Validation(e.to_string()))?);
    Ok(write_atomic(path, &bytes)?)
}
