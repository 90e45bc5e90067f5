//! Sampled self-score evaluation: worst-fraction means, significance tests
//! and report rendering.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::gateway::Gateway;
use crate::selfimprove::{sample_target, SelfImproveError, Target};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("empty input")]
    EmptyInput,
    #[error("fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("need at least {needed} values per sample, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("both samples are constant and equal")]
    ZeroVariance,
    #[error("sigma {sigma} outside [0, 1] at {conversation_id:?} utterance {utterance_index} sample {sample_index}")]
    SigmaOutOfRange { conversation_id: String, utterance_index: usize, sample_index: usize, sigma: f64 },
    #[error("duplicate entry {conversation_id:?} utterance {utterance_index} sample {sample_index}")]
    DuplicateEntry { conversation_id: String, utterance_index: usize, sample_index: usize },
    #[error("systems {0:?} and {1:?} cover different (conversation, utterance, sample) keys")]
    MismatchedSystems(String, String),
    #[error("unknown baseline system {0:?}")]
    UnknownBaseline(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub conversation_id: String,
    pub utterance_index: usize,
    pub sample_index: usize,
    pub sigma: f64,
}

impl EvalEntry {
    fn key(&self) -> (&str, usize, usize) {
        (&self.conversation_id, self.utterance_index, self.sample_index)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSampleSet {
    pub entries: Vec<EvalEntry>,
}

impl EvalSampleSet {
    pub fn validate(&self) -> Result<(), EvalError> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !(0.0..=1.0).contains(&e.sigma) {
                return Err(EvalError::SigmaOutOfRange {
                    conversation_id: e.conversation_id.clone(),
                    utterance_index: e.utterance_index,
                    sample_index: e.sample_index,
                    sigma: e.sigma,
                });
            }
            if !seen.insert(e.key()) {
                return Err(EvalError::DuplicateEntry {
                    conversation_id: e.conversation_id.clone(),
                    utterance_index: e.utterance_index,
                    sample_index: e.sample_index,
                });
            }
        }
        Ok(())
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.sigma).collect()
    }

    fn keys(&self) -> BTreeSet<(&str, usize, usize)> {
        self.entries.iter().map(EvalEntry::key).collect()
    }
}

/// Scoring stopped early; `partial` holds every utterance that completed.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalInterrupted {
    pub partial: EvalSampleSet,
    pub error: SelfImproveError,
}

/// Draws and self-scores `k` generations per target. Targets whose `k`
/// entries are already in `resume` are skipped. Output follows target
/// order, then sample order.
pub fn generate_eval_scores(
    targets: &[Target],
    k: usize,
    gateway: &Gateway,
    resume: Option<&EvalSampleSet>,
) -> Result<EvalSampleSet, EvalInterrupted> {
    if k == 0 {
        return Err(EvalInterrupted {
            partial: resume.cloned().unwrap_or_default(),
            error: SelfImproveError::Precondition("k must be >= 1".into()),
        });
    }
    let mut done: BTreeMap<(String, usize), Vec<EvalEntry>> = BTreeMap::new();
    for e in resume.map_or(&[][..], |r| &r.entries) {
        done.entry((e.conversation_id.clone(), e.utterance_index)).or_default().push(e.clone());
    }
    let results: Vec<Result<Vec<EvalEntry>, SelfImproveError>> = targets
        .par_iter()
        .map(|t| {
            if let Some(prev) = done.get(&(t.conv.id.clone(), t.index)) {
                let have: BTreeSet<usize> = prev.iter().map(|e| e.sample_index).collect();
                if (0..k).all(|s| have.contains(&s)) {
                    let mut prev: Vec<EvalEntry> = prev.iter().filter(|e| e.sample_index < k).cloned().collect();
                    prev.sort_by_key(|e| e.sample_index);
                    return Ok(prev);
                }
            }
            let s = sample_target(t, k, true, gateway)?;
            Ok(s.samples
                .into_iter()
                .map(|r| EvalEntry {
                    conversation_id: s.conversation_id.clone(),
                    utterance_index: s.utterance_index,
                    sample_index: r.sample_index,
                    sigma: r.sigma.expect("scored"),
                })
                .collect())
        })
        .collect();
    let mut entries = Vec::new();
    let mut first_error = None;
    for r in results {
        match r {
            Ok(es) => entries.extend(es),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    let set = EvalSampleSet { entries };
    match first_error {
        None => Ok(set),
        Some(error) => Err(EvalInterrupted { partial: set, error }),
    }
}

/// `ceil(f * n)`, where products within 1e-9 of an integer count as that
/// integer so that e.g. `0.07 * 100` gives 7.
pub fn worst_subset_size(n: usize, f: f64) -> Result<usize, EvalError> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(EvalError::InvalidFraction(f));
    }
    if n == 0 {
        return Err(EvalError::EmptyInput);
    }
    let x = f * n as f64;
    let r = x.round();
    let size = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    Ok((size as usize).clamp(1, n))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// The lowest `ceil(f * n)` values, ascending.
pub fn worst_fraction(values: &[f64], f: f64) -> Result<Vec<f64>, EvalError> {
    let size = worst_subset_size(values.len(), f)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.truncate(size);
    Ok(sorted)
}

pub fn worst_fraction_mean(values: &[f64], f: f64) -> Result<f64, EvalError> {
    Ok(mean(&worst_fraction(values, f)?))
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction,
/// converged to a relative step of 1e-15 (absolute error well below 1e-10
/// for the t-test arguments used here).
pub fn incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    // The fraction converges quickly for x < (a + 1) / (a + b + 2).
    if x > (a + 1.0) / (a + b + 2.0) {
        return 1.0 - incomplete_beta(1.0 - x, b, a);
    }
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 + num * d;
        d = if d.abs() < TINY { 1.0 / TINY } else { 1.0 / d };
        c = 1.0 + num / c;
        if c.abs() < TINY {
            c = TINY;
        }
        h *= d * c;
        let num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 + num * d;
        d = if d.abs() < TINY { 1.0 / TINY } else { 1.0 / d };
        c = 1.0 + num / c;
        if c.abs() < TINY {
            c = TINY;
        }
        let step = d * c;
        h *= step;
        if (step - 1.0).abs() < 1e-15 {
            break;
        }
    }
    ln_front.exp() * h / a
}

/// Two-sided p-value of Student's t with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    incomplete_beta(df / (df + t * t), df / 2.0, 0.5).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, v)
}

/// Welch's unequal-variance t-test of `a` against `b`.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTest, EvalError> {
    let got = a.len().min(b.len());
    if got < 2 {
        return Err(EvalError::TooFewSamples { needed: 2, got });
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        if ma == mb {
            return Err(EvalError::ZeroVariance);
        }
        // Two different constants: the difference is certain.
        let t = if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY };
        return Ok(TTest { t, df: (a.len() + b.len() - 2) as f64, p_value: 0.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    Ok(TTest { t, df, p_value: t_two_sided_p(t, df) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UTest {
    /// U statistic of the first sample.
    pub u: f64,
    pub p_value: f64,
    pub method: UMethod,
}

/// Exact mode is used when `n * m` is at most this.
pub const EXACT_LIMIT: usize = 64;

/// Midranks (1-based) of the pooled values.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn normal_sf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2)
}

/// Mann–Whitney U test, two-sided, with midranks for ties.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<UTest, EvalError> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(EvalError::TooFewSamples { needed: 1, got: 0 });
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    // Doubled midranks are integers.
    let doubled: Vec<i64> = ranks.iter().map(|r| (2.0 * r).round() as i64).collect();
    let r2: i64 = doubled[..n].iter().sum();
    let nm = (n * m) as i64;
    // 2U = 2R - n(n+1).
    let u2 = r2 - (n * (n + 1)) as i64;
    let u = u2 as f64 / 2.0;
    if n * m <= EXACT_LIMIT {
        let p = exact_u_p(&doubled, n, (u2 - nm).abs());
        return Ok(UTest { u, p_value: p, method: UMethod::Exact });
    }
    let big_n = (n + m) as f64;
    let mut tie_sum = 0.0;
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_sum += t * t * t - t;
        i = j + 1;
    }
    let var = (n * m) as f64 / 12.0 * ((big_n + 1.0) - tie_sum / (big_n * (big_n - 1.0)));
    if var <= 0.0 {
        return Ok(UTest { u, p_value: 1.0, method: UMethod::Normal });
    }
    let z = (((u - (n * m) as f64 / 2.0).abs() - 0.5).max(0.0)) / var.sqrt();
    Ok(UTest { u, p_value: (2.0 * normal_sf(z)).min(1.0), method: UMethod::Normal })
}

/// `P(|2U - nm| >= dev)` over all ways to assign `n` of the pooled
/// doubled ranks to the first sample.
fn exact_u_p(doubled: &[i64], n: usize, dev: i64) -> f64 {
    let total: i64 = doubled.iter().sum();
    let width = total as usize + 1;
    // counts[j][s]: subsets of size j with doubled rank sum s.
    let mut counts = vec![vec![0f64; width]; n + 1];
    counts[0][0] = 1.0;
    for &r in doubled {
        let r = r as usize;
        for j in (1..=n).rev() {
            let (lo, hi) = counts.split_at_mut(j);
            for s in (r..width).rev() {
                let c = lo[j - 1][s - r];
                if c != 0.0 {
                    hi[0][s] += c;
                }
            }
        }
    }
    let m = doubled.len() - n;
    let nm = (n * m) as i64;
    let base = (n * (n + 1)) as i64;
    let (mut hit, mut all) = (0.0, 0.0);
    for (s, &c) in counts[n].iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        all += c;
        if (s as i64 - base - nm).abs() >= dev {
            hit += c;
        }
    }
    (hit / all).min(1.0)
}

/// Report settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportConfig {
    pub baseline: String,
    pub alpha: f64,
    pub fractions: Vec<f64>,
    pub bins: usize,
}

impl ReportConfig {
    pub fn new(baseline: impl Into<String>) -> Self {
        ReportConfig { baseline: baseline.into(), alpha: 0.01, fractions: vec![0.01, 0.05], bins: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowValue {
    pub mean: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub system: String,
    pub baseline: String,
    pub row: String,
    pub t_test: Option<TTest>,
    pub u_test: UTest,
    /// Both tests below alpha and the system's mean above the baseline's.
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSummary {
    pub name: String,
    pub n: usize,
    /// Row label to value, rows in report order.
    pub rows: Vec<(String, RowValue)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: BTreeMap<String, Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub baseline: String,
    pub alpha: f64,
    pub systems: Vec<SystemSummary>,
    pub comparisons: Vec<Comparison>,
    pub histogram: Histogram,
}

pub fn row_label(f: Option<f64>) -> String {
    match f {
        None => "overall".into(),
        Some(f) => format!("worst {}%", trim_float(f * 100.0)),
    }
}

fn trim_float(x: f64) -> String {
    let s = format!("{x:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Values a row is computed over.
fn row_values(values: &[f64], f: Option<f64>) -> Result<Vec<f64>, EvalError> {
    match f {
        None => Ok(values.to_vec()),
        Some(f) => worst_fraction(values, f),
    }
}

/// Builds the report for `systems` (name, scores) in the given order.
/// Every system must cover the same entry keys as the baseline.
pub fn build_report(systems: &[(String, EvalSampleSet)], cfg: &ReportConfig) -> Result<AggregateReport, EvalError> {
    if systems.is_empty() {
        return Err(EvalError::Precondition("at least one system is required".into()));
    }
    for f in &cfg.fractions {
        if !(*f > 0.0 && *f <= 1.0) {
            return Err(EvalError::InvalidFraction(*f));
        }
    }
    let base = systems
        .iter()
        .find(|(n, _)| *n == cfg.baseline)
        .ok_or_else(|| EvalError::UnknownBaseline(cfg.baseline.clone()))?;
    let base_keys = base.1.keys();
    for (name, set) in systems {
        set.validate()?;
        if set.entries.is_empty() {
            return Err(EvalError::EmptyInput);
        }
        if set.keys() != base_keys {
            return Err(EvalError::MismatchedSystems(cfg.baseline.clone(), name.clone()));
        }
    }
    let rows: Vec<Option<f64>> = std::iter::once(None).chain(cfg.fractions.iter().map(|&f| Some(f))).collect();
    let base_values = base.1.sigmas();
    let mut summaries = Vec::new();
    let mut comparisons = Vec::new();
    for (name, set) in systems {
        let values = set.sigmas();
        let mut out_rows = Vec::new();
        for &f in &rows {
            let sub = row_values(&values, f)?;
            out_rows.push((row_label(f), RowValue { mean: mean(&sub), size: sub.len() }));
            if *name == cfg.baseline {
                continue;
            }
            let base_sub = row_values(&base_values, f)?;
            let t_test = match welch_t_test(&sub, &base_sub) {
                Ok(t) => Some(t),
                Err(EvalError::ZeroVariance) | Err(EvalError::TooFewSamples { .. }) => None,
                Err(e) => return Err(e),
            };
            let u_test = mann_whitney_u(&sub, &base_sub)?;
            let improved = mean(&sub) > mean(&base_sub);
            let significant = improved && t_test.is_some_and(|t| t.p_value < cfg.alpha) && u_test.p_value < cfg.alpha;
            comparisons.push(Comparison {
                system: name.clone(),
                baseline: cfg.baseline.clone(),
                row: row_label(f),
                t_test,
                u_test,
                significant,
            });
        }
        summaries.push(SystemSummary { name: name.clone(), n: values.len(), rows: out_rows });
    }
    let histogram = histogram(systems, cfg.bins.max(1));
    Ok(AggregateReport { baseline: cfg.baseline.clone(), alpha: cfg.alpha, systems: summaries, comparisons, histogram })
}

/// Equal-width bins over [0, 1]; the last bin is closed.
fn histogram(systems: &[(String, EvalSampleSet)], bins: usize) -> Histogram {
    let edges = (0..=bins).map(|k| k as f64 / bins as f64).collect();
    let counts = systems
        .iter()
        .map(|(name, set)| {
            let mut c = vec![0; bins];
            for s in set.sigmas() {
                c[((s * bins as f64) as usize).min(bins - 1)] += 1;
            }
            (name.clone(), c)
        })
        .collect();
    Histogram { edges, counts }
}

impl AggregateReport {
    /// Text table: one row per aggregate, one column per system; `*`
    /// marks significance against the baseline.
    pub fn render_table(&self) -> String {
        let label_w = self.systems[0].rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(8);
        let col_w = self.systems.iter().map(|s| s.name.len()).max().unwrap_or(0).max(8) + 2;
        let mut out = format!("{:label_w$}", "");
        for s in &self.systems {
            out.push_str(&format!("{:>col_w$}", s.name));
        }
        out.push('\n');
        for (r, (label, _)) in self.systems[0].rows.iter().enumerate() {
            out.push_str(&format!("{label:label_w$}"));
            for s in &self.systems {
                let star = self.comparisons.iter().any(|c| c.system == s.name && c.row == *label && c.significant);
                let cell = format!("{:.3}{}", s.rows[r].1.mean, if star { "*" } else { "" });
                out.push_str(&format!("{cell:>col_w$}"));
            }
            out.push('\n');
        }
        out.push_str(&format!("* p < {} in both Welch t and Mann-Whitney U vs {}\n", self.alpha, self.baseline));
        if !self.comparisons.is_empty() {
            out.push('\n');
            for c in &self.comparisons {
                let t = c.t_test.map_or("t n/a".to_string(), |t| format!("t={:.4} p={:.3e}", t.t, t.p_value));
                out.push_str(&format!(
                    "{} vs {} [{}]: {}; U={} p={:.3e} ({:?})\n",
                    c.system, c.baseline, c.row, t, c.u_test.u, c.u_test.p_value, c.u_test.method
                ));
            }
        }
        out
    }

    pub fn histogram_csv(&self) -> String {
        let names: Vec<&String> = self.histogram.counts.keys().collect();
        let mut out = String::from("bin_lo,bin_hi");
        for n in &names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for k in 0..self.histogram.edges.len() - 1 {
            out.push_str(&format!("{},{}", self.histogram.edges[k], self.histogram.edges[k + 1]));
            for n in &names {
                out.push_str(&format!(",{}", self.histogram.counts[*n][k]));
            }
            out.push('\n');
        }
        out
    }
}
