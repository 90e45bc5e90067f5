//! C99 divisive segmentation over utterance embeddings and the derived
//! per-utterance context windows.
//!
//! Pipeline: cosine similarity matrix, local rank transform inside a
//! `mask × mask` window, then divisive boundary insertion maximizing inside
//! density, terminated by a gradient threshold.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SegmentError {
    #[error("embedding matrix has no rows")]
    NoRows,
    #[error("embedding row {row} has dimension {found}, expected {expected}")]
    RaggedRow { row: usize, found: usize, expected: usize },
    #[error("embedding row {row} contains a non-finite value")]
    NonFinite { row: usize },
    #[error("embedding row {row} has zero norm")]
    ZeroNormEmbedding { row: usize },
    #[error("mask must be an odd integer >= 3, got {0}")]
    InvalidMask(usize),
    #[error("mask {mask} exceeds 2n-1 = {limit}")]
    MaskTooLarge { mask: usize, limit: usize },
    #[error("min_seg must be at least 1")]
    InvalidMinSeg,
    #[error("invalid segmentation: {0}")]
    InvalidSegmentation(String),
}

/// One embedding vector per utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: Vec<Vec<f64>>,
    dim: usize,
}

impl EmbeddingMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, SegmentError> {
        let dim = rows.first().ok_or(SegmentError::NoRows)?.len();
        for (row, v) in rows.iter().enumerate() {
            if v.len() != dim {
                return Err(SegmentError::RaggedRow { row, found: v.len(), expected: dim });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(SegmentError::NonFinite { row });
            }
        }
        Ok(EmbeddingMatrix { rows, dim })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Dense row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        SquareMatrix { n, data: vec![0.0; n * n] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        assert!(rows.iter().all(|r| r.len() == n), "matrix must be square");
        SquareMatrix { n, data: rows.concat() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n.max(1)).map(<[f64]>::to_vec).take(self.n).collect()
    }
}

pub fn cosine_similarity_matrix(e: &EmbeddingMatrix) -> Result<SquareMatrix, SegmentError> {
    let norms: Vec<f64> = e.rows.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    if let Some(row) = norms.iter().position(|&n| n == 0.0) {
        return Err(SegmentError::ZeroNormEmbedding { row });
    }
    let n = e.len();
    let mut s = SquareMatrix::zeros(n);
    for i in 0..n {
        s.set(i, i, 1.0);
        for j in i + 1..n {
            let dot: f64 = e.rows[i].iter().zip(&e.rows[j]).map(|(a, b)| a * b).sum();
            let mut v = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            // Rounding noise on parallel vectors would otherwise leak into ranks.
            if 1.0 - v.abs() <= 1e-12 {
                v = v.signum();
            }
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    Ok(s)
}

/// Replaces each entry with the fraction of its `mask × mask` neighbours
/// (clipped at the edges, self excluded) holding a strictly smaller value.
pub fn rank_transform(s: &SquareMatrix, mask: usize) -> Result<SquareMatrix, SegmentError> {
    if mask < 3 || mask.is_multiple_of(2) {
        return Err(SegmentError::InvalidMask(mask));
    }
    let n = s.n();
    if n <= 1 {
        return Ok(SquareMatrix::zeros(n));
    }
    let limit = 2 * n - 1;
    if mask > limit {
        return Err(SegmentError::MaskTooLarge { mask, limit });
    }
    let r = mask / 2;
    let mut out = SquareMatrix::zeros(n);
    for i in 0..n {
        let rows = i.saturating_sub(r)..(i + r + 1).min(n);
        for j in 0..n {
            let cols = j.saturating_sub(r)..(j + r + 1).min(n);
            let v = s.get(i, j);
            let mut smaller = 0usize;
            for a in rows.clone() {
                for b in cols.clone() {
                    if s.get(a, b) < v {
                        smaller += 1;
                    }
                }
            }
            let neighbours = rows.len() * cols.len() - 1;
            out.set(i, j, smaller as f64 / neighbours as f64);
        }
    }
    Ok(out)
}

/// Termination rule for divisive boundary insertion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopRule {
    /// Keep insertion steps while the density gain exceeds
    /// `mean + c * std` of all observed gains.
    GradientThreshold { c: f64 },
    /// Insert exactly this many boundaries, or as many as fit.
    FixedBoundaries { count: usize },
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule::GradientThreshold { c: 1.2 }
    }
}

/// Segment start indices; always begins with 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    pub boundaries: Vec<usize>,
}

impl Segmentation {
    pub fn single() -> Self {
        Segmentation { boundaries: vec![0] }
    }

    pub fn validate(&self, n: usize) -> Result<(), SegmentError> {
        let b = &self.boundaries;
        if b.first() != Some(&0) {
            return Err(SegmentError::InvalidSegmentation("boundaries must start at 0".into()));
        }
        if !b.windows(2).all(|w| w[0] < w[1]) {
            return Err(SegmentError::InvalidSegmentation("boundaries must be strictly increasing".into()));
        }
        if n > 0 && b.last().is_some_and(|&last| last >= n) {
            return Err(SegmentError::InvalidSegmentation(format!("boundary beyond {n} utterances")));
        }
        Ok(())
    }

    /// Segment ranges covering `0..n`.
    pub fn segments(&self, n: usize) -> Vec<Range<usize>> {
        let mut out = Vec::with_capacity(self.boundaries.len());
        for (k, &start) in self.boundaries.iter().enumerate() {
            let end = self.boundaries.get(k + 1).copied().unwrap_or(n);
            out.push(start..end);
        }
        out
    }
}

/// 2-D prefix sums for O(1) block sums.
struct BlockSums {
    n: usize,
    prefix: Vec<f64>,
}

impl BlockSums {
    fn new(m: &SquareMatrix) -> Self {
        let n = m.n();
        let w = n + 1;
        let mut prefix = vec![0.0; w * w];
        for i in 0..n {
            for j in 0..n {
                prefix[(i + 1) * w + j + 1] =
                    m.get(i, j) + prefix[i * w + j + 1] + prefix[(i + 1) * w + j] - prefix[i * w + j];
            }
        }
        BlockSums { n, prefix }
    }

    /// Sum over the diagonal block `[a, b) × [a, b)`.
    fn block(&self, a: usize, b: usize) -> f64 {
        let w = self.n + 1;
        self.prefix[b * w + b] - self.prefix[a * w + b] - self.prefix[b * w + a] + self.prefix[a * w + a]
    }
}

/// Result of running divisive insertion to exhaustion.
#[derive(Debug, Clone, PartialEq)]
pub struct DivisiveTrace {
    /// Boundary inserted at each step, in insertion order.
    pub inserted: Vec<usize>,
    /// Inside density after 1, 2, ... segments.
    pub density: Vec<f64>,
}

impl DivisiveTrace {
    pub fn gradients(&self) -> Vec<f64> {
        self.density.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Inserts boundaries greedily until no segment can be split without
/// violating `min_seg`. Ties go to the smaller boundary index.
pub fn divisive_trace(r: &SquareMatrix, min_seg: usize) -> Result<DivisiveTrace, SegmentError> {
    if min_seg == 0 {
        return Err(SegmentError::InvalidMinSeg);
    }
    let n = r.n();
    if n == 0 {
        return Ok(DivisiveTrace { inserted: vec![], density: vec![] });
    }
    let sums = BlockSums::new(r);
    let mut bounds = vec![0, n];
    let mut inside = sums.block(0, n);
    let mut area = (n * n) as f64;
    let mut trace = DivisiveTrace { inserted: vec![], density: vec![inside / area] };
    loop {
        let mut best: Option<(f64, usize, f64, f64)> = None;
        for w in bounds.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b - a < 2 * min_seg {
                continue;
            }
            let base_s = inside - sums.block(a, b);
            let base_a = area - ((b - a) * (b - a)) as f64;
            for c in a + min_seg..=b - min_seg {
                let s = base_s + sums.block(a, c) + sums.block(c, b);
                let ar = base_a + ((c - a) * (c - a) + (b - c) * (b - c)) as f64;
                let d = s / ar;
                if best.is_none_or(|(bd, _, _, _)| d > bd) {
                    best = Some((d, c, s, ar));
                }
            }
        }
        let Some((d, c, s, ar)) = best else { break };
        let pos = bounds.partition_point(|&b| b < c);
        bounds.insert(pos, c);
        inside = s;
        area = ar;
        trace.inserted.push(c);
        trace.density.push(d);
    }
    Ok(trace)
}

/// Number of insertion steps kept under `stop`.
pub fn steps_to_keep(trace: &DivisiveTrace, stop: StopRule) -> usize {
    match stop {
        StopRule::FixedBoundaries { count } => count.min(trace.inserted.len()),
        StopRule::GradientThreshold { c } => {
            let g = trace.gradients();
            if g.is_empty() {
                return 0;
            }
            let mean = g.iter().sum::<f64>() / g.len() as f64;
            let var = g.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / g.len() as f64;
            let threshold = mean + c * var.sqrt();
            g.iter().take_while(|&&x| x > threshold).count()
        }
    }
}

pub fn c99_segment(r: &SquareMatrix, min_seg: usize, stop: StopRule) -> Result<Segmentation, SegmentError> {
    let trace = divisive_trace(r, min_seg)?;
    let keep = steps_to_keep(&trace, stop);
    let mut boundaries = vec![0];
    boundaries.extend_from_slice(&trace.inserted[..keep]);
    boundaries.sort_unstable();
    Ok(Segmentation { boundaries })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub mask: usize,
    pub min_seg: usize,
    pub stop: StopRule,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig { mask: 11, min_seg: 2, stop: StopRule::default() }
    }
}

/// Full segmentation of one conversation's embeddings. The mask is
/// clamped to `2n - 1` for short conversations.
pub fn segment_embeddings(e: &EmbeddingMatrix, cfg: &SegmenterConfig) -> Result<Segmentation, SegmentError> {
    let n = e.len();
    if n <= 1 {
        return Ok(Segmentation::single());
    }
    let s = cosine_similarity_matrix(e)?;
    let mask = cfg.mask.min(2 * n - 1);
    let r = rank_transform(&s, mask)?;
    c99_segment(&r, cfg.min_seg, cfg.stop)
}

/// Utterances preceding a target that belong to its own or the previous
/// segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub target_index: usize,
    pub lo: usize,
}

impl ContextWindow {
    pub fn range(&self) -> Range<usize> {
        self.lo..self.target_index
    }
}

pub fn context_for(i: usize, seg: &Segmentation) -> ContextWindow {
    let k = seg.boundaries.partition_point(|&b| b <= i).saturating_sub(1);
    let lo = if k == 0 { 0 } else { seg.boundaries[k - 1] };
    ContextWindow { target_index: i, lo }
}

/// One line of a segments file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub id: String,
    pub boundaries: Vec<usize>,
}
