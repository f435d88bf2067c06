//! Keyword window estimation, overlap labeling of candidate segments, and
//! assembly of contrastive training batches.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::UtteranceRecord;
use crate::error::{CladError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    /// Average phoneme duration.
    pub t_mean_ms: f64,
    /// Extra context added to every window.
    pub l_margin_ms: f64,
    pub frame_rate_hz: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            t_mean_ms: 90.0,
            l_margin_ms: 300.0,
            frame_rate_hz: 100.0,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_mean_ms > 0.0) || !(self.l_margin_ms >= 0.0) || !(self.frame_rate_hz > 0.0) {
            return Err(CladError::config(
                "window config needs t_mean_ms > 0, l_margin_ms >= 0, frame_rate_hz > 0",
            ));
        }
        Ok(())
    }
}

/// Window length in milliseconds for a keyword of `n_phonemes` phonemes.
pub fn estimate_window_ms(n_phonemes: usize, cfg: &WindowConfig) -> f64 {
    cfg.t_mean_ms * n_phonemes as f64 + cfg.l_margin_ms
}

/// Window length in frames, rounded half-up.
pub fn estimate_window(n_phonemes: usize, cfg: &WindowConfig) -> usize {
    let frames = estimate_window_ms(n_phonemes, cfg) * cfg.frame_rate_hz / 1000.0;
    // Guard against representation error just below a .5 boundary.
    (frames + 0.5 + 1e-9).floor() as usize
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSpec {
    pub word: String,
    pub phoneme_ids: Vec<usize>,
    pub n_phns: usize,
    pub window_frames: usize,
}

impl KeywordSpec {
    pub fn new(
        word: impl Into<String>,
        phoneme_ids: Vec<usize>,
        cfg: &WindowConfig,
    ) -> Result<Self> {
        if phoneme_ids.is_empty() {
            return Err(CladError::contract("keyword needs at least one phoneme"));
        }
        let n = phoneme_ids.len();
        Ok(KeywordSpec {
            word: word.into(),
            phoneme_ids,
            n_phns: n,
            window_frames: estimate_window(n, cfg),
        })
    }
}

/// Half-open frame range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(start: usize, end: usize) -> Self {
        Segment { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn intersection_len(&self, other: &Segment) -> usize {
        self.end
            .min(other.end)
            .saturating_sub(self.start.max(other.start))
    }

    /// A window of `len` frames starting at `start` (may be negative),
    /// shifted inward to fit `[0, total)`; shortened only when `total < len`.
    pub fn clamped(start: i64, len: usize, total: usize) -> Segment {
        if len >= total {
            return Segment::new(0, total);
        }
        let max_start = (total - len) as i64;
        let s = start.clamp(0, max_start) as usize;
        Segment::new(s, s + len)
    }
}

/// Fraction of `keyword` covered by `segment`.
pub fn overlap_ratio(segment: &Segment, keyword: &Segment) -> Result<f64> {
    if keyword.is_empty() {
        return Err(CladError::domain("keyword span is empty"));
    }
    if segment.is_empty() {
        return Err(CladError::contract("segment is empty"));
    }
    Ok(segment.intersection_len(keyword) as f64 / keyword.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentLabelConfig {
    pub pos_overlap_min: f64,
    pub neg_overlap_max: f64,
    /// Positives per keyword (N).
    pub n_pos: usize,
    /// Negatives per keyword (M).
    pub m_neg: usize,
    /// Candidate grid step in frames.
    pub stride: usize,
}

impl Default for SegmentLabelConfig {
    fn default() -> Self {
        SegmentLabelConfig {
            pos_overlap_min: 0.7,
            neg_overlap_max: 0.3,
            n_pos: 4,
            m_neg: 8,
            stride: 4,
        }
    }
}

impl SegmentLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pos_overlap_min > 0.0 && self.pos_overlap_min <= 1.0) {
            return Err(CladError::config("pos_overlap_min must lie in (0, 1]"));
        }
        if !(self.neg_overlap_max >= 0.0 && self.neg_overlap_max < 1.0) {
            return Err(CladError::config("neg_overlap_max must lie in [0, 1)"));
        }
        if self.neg_overlap_max >= self.pos_overlap_min {
            return Err(CladError::config(
                "neg_overlap_max must be below pos_overlap_min",
            ));
        }
        if self.stride == 0 {
            return Err(CladError::config("stride must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub keywords_per_utterance: usize,
    pub min_phonemes: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            keywords_per_utterance: 2,
            min_phonemes: 6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentLabel {
    Positive,
    Negative,
    /// Between the two thresholds; never used.
    DeadZone,
}

pub fn label_segment(
    segment: &Segment,
    keyword: &Segment,
    cfg: &SegmentLabelConfig,
) -> Result<SegmentLabel> {
    let r = overlap_ratio(segment, keyword)?;
    Ok(if r >= cfg.pos_overlap_min {
        SegmentLabel::Positive
    } else if r <= cfg.neg_overlap_max {
        SegmentLabel::Negative
    } else {
        SegmentLabel::DeadZone
    })
}

/// Candidate windows on a stride grid anchored at the keyword start, from the
/// window that ends at the keyword start to the one that begins at its end.
/// Candidates are clamped into the utterance and de-duplicated.
pub fn candidate_segments(
    total_frames: usize,
    keyword: &Segment,
    window_frames: usize,
    stride: usize,
) -> Vec<Segment> {
    let ks = keyword.start as i64;
    let lo = ks - window_frames as i64;
    let hi = keyword.end as i64;
    let stride = stride.max(1) as i64;
    let first = -((ks - lo) / stride);
    let mut out: Vec<Segment> = Vec::new();
    let mut i = first;
    loop {
        let s = ks + i * stride;
        if s > hi {
            break;
        }
        let seg = Segment::clamped(s, window_frames, total_frames);
        if out.last() != Some(&seg) && !out.contains(&seg) {
            out.push(seg);
        }
        i += 1;
    }
    out
}

pub fn label_candidates(
    total_frames: usize,
    keyword: &Segment,
    window_frames: usize,
    cfg: &SegmentLabelConfig,
) -> Result<Vec<(Segment, SegmentLabel)>> {
    candidate_segments(total_frames, keyword, window_frames, cfg.stride)
        .into_iter()
        .map(|s| Ok((s, label_segment(&s, keyword, cfg)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicedSegments {
    pub positives: Vec<Segment>,
    pub negatives: Vec<Segment>,
    /// Fewer than the requested N positives or M negatives were available.
    pub short: bool,
}

pub fn slice_segments<R: Rng + ?Sized>(
    total_frames: usize,
    keyword: &Segment,
    window_frames: usize,
    cfg: &SegmentLabelConfig,
    rng: &mut R,
) -> Result<SlicedSegments> {
    let labeled = label_candidates(total_frames, keyword, window_frames, cfg)?;
    let pos: Vec<Segment> = labeled
        .iter()
        .filter(|(_, l)| *l == SegmentLabel::Positive)
        .map(|(s, _)| *s)
        .collect();
    let neg: Vec<Segment> = labeled
        .iter()
        .filter(|(_, l)| *l == SegmentLabel::Negative)
        .map(|(s, _)| *s)
        .collect();
    let positives: Vec<Segment> = pos.choose_multiple(rng, cfg.n_pos).copied().collect();
    let negatives: Vec<Segment> = neg.choose_multiple(rng, cfg.m_neg).copied().collect();
    let short = positives.len() < cfg.n_pos || negatives.len() < cfg.m_neg;
    Ok(SlicedSegments {
        positives,
        negatives,
        short,
    })
}

/// Samples up to `k` distinct words with at least `min_phonemes` phonemes.
/// Returns `(word index in utterance, keyword)`.
pub fn sample_keywords<R: Rng + ?Sized>(
    utterance: &UtteranceRecord,
    k: usize,
    min_phonemes: usize,
    cfg: &WindowConfig,
    rng: &mut R,
) -> Result<Vec<(usize, KeywordSpec)>> {
    let eligible: Vec<usize> = utterance
        .words
        .iter()
        .enumerate()
        .filter(|(_, w)| w.phonemes.len() >= min_phonemes)
        .map(|(i, _)| i)
        .collect();
    let picked: Vec<usize> = eligible.choose_multiple(rng, k).copied().collect();
    picked
        .into_iter()
        .map(|i| {
            let w = &utterance.words[i];
            Ok((
                i,
                KeywordSpec::new(w.word.clone(), w.phonemes.clone(), cfg)?,
            ))
        })
        .collect()
}

/// One sampled keyword W_{i,j} with its audio segments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchEntry {
    /// Index into the utterance pool the batch was built from.
    pub utterance: usize,
    pub utterance_id: String,
    /// Index of the keyword word within the utterance.
    pub word_index: usize,
    pub keyword: KeywordSpec,
    pub span: Segment,
    pub positives: Vec<Segment>,
    pub negatives: Vec<Segment>,
    pub short: bool,
}

impl BatchEntry {
    pub fn segment_frames(&self) -> usize {
        self.positives
            .iter()
            .chain(&self.negatives)
            .map(Segment::len)
            .sum()
    }

    /// Unordered positive audio pairs, C(N, 2).
    pub fn positive_pairs(&self) -> usize {
        let n = self.positives.len();
        n * n.saturating_sub(1) / 2
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingBatch {
    pub entries: Vec<BatchEntry>,
}

impl TrainingBatch {
    pub fn segment_frames(&self) -> usize {
        self.entries.iter().map(BatchEntry::segment_frames).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    /// Total segment frames allowed per batch.
    pub frame_budget: usize,
    pub window: WindowConfig,
    pub labels: SegmentLabelConfig,
    pub sampling: SamplingConfig,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            frame_budget: 12_288,
            window: WindowConfig::default(),
            labels: SegmentLabelConfig::default(),
            sampling: SamplingConfig::default(),
        }
    }
}

/// Entries for one utterance: sampled keywords with their sliced segments.
/// Keywords that yield no positive segment are dropped.
pub fn utterance_entries<R: Rng + ?Sized>(
    pool_index: usize,
    utterance: &UtteranceRecord,
    cfg: &BatchConfig,
    rng: &mut R,
) -> Result<Vec<BatchEntry>> {
    let total = utterance.num_frames();
    let keywords = sample_keywords(
        utterance,
        cfg.sampling.keywords_per_utterance,
        cfg.sampling.min_phonemes,
        &cfg.window,
        rng,
    )?;
    let mut out = Vec::with_capacity(keywords.len());
    for (wi, kw) in keywords {
        let w = &utterance.words[wi];
        let span = Segment::new(w.start, w.end);
        let sliced = slice_segments(total, &span, kw.window_frames, &cfg.labels, rng)?;
        if sliced.positives.is_empty() {
            continue;
        }
        out.push(BatchEntry {
            utterance: pool_index,
            utterance_id: utterance.utterance_id.clone(),
            word_index: wi,
            keyword: kw,
            span,
            positives: sliced.positives,
            negatives: sliced.negatives,
            short: sliced.short,
        });
    }
    Ok(out)
}

/// Draws utterances from the pool in random order and accumulates entries
/// until adding the next one would exceed the frame budget. A single entry
/// larger than the budget forms a batch on its own.
pub fn build_batch<R: Rng + ?Sized>(
    pool: &[UtteranceRecord],
    cfg: &BatchConfig,
    rng: &mut R,
) -> Result<TrainingBatch> {
    if pool.is_empty() {
        return Err(CladError::contract("utterance pool is empty"));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(rng);
    let mut batches = batches_in_order(pool, &order, cfg, rng, true)?;
    Ok(batches.pop().unwrap_or_default())
}

/// Partitions one pass over `pool` (shuffled) into budgeted batches.
pub fn epoch_batches<R: Rng + ?Sized>(
    pool: &[UtteranceRecord],
    cfg: &BatchConfig,
    rng: &mut R,
) -> Result<Vec<TrainingBatch>> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(rng);
    batches_in_order(pool, &order, cfg, rng, false)
}

fn batches_in_order<R: Rng + ?Sized>(
    pool: &[UtteranceRecord],
    order: &[usize],
    cfg: &BatchConfig,
    rng: &mut R,
    first_only: bool,
) -> Result<Vec<TrainingBatch>> {
    let mut batches = Vec::new();
    let mut current = TrainingBatch::default();
    let mut frames = 0;
    'outer: for &ui in order {
        for entry in utterance_entries(ui, &pool[ui], cfg, rng)? {
            let cost = entry.segment_frames();
            if !current.is_empty() && frames + cost > cfg.frame_budget {
                batches.push(std::mem::take(&mut current));
                frames = 0;
                if first_only {
                    break 'outer;
                }
            }
            frames += cost;
            current.entries.push(entry);
        }
    }
    if !current.is_empty() && !(first_only && !batches.is_empty()) {
        batches.push(current);
    }
    if first_only {
        batches.truncate(1);
    }
    Ok(batches)
}
