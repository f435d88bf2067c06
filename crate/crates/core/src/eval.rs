//! Detection metrics, trial construction, the fixed-false-alarm recall
//! protocol, the ablation driver and the speed benchmark.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{synth_records, CorpusConfig, CorpusMeta, Lexicon, UtteranceRecord};
use crate::encoders::{am_forward, cosine_sim, AcousticModel, CladModel, ModelConfig};
use crate::error::{CladError, Result};
use crate::loss::LossConfig;
use crate::nn::Tensor;
use crate::stream::{
    am_posteriors, baseline_score, baseline_window_scores, enroll_keyword, events_from_scores,
    posteriors_from_reprs, smooth_posteriors, window_scores, BaselineConfig, DetectionEvent,
    Enrolled, StreamConfig,
};
use crate::trainer::{train_clad, TrainConfig};
use crate::windowing::{
    label_candidates, label_segment, BatchConfig, KeywordSpec, Segment, SegmentLabel,
    SegmentLabelConfig, WindowConfig,
};

// ---------------------------------------------------------------- metrics

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    /// Events at or above the threshold.
    pub false_alarms: usize,
    /// The budget admits every event, so the threshold is just the lowest
    /// score and carries no information.
    pub degenerate: bool,
}

/// Lowest threshold whose count of scores at or above it stays within
/// `budget`. Candidates are the observed scores plus the value just above
/// the maximum, so ties resolve towards the higher threshold.
pub fn calibrate_threshold(fa_scores: &[f64], budget: usize) -> Result<Calibration> {
    if fa_scores.is_empty() {
        return Err(CladError::contract("no false-alarm scores to calibrate on"));
    }
    if fa_scores.iter().any(|s| s.is_nan()) {
        return Err(CladError::domain("false-alarm score is NaN"));
    }
    let mut desc = fa_scores.to_vec();
    desc.sort_by(|a, b| b.total_cmp(a));
    let n = desc.len();
    if budget >= n {
        return Ok(Calibration {
            threshold: desc[n - 1],
            false_alarms: n,
            degenerate: true,
        });
    }
    // desc[budget] must fall below the threshold; the next distinct score
    // above it is the lowest admissible candidate.
    let blocked = desc[budget];
    let idx = desc[..budget].iter().rposition(|&s| s > blocked);
    let threshold = match idx {
        Some(i) => desc[i],
        None => desc[0].next_up(),
    };
    let false_alarms = desc.iter().take_while(|&&s| s >= threshold).count();
    Ok(Calibration {
        threshold,
        false_alarms,
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occurrence {
    pub keyword: String,
    pub start_s: f64,
    pub end_s: f64,
}

/// Per keyword `(hits, occurrences)` on one track. Occurrences are visited
/// in time order; each takes the earliest unused overlapping event of its
/// keyword.
pub fn match_hits(
    events: &[DetectionEvent],
    occurrences: &[Occurrence],
) -> BTreeMap<String, (usize, usize)> {
    let mut out: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut by_kw: BTreeMap<&str, Vec<&DetectionEvent>> = BTreeMap::new();
    for e in events {
        by_kw.entry(&e.keyword).or_default().push(e);
    }
    for evs in by_kw.values_mut() {
        evs.sort_by(|a, b| {
            a.start_s
                .total_cmp(&b.start_s)
                .then(a.end_s.total_cmp(&b.end_s))
        });
    }
    let mut occs: Vec<&Occurrence> = occurrences.iter().collect();
    occs.sort_by(|a, b| {
        a.start_s
            .total_cmp(&b.start_s)
            .then(a.end_s.total_cmp(&b.end_s))
    });
    let mut used: BTreeMap<&str, Vec<bool>> = by_kw
        .iter()
        .map(|(k, v)| (*k, vec![false; v.len()]))
        .collect();
    for o in occs {
        let entry = out.entry(o.keyword.clone()).or_default();
        entry.1 += 1;
        let Some(evs) = by_kw.get(o.keyword.as_str()) else {
            continue;
        };
        let taken = used.get_mut(o.keyword.as_str()).expect("same keys");
        let hit = evs
            .iter()
            .enumerate()
            .find(|(i, e)| !taken[*i] && e.start_s < o.end_s && e.end_s > o.start_s);
        if let Some((i, _)) = hit {
            taken[i] = true;
            entry.0 += 1;
        }
    }
    out
}

/// Pooled hits over pooled occurrences.
pub fn micro_recall(events: &[DetectionEvent], occurrences: &[Occurrence]) -> Result<f64> {
    if occurrences.is_empty() {
        return Err(CladError::contract(
            "micro recall needs at least one occurrence",
        ));
    }
    let (h, n) = match_hits(events, occurrences)
        .values()
        .fold((0, 0), |(h, n), &(a, b)| (h + a, n + b));
    Ok(h as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialKind {
    Positive,
    /// Window of the keyword's own utterance that barely overlaps it.
    Easy,
    /// Window centred on a different word sharing a phoneme prefix.
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub score: f64,
    pub positive: bool,
    pub keyword: String,
    pub kind: TrialKind,
}

impl Trial {
    pub fn new(score: f64, positive: bool) -> Self {
        Trial {
            score,
            positive,
            keyword: String::new(),
            kind: if positive {
                TrialKind::Positive
            } else {
                TrialKind::Easy
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Trials scoring at or above this are accepted.
    pub threshold: f64,
    pub far: f64,
    pub tpr: f64,
}

/// ROC from (0,0) to (1,1), one point per distinct score, highest first.
pub fn roc(trials: &[Trial]) -> Result<Vec<RocPoint>> {
    let pos = trials.iter().filter(|t| t.positive).count();
    let neg = trials.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(CladError::domain(
            "ROC needs both positive and negative trials",
        ));
    }
    if trials.iter().any(|t| t.score.is_nan()) {
        return Err(CladError::domain("trial score is NaN"));
    }
    let mut sorted: Vec<&Trial> = trials.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            if sorted[i].positive {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: s,
            far: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(points)
}

/// Trapezoid area under the ROC; tied scores form a diagonal step and
/// so earn half credit.
pub fn auc(trials: &[Trial]) -> Result<f64> {
    let pts = roc(trials)?;
    Ok(pts
        .windows(2)
        .map(|w| (w[1].far - w[0].far) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum())
}

/// Point where false-accept and false-reject rates meet, interpolated
/// linearly along the ROC.
pub fn eer(trials: &[Trial]) -> Result<f64> {
    let pts = roc(trials)?;
    for w in pts.windows(2) {
        // far - frr along the segment; increases from -1 to +1 over the curve
        let d0 = w[0].far - (1.0 - w[0].tpr);
        let d1 = w[1].far - (1.0 - w[1].tpr);
        if d0 <= 0.0 && d1 >= 0.0 {
            if d1 == d0 {
                return Ok(w[0].far);
            }
            let t = -d0 / (d1 - d0);
            return Ok(w[0].far + t * (w[1].far - w[0].far));
        }
    }
    Err(CladError::domain("ROC never crosses the equal-error line"))
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("threshold,far,tpr\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.threshold, p.far, p.tpr));
    }
    s
}

/// Relative speed: benchmark time over model time.
pub fn rsa(benchmark_s: f64, model_s: f64) -> Result<f64> {
    if !(benchmark_s > 0.0 && model_s > 0.0) || !benchmark_s.is_finite() || !model_s.is_finite() {
        return Err(CladError::domain(
            "execution times must be positive and finite",
        ));
    }
    Ok(benchmark_s / model_s)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let m = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

// ---------------------------------------------------------------- trials

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialConfig {
    pub min_phonemes: usize,
    /// Easy negatives drawn per keyword occurrence.
    pub easy_per_occurrence: usize,
    /// Shared leading phonemes that make another word a hard negative.
    pub min_shared_prefix: usize,
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig {
            min_phonemes: 6,
            easy_per_occurrence: 2,
            min_shared_prefix: 2,
        }
    }
}

/// A (segment, keyword text) pair awaiting a score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub record: usize,
    pub keyword: String,
    pub segment: Segment,
    pub kind: TrialKind,
}

fn shared_prefix(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

fn centred(span: Segment, len: usize, total: usize) -> Segment {
    let centre = (span.start + span.end) as i64;
    Segment::clamped((centre - len as i64) / 2, len, total)
}

/// Positives are keyword-length windows centred on each occurrence; easy
/// negatives are windows of the same utterance overlapping the occurrence
/// at most the negative threshold; hard negatives are windows centred on a
/// different word that shares a phoneme prefix with the keyword, in an
/// utterance without the keyword.
pub fn build_trials(
    records: &[UtteranceRecord],
    lexicon: &Lexicon,
    window: &WindowConfig,
    labels: &SegmentLabelConfig,
    cfg: &TrialConfig,
) -> Result<Vec<TrialSpec>> {
    let keywords: Vec<KeywordSpec> = lexicon
        .eligible(cfg.min_phonemes)
        .into_iter()
        .map(|w| KeywordSpec::new(w, lexicon.get(w).expect("listed").to_vec(), window))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (ri, r) in records.iter().enumerate() {
        let total = r.num_frames();
        let present: BTreeSet<&str> = r.words.iter().map(|w| w.word.as_str()).collect();
        for span in &r.words {
            let seg = Segment::new(span.start, span.end);
            if let Some(k) = keywords.iter().find(|k| k.word == span.word) {
                out.push(TrialSpec {
                    record: ri,
                    keyword: k.word.clone(),
                    segment: centred(seg, k.window_frames, total),
                    kind: TrialKind::Positive,
                });
                // Negative with respect to every occurrence of the word here.
                let others: Vec<Segment> = r
                    .words
                    .iter()
                    .filter(|w| w.word == span.word)
                    .map(|w| Segment::new(w.start, w.end))
                    .collect();
                let mut negs = Vec::new();
                for (s, l) in label_candidates(total, &seg, k.window_frames, labels)? {
                    if l != SegmentLabel::Negative {
                        continue;
                    }
                    let clear = others
                        .iter()
                        .map(|o| label_segment(&s, o, labels).map(|l| l == SegmentLabel::Negative))
                        .collect::<Result<Vec<bool>>>()?;
                    if clear.iter().all(|&c| c) {
                        negs.push(s);
                    }
                }
                let take = cfg.easy_per_occurrence.min(negs.len());
                for j in 0..take {
                    out.push(TrialSpec {
                        record: ri,
                        keyword: k.word.clone(),
                        segment: negs[j * negs.len() / take],
                        kind: TrialKind::Easy,
                    });
                }
            }
            for k in &keywords {
                if k.word == span.word || present.contains(k.word.as_str()) {
                    continue;
                }
                if shared_prefix(&k.phoneme_ids, &span.phonemes) >= cfg.min_shared_prefix {
                    out.push(TrialSpec {
                        record: ri,
                        keyword: k.word.clone(),
                        segment: centred(seg, k.window_frames, total),
                        kind: TrialKind::Hard,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Scores trials with the contrastive model.
pub fn score_trials(
    model: &CladModel,
    records: &[UtteranceRecord],
    lexicon: &Lexicon,
    specs: &[TrialSpec],
) -> Result<Vec<Trial>> {
    let reprs: Vec<Tensor> = records
        .iter()
        .map(|r| am_forward(&model.am, &r.features))
        .collect::<Result<_>>()?;
    let mut text: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for s in specs {
        if !text.contains_key(s.keyword.as_str()) {
            let ids = lexicon.get(&s.keyword).ok_or_else(|| {
                CladError::contract(format!("keyword {} is not in the lexicon", s.keyword))
            })?;
            text.insert(&s.keyword, model.text.embed_ids(ids)?);
        }
    }
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in specs.iter().enumerate() {
        by_len.entry(s.segment.len()).or_default().push(i);
    }
    let mut scores = vec![0.0; specs.len()];
    for idx in by_len.values() {
        for chunk in idx.chunks(256) {
            let slices: Vec<Tensor> = chunk
                .iter()
                .map(|&i| {
                    reprs[specs[i].record].rows_slice(specs[i].segment.start, specs[i].segment.end)
                })
                .collect();
            for (&i, e) in chunk.iter().zip(model.audio.embed_batch(&slices)?) {
                scores[i] = cosine_sim(&e, &text[specs[i].keyword.as_str()])?;
            }
        }
    }
    Ok(specs
        .iter()
        .zip(scores)
        .map(|(s, score)| Trial {
            score,
            positive: s.kind == TrialKind::Positive,
            keyword: s.keyword.clone(),
            kind: s.kind,
        })
        .collect())
}

/// Scores trials with the posterior-smoothing baseline.
pub fn score_trials_baseline(
    am: &AcousticModel,
    records: &[UtteranceRecord],
    lexicon: &Lexicon,
    specs: &[TrialSpec],
    baseline: &BaselineConfig,
) -> Result<Vec<Trial>> {
    let smoothed: Vec<Tensor> = records
        .iter()
        .map(|r| smooth_posteriors(&am_posteriors(am, &r.features)?, baseline.smoothing_frames))
        .collect::<Result<_>>()?;
    specs
        .iter()
        .map(|s| {
            let ids = lexicon.get(&s.keyword).ok_or_else(|| {
                CladError::contract(format!("keyword {} is not in the lexicon", s.keyword))
            })?;
            Ok(Trial {
                score: baseline_score(&smoothed[s.record], ids, s.segment)?,
                positive: s.kind == TrialKind::Positive,
                keyword: s.keyword.clone(),
                kind: s.kind,
            })
        })
        .collect()
}

/// Positives plus the negatives of one kind.
pub fn subset(trials: &[Trial], negatives: TrialKind) -> Vec<Trial> {
    trials
        .iter()
        .filter(|t| t.positive || t.kind == negatives)
        .cloned()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub positives: usize,
    pub easy: usize,
    pub hard: usize,
    pub eer: f64,
    pub auc: f64,
    pub easy_auc: f64,
    pub hard_auc: f64,
    pub hard_eer: f64,
}

pub fn summarize_trials(trials: &[Trial]) -> Result<TrialSummary> {
    let count = |k| trials.iter().filter(|t| t.kind == k).count();
    let easy = subset(trials, TrialKind::Easy);
    let hard = subset(trials, TrialKind::Hard);
    Ok(TrialSummary {
        positives: count(TrialKind::Positive),
        easy: count(TrialKind::Easy),
        hard: count(TrialKind::Hard),
        eer: eer(trials)?,
        auc: auc(trials)?,
        easy_auc: auc(&easy)?,
        hard_auc: auc(&hard)?,
        hard_eer: eer(&hard)?,
    })
}

// ---------------------------------------------------------------- recall at a fixed false-alarm count

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalDataConfig {
    pub num_keywords: usize,
    pub min_phonemes: usize,
    pub test_utterances: usize,
    pub fa_utterances: usize,
    pub trial_utterances: usize,
}

impl Default for EvalDataConfig {
    fn default() -> Self {
        EvalDataConfig {
            num_keywords: 10,
            min_phonemes: 6,
            test_utterances: 60,
            fa_utterances: 60,
            trial_utterances: 80,
        }
    }
}

/// Held-out material for evaluation, generated over the training corpus's
/// inventory and lexicon.
#[derive(Clone, Debug)]
pub struct EvalData {
    pub keywords: Vec<KeywordSpec>,
    /// Every utterance contains at least one keyword.
    pub test: Vec<UtteranceRecord>,
    /// No utterance contains a keyword.
    pub fa: Vec<UtteranceRecord>,
    pub trials: Vec<UtteranceRecord>,
}

pub fn eval_data(
    meta: &CorpusMeta,
    corpus: &CorpusConfig,
    cfg: &EvalDataConfig,
    window: &WindowConfig,
    seed: u64,
) -> Result<EvalData> {
    let mut pool: Vec<String> = meta
        .lexicon
        .eligible(cfg.min_phonemes)
        .into_iter()
        .map(String::from)
        .collect();
    if pool.len() < cfg.num_keywords || cfg.num_keywords == 0 {
        return Err(CladError::config(format!(
            "{} keywords requested but the lexicon has {} eligible words",
            cfg.num_keywords,
            pool.len()
        )));
    }
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x6b77));
    pool.truncate(cfg.num_keywords);
    let keywords = pool
        .iter()
        .map(|w| KeywordSpec::new(w, meta.lexicon.get(w).expect("listed").to_vec(), window))
        .collect::<Result<Vec<_>>>()?;
    let chosen: BTreeSet<String> = pool.iter().cloned().collect();
    let test = synth_records(
        meta,
        corpus,
        "test",
        cfg.test_utterances,
        seed,
        |_| true,
        Some(&pool),
    )?;
    let fa = synth_records(
        meta,
        corpus,
        "fa",
        cfg.fa_utterances,
        seed,
        |w| !chosen.contains(w),
        None,
    )?;
    let trials = synth_records(
        meta,
        corpus,
        "trials",
        cfg.trial_utterances,
        seed,
        |_| true,
        None,
    )?;
    Ok(EvalData {
        keywords,
        test,
        fa,
        trials,
    })
}

/// Window scores `[track][keyword][window]` for one detector.
pub type ScoredSet = Vec<Vec<Vec<(Segment, f64)>>>;

pub fn clad_scores(
    model: &CladModel,
    keywords: &[Enrolled],
    records: &[UtteranceRecord],
) -> Result<ScoredSet> {
    records
        .iter()
        .map(|r| window_scores(model, keywords, &am_forward(&model.am, &r.features)?))
        .collect()
}

pub fn baseline_scores(
    am: &AcousticModel,
    keywords: &[KeywordSpec],
    records: &[UtteranceRecord],
    baseline: &BaselineConfig,
) -> Result<ScoredSet> {
    records
        .iter()
        .map(|r| {
            let reprs = am_forward(am, &r.features)?;
            let post = smooth_posteriors(
                &posteriors_from_reprs(am, &reprs)?,
                baseline.smoothing_frames,
            )?;
            keywords
                .iter()
                .map(|k| baseline_window_scores(&post, k))
                .collect()
        })
        .collect()
}

fn events_at(
    scored: &ScoredSet,
    keywords: &[KeywordSpec],
    subset: &[usize],
    threshold: f64,
    stream: &StreamConfig,
) -> Vec<Vec<DetectionEvent>> {
    let cfg = StreamConfig {
        threshold,
        ..stream.clone()
    };
    scored
        .iter()
        .map(|track| {
            subset
                .iter()
                .flat_map(|&k| events_from_scores(&keywords[k].word, &track[k], &cfg))
                .collect()
        })
        .collect()
}

/// Threshold keeping the detector's false alarms on `fa` within `budget`.
/// Raising the threshold can un-suppress windows hidden by a cooldown, so
/// calibration repeats on the events at the current threshold until the
/// actual count fits.
pub fn calibrate_detector(
    fa: &ScoredSet,
    keywords: &[KeywordSpec],
    subset: &[usize],
    budget: usize,
    stream: &StreamConfig,
) -> Result<Calibration> {
    let mut threshold = -1.0;
    loop {
        let scores: Vec<f64> = events_at(fa, keywords, subset, threshold, stream)
            .into_iter()
            .flatten()
            .map(|e| e.score)
            .collect();
        if scores.is_empty() {
            return Ok(Calibration {
                threshold,
                false_alarms: 0,
                degenerate: threshold == -1.0,
            });
        }
        let c = calibrate_threshold(&scores, budget)?;
        if c.degenerate && threshold == -1.0 {
            return Ok(c);
        }
        let actual = events_at(fa, keywords, subset, c.threshold, stream)
            .iter()
            .map(Vec::len)
            .sum();
        if actual <= budget {
            return Ok(Calibration {
                threshold: c.threshold,
                false_alarms: actual,
                degenerate: false,
            });
        }
        threshold = c.threshold;
    }
}

pub fn occurrences(
    record: &UtteranceRecord,
    keywords: &[&str],
    frame_rate_hz: f64,
) -> Vec<Occurrence> {
    record
        .words
        .iter()
        .filter(|w| keywords.contains(&w.word.as_str()))
        .map(|w| Occurrence {
            keyword: w.word.clone(),
            start_s: w.start as f64 / frame_rate_hz,
            end_s: w.end as f64 / frame_rate_hz,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallBucket {
    pub keywords: usize,
    pub threshold: f64,
    pub false_alarms: usize,
    pub degenerate: bool,
    pub hits: usize,
    pub occurrences: usize,
    pub micro_recall: f64,
    pub per_keyword: BTreeMap<String, f64>,
    pub per_keyword_std: f64,
}

/// Micro recall over the first `n` keywords at the threshold calibrated on
/// the false-alarm set.
#[allow(clippy::too_many_arguments)]
pub fn recall_bucket(
    test: &ScoredSet,
    test_records: &[UtteranceRecord],
    fa: &ScoredSet,
    keywords: &[KeywordSpec],
    n: usize,
    budget: usize,
    stream: &StreamConfig,
) -> Result<RecallBucket> {
    if n == 0 || n > keywords.len() {
        return Err(CladError::config(format!(
            "bucket of {n} keywords out of {}",
            keywords.len()
        )));
    }
    let subset: Vec<usize> = (0..n).collect();
    let cal = calibrate_detector(fa, keywords, &subset, budget, stream)?;
    let events = events_at(test, keywords, &subset, cal.threshold, stream);
    let words: Vec<&str> = keywords[..n].iter().map(|k| k.word.as_str()).collect();
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (r, ev) in test_records.iter().zip(&events) {
        for (k, (h, o)) in match_hits(ev, &occurrences(r, &words, stream.frame_rate_hz)) {
            let e = per.entry(k).or_default();
            e.0 += h;
            e.1 += o;
        }
    }
    let (hits, occ) = per.values().fold((0, 0), |(a, b), &(h, o)| (a + h, b + o));
    if occ == 0 {
        return Err(CladError::contract(
            "test set has no occurrences of the enrolled keywords",
        ));
    }
    let per_keyword: BTreeMap<String, f64> = per
        .iter()
        .map(|(k, &(h, o))| (k.clone(), h as f64 / o as f64))
        .collect();
    let rates: Vec<f64> = per_keyword.values().copied().collect();
    Ok(RecallBucket {
        keywords: n,
        threshold: cal.threshold,
        false_alarms: cal.false_alarms,
        degenerate: cal.degenerate,
        hits,
        occurrences: occ,
        micro_recall: hits as f64 / occ as f64,
        per_keyword_std: std_dev(&rates),
        per_keyword,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub data: EvalDataConfig,
    pub trials: TrialConfig,
    pub fa_budget: usize,
    /// Keyword counts to report recall for; each at most `data.num_keywords`.
    pub buckets: Vec<usize>,
    pub cooldown_s: f64,
    pub baseline: BaselineConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            data: EvalDataConfig::default(),
            trials: TrialConfig::default(),
            fa_budget: 2,
            buckets: vec![5, 10],
            cooldown_s: 1.0,
            baseline: BaselineConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    pub detector: String,
    pub recall: Vec<RecallBucket>,
    pub trials: TrialSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fa_budget: usize,
    pub keywords: Vec<String>,
    pub test_utterances: usize,
    pub fa_utterances: usize,
    pub clad: DetectorReport,
    pub baseline: DetectorReport,
}

/// Full evaluation of the contrastive detector and the baseline on the same
/// held-out material. Returns the report and the contrastive ROC.
pub fn evaluate(
    model: &CladModel,
    meta: &CorpusMeta,
    data: &EvalData,
    window: &WindowConfig,
    labels: &SegmentLabelConfig,
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<RocPoint>)> {
    let stream = StreamConfig {
        threshold: 0.0,
        cooldown_s: cfg.cooldown_s,
        frame_rate_hz: meta.frame_rate_hz,
    };
    let enrolled: Vec<Enrolled> = data
        .keywords
        .iter()
        .map(|k| enroll_keyword(model, &k.word, &k.phoneme_ids, window))
        .collect::<Result<_>>()?;
    let specs = build_trials(&data.trials, &meta.lexicon, window, labels, &cfg.trials)?;

    let buckets = |test: &ScoredSet, fa: &ScoredSet| -> Result<Vec<RecallBucket>> {
        cfg.buckets
            .iter()
            .map(|&n| {
                recall_bucket(
                    test,
                    &data.test,
                    fa,
                    &data.keywords,
                    n,
                    cfg.fa_budget,
                    &stream,
                )
            })
            .collect()
    };

    let clad_trials = score_trials(model, &data.trials, &meta.lexicon, &specs)?;
    let clad = DetectorReport {
        detector: "clad".into(),
        recall: buckets(
            &clad_scores(model, &enrolled, &data.test)?,
            &clad_scores(model, &enrolled, &data.fa)?,
        )?,
        trials: summarize_trials(&clad_trials)?,
    };
    let base_trials = score_trials_baseline(
        &model.am,
        &data.trials,
        &meta.lexicon,
        &specs,
        &cfg.baseline,
    )?;
    let baseline = DetectorReport {
        detector: "posterior_baseline".into(),
        recall: buckets(
            &baseline_scores(&model.am, &data.keywords, &data.test, &cfg.baseline)?,
            &baseline_scores(&model.am, &data.keywords, &data.fa, &cfg.baseline)?,
        )?,
        trials: summarize_trials(&base_trials)?,
    };
    let report = EvalReport {
        fa_budget: cfg.fa_budget,
        keywords: data.keywords.iter().map(|k| k.word.clone()).collect(),
        test_utterances: data.test.len(),
        fa_utterances: data.fa.len(),
        clad,
        baseline,
    };
    Ok((report, roc(&clad_trials)?))
}

// ---------------------------------------------------------------- ablation

const INIT_SALT: u64 = 0x1a17_5eed;

pub struct AblationSetup<'a> {
    pub model: &'a ModelConfig,
    pub am: &'a AcousticModel,
    pub train: &'a [UtteranceRecord],
    pub valid: &'a [UtteranceRecord],
    pub trial_records: &'a [UtteranceRecord],
    pub trials: &'a [TrialSpec],
    pub lexicon: &'a Lexicon,
    pub train_cfg: &'a TrainConfig,
    pub loss: &'a LossConfig,
    pub batching: &'a BatchConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub alpha: f64,
    pub best_valid_loss: f64,
    pub epochs: usize,
    pub trials: TrialSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSeed {
    pub seed: u64,
    pub clad: ArmResult,
    pub audio_text_only: ArmResult,
    /// CLAD minus audio-text-only, hard-negative AUC.
    pub hard_auc_delta: f64,
    pub auc_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<AblationSeed>,
    pub median_hard_auc_clad: f64,
    pub median_hard_auc_audio_text: f64,
    pub median_hard_auc_delta: f64,
    pub median_auc_clad: f64,
    pub median_auc_audio_text: f64,
}

/// Trains one arm: encoders initialised from `seed`, batches drawn from
/// the training seed, so both arms of a seed see identical data.
pub fn train_arm(setup: &AblationSetup, seed: u64, alpha: f64) -> Result<(CladModel, ArmResult)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ INIT_SALT);
    let mut model = CladModel::with_acoustic_model(setup.model, setup.am.clone(), &mut rng)?;
    let cfg = TrainConfig {
        seed,
        ..setup.train_cfg.clone()
    };
    let loss = LossConfig {
        alpha,
        ..setup.loss.clone()
    };
    let report = train_clad(
        &mut model,
        setup.train,
        setup.valid,
        &cfg,
        &loss,
        setup.batching,
        |_, _| Ok(()),
    )?;
    let best = report
        .epochs
        .iter()
        .map(|e| e.valid_loss)
        .fold(report.initial_valid_loss, f64::min);
    let trials = score_trials(&model, setup.trial_records, setup.lexicon, setup.trials)?;
    Ok((
        model,
        ArmResult {
            alpha,
            best_valid_loss: best,
            epochs: report.epochs.len(),
            trials: summarize_trials(&trials)?,
        },
    ))
}

pub fn run_ablation(setup: &AblationSetup, seeds: &[u64], alpha: f64) -> Result<AblationReport> {
    if seeds.len() < 3 {
        return Err(CladError::config("the ablation needs at least 3 seeds"));
    }
    let mut out = Vec::new();
    for &seed in seeds {
        let (_, clad) = train_arm(setup, seed, alpha)?;
        let (_, at) = train_arm(setup, seed, 0.0)?;
        out.push(AblationSeed {
            seed,
            hard_auc_delta: clad.trials.hard_auc - at.trials.hard_auc,
            auc_delta: clad.trials.auc - at.trials.auc,
            clad,
            audio_text_only: at,
        });
    }
    let col = |f: &dyn Fn(&AblationSeed) -> f64| median(&out.iter().map(f).collect::<Vec<_>>());
    Ok(AblationReport {
        median_hard_auc_clad: col(&|s| s.clad.trials.hard_auc),
        median_hard_auc_audio_text: col(&|s| s.audio_text_only.trials.hard_auc),
        median_hard_auc_delta: col(&|s| s.hard_auc_delta),
        median_auc_clad: col(&|s| s.clad.trials.auc),
        median_auc_audio_text: col(&|s| s.audio_text_only.trials.auc),
        seeds: out,
    })
}

// ---------------------------------------------------------------- speed

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub repetitions: usize,
    pub tracks: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            repetitions: 5,
            tracks: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RsaTable {
    pub repetitions: usize,
    pub tracks: usize,
    pub keywords: usize,
    pub audio_seconds: f64,
    pub clad_s: Vec<f64>,
    pub baseline_s: Vec<f64>,
    /// Baseline time over CLAD time, per repetition.
    pub rsa: Vec<f64>,
    pub median_rsa: f64,
    pub rsa_std: f64,
    /// Standard deviation over median.
    pub rsa_spread: f64,
    pub clad_events: usize,
    pub baseline_events: usize,
}

/// Times both detectors on the same tracks and keywords. Each repetition
/// runs the full pipeline from features to events: acoustic model,
/// encoding or post-processing, scoring and thresholding.
#[allow(clippy::too_many_arguments)]
pub fn run_bench(
    model: &CladModel,
    keywords: &[KeywordSpec],
    tracks: &[UtteranceRecord],
    window: &WindowConfig,
    baseline: &BaselineConfig,
    clad_threshold: f64,
    baseline_threshold: f64,
    stream: &StreamConfig,
    cfg: &BenchConfig,
) -> Result<RsaTable> {
    if cfg.repetitions == 0 || tracks.is_empty() || keywords.is_empty() {
        return Err(CladError::config(
            "benchmark needs repetitions, tracks and keywords",
        ));
    }
    let enrolled: Vec<Enrolled> = keywords
        .iter()
        .map(|k| enroll_keyword(model, &k.word, &k.phoneme_ids, window))
        .collect::<Result<_>>()?;
    let clad_cfg = StreamConfig {
        threshold: clad_threshold,
        ..stream.clone()
    };
    let base_cfg = StreamConfig {
        threshold: baseline_threshold,
        ..stream.clone()
    };
    let run_clad = || -> Result<usize> {
        let mut n = 0;
        for t in tracks {
            n += crate::stream::detect(model, &enrolled, &t.features, &clad_cfg)?.len();
        }
        Ok(n)
    };
    let run_base = || -> Result<usize> {
        let mut n = 0;
        for t in tracks {
            n += crate::stream::detect_baseline_track(
                &model.am,
                keywords,
                &t.features,
                baseline,
                &base_cfg,
            )?
            .len();
        }
        Ok(n)
    };
    // warm-up
    let clad_events = run_clad()?;
    let baseline_events = run_base()?;
    let (mut clad_s, mut baseline_s, mut ratios) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..cfg.repetitions {
        let t0 = Instant::now();
        run_clad()?;
        let c = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        run_base()?;
        let b = t1.elapsed().as_secs_f64();
        ratios.push(rsa(b, c)?);
        clad_s.push(c);
        baseline_s.push(b);
    }
    let median_rsa = median(&ratios);
    let rsa_std = std_dev(&ratios);
    Ok(RsaTable {
        repetitions: cfg.repetitions,
        tracks: tracks.len(),
        keywords: keywords.len(),
        audio_seconds: tracks.iter().map(|t| t.num_frames()).sum::<usize>() as f64
            / stream.frame_rate_hz,
        clad_s,
        baseline_s,
        rsa: ratios,
        median_rsa,
        rsa_std,
        rsa_spread: rsa_std / median_rsa,
        clad_events,
        baseline_events,
    })
}

#[cfg(test)]
mod tests;
