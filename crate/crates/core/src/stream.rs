//! Sliding-window keyword detection on a feature stream, plus a
//! posterior-smoothing baseline detector.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::corpus::FeatureMatrix;
use crate::encoders::{am_forward, cosine_sim, AcousticModel, AmStreamer, CladModel};
use crate::error::{CladError, Result};
use crate::nn::Tensor;
use crate::windowing::{estimate_window, KeywordSpec, Segment, WindowConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub threshold: f64,
    pub cooldown_s: f64,
    pub frame_rate_hz: f64,
}

impl StreamConfig {
    pub fn new(threshold: f64, frame_rate_hz: f64) -> Self {
        StreamConfig {
            threshold,
            cooldown_s: 1.0,
            frame_rate_hz,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.threshold.is_finite() || !(self.cooldown_s >= 0.0) || !(self.frame_rate_hz > 0.0) {
            return Err(CladError::config(
                "stream config needs a finite threshold, cooldown_s >= 0 and frame_rate_hz > 0",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub keyword: String,
    pub start_s: f64,
    pub end_s: f64,
    pub score: f64,
}

impl DetectionEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

/// Canonical event order: by end time, then start time, then keyword.
pub fn sort_events(events: &mut [DetectionEvent]) {
    events.sort_by(|a, b| {
        a.end_s
            .total_cmp(&b.end_s)
            .then(a.start_s.total_cmp(&b.start_s))
            .then_with(|| a.keyword.cmp(&b.keyword))
    });
}

/// Half-overlapping windows over a track: starts at 0 with hop
/// `window / 2`, plus a final window shifted back to end at the track end
/// when the grid leaves a remainder. A track shorter than the window gets a
/// single window covering all of it.
pub fn segment_stream(track_frames: usize, window_frames: usize) -> Result<Vec<Segment>> {
    if window_frames < 2 {
        return Err(CladError::contract(format!(
            "window must span at least 2 frames, got {window_frames}"
        )));
    }
    if track_frames == 0 {
        return Ok(Vec::new());
    }
    if track_frames <= window_frames {
        return Ok(vec![Segment::new(0, track_frames)]);
    }
    let hop = window_frames / 2;
    let mut out = Vec::new();
    let mut s = 0;
    while s + window_frames <= track_frames {
        out.push(Segment::new(s, s + window_frames));
        s += hop;
    }
    if out.last().map(|w| w.end) != Some(track_frames) {
        out.push(Segment::new(track_frames - window_frames, track_frames));
    }
    Ok(out)
}

/// A keyword ready for matching: its spec and cached text embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Enrolled {
    pub spec: KeywordSpec,
    pub embedding: Vec<f64>,
}

pub fn enroll_keyword(
    model: &CladModel,
    word: &str,
    phoneme_ids: &[usize],
    window: &WindowConfig,
) -> Result<Enrolled> {
    let spec = KeywordSpec::new(word, phoneme_ids.to_vec(), window)?;
    let embedding = model.text.embed_ids(phoneme_ids)?;
    Ok(Enrolled { spec, embedding })
}

/// Per-keyword refractory logic shared by every detector.
#[derive(Clone, Debug)]
struct Cooldown {
    until: f64,
}

impl Cooldown {
    fn new() -> Self {
        Cooldown {
            until: f64::NEG_INFINITY,
        }
    }

    fn offer(
        &mut self,
        word: &str,
        seg: Segment,
        score: f64,
        cfg: &StreamConfig,
    ) -> Option<DetectionEvent> {
        let start_s = seg.start as f64 / cfg.frame_rate_hz;
        let end_s = seg.end as f64 / cfg.frame_rate_hz;
        if score >= cfg.threshold && start_s >= self.until {
            self.until = end_s + cfg.cooldown_s;
            return Some(DetectionEvent {
                keyword: word.to_string(),
                start_s,
                end_s,
                score,
            });
        }
        None
    }
}

/// Keywords grouped by window length; keywords in a group share windows.
fn groups(keywords: &[Enrolled]) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, k) in keywords.iter().enumerate() {
        out.entry(k.spec.window_frames).or_default().push(i);
    }
    out
}

/// Cosine score of every window of every keyword over whole-track
/// representations. Returns, per keyword, `(window, score)` in window order.
pub fn window_scores(
    model: &CladModel,
    keywords: &[Enrolled],
    reprs: &Tensor,
) -> Result<Vec<Vec<(Segment, f64)>>> {
    let mut out = vec![Vec::new(); keywords.len()];
    for (len, members) in groups(keywords) {
        let wins = segment_stream(reprs.rows(), len)?;
        if wins.is_empty() {
            continue;
        }
        let slices: Vec<Tensor> = wins
            .iter()
            .map(|w| reprs.rows_slice(w.start, w.end))
            .collect();
        let embs = embed_windows(model, &slices)?;
        for &k in &members {
            for (w, e) in wins.iter().zip(&embs) {
                out[k].push((*w, cosine_sim(e, &keywords[k].embedding)?));
            }
        }
    }
    Ok(out)
}

/// Windows of equal length go through the encoder together.
fn embed_windows(model: &CladModel, slices: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in slices.iter().enumerate() {
        by_len.entry(s.rows()).or_default().push(i);
    }
    let mut out = vec![Vec::new(); slices.len()];
    for idx in by_len.values() {
        let batch: Vec<Tensor> = idx.iter().map(|&i| slices[i].clone()).collect();
        for (&i, e) in idx.iter().zip(model.audio.embed_batch(&batch)?) {
            out[i] = e;
        }
    }
    Ok(out)
}

/// Whole-track detection: acoustic model over the full track, all windows
/// scored at once, then thresholding and cooldown per keyword.
pub fn detect(
    model: &CladModel,
    keywords: &[Enrolled],
    features: &FeatureMatrix,
    cfg: &StreamConfig,
) -> Result<Vec<DetectionEvent>> {
    cfg.validate()?;
    if keywords.is_empty() {
        return Err(CladError::contract("no keywords enrolled"));
    }
    let reprs = am_forward(&model.am, features)?;
    let scores = window_scores(model, keywords, &reprs)?;
    let mut events = Vec::new();
    for (k, wins) in scores.iter().enumerate() {
        events.extend(events_from_scores(&keywords[k].spec.word, wins, cfg));
    }
    sort_events(&mut events);
    Ok(events)
}

/// Thresholding and cooldown over one keyword's scored windows, in order.
pub fn events_from_scores(
    word: &str,
    windows: &[(Segment, f64)],
    cfg: &StreamConfig,
) -> Vec<DetectionEvent> {
    let mut cd = Cooldown::new();
    windows
        .iter()
        .filter_map(|&(seg, score)| cd.offer(word, seg, score, cfg))
        .collect()
}

struct Group {
    window: usize,
    members: Vec<usize>,
    next_start: usize,
    emitted_any: bool,
    last_end: usize,
}

/// Incremental detector. Frames may arrive in chunks of any size; the
/// events produced equal those of [`detect`] on the concatenated track.
pub struct StreamDetector<'m> {
    model: &'m CladModel,
    cfg: StreamConfig,
    keywords: Vec<Enrolled>,
    cooldowns: Vec<Cooldown>,
    groups: Vec<Group>,
    am: Option<AmStreamer<'m>>,
    /// Representation rows `[base, base + buf.len())`.
    buf: VecDeque<Vec<f64>>,
    base: usize,
    finished: bool,
}

impl<'m> StreamDetector<'m> {
    pub fn new(model: &'m CladModel, cfg: StreamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(StreamDetector {
            model,
            cfg,
            keywords: Vec::new(),
            cooldowns: Vec::new(),
            groups: Vec::new(),
            am: None,
            buf: VecDeque::new(),
            base: 0,
            finished: false,
        })
    }

    /// Adds a keyword, replacing any earlier enrollment of the same word.
    /// Only allowed before the first frame arrives.
    pub fn enroll(&mut self, keyword: Enrolled) -> Result<()> {
        if self.am.is_some() {
            return Err(CladError::contract(
                "keywords must be enrolled before streaming starts",
            ));
        }
        match self
            .keywords
            .iter()
            .position(|k| k.spec.word == keyword.spec.word)
        {
            Some(i) => self.keywords[i] = keyword,
            None => {
                self.keywords.push(keyword);
                self.cooldowns.push(Cooldown::new());
            }
        }
        Ok(())
    }

    pub fn keywords(&self) -> &[Enrolled] {
        &self.keywords
    }

    pub fn cooldown_until(&self, word: &str) -> Option<f64> {
        let i = self.keywords.iter().position(|k| k.spec.word == word)?;
        Some(self.cooldowns[i].until)
    }

    /// Representation rows currently held.
    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    fn start(&mut self) -> Result<()> {
        if self.am.is_some() {
            return Ok(());
        }
        if self.keywords.is_empty() {
            return Err(CladError::contract("no keywords enrolled"));
        }
        self.groups = groups(&self.keywords)
            .into_iter()
            .map(|(window, members)| Group {
                window,
                members,
                next_start: 0,
                emitted_any: false,
                last_end: 0,
            })
            .collect();
        self.am = Some(self.model.am.streamer());
        Ok(())
    }

    pub fn push(&mut self, frames: &FeatureMatrix) -> Result<Vec<DetectionEvent>> {
        if self.finished {
            return Err(CladError::contract("stream already finished"));
        }
        self.start()?;
        let am = self.am.as_mut().expect("started");
        for t in 0..frames.frames() {
            self.buf.extend(am.push(frames.frame(t))?);
        }
        self.drain(false)
    }

    pub fn push_frame(&mut self, frame: &[f32]) -> Result<Vec<DetectionEvent>> {
        let m = FeatureMatrix::new(1, frame.len(), frame.to_vec())?;
        self.push(&m)
    }

    /// Ends the stream, scoring any remaining (clamped) windows.
    pub fn finish(&mut self) -> Result<Vec<DetectionEvent>> {
        if self.finished {
            return Ok(Vec::new());
        }
        self.start()?;
        let am = self.am.as_mut().expect("started");
        self.buf.extend(am.finish()?);
        self.finished = true;
        self.drain(true)
    }

    fn rows(&self, seg: Segment) -> Result<Tensor> {
        let data: Vec<f64> = (seg.start..seg.end)
            .flat_map(|t| self.buf[t - self.base].iter().copied())
            .collect();
        Tensor::from_vec(seg.len(), self.model.am.representation_dim(), data)
    }

    fn drain(&mut self, at_end: bool) -> Result<Vec<DetectionEvent>> {
        let available = self.base + self.buf.len();
        let mut events = Vec::new();
        for gi in 0..self.groups.len() {
            let mut wins = Vec::new();
            {
                let g = &mut self.groups[gi];
                while g.next_start + g.window <= available {
                    wins.push(Segment::new(g.next_start, g.next_start + g.window));
                    g.last_end = g.next_start + g.window;
                    g.emitted_any = true;
                    g.next_start += g.window / 2;
                }
                if at_end && available > 0 {
                    if !g.emitted_any {
                        wins.push(Segment::new(0, available));
                    } else if g.last_end != available {
                        wins.push(Segment::new(available - g.window, available));
                    }
                }
            }
            if wins.is_empty() {
                continue;
            }
            let slices = wins
                .iter()
                .map(|w| self.rows(*w))
                .collect::<Result<Vec<_>>>()?;
            let embs = embed_windows(self.model, &slices)?;
            let members = self.groups[gi].members.clone();
            for k in members {
                for (w, e) in wins.iter().zip(&embs) {
                    let score = cosine_sim(e, &self.keywords[k].embedding)?;
                    let word = self.keywords[k].spec.word.clone();
                    events.extend(self.cooldowns[k].offer(&word, *w, score, &self.cfg));
                }
            }
        }
        // Release rows no group will read again, keeping a full window for
        // a clamped tail.
        let keep_from = self
            .groups
            .iter()
            .map(|g| g.next_start.min(available.saturating_sub(g.window)))
            .min()
            .unwrap_or(available);
        while self.base < keep_from && !self.buf.is_empty() {
            self.buf.pop_front();
            self.base += 1;
        }
        sort_events(&mut events);
        Ok(events)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    /// Moving-average length over past frames.
    pub smoothing_frames: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            smoothing_frames: 5,
        }
    }
}

/// Phoneme posteriors `[T × P]` from the acoustic model's output head.
pub fn am_posteriors(am: &AcousticModel, features: &FeatureMatrix) -> Result<Tensor> {
    let reprs = am_forward(am, features)?;
    posteriors_from_reprs(am, &reprs)
}

pub fn posteriors_from_reprs(am: &AcousticModel, reprs: &Tensor) -> Result<Tensor> {
    let p = am.config.num_phonemes;
    let mut data = Vec::with_capacity(reprs.rows() * p);
    for t in 0..reprs.rows() {
        data.extend(am.log_posteriors(reprs.row(t))?.into_iter().map(f64::exp));
    }
    Tensor::from_vec(reprs.rows(), p, data)
}

/// Causal moving average: row `t` is the mean of rows `t−w+1 ..= t`
/// (fewer at the start).
pub fn smooth_posteriors(post: &Tensor, window: usize) -> Result<Tensor> {
    if window == 0 {
        return Err(CladError::config("smoothing window must be at least 1"));
    }
    let mut out = Tensor::zeros(post.rows(), post.cols());
    let mut acc = vec![0.0; post.cols()];
    for t in 0..post.rows() {
        for (a, v) in acc.iter_mut().zip(post.row(t)) {
            *a += v;
        }
        if t >= window {
            for (a, v) in acc.iter_mut().zip(post.row(t - window)) {
                *a -= v;
            }
        }
        let n = (t + 1).min(window) as f64;
        for (o, a) in out.row_mut(t).iter_mut().zip(&acc) {
            *o = a / n;
        }
    }
    Ok(out)
}

/// Geometric mean over the keyword's phonemes of each phoneme's maximum
/// smoothed posterior inside `seg`, with the maxima constrained to occur in
/// phoneme order (ties in time allowed).
pub fn baseline_score(smoothed: &Tensor, phonemes: &[usize], seg: Segment) -> Result<f64> {
    if phonemes.is_empty() {
        return Err(CladError::contract("keyword has no phonemes"));
    }
    if seg.is_empty() || seg.end > smoothed.rows() {
        return Err(CladError::contract("window outside the posterior matrix"));
    }
    if let Some(&bad) = phonemes.iter().find(|&&p| p >= smoothed.cols()) {
        return Err(CladError::contract(format!("unknown phoneme id {bad}")));
    }
    let mut best = vec![0.0; phonemes.len()];
    for t in seg.start..seg.end {
        let row = smoothed.row(t);
        // best[i-1] already includes frame t, so consecutive phonemes may
        // peak on the same frame.
        let mut prev_now = 0.0;
        for (i, &p) in phonemes.iter().enumerate() {
            let reach = if i == 0 { row[p] } else { prev_now * row[p] };
            let updated = if reach > best[i] { reach } else { best[i] };
            prev_now = updated;
            best[i] = updated;
        }
    }
    Ok(best[phonemes.len() - 1].powf(1.0 / phonemes.len() as f64))
}

/// Frame-synchronous baseline scores: at every frame, the keyword-length
/// window ending there (shorter at the start of the track).
pub fn baseline_window_scores(
    smoothed: &Tensor,
    keyword: &KeywordSpec,
) -> Result<Vec<(Segment, f64)>> {
    (1..=smoothed.rows())
        .map(|end| {
            let seg = Segment::new(end.saturating_sub(keyword.window_frames), end);
            Ok((seg, baseline_score(smoothed, &keyword.phoneme_ids, seg)?))
        })
        .collect()
}

/// Baseline detection with the same threshold and cooldown rules as
/// [`detect`].
pub fn detect_baseline(
    smoothed: &Tensor,
    keyword: &KeywordSpec,
    cfg: &StreamConfig,
) -> Result<Vec<DetectionEvent>> {
    cfg.validate()?;
    let scores = baseline_window_scores(smoothed, keyword)?;
    Ok(events_from_scores(&keyword.word, &scores, cfg))
}

/// Baseline over a whole track for several keywords.
pub fn detect_baseline_track(
    am: &AcousticModel,
    keywords: &[KeywordSpec],
    features: &FeatureMatrix,
    baseline: &BaselineConfig,
    cfg: &StreamConfig,
) -> Result<Vec<DetectionEvent>> {
    if keywords.is_empty() {
        return Err(CladError::contract("no keywords enrolled"));
    }
    let post = am_posteriors(am, features)?;
    let smoothed = smooth_posteriors(&post, baseline.smoothing_frames)?;
    let mut events = Vec::new();
    for k in keywords {
        events.extend(detect_baseline(&smoothed, k, cfg)?);
    }
    sort_events(&mut events);
    Ok(events)
}

/// Window length used by the baseline for a keyword.
pub fn baseline_window(phonemes: usize, window: &WindowConfig) -> usize {
    estimate_window(phonemes, window)
}
