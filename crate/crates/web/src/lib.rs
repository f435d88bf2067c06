//! Browser bindings. Each export takes plain numbers and returns a JSON
//! string, so the same functions run natively in tests.

use clad_core::corpus::{synth_corpus, CorpusConfig};
use clad_core::nn::{Graph, Tensor};
use clad_core::windowing::{
    estimate_window, estimate_window_ms, label_candidates, overlap_ratio, Segment,
    SegmentLabelConfig, WindowConfig,
};
use clad_core::Result;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize, PartialEq)]
pub struct WindowPoint {
    pub phonemes: usize,
    pub ms: f64,
    pub frames: usize,
}

pub fn window_curve(
    t_mean_ms: f64,
    l_margin_ms: f64,
    frame_rate_hz: f64,
    max_phonemes: usize,
) -> Result<Vec<WindowPoint>> {
    let cfg = WindowConfig {
        t_mean_ms,
        l_margin_ms,
        frame_rate_hz,
    };
    cfg.validate()?;
    Ok((1..=max_phonemes)
        .map(|n| WindowPoint {
            phonemes: n,
            ms: estimate_window_ms(n, &cfg),
            frames: estimate_window(n, &cfg),
        })
        .collect())
}

#[derive(Debug, Serialize, PartialEq)]
pub struct InfoNce {
    pub loss: f64,
    /// Softmax over [positive, negatives...].
    pub probabilities: Vec<f64>,
    /// d loss / d similarity, same order.
    pub gradient: Vec<f64>,
}

/// One contrastive term: the positive similarity against the negatives at
/// temperature `tau`.
pub fn infonce(positive: f64, negatives: &[f64], tau: f64) -> Result<InfoNce> {
    if !(tau > 0.0) {
        return Err(clad_core::CladError::config("temperature must be positive"));
    }
    let mut sims = vec![positive];
    sims.extend_from_slice(negatives);
    let mut g = Graph::new();
    let s = g.param(Tensor::row_vector(sims));
    let logits = g.scale(s, 1.0 / tau);
    let lsm = g.log_softmax(logits, 1)?;
    let first = g.select(lsm, &[(0, 0)])?;
    let loss = g.scale(first, -1.0);
    g.backward(loss)?;
    Ok(InfoNce {
        loss: g.value(loss).item(),
        probabilities: g.value(lsm).data().iter().map(|v| v.exp()).collect(),
        gradient: g.grad(s).map(|t| t.data().to_vec()).unwrap_or_default(),
    })
}

#[derive(Debug, Serialize)]
pub struct WindowView {
    pub start: usize,
    pub end: usize,
    pub overlap: f64,
    pub label: String,
}

#[derive(Debug, Serialize)]
pub struct WordView {
    pub word: String,
    pub start: usize,
    pub end: usize,
    pub phonemes: usize,
}

#[derive(Debug, Serialize)]
pub struct UtteranceView {
    pub frames: usize,
    pub feature_dim: usize,
    /// Row-major features scaled to [0, 1].
    pub heat: Vec<f32>,
    pub labels: Vec<usize>,
    pub words: Vec<WordView>,
    pub keyword: usize,
    pub window_frames: usize,
    pub windows: Vec<WindowView>,
}

/// A synthetic utterance and the labelled candidate windows around one of
/// its words (the longest when `keyword` is out of range).
pub fn utterance_view(
    seed: u64,
    noise_sigma: f64,
    coart_frames: usize,
    keyword: usize,
) -> Result<UtteranceView> {
    let cfg = CorpusConfig {
        num_utterances: 1,
        noise_sigma,
        coart_frames,
        ..CorpusConfig::default()
    };
    let corpus = synth_corpus(&cfg, seed)?;
    let rec = &corpus.records[0];
    let k = if keyword < rec.words.len() {
        keyword
    } else {
        (0..rec.words.len())
            .max_by_key(|&i| rec.words[i].phonemes.len())
            .unwrap_or(0)
    };
    let span = &rec.words[k];
    let kw = Segment::new(span.start, span.end);
    let window = WindowConfig::default();
    let len = estimate_window(span.phonemes.len(), &window);
    let labels = SegmentLabelConfig::default();
    let windows = label_candidates(rec.num_frames(), &kw, len, &labels)?
        .into_iter()
        .map(|(s, label)| {
            Ok(WindowView {
                start: s.start,
                end: s.end,
                overlap: overlap_ratio(&s, &kw)?,
                label: format!("{label:?}").to_lowercase(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let data = rec.features.data();
    let (lo, hi) = data
        .iter()
        .fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span_v = (hi - lo).max(1e-6);
    Ok(UtteranceView {
        frames: rec.num_frames(),
        feature_dim: rec.features.dim(),
        heat: data.iter().map(|v| (v - lo) / span_v).collect(),
        labels: rec.frame_labels.clone(),
        words: rec
            .words
            .iter()
            .map(|w| WordView {
                word: w.word.clone(),
                start: w.start,
                end: w.end,
                phonemes: w.phonemes.len(),
            })
            .collect(),
        keyword: k,
        window_frames: len,
        windows,
    })
}

fn to_json<T: Serialize>(r: Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e.to_string()),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

#[wasm_bindgen(js_name = windowCurve)]
pub fn window_curve_js(
    t_mean_ms: f64,
    l_margin_ms: f64,
    frame_rate_hz: f64,
    max_phonemes: u32,
) -> String {
    to_json(window_curve(
        t_mean_ms,
        l_margin_ms,
        frame_rate_hz,
        max_phonemes as usize,
    ))
}

/// `negatives` is a comma-separated list of similarities.
#[wasm_bindgen(js_name = infoNce)]
pub fn infonce_js(positive: f64, negatives: &str, tau: f64) -> String {
    let parsed: std::result::Result<Vec<f64>, _> = negatives
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse::<f64>)
        .collect();
    match parsed {
        Ok(n) => to_json(infonce(positive, &n, tau)),
        Err(e) => error_json(&format!("bad negative similarity: {e}")),
    }
}

#[wasm_bindgen(js_name = utteranceView)]
pub fn utterance_view_js(seed: u32, noise_sigma: f64, coart_frames: u32, keyword: u32) -> String {
    to_json(utterance_view(
        seed as u64,
        noise_sigma,
        coart_frames as usize,
        keyword as usize,
    ))
}
