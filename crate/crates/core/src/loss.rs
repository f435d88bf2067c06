//! Contrastive objectives over batches of audio and text embeddings.

use serde::{Deserialize, Serialize};

use crate::encoders::cosine_sim;
use crate::error::{CladError, Result};
use crate::nn::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub tau_at: f64,
    pub tau_aa: f64,
    /// Weight of the audio-audio term.
    pub alpha: f64,
    pub triplet_margin: f64,
    /// Divide each sum by its number of terms.
    pub normalize: bool,
    /// Exclude other batch entries with the same word from the text negatives.
    pub dedup_keywords: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau_at: 0.12,
            tau_aa: 0.2,
            alpha: 0.15,
            triplet_margin: 0.5,
            normalize: true,
            dedup_keywords: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_at > 0.0) || !(self.tau_aa > 0.0) {
            return Err(CladError::config("temperatures must be positive"));
        }
        if !(self.alpha >= 0.0) || !(self.triplet_margin >= 0.0) {
            return Err(CladError::config(
                "alpha and triplet_margin must be nonnegative",
            ));
        }
        Ok(())
    }
}

/// Which audio embedding rows belong to each keyword of a batch. Keyword `k`
/// is row `k` of the text embedding matrix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchLayout {
    pub keywords: Vec<KeywordRows>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeywordRows {
    pub word: String,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Sentinel added to masked logits; far below any `cos/τ` but finite.
const MASKED: f64 = -1e30;

/// Cosine similarity matrix between the rows of `a` and the rows of `b`.
pub fn cosine_matrix(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let an = g.normalize_rows(a)?;
    let bn = g.normalize_rows(b)?;
    let bt = g.transpose(bn);
    g.matmul(an, bt)
}

fn finish(g: &mut Graph, total: Option<Var>, terms: usize, normalize: bool) -> Var {
    match total {
        None => g.constant(Tensor::scalar(0.0)),
        Some(t) if normalize => g.scale(t, -1.0 / terms as f64),
        Some(t) => g.scale(t, -1.0),
    }
}

/// Audio-text InfoNCE: every positive segment against its own keyword text,
/// with every other keyword text in the batch as a negative. Negative audio
/// segments play no part. Returns the loss and its number of terms.
pub fn loss_audio_text(
    g: &mut Graph,
    audio: Var,
    text: Var,
    layout: &BatchLayout,
    cfg: &LossConfig,
) -> Result<(Var, usize)> {
    let k = layout.keywords.len();
    if g.shape(text)[0] != k {
        return Err(CladError::contract(format!(
            "{} text embeddings for {k} keywords",
            g.shape(text)[0]
        )));
    }
    if k < 2 {
        return Err(CladError::contract(
            "audio-text loss needs at least 2 keywords in the batch to form negatives",
        ));
    }
    let mut rows = Vec::new();
    let mut owner = Vec::new();
    for (ki, kw) in layout.keywords.iter().enumerate() {
        for &r in &kw.positives {
            rows.push(r);
            owner.push(ki);
        }
    }
    if rows.is_empty() {
        return Ok((g.constant(Tensor::scalar(0.0)), 0));
    }
    let pos = g.gather_rows(audio, &rows)?;
    let sim = cosine_matrix(g, pos, text)?;
    let mut logits = g.scale(sim, 1.0 / cfg.tau_at);
    if cfg.dedup_keywords {
        let mut mask = Tensor::zeros(rows.len(), k);
        let mut any = false;
        for (r, &o) in owner.iter().enumerate() {
            for w in 0..k {
                if w != o && layout.keywords[w].word == layout.keywords[o].word {
                    mask.set(r, w, MASKED);
                    any = true;
                }
            }
            if (0..k).all(|w| w == o || layout.keywords[w].word == layout.keywords[o].word) {
                return Err(CladError::contract(format!(
                    "keyword {} has no distinct text negative in the batch",
                    layout.keywords[o].word
                )));
            }
        }
        if any {
            let m = g.constant(mask);
            logits = g.add(logits, m)?;
        }
    }
    let lp = g.log_softmax(logits, 1)?;
    let at: Vec<(usize, usize)> = owner.iter().enumerate().map(|(r, &o)| (r, o)).collect();
    let picked = g.select(lp, &at)?;
    let total = g.sum(picked);
    Ok((finish(g, Some(total), at.len(), cfg.normalize), at.len()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioAudioStats {
    pub terms: usize,
    /// Keywords with fewer than two positives or no negatives.
    pub skipped: usize,
}

/// Audio-audio InfoNCE: for each keyword and each ordered pair of distinct
/// positives, the pair against that keyword's negative segments.
pub fn loss_audio_audio(
    g: &mut Graph,
    audio: Var,
    layout: &BatchLayout,
    cfg: &LossConfig,
) -> Result<(Var, AudioAudioStats)> {
    let mut stats = AudioAudioStats::default();
    let mut parts = Vec::new();
    for kw in &layout.keywords {
        let n = kw.positives.len();
        if n < 2 || kw.negatives.is_empty() {
            stats.skipped += 1;
            continue;
        }
        let pos = g.gather_rows(audio, &kw.positives)?;
        let neg = g.gather_rows(audio, &kw.negatives)?;
        let spp = cosine_matrix(g, pos, pos)?;
        let spn = cosine_matrix(g, pos, neg)?;
        let spp = g.scale(spp, 1.0 / cfg.tau_aa);
        let spn = g.scale(spn, 1.0 / cfg.tau_aa);
        for l in 0..n {
            let col = g.slice_cols(spp, l, l + 1)?;
            let logits = g.concat_cols(&[col, spn])?;
            let lp = g.log_softmax(logits, 1)?;
            let at: Vec<(usize, usize)> = (0..n).filter(|&k| k != l).map(|k| (k, 0)).collect();
            stats.terms += at.len();
            let picked = g.select(lp, &at)?;
            parts.push(g.sum(picked));
        }
    }
    let total = if parts.is_empty() {
        None
    } else {
        let row = g.concat_cols(&parts)?;
        Some(g.sum(row))
    };
    Ok((finish(g, total, stats.terms, cfg.normalize), stats))
}

#[derive(Clone, Copy, Debug)]
pub struct CladLoss {
    pub total: Var,
    pub audio_text: Var,
    pub audio_audio: Var,
    pub audio_text_terms: usize,
    pub aa_stats: AudioAudioStats,
}

/// `alpha · L_aa + L_at`.
pub fn loss_clad(
    g: &mut Graph,
    audio: Var,
    text: Var,
    layout: &BatchLayout,
    cfg: &LossConfig,
) -> Result<CladLoss> {
    cfg.validate()?;
    let (at, at_terms) = loss_audio_text(g, audio, text, layout, cfg)?;
    let (aa, aa_stats) = loss_audio_audio(g, audio, layout, cfg)?;
    let weighted = g.scale(aa, cfg.alpha);
    let total = g.add(weighted, at)?;
    Ok(CladLoss {
        total,
        audio_text: at,
        audio_audio: aa,
        audio_text_terms: at_terms,
        aa_stats,
    })
}

/// `max(0, margin − Sim(a, p) + Sim(a, n))`.
pub fn loss_triplet(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
) -> Result<f64> {
    let sp = cosine_sim(anchor, positive)?;
    let sn = cosine_sim(anchor, negative)?;
    Ok((margin - sp + sn).max(0.0))
}

/// Triplet objective on a batch: the keyword text is the anchor, each
/// positive segment against each negative segment of the same keyword.
/// Returns the mean hinge (or sum without normalization) and the term count.
pub fn loss_triplet_batch(
    g: &mut Graph,
    audio: Var,
    text: Var,
    layout: &BatchLayout,
    cfg: &LossConfig,
) -> Result<(Var, usize)> {
    let mut parts = Vec::new();
    let mut terms = 0;
    for (ki, kw) in layout.keywords.iter().enumerate() {
        if kw.positives.is_empty() || kw.negatives.is_empty() {
            continue;
        }
        let anchor = g.slice_rows(text, ki, ki + 1)?;
        let pos = g.gather_rows(audio, &kw.positives)?;
        let neg = g.gather_rows(audio, &kw.negatives)?;
        let sp = cosine_matrix(g, pos, anchor)?; // N×1
        let sn = cosine_matrix(g, anchor, neg)?; // 1×M
        let (n, m) = (kw.positives.len(), kw.negatives.len());
        let ones_m = g.constant(Tensor::filled(1, m, 1.0));
        let ones_n = g.constant(Tensor::filled(n, 1, 1.0));
        let sp_grid = g.matmul(sp, ones_m)?;
        let sn_grid = g.matmul(ones_n, sn)?;
        let diff = g.sub(sn_grid, sp_grid)?;
        let margin = g.constant(Tensor::filled(n, m, cfg.triplet_margin));
        let pre = g.add(diff, margin)?;
        let hinge = g.relu(pre)?;
        parts.push(g.sum(hinge));
        terms += n * m;
    }
    if parts.is_empty() {
        return Ok((g.constant(Tensor::scalar(0.0)), 0));
    }
    let row = g.concat_cols(&parts)?;
    let s = g.sum(row);
    let out = if cfg.normalize {
        g.scale(s, 1.0 / terms as f64)
    } else {
        s
    };
    Ok((out, terms))
}
