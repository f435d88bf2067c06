//! Synthetic phoneme-aligned corpora.
//!
//! Each phoneme owns an anchor vector in feature space; an utterance is a
//! sequence of words, each word a sequence of phonemes, each phoneme a run of
//! noisy anchor frames. Adjacent phonemes blend linearly over a few boundary
//! frames. Alignments are exact by construction.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CladError, Result};
use crate::nn::{CountingReader, Tensor};

pub const FEATURE_MAGIC: &[u8; 8] = b"CLADFEAT";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

const SYMBOLS: [&str; 40] = [
    "AA", "AE", "AH", "AO", "AW", "AX", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G",
    "HH", "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH",
    "UH", "UW", "V", "W", "Y", "Z", "ZH",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonemeInventory {
    pub symbols: Vec<String>,
    /// One anchor per phoneme, each of length `feature_dim`.
    pub base_vectors: Vec<Vec<f64>>,
    pub mean_duration_frames: Vec<u32>,
}

impl PhonemeInventory {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.base_vectors.first().map_or(0, Vec::len)
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                best = best.min(euclidean(&self.base_vectors[i], &self.base_vectors[j]));
            }
        }
        best
    }

    /// Mean phoneme duration in frames, averaged over the inventory.
    pub fn mean_duration(&self) -> f64 {
        let n = self.mean_duration_frames.len().max(1) as f64;
        self.mean_duration_frames
            .iter()
            .map(|&d| d as f64)
            .sum::<f64>()
            / n
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InventoryConfig {
    pub num_phonemes: usize,
    pub feature_dim: usize,
    /// Minimum Euclidean distance between any two anchors.
    pub separation: f64,
    pub min_duration_frames: u32,
    pub max_duration_frames: u32,
    pub max_retries: usize,
}

impl Default for InventoryConfig {
    fn default() -> Self {
        InventoryConfig {
            num_phonemes: 40,
            feature_dim: 16,
            separation: 2.0,
            min_duration_frames: 7,
            max_duration_frames: 11,
            max_retries: 10_000,
        }
    }
}

/// Inventory with default separation and duration settings.
pub fn synth_inventory(
    num_phonemes: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<PhonemeInventory> {
    let cfg = InventoryConfig {
        num_phonemes,
        feature_dim,
        ..InventoryConfig::default()
    };
    synth_inventory_with(&cfg, seed)
}

pub fn synth_inventory_with(cfg: &InventoryConfig, seed: u64) -> Result<PhonemeInventory> {
    if cfg.num_phonemes < 2 {
        return Err(CladError::config(format!(
            "need at least 2 phonemes, got {}",
            cfg.num_phonemes
        )));
    }
    if cfg.feature_dim < 2 {
        return Err(CladError::config(format!(
            "feature_dim must be at least 2, got {}",
            cfg.feature_dim
        )));
    }
    if cfg.min_duration_frames < 1 || cfg.max_duration_frames < cfg.min_duration_frames {
        return Err(CladError::config(
            "phoneme duration range must satisfy 1 <= min <= max",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_phonemes);
    let mut retries = 0;
    while anchors.len() < cfg.num_phonemes {
        let cand: Vec<f64> = (0..cfg.feature_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        if anchors
            .iter()
            .all(|a| euclidean(a, &cand) >= cfg.separation)
        {
            anchors.push(cand);
        } else {
            retries += 1;
            if retries > cfg.max_retries {
                return Err(CladError::config(format!(
                    "could not place {} anchors with separation {} in {} dimensions after {} retries",
                    cfg.num_phonemes, cfg.separation, cfg.feature_dim, cfg.max_retries
                )));
            }
        }
    }
    let symbols = (0..cfg.num_phonemes)
        .map(|i| {
            SYMBOLS
                .get(i)
                .map_or_else(|| format!("P{i}"), |s| s.to_string())
        })
        .collect();
    let mean_duration_frames = (0..cfg.num_phonemes)
        .map(|_| rng.random_range(cfg.min_duration_frames..=cfg.max_duration_frames))
        .collect();
    Ok(PhonemeInventory {
        symbols,
        base_vectors: anchors,
        mean_duration_frames,
    })
}

/// Word → phoneme id sequence, ordered by word for deterministic iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub entries: BTreeMap<String, Vec<usize>>,
}

impl Lexicon {
    pub fn get(&self, word: &str) -> Option<&[usize]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Words with at least `min_phonemes` phonemes.
    pub fn eligible(&self, min_phonemes: usize) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, p)| p.len() >= min_phonemes)
            .map(|(w, _)| w.as_str())
            .collect()
    }
}

pub fn spell(inventory: &PhonemeInventory, phonemes: &[usize]) -> String {
    phonemes
        .iter()
        .map(|&p| inventory.symbols[p].to_lowercase())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconConfig {
    pub num_words: usize,
    /// Fraction of words drawn from the long range (keyword-eligible).
    pub long_fraction: f64,
    pub long_min: usize,
    pub long_max: usize,
    pub short_min: usize,
    pub short_max: usize,
    /// Fraction of long words that get a partner sharing a 2+ phoneme prefix.
    pub confusable_fraction: f64,
    /// Longest prefix any two words may share; confusable partners share
    /// between 2 and this many phonemes with their base word.
    #[serde(default = "default_confusable_max_prefix")]
    pub confusable_max_prefix: usize,
}

fn default_confusable_max_prefix() -> usize {
    4
}

impl Default for LexiconConfig {
    fn default() -> Self {
        LexiconConfig {
            num_words: 40,
            long_fraction: 0.6,
            long_min: 6,
            long_max: 9,
            short_min: 2,
            short_max: 5,
            confusable_fraction: 0.35,
            confusable_max_prefix: default_confusable_max_prefix(),
        }
    }
}

pub fn synth_lexicon(
    inventory: &PhonemeInventory,
    cfg: &LexiconConfig,
    seed: u64,
) -> Result<Lexicon> {
    if cfg.num_words == 0 {
        return Err(CladError::config("lexicon must contain at least one word"));
    }
    if cfg.short_min == 0
        || cfg.short_max < cfg.short_min
        || cfg.long_max < cfg.long_min
        || cfg.long_min == 0
    {
        return Err(CladError::config("invalid word length range"));
    }
    if cfg.confusable_max_prefix < 2 {
        return Err(CladError::config(
            "confusable_max_prefix must be at least 2",
        ));
    }
    let p = inventory.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1e81c0);
    let mut lex = Lexicon::default();
    let n_long = ((cfg.num_words as f64) * cfg.long_fraction).round() as usize;
    let mut long_words: Vec<Vec<usize>> = Vec::new();
    let mut attempts = 0;
    let insert = |lex: &mut Lexicon, seq: Vec<usize>| -> bool {
        let word = spell(inventory, &seq);
        let shared = |s: &Vec<usize>| s.iter().zip(&seq).take_while(|(a, b)| a == b).count();
        if lex.entries.contains_key(&word)
            || lex
                .entries
                .values()
                .any(|s| *s == seq || shared(s) > cfg.confusable_max_prefix)
        {
            return false;
        }
        lex.entries.insert(word, seq);
        true
    };
    while lex.len() < cfg.num_words {
        attempts += 1;
        if attempts > cfg.num_words * 1000 {
            return Err(CladError::config(
                "could not generate a lexicon of distinct words",
            ));
        }
        let want_long = long_words.len() < n_long;
        let confusable = want_long
            && !long_words.is_empty()
            && rng.random_bool(cfg.confusable_fraction.clamp(0.0, 1.0));
        let seq = if confusable {
            let base = long_words.choose(&mut rng).expect("nonempty").clone();
            let len = rng.random_range(cfg.long_min..=cfg.long_max);
            let hi = (base.len() - 2).min(cfg.confusable_max_prefix).max(2);
            let keep = rng.random_range(2..=hi).min(len - 1);
            let mut s = base[..keep].to_vec();
            while s.len() < len {
                s.push(rng.random_range(0..p));
            }
            if s[keep] == base.get(keep).copied().unwrap_or(usize::MAX) {
                s[keep] = (s[keep] + 1) % p;
            }
            s
        } else {
            let (lo, hi) = if want_long {
                (cfg.long_min, cfg.long_max)
            } else {
                (cfg.short_min, cfg.short_max)
            };
            let len = rng.random_range(lo..=hi);
            (0..len).map(|_| rng.random_range(0..p)).collect()
        };
        let is_long = seq.len() >= cfg.long_min;
        if insert(&mut lex, seq.clone()) && is_long {
            long_words.push(seq);
        }
    }
    Ok(lex)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    pub word: String,
    pub phonemes: Vec<usize>,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
}

impl WordSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Frame features stored as 32-bit floats, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * dim {
            return Err(CladError::contract(format!(
                "feature buffer of {} values does not fit {frames}x{dim}",
                data.len()
            )));
        }
        Ok(FeatureMatrix { frames, dim, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            self.frames,
            self.dim,
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("consistent shape")
    }

    pub fn rows(&self, start: usize, end: usize) -> FeatureMatrix {
        FeatureMatrix {
            frames: end - start,
            dim: self.dim,
            data: self.data[start * self.dim..end * self.dim].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub features: FeatureMatrix,
    pub frame_labels: Vec<usize>,
    pub words: Vec<WordSpan>,
}

impl UtteranceRecord {
    pub fn num_frames(&self) -> usize {
        self.features.frames()
    }

    /// Checks alignment invariants against an inventory of `num_phonemes`.
    pub fn validate(&self, num_phonemes: usize) -> Result<()> {
        let t = self.num_frames();
        if self.frame_labels.len() != t {
            return Err(CladError::contract(format!(
                "{}: {} labels for {t} frames",
                self.utterance_id,
                self.frame_labels.len()
            )));
        }
        if let Some(&bad) = self.frame_labels.iter().find(|&&l| l >= num_phonemes) {
            return Err(CladError::contract(format!(
                "{}: label {bad} out of range",
                self.utterance_id
            )));
        }
        let mut prev_end = 0;
        for w in &self.words {
            if w.start >= w.end || w.start < prev_end || w.end > t {
                return Err(CladError::contract(format!(
                    "{}: word {} span [{}, {}) invalid",
                    self.utterance_id, w.word, w.start, w.end
                )));
            }
            if w.phonemes.is_empty() {
                return Err(CladError::contract(format!(
                    "{}: word {} has no phonemes",
                    self.utterance_id, w.word
                )));
            }
            if let Some(f) = (w.start..w.end).find(|&f| !w.phonemes.contains(&self.frame_labels[f]))
            {
                return Err(CladError::contract(format!(
                    "{}: frame {f} inside {} carries a foreign label",
                    self.utterance_id, w.word
                )));
            }
            prev_end = w.end;
        }
        Ok(())
    }
}

/// Per-utterance synthesis settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthParams {
    pub noise_sigma: f64,
    pub coart_frames: usize,
}

/// Draws `num_words` words uniformly from the lexicon and renders them.
pub fn synth_utterance(
    inventory: &PhonemeInventory,
    lexicon: &Lexicon,
    num_words: usize,
    noise_sigma: f64,
    coart_frames: usize,
    seed: u64,
) -> Result<UtteranceRecord> {
    if lexicon.is_empty() {
        return Err(CladError::contract("lexicon is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = lexicon.entries.keys().cloned().collect();
    let chosen: Vec<String> = (0..num_words)
        .map(|_| words.choose(&mut rng).expect("nonempty").clone())
        .collect();
    render_words(
        format!("utt-{seed:016x}"),
        inventory,
        lexicon,
        &chosen,
        SynthParams {
            noise_sigma,
            coart_frames,
        },
        &mut rng,
    )
}

/// Renders an explicit word sequence into frames.
pub fn render_words<R: Rng + ?Sized>(
    utterance_id: String,
    inventory: &PhonemeInventory,
    lexicon: &Lexicon,
    words: &[String],
    params: SynthParams,
    rng: &mut R,
) -> Result<UtteranceRecord> {
    if !(params.noise_sigma >= 0.0) {
        return Err(CladError::contract("noise_sigma must be nonnegative"));
    }
    let d = inventory.feature_dim();
    // (phoneme id, duration) for every phoneme in order.
    let mut segs: Vec<(usize, usize)> = Vec::new();
    let mut spans = Vec::with_capacity(words.len());
    let mut cursor = 0;
    for w in words {
        let phonemes = lexicon
            .get(w)
            .ok_or_else(|| CladError::contract(format!("word {w} is not in the lexicon")))?;
        let start = cursor;
        for &p in phonemes {
            if p >= inventory.len() {
                return Err(CladError::contract(format!(
                    "phoneme id {p} outside inventory"
                )));
            }
            let mean = inventory.mean_duration_frames[p] as i64;
            let jitter: i64 = rng.random_range(-1..=1);
            let dur = (mean + jitter).max(1) as usize;
            segs.push((p, dur));
            cursor += dur;
        }
        spans.push(WordSpan {
            word: w.clone(),
            phonemes: phonemes.to_vec(),
            start,
            end: cursor,
        });
    }
    let total = cursor;
    let mut frames = vec![0f64; total * d];
    let mut labels = Vec::with_capacity(total);
    let mut t = 0;
    for (si, &(p, dur)) in segs.iter().enumerate() {
        for k in 0..dur {
            // Blend towards the neighbour across the nearer boundary.
            let mut other: Option<(usize, f64)> = None;
            if si + 1 < segs.len() {
                let width = boundary_width(params.coart_frames, dur, segs[si + 1].1);
                let from_end = dur - k; // 1 for the last frame
                if width > 0 && from_end <= width {
                    let pos = width - from_end; // 0..width-1 within the left half
                    other = Some((segs[si + 1].0, (pos as f64 + 0.5) / (2 * width) as f64));
                }
            }
            if other.is_none() && si > 0 {
                let width = boundary_width(params.coart_frames, segs[si - 1].1, dur);
                if width > 0 && k < width {
                    let pos = width + k; // width..2*width-1 over the whole crossfade
                    let w_self = (pos as f64 + 0.5) / (2 * width) as f64;
                    other = Some((segs[si - 1].0, 1.0 - w_self));
                }
            }
            let row = &mut frames[t * d..(t + 1) * d];
            let anchor = &inventory.base_vectors[p];
            match other {
                Some((q, w_other)) => {
                    let a2 = &inventory.base_vectors[q];
                    for i in 0..d {
                        row[i] = (1.0 - w_other) * anchor[i] + w_other * a2[i];
                    }
                }
                None => row.copy_from_slice(anchor),
            }
            // The owning phoneme always carries the majority weight (w_other < 0.5).
            labels.push(p);
            t += 1;
        }
    }
    if params.noise_sigma > 0.0 {
        let normal =
            Normal::new(0.0, params.noise_sigma).map_err(|e| CladError::config(e.to_string()))?;
        for v in frames.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    let data = frames.iter().map(|&v| v as f32).collect();
    Ok(UtteranceRecord {
        utterance_id,
        features: FeatureMatrix::new(total, d, data)?,
        frame_labels: labels,
        words: spans,
    })
}

/// Crossfade half-width at a boundary; limited so no frame sees two boundaries.
fn boundary_width(coart: usize, left_dur: usize, right_dur: usize) -> usize {
    coart.min(left_dur / 2).min(right_dur / 2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub inventory: InventoryConfig,
    pub lexicon: LexiconConfig,
    pub num_utterances: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub noise_sigma: f64,
    pub coart_frames: usize,
    pub frame_rate_hz: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            inventory: InventoryConfig::default(),
            lexicon: LexiconConfig::default(),
            num_utterances: 500,
            min_words: 4,
            max_words: 8,
            noise_sigma: 0.15,
            coart_frames: 2,
            frame_rate_hz: 100.0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_rate_hz > 0.0) {
            return Err(CladError::config("frame_rate_hz must be positive"));
        }
        if self.min_words == 0 || self.max_words < self.min_words {
            return Err(CladError::config("need 1 <= min_words <= max_words"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(CladError::config("noise_sigma must be nonnegative"));
        }
        Ok(())
    }
}

/// Corpus-level metadata shared by every record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub frame_rate_hz: f64,
    pub feature_dim: usize,
    pub inventory: PhonemeInventory,
    pub lexicon: Lexicon,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub meta: CorpusMeta,
    pub records: Vec<UtteranceRecord>,
}

impl Corpus {
    pub fn record(&self, id: &str) -> Option<&UtteranceRecord> {
        self.records.iter().find(|r| r.utterance_id == id)
    }
}

/// Builds inventory, lexicon and `num_utterances` random utterances.
pub fn synth_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let inventory = synth_inventory_with(&cfg.inventory, seed)?;
    let lexicon = synth_lexicon(&inventory, &cfg.lexicon, seed)?;
    let meta = CorpusMeta {
        frame_rate_hz: cfg.frame_rate_hz,
        feature_dim: inventory.feature_dim(),
        inventory,
        lexicon,
    };
    let records = synth_records(
        &meta,
        cfg,
        "train",
        cfg.num_utterances,
        seed,
        |_| true,
        None,
    )?;
    Ok(Corpus { meta, records })
}

/// Generates utterances over an existing inventory and lexicon.
///
/// `allow` filters the words that may be drawn; `require` (if set) forces at
/// least one of those words into every utterance at a random position.
pub fn synth_records(
    meta: &CorpusMeta,
    cfg: &CorpusConfig,
    tag: &str,
    count: usize,
    seed: u64,
    allow: impl Fn(&str) -> bool,
    require: Option<&[String]>,
) -> Result<Vec<UtteranceRecord>> {
    let pool: Vec<String> = meta
        .lexicon
        .words()
        .filter(|w| allow(w))
        .map(str::to_string)
        .collect();
    if pool.is_empty() {
        return Err(CladError::config(format!(
            "no words available for split {tag}"
        )));
    }
    let params = SynthParams {
        noise_sigma: cfg.noise_sigma,
        coart_frames: cfg.coart_frames,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ hash_tag(tag));
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let n = rng.random_range(cfg.min_words..=cfg.max_words);
        let mut words: Vec<String> = (0..n)
            .map(|_| pool.choose(&mut rng).expect("nonempty").clone())
            .collect();
        if let Some(req) = require {
            if !req.is_empty() {
                let pos = rng.random_range(0..words.len());
                words[pos] = req.choose(&mut rng).expect("nonempty").clone();
            }
        }
        let rec = render_words(
            format!("{tag}-{i:05}"),
            &meta.inventory,
            &meta.lexicon,
            &words,
            params,
            &mut rng,
        )?;
        out.push(rec);
    }
    Ok(out)
}

fn hash_tag(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordRef {
    pub utterance_id: String,
    pub feature_file: String,
    pub num_frames: usize,
    pub frame_labels: Vec<usize>,
    pub words: Vec<WordSpan>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub meta: CorpusMeta,
    pub records: Vec<RecordRef>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ManifestLine {
    Header {
        version: u32,
        #[serde(flatten)]
        meta: CorpusMeta,
    },
    Utterance(RecordRef),
}

pub fn write_features(path: &Path, features: &FeatureMatrix) -> Result<()> {
    let file = File::create(path).map_err(|e| CladError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&(features.frames as u32).to_le_bytes())?;
        w.write_all(&(features.dim as u32).to_le_bytes())?;
        for v in &features.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    };
    write().map_err(|e| CladError::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let file = File::open(path).map_err(|e| CladError::io(path, e))?;
    let mut r = CountingReader::new(BufReader::new(file), path.display().to_string());
    let magic = r.bytes(8, "magic")?;
    if magic != FEATURE_MAGIC {
        r.offset = 0;
        return Err(r.error("bad magic, expected CLADFEAT"));
    }
    let frames = r.u32("frame count")? as usize;
    let dim = r.u32("feature dimension")? as usize;
    if (frames as u64) * (dim as u64) > 1 << 30 {
        return Err(r.error("implausible feature matrix size"));
    }
    let data = r.f32s(frames * dim, "feature payload")?;
    r.expect_eof()?;
    FeatureMatrix::new(frames, dim, data)
}

/// Writes `dir/manifest.jsonl` plus one feature file per record under `dir/feats/`.
pub fn write_manifest(
    meta: &CorpusMeta,
    records: &[UtteranceRecord],
    dir: &Path,
) -> Result<CorpusManifest> {
    let feats = dir.join("feats");
    fs::create_dir_all(&feats).map_err(|e| CladError::io(&feats, e))?;
    let mut refs = Vec::with_capacity(records.len());
    for rec in records {
        if rec.features.dim() != meta.feature_dim {
            return Err(CladError::contract(format!(
                "{} has feature dim {}, corpus declares {}",
                rec.utterance_id,
                rec.features.dim(),
                meta.feature_dim
            )));
        }
        let rel = format!("feats/{}.feat", rec.utterance_id);
        write_features(&dir.join(&rel), &rec.features)?;
        refs.push(RecordRef {
            utterance_id: rec.utterance_id.clone(),
            feature_file: rel,
            num_frames: rec.num_frames(),
            frame_labels: rec.frame_labels.clone(),
            words: rec.words.clone(),
        });
    }
    let path = dir.join(MANIFEST_FILE);
    let file = File::create(&path).map_err(|e| CladError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let header = ManifestLine::Header {
        version: MANIFEST_VERSION,
        meta: meta.clone(),
    };
    let mut emit = |line: &ManifestLine| -> Result<()> {
        serde_json::to_writer(&mut w, line).map_err(|e| CladError::io(&path, e.into()))?;
        w.write_all(b"\n").map_err(|e| CladError::io(&path, e))
    };
    emit(&header)?;
    for r in &refs {
        emit(&ManifestLine::Utterance(r.clone()))?;
    }
    w.flush().map_err(|e| CladError::io(&path, e))?;
    Ok(CorpusManifest {
        meta: meta.clone(),
        records: refs,
    })
}

/// Reads a corpus directory. Either every record loads or an error is returned.
pub fn read_manifest(dir: &Path) -> Result<(CorpusManifest, Vec<UtteranceRecord>)> {
    let path = dir.join(MANIFEST_FILE);
    let file = File::open(&path).map_err(|e| CladError::io(&path, e))?;
    let name = path.display().to_string();
    let parse_err = |offset: u64, message: String| CladError::Parse {
        file: name.clone(),
        offset,
        message,
    };
    let mut reader = BufReader::new(file);
    let mut offset = 0u64;
    let mut meta: Option<CorpusMeta> = None;
    let mut refs = Vec::new();
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| parse_err(offset, format!("read failed: {e}")))?;
        if n == 0 {
            break;
        }
        let line_start = offset;
        offset += n as u64;
        if !line.ends_with('\n') {
            return Err(parse_err(offset, "truncated line (missing newline)".into()));
        }
        let text = line.trim_end();
        if text.is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(text).map_err(|e| {
            parse_err(
                line_start + e.column().saturating_sub(1) as u64,
                e.to_string(),
            )
        })?;
        match parsed {
            ManifestLine::Header { version, meta: m } => {
                if meta.is_some() {
                    return Err(parse_err(line_start, "duplicate header".into()));
                }
                if version != MANIFEST_VERSION {
                    return Err(CladError::Version {
                        found: version,
                        expected: MANIFEST_VERSION,
                    });
                }
                if !(m.frame_rate_hz > 0.0) {
                    return Err(parse_err(
                        line_start,
                        "frame_rate_hz must be positive".into(),
                    ));
                }
                meta = Some(m);
            }
            ManifestLine::Utterance(r) => {
                if meta.is_none() {
                    return Err(parse_err(line_start, "utterance before header".into()));
                }
                refs.push((line_start, r));
            }
        }
    }
    let meta = meta.ok_or_else(|| parse_err(0, "missing header line".into()))?;
    let mut records = Vec::with_capacity(refs.len());
    for (line_start, r) in &refs {
        let fpath: PathBuf = dir.join(&r.feature_file);
        let features = read_features(&fpath)?;
        if features.frames() != r.num_frames || features.dim() != meta.feature_dim {
            return Err(parse_err(
                *line_start,
                format!(
                    "{}: feature file is {}x{}, manifest says {}x{}",
                    r.utterance_id,
                    features.frames(),
                    features.dim(),
                    r.num_frames,
                    meta.feature_dim
                ),
            ));
        }
        let rec = UtteranceRecord {
            utterance_id: r.utterance_id.clone(),
            features,
            frame_labels: r.frame_labels.clone(),
            words: r.words.clone(),
        };
        rec.validate(meta.inventory.len())
            .map_err(|e| parse_err(*line_start, e.to_string()))?;
        records.push(rec);
    }
    let manifest = CorpusManifest {
        meta,
        records: refs.into_iter().map(|(_, r)| r).collect(),
    };
    Ok((manifest, records))
}
