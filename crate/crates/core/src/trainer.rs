//! Contrastive training loop, learning-rate schedule and checkpoints.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::UtteranceRecord;
use crate::encoders::{am_forward, AcousticModel, CladModel, Encoder, ModelConfig};
use crate::error::{CladError, Result};
use crate::loss::{loss_clad, loss_triplet_batch, BatchLayout, KeywordRows, LossConfig};
use crate::nn::{
    read_tensor_table, write_tensor_table, Bound, CountingReader, Graph, ParamSet, Tensor, Var,
};
use crate::windowing::{epoch_batches, BatchConfig, Segment, TrainingBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Clad,
    Triplet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub batch_frame_budget: usize,
    pub halve_on_plateau: bool,
    pub early_stop_rounds: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    pub objective: Objective,
    /// Rescale the joint encoder gradient to at most this L2 norm before
    /// each step. Off by default.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-3,
            batch_frame_budget: 12_288,
            halve_on_plateau: true,
            early_stop_rounds: 3,
            max_epochs: 20,
            seed: 0,
            validation_fraction: 0.1,
            objective: Objective::Clad,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) {
            return Err(CladError::config("initial_lr must be positive"));
        }
        if self.early_stop_rounds == 0 {
            return Err(CladError::config("early_stop_rounds must be at least 1"));
        }
        if self.batch_frame_budget == 0 {
            return Err(CladError::config("batch_frame_budget must be at least 1"));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(CladError::config("clip_norm must be positive when set"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(CladError::config("validation_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScheduleStep {
    pub improved: bool,
    pub halved: bool,
    pub stop: bool,
}

/// Halve on every validation round that fails to beat the best loss so far;
/// stop after `rounds` consecutive such rounds.
#[derive(Clone, Debug)]
pub struct Schedule {
    initial_lr: f64,
    halve: bool,
    rounds: usize,
    best: f64,
    bad_streak: usize,
    halvings: u32,
}

impl Schedule {
    pub fn new(initial_lr: f64, halve: bool, rounds: usize) -> Self {
        Schedule {
            initial_lr,
            halve,
            rounds,
            best: f64::INFINITY,
            bad_streak: 0,
            halvings: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.initial_lr / 2f64.powi(self.halvings as i32)
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, valid_loss: f64) -> ScheduleStep {
        if valid_loss < self.best {
            self.best = valid_loss;
            self.bad_streak = 0;
            return ScheduleStep {
                improved: true,
                halved: false,
                stop: false,
            };
        }
        self.bad_streak += 1;
        if self.halve {
            self.halvings += 1;
        }
        ScheduleStep {
            improved: false,
            halved: self.halve,
            stop: self.bad_streak >= self.rounds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub halved: bool,
    pub skipped_batches: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_valid_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
    pub am_fingerprint: String,
    /// Not serialized so that reports of identical runs are byte-identical.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

/// Deterministic split by a hash of the utterance id. Returns `(train, valid)`.
pub fn split_validation(
    records: &[UtteranceRecord],
    fraction: f64,
) -> (Vec<UtteranceRecord>, Vec<UtteranceRecord>) {
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for r in records {
        let digest = Sha256::digest(r.utterance_id.as_bytes());
        let x = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) as f64 / 2f64.powi(64);
        if x < fraction {
            valid.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    (train, valid)
}

/// Acoustic representations for every record.
pub fn representation_cache(
    am: &AcousticModel,
    records: &[UtteranceRecord],
) -> Result<Vec<Tensor>> {
    records
        .iter()
        .map(|r| am_forward(am, &r.features))
        .collect()
}

/// Embeds every segment and keyword of `batch`. `segment` supplies the
/// representation slice for `(utterance index, range)`. Returns audio
/// embeddings, text embeddings and the row layout for the losses.
pub fn embed_batch(
    g: &mut Graph,
    model: &CladModel,
    audio: &Bound,
    text: &Bound,
    batch: &TrainingBatch,
    mut segment: impl FnMut(&mut Graph, usize, Segment) -> Result<Var>,
) -> Result<(Var, Var, BatchLayout)> {
    let mut segs = Vec::new();
    let mut layout = BatchLayout::default();
    let mut ids: Vec<&[usize]> = Vec::new();
    for e in &batch.entries {
        let start = segs.len();
        for &s in e.positives.iter().chain(&e.negatives) {
            segs.push(segment(g, e.utterance, s)?);
        }
        let np = e.positives.len();
        layout.keywords.push(KeywordRows {
            word: e.keyword.word.clone(),
            positives: (start..start + np).collect(),
            negatives: (start + np..segs.len()).collect(),
        });
        ids.push(&e.keyword.phoneme_ids);
    }
    let a = model.audio.encode_segments(g, audio, &segs)?;
    let t = model.text.encode_ids(g, text, &ids)?;
    Ok((a, t, layout))
}

fn cached_segment(cache: &[Tensor]) -> impl FnMut(&mut Graph, usize, Segment) -> Result<Var> + '_ {
    move |g, u, s| Ok(g.constant(cache[u].rows_slice(s.start, s.end)))
}

fn objective_value(
    g: &mut Graph,
    model: &CladModel,
    audio: &Bound,
    text: &Bound,
    batch: &TrainingBatch,
    cache: &[Tensor],
    loss: &LossConfig,
    objective: Objective,
) -> Result<Var> {
    let (a, t, layout) = embed_batch(g, model, audio, text, batch, cached_segment(cache))?;
    match objective {
        Objective::Clad => Ok(loss_clad(g, a, t, &layout, loss)?.total),
        Objective::Triplet => Ok(loss_triplet_batch(g, a, t, &layout, loss)?.0),
    }
}

/// Mean objective over `batches` without touching parameters.
pub fn evaluate_loss(
    model: &CladModel,
    batches: &[TrainingBatch],
    cache: &[Tensor],
    loss: &LossConfig,
    objective: Objective,
) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0);
    for b in batches.iter().filter(|b| b.len() >= 2) {
        let mut g = Graph::new();
        let ab = model.audio.bind(&mut g, false);
        let tb = model.text.bind(&mut g, false);
        let v = objective_value(&mut g, model, &ab, &tb, b, cache, loss, objective)?;
        sum += g.value(v).item();
        n += 1;
    }
    if n == 0 {
        return Err(CladError::contract(
            "no evaluable batch (each needs at least 2 keywords)",
        ));
    }
    Ok(sum / n as f64)
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_gradients(grads: &mut [&mut Vec<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|gs| gs.iter())
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for gs in grads.iter_mut() {
            for t in gs.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
    }
    norm
}

/// One SGD step on both encoders. Returns the loss before the step.
pub fn train_step(
    model: &mut CladModel,
    batch: &TrainingBatch,
    cache: &[Tensor],
    loss: &LossConfig,
    objective: Objective,
    lr: f64,
    clip_norm: Option<f64>,
) -> Result<f64> {
    let mut g = Graph::new();
    let ab = model.audio.bind(&mut g, true);
    let tb = model.text.bind(&mut g, true);
    let v = objective_value(&mut g, model, &ab, &tb, batch, cache, loss, objective)?;
    let value = g.value(v).item();
    if !value.is_finite() {
        return Err(CladError::Numeric("training loss is not finite".into()));
    }
    g.backward(v)?;
    let mut ga = model.audio.params.grads(&g, &ab);
    let mut gt = model.text.params.grads(&g, &tb);
    if let Some(c) = clip_norm {
        clip_gradients(&mut [&mut ga, &mut gt], c);
    }
    model.audio.params.sgd_step(&ga, lr)?;
    model.text.params.sgd_step(&gt, lr)?;
    Ok(value)
}

fn diverged(e: CladError, epoch: usize) -> CladError {
    match e {
        CladError::Numeric(message) => CladError::Training { epoch, message },
        other => other,
    }
}

const VALID_SALT: u64 = 0x76a1_1d5e_ed00_0001;

/// Trains both encoders against a frozen acoustic model. After every epoch
/// `on_epoch` sees the current model; the encoders with the best validation
/// loss are restored at the end.
pub fn train_clad(
    model: &mut CladModel,
    train: &[UtteranceRecord],
    valid: &[UtteranceRecord],
    cfg: &TrainConfig,
    loss: &LossConfig,
    batching: &BatchConfig,
    mut on_epoch: impl FnMut(&CladModel, &EpochRecord) -> Result<()>,
) -> Result<TrainReport> {
    let started = Instant::now();
    cfg.validate()?;
    loss.validate()?;
    if !model.am.is_frozen() {
        return Err(CladError::contract(
            "acoustic model must be pre-trained and frozen",
        ));
    }
    if train.is_empty() || valid.is_empty() {
        return Err(CladError::contract(
            "training and validation sets must both be nonempty",
        ));
    }
    let batching = BatchConfig {
        frame_budget: cfg.batch_frame_budget,
        ..batching.clone()
    };
    let am_fingerprint = model.am.params.fingerprint();
    let train_cache = representation_cache(&model.am, train)?;
    let valid_cache = representation_cache(&model.am, valid)?;
    let valid_batches = epoch_batches(
        valid,
        &batching,
        &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ VALID_SALT),
    )?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let initial_valid_loss =
        evaluate_loss(model, &valid_batches, &valid_cache, loss, cfg.objective)
            .map_err(|e| diverged(e, 0))?;
    let mut schedule = Schedule::new(cfg.initial_lr, cfg.halve_on_plateau, cfg.early_stop_rounds);
    schedule.observe(initial_valid_loss);
    let mut best = (model.audio.clone(), model.text.clone(), 0);
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 1..=cfg.max_epochs {
        let lr = schedule.lr();
        let batches = epoch_batches(train, &batching, &mut data_rng)?;
        let (mut total, mut steps, mut skipped) = (0.0, 0, 0);
        for b in &batches {
            if b.len() < 2 {
                skipped += 1;
                continue;
            }
            let v = train_step(
                model,
                b,
                &train_cache,
                loss,
                cfg.objective,
                lr,
                cfg.clip_norm,
            )
            .map_err(|e| diverged(e, epoch))?;
            total += v;
            steps += 1;
        }
        if model.am.params.fingerprint() != am_fingerprint {
            return Err(CladError::contract(
                "frozen acoustic model changed during training",
            ));
        }
        let valid_loss = evaluate_loss(model, &valid_batches, &valid_cache, loss, cfg.objective)
            .map_err(|e| diverged(e, epoch))?;
        if !valid_loss.is_finite() {
            return Err(CladError::Training {
                epoch,
                message: "validation loss is not finite".into(),
            });
        }
        let step = schedule.observe(valid_loss);
        let record = EpochRecord {
            epoch,
            train_loss: if steps > 0 {
                total / steps as f64
            } else {
                f64::NAN
            },
            valid_loss,
            lr,
            halved: step.halved,
            skipped_batches: skipped,
        };
        if step.improved {
            best = (model.audio.clone(), model.text.clone(), epoch);
        }
        on_epoch(model, &record)?;
        epochs.push(record);
        if step.stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    model.audio = best.0;
    model.text = best.1;
    Ok(TrainReport {
        initial_valid_loss,
        epochs,
        best_epoch: best.2,
        stop_reason,
        am_fingerprint,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CLADCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub am_frozen: bool,
    pub has_encoders: bool,
    /// Free-form run configuration stored alongside the weights.
    pub run: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub am: AcousticModel,
    pub encoders: Option<(Encoder, Encoder)>,
}

impl Checkpoint {
    pub fn from_model(model: &CladModel, run: serde_json::Value) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                model: model.config.clone(),
                am_frozen: model.am.is_frozen(),
                has_encoders: true,
                run,
            },
            am: model.am.clone(),
            encoders: Some((model.audio.clone(), model.text.clone())),
        }
    }

    pub fn acoustic_only(config: &ModelConfig, am: &AcousticModel, run: serde_json::Value) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                model: config.clone(),
                am_frozen: am.is_frozen(),
                has_encoders: false,
                run,
            },
            am: am.clone(),
            encoders: None,
        }
    }

    pub fn into_model(self) -> Result<CladModel> {
        let (audio, text) = self
            .encoders
            .ok_or_else(|| CladError::contract("checkpoint holds only an acoustic model"))?;
        Ok(CladModel {
            config: self.meta.model,
            am: self.am,
            audio,
            text,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| CladError::config(e.to_string()))?;
        let mut table = ParamSet::new();
        table.extend_prefixed("am.", &self.am.params);
        if let Some((a, t)) = &self.encoders {
            table.extend_prefixed("audio.", &a.params);
            table.extend_prefixed("text.", &t.params);
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        write_tensor_table(&mut out, &table).expect("writing to memory");
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], file: &str) -> Result<Self> {
        let mut r = CountingReader::new(bytes, file);
        if r.bytes(8, "magic")? != CHECKPOINT_MAGIC {
            r.offset = 0;
            return Err(r.error("not a checkpoint (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CladError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = r.u32("config length")? as usize;
        let raw = r.bytes(len, "config")?;
        let meta: CheckpointMeta = serde_json::from_slice(&raw).map_err(|e| CladError::Parse {
            file: file.to_string(),
            offset: 16 + e.column() as u64,
            message: e.to_string(),
        })?;
        meta.model.validate()?;
        let table = read_tensor_table(&mut r)?;
        r.expect_eof()?;
        let am = AcousticModel::from_params(
            meta.model.am.clone(),
            table.with_prefix_stripped("am."),
            meta.am_frozen,
        )?;
        let encoders = if meta.has_encoders {
            Some((
                Encoder::from_params(
                    meta.model.audio.clone(),
                    table.with_prefix_stripped("audio."),
                )?,
                Encoder::from_params(meta.model.text.clone(), table.with_prefix_stripped("text."))?,
            ))
        } else {
            None
        };
        Ok(Checkpoint { meta, am, encoders })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    // Write to a sibling file first so a crash never leaves a torn checkpoint.
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| CladError::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| CladError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CladError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CladError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CladError::io(path, e))?;
    Checkpoint::from_bytes(&bytes, &path.display().to_string())
}
