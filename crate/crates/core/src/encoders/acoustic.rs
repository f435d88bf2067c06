use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureMatrix, UtteranceRecord};
use crate::error::{CladError, Result};
use crate::nn::{log_softmax_rows, matmul_acc, memory_row, Bound, Graph, ParamSet, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmConfig {
    pub feature_dim: usize,
    pub num_phonemes: usize,
    pub layers: usize,
    pub hidden: usize,
    pub projection: usize,
    pub left_context: usize,
    pub right_context: usize,
}

impl Default for AmConfig {
    fn default() -> Self {
        AmConfig {
            feature_dim: 16,
            num_phonemes: 40,
            layers: 3,
            hidden: 64,
            projection: 32,
            left_context: 10,
            right_context: 1,
        }
    }
}

impl AmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0
            || self.num_phonemes < 2
            || self.layers == 0
            || self.hidden == 0
            || self.projection == 0
        {
            return Err(CladError::config(
                "acoustic model needs feature_dim, hidden, projection, layers >= 1 and num_phonemes >= 2",
            ));
        }
        Ok(())
    }

    /// Frames of future input needed before a frame's output is final.
    pub fn lookahead(&self) -> usize {
        self.layers * self.right_context
    }
}

#[derive(Clone, Copy, Debug)]
struct MemoryLayer {
    w_in: usize,
    b_in: usize,
    w_proj: usize,
    mem: usize,
}

/// Stack of feedforward sequential-memory layers. Each layer expands to
/// `hidden` with a ReLU, projects linearly to `projection`, then adds a
/// learned per-dimension filter over `left_context` past and
/// `right_context` future projected frames. Layers after the first add the
/// previous layer's output as a skip connection. The last layer's output is
/// the representation handed to the encoders; a linear head maps it to
/// phoneme logits for pre-training. Before leaving the model the
/// representation passes a fixed affine map per-dimension affine map (`rep.scale`,
/// `rep.shift`), the identity until pre-training sets it to standardize
/// each dimension.
#[derive(Clone, Debug)]
pub struct AcousticModel {
    pub config: AmConfig,
    pub params: ParamSet,
    layers: Vec<MemoryLayer>,
    out_w: usize,
    out_b: usize,
    rep_scale: usize,
    rep_shift: usize,
    frozen: bool,
}

impl AcousticModel {
    pub fn new<R: Rng + ?Sized>(config: &AmConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let taps = config.left_context + 1 + config.right_context;
        for l in 0..config.layers {
            let input = if l == 0 {
                config.feature_dim
            } else {
                config.projection
            };
            let bi = 1.0 / (input as f64).sqrt();
            let bh = 1.0 / (config.hidden as f64).sqrt();
            params.add(
                format!("l{l}.w_in"),
                Tensor::uniform(input, config.hidden, bi, rng),
            );
            params.add(
                format!("l{l}.b_in"),
                Tensor::uniform(1, config.hidden, bi, rng),
            );
            params.add(
                format!("l{l}.w_proj"),
                Tensor::uniform(config.hidden, config.projection, bh, rng),
            );
            params.add(
                format!("l{l}.mem"),
                Tensor::uniform(taps, config.projection, 1.0 / (taps as f64).sqrt(), rng),
            );
        }
        let bo = 1.0 / (config.projection as f64).sqrt();
        params.add(
            "out.w",
            Tensor::uniform(config.projection, config.num_phonemes, bo, rng),
        );
        params.add("out.b", Tensor::uniform(1, config.num_phonemes, bo, rng));
        params.add("rep.scale", Tensor::filled(1, config.projection, 1.0));
        params.add("rep.shift", Tensor::zeros(1, config.projection));
        Self::from_params(config.clone(), params, false)
    }

    /// Attaches to an existing parameter set, checking every shape.
    pub fn from_params(config: AmConfig, params: ParamSet, frozen: bool) -> Result<Self> {
        config.validate()?;
        let find = |name: String, rows: usize, cols: usize| -> Result<usize> {
            let i = params
                .index_of(&name)
                .ok_or_else(|| CladError::contract(format!("acoustic model is missing {name}")))?;
            if params.get(i).shape() != [rows, cols] {
                return Err(CladError::contract(format!(
                    "acoustic parameter {name} has shape {:?}, expected [{rows}, {cols}]",
                    params.get(i).shape()
                )));
            }
            Ok(i)
        };
        let taps = config.left_context + 1 + config.right_context;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let input = if l == 0 {
                config.feature_dim
            } else {
                config.projection
            };
            layers.push(MemoryLayer {
                w_in: find(format!("l{l}.w_in"), input, config.hidden)?,
                b_in: find(format!("l{l}.b_in"), 1, config.hidden)?,
                w_proj: find(format!("l{l}.w_proj"), config.hidden, config.projection)?,
                mem: find(format!("l{l}.mem"), taps, config.projection)?,
            });
        }
        let out_w = find("out.w".into(), config.projection, config.num_phonemes)?;
        let out_b = find("out.b".into(), 1, config.num_phonemes)?;
        let rep_scale = find("rep.scale".into(), 1, config.projection)?;
        let rep_shift = find("rep.shift".into(), 1, config.projection)?;
        if params.get(rep_scale).data().iter().any(|&v| !(v > 0.0)) {
            return Err(CladError::contract("acoustic rep.scale must be positive"));
        }
        Ok(AcousticModel {
            config,
            params,
            layers,
            out_w,
            out_b,
            rep_scale,
            rep_shift,
            frozen,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn representation_dim(&self) -> usize {
        self.config.projection
    }

    /// Frozen models go on the tape as constants so no gradient can reach them.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.params.bind(g, !self.frozen)
    }

    /// Whole-utterance forward on the tape. Returns `(representations, logits)`.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<(Var, Var)> {
        let [_, d] = g.shape(features);
        if d != self.config.feature_dim {
            return Err(CladError::contract(format!(
                "acoustic model expects {} feature dims, got {d}",
                self.config.feature_dim
            )));
        }
        let (lc, rc) = (self.config.left_context, self.config.right_context);
        let mut x = features;
        for (l, layer) in self.layers.iter().enumerate() {
            let a = g.matmul(x, p.get(layer.w_in))?;
            let a = g.add_bias(a, p.get(layer.b_in))?;
            let h = g.relu(a)?;
            let proj = g.matmul(h, p.get(layer.w_proj))?;
            let mem = g.memory(proj, p.get(layer.mem), lc, rc)?;
            let mut m = g.add(mem, proj)?;
            if l > 0 {
                m = g.add(m, x)?;
            }
            x = m;
        }
        let logits = g.matmul(x, p.get(self.out_w))?;
        let logits = g.add_bias(logits, p.get(self.out_b))?;
        let [t, _] = g.shape(x);
        let ones = g.constant(Tensor::filled(t, 1, 1.0));
        let scale = g.matmul(ones, p.get(self.rep_scale))?;
        let r = g.mul(x, scale)?;
        let r = g.add_bias(r, p.get(self.rep_shift))?;
        Ok((r, logits))
    }

    fn standardize(&self, raw: &mut [f64]) {
        let scale = self.params.get(self.rep_scale).data();
        let shift = self.params.get(self.rep_shift).data();
        for ((v, a), b) in raw.iter_mut().zip(scale).zip(shift) {
            *v = *v * a + b;
        }
    }

    fn unstandardize(&self, repr: &[f64]) -> Result<Vec<f64>> {
        if repr.len() != self.config.projection {
            return Err(CladError::contract(format!(
                "representation has {} dims, expected {}",
                repr.len(),
                self.config.projection
            )));
        }
        let scale = self.params.get(self.rep_scale).data();
        let shift = self.params.get(self.rep_shift).data();
        Ok(repr
            .iter()
            .zip(scale)
            .zip(shift)
            .map(|((v, a), b)| (v - b) / a)
            .collect())
    }

    /// Sets the output map so representations of `records` have zero mean
    /// and unit variance per dimension.
    fn fit_standardization(&mut self, records: &[UtteranceRecord]) -> Result<()> {
        let d = self.config.projection;
        self.params.get_mut(self.rep_scale).data_mut().fill(1.0);
        self.params.get_mut(self.rep_shift).data_mut().fill(0.0);
        let (mut sum, mut sq, mut n) = (vec![0.0; d], vec![0.0; d], 0usize);
        for r in records {
            let reps = am_forward(self, &r.features)?;
            for t in 0..reps.rows() {
                for (j, &v) in reps.row(t).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
            n += reps.rows();
        }
        if n == 0 {
            return Ok(());
        }
        for j in 0..d {
            let mean = sum[j] / n as f64;
            let var = (sq[j] / n as f64 - mean * mean).max(0.0);
            let scale = 1.0 / var.sqrt().max(1e-6);
            self.params.get_mut(self.rep_scale).data_mut()[j] = scale;
            self.params.get_mut(self.rep_shift).data_mut()[j] = -mean * scale;
        }
        Ok(())
    }

    /// Phoneme log-posteriors for one representation row.
    pub fn log_posteriors(&self, repr: &[f64]) -> Result<Vec<f64>> {
        let x = Tensor::row_vector(self.unstandardize(repr)?);
        let mut logits = x.matmul(self.params.get(self.out_w))?;
        logits.add_assign(self.params.get(self.out_b));
        if !logits.is_finite() {
            return Err(CladError::Numeric("non-finite acoustic logits".into()));
        }
        Ok(log_softmax_rows(&logits).into_vec())
    }

    pub fn streamer(&self) -> AmStreamer<'_> {
        AmStreamer::new(self)
    }
}

/// Representations for a whole feature matrix, `[T × projection]`. Computed
/// by the streaming path, so results are bitwise equal to feeding the same
/// frames incrementally.
pub fn am_forward(model: &AcousticModel, features: &FeatureMatrix) -> Result<Tensor> {
    let mut s = model.streamer();
    let mut rows = Vec::with_capacity(features.frames() * model.representation_dim());
    for t in 0..features.frames() {
        for r in s.push(features.frame(t))? {
            rows.extend(r);
        }
    }
    for r in s.finish()? {
        rows.extend(r);
    }
    Tensor::from_vec(features.frames(), model.representation_dim(), rows)
}

struct LayerState {
    /// Projected rows `p[base..]`.
    proj: VecDeque<Vec<f64>>,
    /// Layer inputs kept for the skip connection, aligned with `proj`.
    skip: VecDeque<Vec<f64>>,
    base: usize,
    received: usize,
    emitted: usize,
}

/// Frame-synchronous acoustic model. Each layer holds only the rows its
/// memory filter still needs, and releases output for frame `t` once
/// `right_context` future frames have arrived (or the stream ended).
pub struct AmStreamer<'a> {
    model: &'a AcousticModel,
    states: Vec<LayerState>,
    finished: bool,
}

impl<'a> AmStreamer<'a> {
    fn new(model: &'a AcousticModel) -> Self {
        let states = (0..model.layers.len())
            .map(|_| LayerState {
                proj: VecDeque::new(),
                skip: VecDeque::new(),
                base: 0,
                received: 0,
                emitted: 0,
            })
            .collect();
        AmStreamer {
            model,
            states,
            finished: false,
        }
    }

    pub fn frames_emitted(&self) -> usize {
        self.states.last().map_or(0, |s| s.emitted)
    }

    /// Feeds one feature frame and returns any representation rows that
    /// became final, in time order.
    pub fn push(&mut self, frame: &[f32]) -> Result<Vec<Vec<f64>>> {
        if self.finished {
            return Err(CladError::contract("acoustic stream already finished"));
        }
        if frame.len() != self.model.config.feature_dim {
            return Err(CladError::contract(format!(
                "frame has {} dims, expected {}",
                frame.len(),
                self.model.config.feature_dim
            )));
        }
        let row: Vec<f64> = frame.iter().map(|&v| v as f64).collect();
        self.propagate(0, vec![row])
    }

    /// Flushes the frames held back for lookahead.
    pub fn finish(&mut self) -> Result<Vec<Vec<f64>>> {
        if self.finished {
            return Ok(Vec::new());
        }
        self.finished = true;
        self.propagate(0, Vec::new())
    }

    fn propagate(&mut self, layer: usize, inputs: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
        let mut out = self.layer_step(layer, inputs)?;
        if layer + 1 == self.states.len() {
            for row in &mut out {
                self.model.standardize(row);
            }
            Ok(out)
        } else {
            self.propagate(layer + 1, out)
        }
    }

    fn layer_step(&mut self, l: usize, inputs: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
        let model = self.model;
        let layer = model.layers[l];
        let (lc, rc) = (model.config.left_context, model.config.right_context);
        let params = &model.params;
        let st = &mut self.states[l];
        for x in inputs {
            let xt = Tensor::row_vector(x);
            let mut a = Tensor::zeros(1, model.config.hidden);
            matmul_acc(&xt, params.get(layer.w_in), &mut a);
            for (v, b) in a.data_mut().iter_mut().zip(params.get(layer.b_in).data()) {
                *v += b;
            }
            if !a.is_finite() {
                return Err(CladError::Numeric("non-finite acoustic activation".into()));
            }
            let h = a.map(|v| v.max(0.0));
            let mut p = Tensor::zeros(1, model.config.projection);
            matmul_acc(&h, params.get(layer.w_proj), &mut p);
            st.proj.push_back(p.into_vec());
            st.skip
                .push_back(if l > 0 { xt.into_vec() } else { Vec::new() });
            st.received += 1;
        }
        let mut out = Vec::new();
        while st.emitted < st.received && (st.emitted + rc < st.received || self.finished) {
            let t = st.emitted;
            let lo = t.saturating_sub(lc);
            let hi = (t + rc + 1).min(st.received);
            let window: Vec<f64> = (lo..hi)
                .flat_map(|i| st.proj[i - st.base].iter().copied())
                .collect();
            let local = Tensor::from_vec(hi - lo, model.config.projection, window)?;
            let mut mem = vec![0.0; model.config.projection];
            memory_row(&local, params.get(layer.mem), lc, rc, t - lo, &mut mem);
            let own = &st.proj[t - st.base];
            let mut m: Vec<f64> = mem.iter().zip(own).map(|(a, b)| a + b).collect();
            if l > 0 {
                for (v, s) in m.iter_mut().zip(&st.skip[t - st.base]) {
                    *v += s;
                }
            }
            out.push(m);
            st.emitted += 1;
            // Rows older than the left context are no longer needed.
            while st.base + lc < st.emitted && !st.proj.is_empty() {
                st.proj.pop_front();
                st.skip.pop_front();
                st.base += 1;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Utterance frames per SGD step.
    pub batch_frames: usize,
}

impl Default for AmTrainConfig {
    fn default() -> Self {
        AmTrainConfig {
            epochs: 8,
            lr: 0.5,
            batch_frames: 4096,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmEpoch {
    pub epoch: usize,
    pub train_ce: f64,
    pub valid_ce: f64,
    pub valid_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmReport {
    /// Entry 0 is the untrained model.
    pub epochs: Vec<AmEpoch>,
    pub fingerprint: String,
}

/// Frame-level cross-entropy and accuracy of `model` on `records`.
pub fn am_evaluate(model: &AcousticModel, records: &[UtteranceRecord]) -> Result<(f64, f64)> {
    let (mut ce, mut hits, mut frames) = (0.0, 0usize, 0usize);
    for r in records {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let x = g.constant(r.features.to_tensor());
        let (_, logits) = model.forward_graph(&mut g, &p, x)?;
        let lp = log_softmax_rows(g.value(logits));
        for (t, &label) in r.frame_labels.iter().enumerate() {
            let row = lp.row(t);
            ce -= row[label];
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                );
            hits += usize::from(best.0 == label);
        }
        frames += r.num_frames();
    }
    if frames == 0 {
        return Err(CladError::contract("no frames to evaluate"));
    }
    Ok((ce / frames as f64, hits as f64 / frames as f64))
}

/// Cross-entropy pre-training with plain SGD. The model is frozen on return.
pub fn am_pretrain<R: Rng + ?Sized>(
    model: &mut AcousticModel,
    train: &[UtteranceRecord],
    valid: &[UtteranceRecord],
    cfg: &AmTrainConfig,
    rng: &mut R,
) -> Result<AmReport> {
    if model.is_frozen() {
        return Err(CladError::contract("acoustic model is already frozen"));
    }
    if !(cfg.lr > 0.0) || cfg.batch_frames == 0 {
        return Err(CladError::config(
            "acoustic training needs lr > 0 and batch_frames >= 1",
        ));
    }
    if train.is_empty() {
        return Err(CladError::contract("acoustic training set is empty"));
    }
    for r in train.iter().chain(valid) {
        r.validate(model.config.num_phonemes)?;
    }
    let mut epochs = Vec::new();
    let eval_set = if valid.is_empty() { train } else { valid };
    let (ce0, acc0) = am_evaluate(model, eval_set)?;
    epochs.push(AmEpoch {
        epoch: 0,
        train_ce: f64::NAN,
        valid_ce: ce0,
        valid_accuracy: acc0,
    });
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let (mut total, mut frames) = (0.0, 0usize);
        let mut start = 0;
        while start < order.len() {
            let mut end = start;
            let mut budget = 0;
            while end < order.len()
                && (end == start || budget + train[order[end]].num_frames() <= cfg.batch_frames)
            {
                budget += train[order[end]].num_frames();
                end += 1;
            }
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let mut terms = Vec::new();
            for &ui in &order[start..end] {
                let r = &train[ui];
                let x = g.constant(r.features.to_tensor());
                let (_, logits) = model.forward_graph(&mut g, &p, x)?;
                let lp = g.log_softmax(logits, 1)?;
                let at: Vec<(usize, usize)> = r
                    .frame_labels
                    .iter()
                    .enumerate()
                    .map(|(t, &l)| (t, l))
                    .collect();
                let picked = g.select(lp, &at)?;
                terms.push(g.sum(picked));
            }
            let all = g.concat_cols(&terms)?;
            let s = g.sum(all);
            let loss = g.scale(s, -1.0 / budget as f64);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(CladError::Training {
                    epoch,
                    message: "acoustic cross-entropy is not finite".into(),
                });
            }
            g.backward(loss)?;
            let grads = model.params.grads(&g, &p);
            model.params.sgd_step(&grads, cfg.lr)?;
            total += value * budget as f64;
            frames += budget;
            start = end;
        }
        let (ce, acc) = am_evaluate(model, eval_set)?;
        if !ce.is_finite() {
            return Err(CladError::Training {
                epoch,
                message: "validation cross-entropy is not finite".into(),
            });
        }
        epochs.push(AmEpoch {
            epoch,
            train_ce: total / frames as f64,
            valid_ce: ce,
            valid_accuracy: acc,
        });
    }
    if cfg.epochs > 0 {
        model.fit_standardization(train)?;
    }
    model.freeze();
    Ok(AmReport {
        epochs,
        fingerprint: model.params.fingerprint(),
    })
}
