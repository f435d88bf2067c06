use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CladError, Result};
use crate::nn::{Bound, Graph, GruCell, ParamSet, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    /// Recurrent state size per direction.
    pub hidden: usize,
    /// Per-direction projection after each recurrent layer.
    pub projection: usize,
    pub embedding_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            hidden: 32,
            projection: 16,
            embedding_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.projection == 0 || self.embedding_dim == 0 {
            return Err(CladError::config("encoder sizes must all be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct BiLayer {
    fwd: GruCell,
    bwd: GruCell,
    proj_f: usize,
    proj_b: usize,
}

/// Bidirectional recurrent stack, attention pooling over time and a linear
/// head into the shared embedding space. The text variant starts with a
/// phoneme embedding table.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParamSet,
    input_dim: usize,
    table: Option<usize>,
    layers: Vec<BiLayer>,
    att_w: usize,
    att_b: usize,
    fc_w: usize,
    fc_b: usize,
}

impl Encoder {
    /// Encoder over real-valued frames of width `input_dim`.
    pub fn audio<R: Rng + ?Sized>(
        config: &EncoderConfig,
        input_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(config, input_dim, None, rng)
    }

    /// Encoder over phoneme ids `0..num_phonemes`, embedded into `phoneme_dim`.
    pub fn text<R: Rng + ?Sized>(
        config: &EncoderConfig,
        num_phonemes: usize,
        phoneme_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(config, phoneme_dim, Some(num_phonemes), rng)
    }

    fn build<R: Rng + ?Sized>(
        config: &EncoderConfig,
        input_dim: usize,
        vocab: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(CladError::config("encoder input width must be at least 1"));
        }
        let mut params = ParamSet::new();
        if let Some(v) = vocab {
            params.add("embed", Tensor::uniform(v, input_dim, 1.0, rng));
        }
        let mut width = input_dim;
        for l in 0..config.layers {
            GruCell::new(&mut params, &format!("l{l}.fwd"), width, config.hidden, rng);
            GruCell::new(&mut params, &format!("l{l}.bwd"), width, config.hidden, rng);
            let b = 1.0 / (config.hidden as f64).sqrt();
            params.add(
                format!("l{l}.proj_f"),
                Tensor::uniform(config.hidden, config.projection, b, rng),
            );
            params.add(
                format!("l{l}.proj_b"),
                Tensor::uniform(config.hidden, config.projection, b, rng),
            );
            width = 2 * config.projection;
        }
        let b = 1.0 / (width as f64).sqrt();
        params.add("att.w", Tensor::uniform(width, 1, b, rng));
        params.add("att.b", Tensor::uniform(1, 1, b, rng));
        params.add("fc.w", Tensor::uniform(width, config.embedding_dim, b, rng));
        params.add("fc.b", Tensor::uniform(1, config.embedding_dim, b, rng));
        Self::from_params(config.clone(), params)
    }

    /// Attaches to an existing parameter set, inferring the input width.
    pub fn from_params(config: EncoderConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let find = |name: &str| {
            params
                .index_of(name)
                .ok_or_else(|| CladError::contract(format!("encoder is missing {name}")))
        };
        let table = params.index_of("embed");
        let mut layers = Vec::with_capacity(config.layers);
        let mut width = None;
        for l in 0..config.layers {
            let fwd = GruCell::locate(&params, &format!("l{l}.fwd"))?;
            let bwd = GruCell::locate(&params, &format!("l{l}.bwd"))?;
            if fwd.hidden != config.hidden || bwd.hidden != config.hidden || fwd.input != bwd.input
            {
                return Err(CladError::contract(format!(
                    "encoder layer {l} does not match its config"
                )));
            }
            if l > 0 && fwd.input != 2 * config.projection {
                return Err(CladError::contract(format!(
                    "encoder layer {l} has input {}",
                    fwd.input
                )));
            }
            width.get_or_insert(fwd.input);
            let proj_f = find(&format!("l{l}.proj_f"))?;
            let proj_b = find(&format!("l{l}.proj_b"))?;
            for &i in &[proj_f, proj_b] {
                if params.get(i).shape() != [config.hidden, config.projection] {
                    return Err(CladError::contract(format!(
                        "bad projection shape in layer {l}"
                    )));
                }
            }
            layers.push(BiLayer {
                fwd,
                bwd,
                proj_f,
                proj_b,
            });
        }
        let input_dim = width.unwrap_or(0);
        if let Some(t) = table {
            if params.get(t).cols() != input_dim {
                return Err(CladError::contract(
                    "phoneme table width differs from recurrent input",
                ));
            }
        }
        let out_w = 2 * config.projection;
        let enc = Encoder {
            att_w: find("att.w")?,
            att_b: find("att.b")?,
            fc_w: find("fc.w")?,
            fc_b: find("fc.b")?,
            config,
            params,
            input_dim,
            table,
            layers,
        };
        if enc.params.get(enc.att_w).shape() != [out_w, 1]
            || enc.params.get(enc.fc_w).shape() != [out_w, enc.config.embedding_dim]
        {
            return Err(CladError::contract(
                "encoder head shapes do not match config",
            ));
        }
        Ok(enc)
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn vocabulary(&self) -> Option<usize> {
        self.table.map(|t| self.params.get(t).rows())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Encodes `batch` equal-length sequences given as a time-major stack
    /// `[T·batch × input]`. Returns embeddings `[batch × E]` and attention
    /// weights `[T × batch]`.
    pub fn forward_stack(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        batch: usize,
    ) -> Result<(Var, Var)> {
        let [rows, _] = g.shape(x);
        if batch == 0 || rows == 0 || rows % batch != 0 {
            return Err(CladError::contract(format!(
                "encoder needs a nonempty time-major stack, got {rows} rows for batch {batch}"
            )));
        }
        let steps = rows / batch;
        let mut h = x;
        for layer in &self.layers {
            let fs = layer.fwd.run(g, p, h, batch, false)?;
            let bs = layer.bwd.run(g, p, h, batch, true)?;
            let f = g.concat_rows(&fs)?;
            let b = g.concat_rows(&bs)?;
            let pf = g.matmul(f, p.get(layer.proj_f))?;
            let pb = g.matmul(b, p.get(layer.proj_b))?;
            h = g.concat_cols(&[pf, pb])?;
        }
        let s = g.matmul(h, p.get(self.att_w))?;
        let s = g.add_bias(s, p.get(self.att_b))?;
        let s = g.reshape(s, steps, batch)?;
        let logw = g.log_softmax(s, 0)?;
        let w = g.exp(logw)?;
        let wcol = g.reshape(w, rows, 1)?;
        let weighted = g.scale_rows(h, wcol)?;
        let pooled = g.sum_row_blocks(weighted, batch)?;
        let e = g.matmul(pooled, p.get(self.fc_w))?;
        let e = g.add_bias(e, p.get(self.fc_b))?;
        Ok((e, w))
    }

    /// Embeds segments of arbitrary lengths, each `[T_i × input]`. Segments
    /// of equal length are encoded together; output rows follow input order.
    pub fn encode_segments(&self, g: &mut Graph, p: &Bound, segments: &[Var]) -> Result<Var> {
        if self.table.is_some() {
            return Err(CladError::contract(
                "text encoder takes phoneme ids, not frames",
            ));
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &s) in segments.iter().enumerate() {
            let [t, d] = g.shape(s);
            if t == 0 {
                return Err(CladError::contract("cannot encode an empty segment"));
            }
            if d != self.input_dim {
                return Err(CladError::contract(format!(
                    "segment has {d} dims, encoder expects {}",
                    self.input_dim
                )));
            }
            groups.entry(t).or_default().push(i);
        }
        let mut outs = Vec::new();
        let mut order = Vec::new();
        for (t, idx) in groups {
            let parts: Vec<Var> = idx.iter().map(|&i| segments[i]).collect();
            let wide = g.concat_cols(&parts)?;
            let stack = g.reshape(wide, t * parts.len(), self.input_dim)?;
            let (e, _) = self.forward_stack(g, p, stack, parts.len())?;
            outs.push(e);
            order.extend(idx);
        }
        regroup(g, &outs, &order)
    }

    /// Embeds phoneme-id sequences; output rows follow input order.
    pub fn encode_ids(&self, g: &mut Graph, p: &Bound, seqs: &[&[usize]]) -> Result<Var> {
        let table = self
            .table
            .ok_or_else(|| CladError::contract("audio encoder takes frames, not phoneme ids"))?;
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in seqs.iter().enumerate() {
            if s.is_empty() {
                return Err(CladError::contract(
                    "cannot encode an empty phoneme sequence",
                ));
            }
            groups.entry(s.len()).or_default().push(i);
        }
        let mut outs = Vec::new();
        let mut order = Vec::new();
        for (t, idx) in groups {
            let ids: Vec<usize> = (0..t)
                .flat_map(|k| idx.iter().map(move |&i| seqs[i][k]))
                .collect();
            let x = g.gather_rows(p.get(table), &ids)?;
            let (e, _) = self.forward_stack(g, p, x, idx.len())?;
            outs.push(e);
            order.extend(idx);
        }
        regroup(g, &outs, &order)
    }

    /// Inference on one frame segment; returns the embedding and the
    /// attention weights over its frames.
    pub fn embed_frames(&self, frames: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.table.is_some() {
            return Err(CladError::contract(
                "text encoder takes phoneme ids, not frames",
            ));
        }
        if frames.rows() == 0 || frames.cols() != self.input_dim {
            return Err(CladError::contract(format!(
                "segment [{}x{}] does not fit encoder input {}",
                frames.rows(),
                frames.cols(),
                self.input_dim
            )));
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(frames.clone());
        let (e, w) = self.forward_stack(&mut g, &p, x, 1)?;
        Ok((g.value(e).data().to_vec(), g.value(w).data().to_vec()))
    }

    /// Inference on several equal-length frame segments at once.
    pub fn embed_batch(&self, segments: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let vars: Vec<Var> = segments.iter().map(|s| g.constant(s.clone())).collect();
        let e = self.encode_segments(&mut g, &p, &vars)?;
        Ok((0..segments.len())
            .map(|r| g.value(e).row(r).to_vec())
            .collect())
    }

    pub fn embed_ids(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let e = self.encode_ids(&mut g, &p, &[ids])?;
        Ok(g.value(e).data().to_vec())
    }
}

fn regroup(g: &mut Graph, outs: &[Var], order: &[usize]) -> Result<Var> {
    let all = g.concat_rows(outs)?;
    if order.iter().enumerate().all(|(i, &o)| i == o) {
        return Ok(all);
    }
    let mut inverse = vec![0; order.len()];
    for (pos, &orig) in order.iter().enumerate() {
        inverse[orig] = pos;
    }
    g.gather_rows(all, &inverse)
}
