use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use crate::error::{CladError, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// An ordered collection of named parameter tensors owned by one model.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph handles for every tensor of a [`ParamSet`], in the same order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, idx: usize) -> Var {
        self.0[idx]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Registers a tensor and returns its index.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every tensor on the tape, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| {
                    if trainable {
                        g.param(t.clone())
                    } else {
                        g.constant(t.clone())
                    }
                })
                .collect(),
        )
    }

    /// Gradients gathered from the graph, zero where nothing flowed.
    pub fn grads(&self, g: &Graph, bound: &Bound) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(bound.vars())
            .map(|(t, &v)| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
            })
            .collect()
    }

    /// Plain gradient descent: `p ← p − lr·g`.
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(CladError::config(format!(
                "learning rate must be nonnegative, got {lr}"
            )));
        }
        if grads.len() != self.tensors.len() {
            return Err(CladError::contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.tensors.len()
            )));
        }
        for (p, g) in self.tensors.iter_mut().zip(grads) {
            if p.shape() != g.shape() {
                return Err(CladError::contract("gradient shape differs from parameter"));
            }
            for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                *x -= lr * d;
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and raw bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copies entries whose names start with `prefix`, stripping it.
    pub fn with_prefix_stripped(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.add(rest, t.clone());
            }
        }
        out
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (n, t) in other.iter() {
            self.add(format!("{prefix}{n}"), t.clone());
        }
    }
}

/// Writes `u32 count`, then per tensor: `u32 name_len`, name bytes,
/// `u32 ndim`, `u32` dims, little-endian `f64` payload.
pub fn write_tensor_table<W: Write>(w: &mut W, params: &ParamSet) -> std::io::Result<()> {
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(t.rows() as u32).to_le_bytes())?;
        w.write_all(&(t.cols() as u32).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Byte reader that tracks its offset for error reporting.
pub struct CountingReader<R> {
    inner: R,
    pub offset: u64,
    file: String,
}

impl<R: Read> CountingReader<R> {
    pub fn new(inner: R, file: impl Into<String>) -> Self {
        CountingReader {
            inner,
            offset: 0,
            file: file.into(),
        }
    }

    pub fn error(&self, message: impl Into<String>) -> CladError {
        CladError::Parse {
            file: self.file.clone(),
            offset: self.offset,
            message: message.into(),
        }
    }

    pub fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        let mut filled = 0;
        while filled < n {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    self.offset += filled as u64;
                    return Err(self.error(format!("unexpected end of file reading {what}")));
                }
                Ok(k) => filled += k,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(self.error(format!("read failed: {e}"))),
            }
        }
        self.offset += n as u64;
        Ok(buf)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.bytes(n * 8, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.bytes(n * 4, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    /// Fails unless the underlying stream is exhausted.
    pub fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.error("trailing bytes after payload")),
            Err(e) => Err(self.error(format!("read failed: {e}"))),
        }
    }
}

const MAX_NAME: u32 = 4096;
const MAX_ELEMS: u64 = 1 << 28;

pub fn read_tensor_table<R: Read>(r: &mut CountingReader<R>) -> Result<ParamSet> {
    let count = r.u32("tensor count")?;
    let mut out = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u32("name length")?;
        if name_len > MAX_NAME {
            return Err(r.error(format!("implausible name length {name_len}")));
        }
        let name = String::from_utf8(r.bytes(name_len as usize, "tensor name")?)
            .map_err(|_| r.error("tensor name is not UTF-8"))?;
        let ndim = r.u32("rank")?;
        if ndim != 2 {
            return Err(r.error(format!("tensor {name} has rank {ndim}, expected 2")));
        }
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        if (rows as u64) * (cols as u64) > MAX_ELEMS {
            return Err(r.error(format!("tensor {name} too large")));
        }
        let data = r.f64s(rows * cols, "tensor payload")?;
        out.add(name, Tensor::from_vec(rows, cols, data)?);
    }
    Ok(out)
}
