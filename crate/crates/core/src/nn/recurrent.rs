use rand::Rng;

use crate::error::{CladError, Result};

use super::graph::{Graph, Var};
use super::params::{Bound, ParamSet};
use super::tensor::Tensor;

/// Gated recurrent cell with update gate `z`, reset gate `r` and candidate `n`:
///
/// ```text
/// z = σ(x·Wz + bz + h·Uz + cz)
/// r = σ(x·Wr + br + h·Ur + cr)
/// n = tanh(x·Wn + bn + r ⊙ (h·Un + cn))
/// h' = n + z ⊙ (h − n)
/// ```
///
/// The three gate blocks are stored side by side so each step costs two
/// matrix products.
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    pub input: usize,
    pub hidden: usize,
    w_x: usize,
    b_x: usize,
    w_h: usize,
    b_h: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bx = 1.0 / (input as f64).sqrt();
        let bh = 1.0 / (hidden as f64).sqrt();
        GruCell {
            input,
            hidden,
            w_x: params.add(
                format!("{prefix}.w_x"),
                Tensor::uniform(input, 3 * hidden, bx, rng),
            ),
            b_x: params.add(
                format!("{prefix}.b_x"),
                Tensor::uniform(1, 3 * hidden, bx, rng),
            ),
            w_h: params.add(
                format!("{prefix}.w_h"),
                Tensor::uniform(hidden, 3 * hidden, bh, rng),
            ),
            b_h: params.add(
                format!("{prefix}.b_h"),
                Tensor::uniform(1, 3 * hidden, bh, rng),
            ),
        }
    }

    /// Re-attaches a cell to tensors already present in `params`.
    pub fn locate(params: &ParamSet, prefix: &str) -> Result<Self> {
        let find = |s: &str| {
            params
                .index_of(&format!("{prefix}.{s}"))
                .ok_or_else(|| CladError::contract(format!("missing parameter {prefix}.{s}")))
        };
        let w_x = find("w_x")?;
        let w_h = find("w_h")?;
        let cell = GruCell {
            input: params.get(w_x).rows(),
            hidden: params.get(w_h).rows(),
            w_x,
            b_x: find("b_x")?,
            w_h,
            b_h: find("b_h")?,
        };
        Ok(cell)
    }

    /// Input-side gate pre-activations for a whole `[T·B × I]` stack at once.
    pub fn project_inputs(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let xw = g.matmul(x, p.get(self.w_x))?;
        g.add_bias(xw, p.get(self.b_x))
    }

    /// One step given precomputed input pre-activations `gx` (`[B × 3H]`).
    pub fn step_projected(&self, g: &mut Graph, p: &Bound, gx: Var, h_prev: Var) -> Result<Var> {
        let hu = g.matmul(h_prev, p.get(self.w_h))?;
        let gh = g.add_bias(hu, p.get(self.b_h))?;
        g.gru_gates(gx, gh, h_prev)
    }

    /// Single step from a raw input `x_t` (`[B × I]`).
    pub fn step(&self, g: &mut Graph, p: &Bound, x_t: Var, h_prev: Var) -> Result<Var> {
        let [b, i] = g.shape(x_t);
        let [hb, hh] = g.shape(h_prev);
        if i != self.input || hb != b || hh != self.hidden {
            return Err(CladError::contract(format!(
                "recurrent cell expects x [Bx{}] and h [Bx{}], got x [{b}x{i}] and h [{hb}x{hh}]",
                self.input, self.hidden
            )));
        }
        let gx = self.project_inputs(g, p, x_t)?;
        self.step_projected(g, p, gx, h_prev)
    }

    /// Runs over a time-major stack `x` of shape `[T·B × I]` from a zero
    /// state, returning hidden states in time order. With `reverse` the
    /// recurrence starts at the last step.
    pub fn run(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        batch: usize,
        reverse: bool,
    ) -> Result<Vec<Var>> {
        let [rows, cols] = g.shape(x);
        if cols != self.input || batch == 0 || rows % batch != 0 {
            return Err(CladError::contract(format!(
                "recurrent input [{rows}x{cols}] incompatible with batch {batch} and input size {}",
                self.input
            )));
        }
        let steps = rows / batch;
        let gx_all = self.project_inputs(g, p, x)?;
        let mut h = g.constant(Tensor::zeros(batch, self.hidden));
        let mut out = vec![h; steps];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..steps).rev())
        } else {
            Box::new(0..steps)
        };
        for t in order {
            let gx = g.slice_rows(gx_all, t * batch, (t + 1) * batch)?;
            h = self.step_projected(g, p, gx, h)?;
            out[t] = h;
        }
        Ok(out)
    }
}
