//! Parameterised layers built from tape primitives.

use rand::Rng;

use super::{GroupId, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// `y = x W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        group: GroupId,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[d_in, d_out], std, rng), group);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), group));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, group: GroupId, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[d]), group),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d]), group),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layernorm(x, g, b, LN_EPS)
    }
}

/// `GELU(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        group: GroupId,
        name: &str,
        d: usize,
        d_hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, group, &format!("{name}.up"), d, d_hidden, true, rng),
            down: Linear::new(store, group, &format!("{name}.down"), d_hidden, d, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        self.down.forward(tape, store, h)
    }
}

/// Query/key/value/output projections of a multi-head attention layer.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        group: GroupId,
        name: &str,
        d: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Config(format!(
                "width {d} is not divisible by {n_heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, group, &format!("{name}.q"), d, d, false, rng),
            k: Linear::new(store, group, &format!("{name}.k"), d, d, false, rng),
            v: Linear::new(store, group, &format!("{name}.v"), d, d, false, rng),
            o: Linear::new(store, group, &format!("{name}.o"), d, d, false, rng),
            n_heads,
        })
    }

    /// Scaled dot-product attention from `queries` to `context`.
    /// `key_mask[j] == false` removes key `j`; `causal` hides keys after each query.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        context: Var,
        key_mask: Option<&[bool]>,
        causal: bool,
    ) -> Result<Var> {
        let q = self.q.forward(tape, store, queries)?;
        let k = self.k.forward(tape, store, context)?;
        let v = self.v.forward(tape, store, context)?;
        let heads = attend_heads(tape, q, k, v, self.n_heads, key_mask, causal)?;
        self.o.forward(tape, store, heads)
    }
}

/// Multi-head attention core on already-projected `q: [Tq, D]`, `k, v: [Tk, D]`.
/// Returns the concatenated head outputs `[Tq, D]`.
pub fn attend_heads(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    key_mask: Option<&[bool]>,
    causal: bool,
) -> Result<Var> {
    let (tq, d) = (tape.value(q).rows(), tape.value(q).cols());
    let tk = tape.value(k).rows();
    if tape.value(k).cols() != d || tape.value(v).cols() != d || tape.value(v).rows() != tk {
        return Err(Error::shape("attention", "q/k/v widths or key counts disagree"));
    }
    if let Some(m) = key_mask {
        if m.len() != tk {
            return Err(Error::shape("attention", format!("{} mask flags for {tk} keys", m.len())));
        }
    }
    let dk = d / n_heads;
    let keep: Option<Vec<bool>> = if key_mask.is_some() || causal {
        let mut keep = Vec::with_capacity(tq * tk);
        for i in 0..tq {
            for j in 0..tk {
                keep.push(key_mask.is_none_or(|m| m[j]) && (!causal || j <= i));
            }
        }
        Some(keep)
    } else {
        None
    };
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dk, dk)?,
                tape.slice_cols(k, h * dk, dk)?,
                tape.slice_cols(v, h * dk, dk)?,
            )
        };
        let s = tape.matmul_t(qh, kh)?;
        let mut s = tape.scale(s, scale)?;
        if let Some(keep) = &keep {
            s = tape.mask_fill(s, keep.clone())?;
        }
        let p = tape.softmax(s)?;
        outs.push(tape.matmul(p, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}
