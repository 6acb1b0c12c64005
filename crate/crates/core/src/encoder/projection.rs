use rand::Rng;

use super::TokenSequence;
use crate::error::{Error, Result};
use crate::numeric::nn::{LayerNorm, Linear};
use crate::numeric::{GroupId, ParamStore, Tape};

/// `ê = GELU(LayerNorm(e) W_proj + b_proj)`.
#[derive(Clone, Debug)]
pub struct Projection {
    pub norm: LayerNorm,
    pub linear: Linear,
    pub d_in: usize,
    pub d_out: usize,
}

impl Projection {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        group: GroupId,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm: LayerNorm::new(store, group, "encoder.proj.ln", d_in),
            linear: Linear::new(store, group, "encoder.proj", d_in, d_out, true, rng),
            d_in,
            d_out,
        }
    }

    pub fn project(&self, tape: &mut Tape, store: &ParamStore, seq: TokenSequence) -> Result<TokenSequence> {
        let shape = tape.shape(seq.tokens);
        if shape.len() != 2 || shape[1] != self.d_in {
            return Err(Error::shape(
                "project",
                format!("tokens {shape:?} do not have width {}", self.d_in),
            ));
        }
        let h = self.norm.forward(tape, store, seq.tokens)?;
        let h = self.linear.forward(tape, store, h)?;
        let tokens = tape.gelu(h)?;
        Ok(TokenSequence { tokens, ..seq })
    }
}
