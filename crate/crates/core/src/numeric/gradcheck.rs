//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward pass, so it stays independent of
//! the backward implementation it verifies.

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;

/// Result for one parameter tensor.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`; 0 when both vanish.
    pub rel_err: f64,
    pub analytic_norm: f64,
}

/// Step used for parameter value `x`.
pub fn step_for(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// Compares tape gradients against central differences for the listed parameters.
/// `forward` must build a scalar loss on the supplied tape from `store`.
/// At most `max_entries` entries of each tensor are perturbed (evenly strided).
pub fn check_params<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    max_entries: usize,
    forward: F,
) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = forward(&mut tape, store)?;
    let grads = tape.backward(loss)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = forward(&mut t, store)?;
        t.value(l).item()
    };

    let mut out = Vec::with_capacity(params.len());
    for &id in params {
        let n = store.get(id).len();
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for j in (0..n).step_by(stride) {
            let x = store.get(id).data()[j];
            let h = step_for(x);
            store.get_mut(id).data_mut()[j] = x + h;
            let fp = eval(store)?;
            store.get_mut(id).data_mut()[j] = x - h;
            let fm = eval(store)?;
            store.get_mut(id).data_mut()[j] = x;
            let num = (fp - fm) / (2.0 * h);
            let ana = grads.get(id).map_or(0.0, |g| g.data()[j]);
            diff2 += (ana - num) * (ana - num);
            a2 += ana * ana;
            n2 += num * num;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        out.push(GradCheck {
            name: store.param(id).name.clone(),
            rel_err: if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom },
            analytic_norm: a2.sqrt(),
        });
    }
    Ok(out)
}
