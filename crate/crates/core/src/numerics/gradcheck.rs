//! Central finite-difference checks of tape gradients.

use super::{ParamStore, Tape, Var};
use crate::error::Result;

/// Norm below which a gradient counts as zero; central differences in f64
/// carry about `1e-10` of rounding noise at `h = 1e-5`.
pub const ZERO_GRAD: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    /// `|analytic - numeric| / max(|analytic|, |numeric|)` in the 2-norm.
    /// When both norms are below `ZERO_GRAD` the parameter has no gradient
    /// and the absolute difference is reported instead.
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Checks every trainable parameter of `store`, at most `max_entries` evenly
/// spaced entries per parameter.
pub fn check<F>(store: &mut ParamStore<f64>, f: F, h: f64, max_entries: usize) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, s)?;
        Ok(t.value(l).item())
    };
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable).collect();
    let mut out = Vec::new();
    for id in ids {
        let n = store.get(id).value.len();
        let analytic = grads.param(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        let (mut diff2, mut a2, mut n2, mut max_abs, mut checked) = (0.0, 0.0, 0.0, 0.0f64, 0);
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).value.data[i];
            store.get_mut(id).value.data[i] = orig + h;
            let up = eval(store)?;
            store.get_mut(id).value.data[i] = orig - h;
            let down = eval(store)?;
            store.get_mut(id).value.data[i] = orig;
            let num = (up - down) / (2.0 * h);
            let a = analytic[i];
            diff2 += (a - num) * (a - num);
            a2 += a * a;
            n2 += num * num;
            max_abs = max_abs.max((a - num).abs());
            checked += 1;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let rel_err = if denom < ZERO_GRAD { diff2.sqrt() } else { diff2.sqrt() / denom };
        out.push(ParamCheck { name: store.get(id).name.clone(), rel_err, max_abs_err: max_abs, checked });
    }
    Ok(out)
}
