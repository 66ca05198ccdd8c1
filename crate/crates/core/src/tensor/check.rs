use alloc::format;

use super::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Compare the tape gradient of `f` at `theta` with central differences.
///
/// `f` builds a scalar from the leaf it is given. Returns the maximum over
/// coordinates of `|analytic - central| / max(|analytic|, |central|, 1e-8)`.
/// `f` must be deterministic; callers keep inputs away from relu/abs kinks.
pub fn finite_diff_check<F>(theta: &Tensor, step: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut g = Graph::new();
    let x = g.leaf(theta.clone(), true);
    let loss = f(&mut g, x)?;
    g.backward(loss)?;
    let analytic = g.grad(x).map(|s| s.to_vec()).unwrap_or_else(|| alloc::vec![0.0; theta.numel()]);

    let mut eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(t.clone(), false);
        let out = f(&mut g, x)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(Error::numeric(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    let mut probe = theta.clone();
    for i in 0..theta.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let central = (fp - fm) / (2.0 * step);
        let a = analytic[i];
        let err = (a - central).abs() / a.abs().max(central.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
