use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Worst-case disagreement between reverse-sweep gradients and central
/// finite differences `(f(p+eps) − f(p−eps)) / 2eps`, taken over every
/// scalar coordinate of every parameter in `store`.
///
/// The per-coordinate error is `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
/// `f` must be deterministic: freeze any sampling noise outside the closure.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Domain(format!("eps must lie in [1e-7, 1e-3], got {eps}")));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let v = f(&mut tape, store)?;
        Ok(tape.scalar(v))
    };

    let mut worst: f64 = 0.0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let analytic = store.grad(id).clone();
        let original = store.value(id).clone();
        for i in 0..original.len() {
            let mut plus = original.clone();
            plus.data_mut()[i] += eps;
            store.get_mut(id).value = plus;
            let f_plus = eval(store)?;

            let mut minus = original.clone();
            minus.data_mut()[i] -= eps;
            store.get_mut(id).value = minus;
            let f_minus = eval(store)?;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
        store.get_mut(id).value = original;
    }
    Ok(worst)
}
