//! Central finite-difference checks of analytic parameter gradients.

use crate::error::Result;
use crate::params::{ParamGrads, ParamStore};

/// Worst relative error found, and where.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub worst_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `loss` for up to
/// `max_coords` evenly spaced coordinates of every trainable tensor.
///
/// The error for a tensor is `‖a − n‖ / max(‖a‖, ‖n‖)` over the checked
/// coordinates. Tensors whose checked gradients both sit below the roundoff
/// of the differences, `100 ε max(1, |loss|) / step` per coordinate, count
/// as exact.
pub fn check_param_grads<F>(
    store: &ParamStore,
    analytic: &ParamGrads,
    step: f64,
    max_coords: usize,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut work = store.clone();
    let roundoff = 100.0 * f64::EPSILON * loss(store)?.abs().max(1.0) / step;
    let mut report = GradCheckReport {
        worst_rel_err: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        let numel = store.get(id).numel();
        let zeros = vec![0.0; numel];
        let grad = analytic.get(id).unwrap_or(&zeros);
        let stride = numel.div_ceil(max_coords.max(1)).max(1);
        let (mut diff2, mut a2, mut n2, mut count) = (0.0, 0.0, 0.0, 0.0);
        for j in (0..numel).step_by(stride) {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + step;
            let plus = loss(&work)?;
            work.get_mut(id).data_mut()[j] = orig - step;
            let minus = loss(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            diff2 += (numeric - grad[j]).powi(2);
            a2 += grad[j] * grad[j];
            n2 += numeric * numeric;
            report.checked += 1;
            count += 1.0;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        let floor = (1e-9f64).max(roundoff * f64::sqrt(count));
        let rel = if scale < floor { 0.0 } else { diff2.sqrt() / scale };
        if rel > report.worst_rel_err || report.worst_param.is_empty() {
            report.worst_rel_err = rel;
            report.worst_param = store.name(id).to_string();
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{Mode, Tape};
    use crate::tensor::Tensor;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap(), true).unwrap();
        s.add("b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap(), true).unwrap();
        s
    }

    /// `C + Σ w² · scale + Σ (b + 1) − Σ b`; the `b` terms cancel.
    fn loss(s: &ParamStore, scale: f64) -> (f64, ParamGrads) {
        let mut t = Tape::new(s, Mode::Eval);
        let w = t.param(s.id("w").unwrap());
        let b = t.param(s.id("b").unwrap());
        let sq = t.square(w);
        let sq = t.sum(sq);
        let sq = t.scale(sq, scale);
        let b1 = t.add_scalar(b, 1.0);
        let b1 = t.sum(b1);
        let b0 = t.sum(b);
        let nb = t.scale(b0, -1.0);
        let c = t.add_scalar(sq, 1e6);
        let l = t.add(c, b1).unwrap();
        let l = t.add(l, nb).unwrap();
        let v = t.value(l).item();
        (v, t.backward(l).unwrap().into_params())
    }

    #[test]
    fn cancelled_gradients_count_as_exact_and_errors_are_caught() {
        let s = store();
        let (_, g) = loss(&s, 1.0);
        let r = check_param_grads(&s, &g, 1e-5, usize::MAX, |p| Ok(loss(p, 1.0).0)).unwrap();
        assert!(r.worst_rel_err < 1e-3, "{} {}", r.worst_param, r.worst_rel_err);
        assert_eq!(r.checked, 6);
        let (_, wrong) = loss(&s, 2.0);
        let r = check_param_grads(&s, &wrong, 1e-5, usize::MAX, |p| Ok(loss(p, 1.0).0)).unwrap();
        assert_eq!(r.worst_param, "w");
        assert!((r.worst_rel_err - 0.5).abs() < 1e-3, "{}", r.worst_rel_err);
    }
}
