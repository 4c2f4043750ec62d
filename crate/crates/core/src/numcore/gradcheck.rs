use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Maximum relative error between the tape gradient of `f` and central
/// finite differences, over every scalar of every parameter in `store`.
///
/// The error for one entry is `|analytic - fd| / max(1, |fd|)`.
pub fn grad_check<F>(store: &ParamStore, eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grads();
    let mut tape = Tape::new();
    let out = f(&mut tape, &work)?;
    tape.backward_into(out, &mut work)?;
    let analytic: Vec<Tensor> = work.iter().map(|p| p.grad.clone()).collect();
    grad_check_against(store, eps, &analytic, f)
}

/// Compares the supplied `analytic` gradients (one tensor per parameter, in
/// store order) against central differences of `f`.
pub fn grad_check_against<F>(store: &ParamStore, eps: f64, analytic: &[Tensor], mut f: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if analytic.len() != store.len() {
        return Err(Error::shape(format!(
            "{} gradients for {} parameters",
            analytic.len(),
            store.len()
        )));
    }
    let mut work = store.clone();
    let mut eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("objective during finite differences".into()));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for (id, grad) in ids.into_iter().zip(analytic) {
        for k in 0..grad.len() {
            let orig = work.get(id).value.data()[k];
            work.get_mut(id).value.data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[k] = orig;

            let fd = (plus - minus) / (2.0 * eps);
            let a = grad.data()[k];
            if !a.is_finite() {
                return Err(Error::NonFinite(format!("analytic gradient of {}", store.get(id).name)));
            }
            worst = worst.max((a - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(store: &ParamStore) -> impl FnMut(&mut Tape, &ParamStore) -> Result<Var> {
        let id = store.id("x").unwrap();
        move |tape: &mut Tape, s: &ParamStore| {
            let a = tape.constant(Tensor::new(3, 3, vec![4.0, 1.0, 0.0, 1.0, 3.0, -2.0, 0.0, -2.0, 5.0]).unwrap());
            let x = tape.param(s, id);
            let xa = tape.matmul(x, a)?;
            tape.matmul_t(xa, x)
        }
    }

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::row(vec![1.5, -2.0, 0.75])).unwrap();
        s
    }

    #[test]
    fn quadratic_form_is_exact() {
        let s = store();
        let err = grad_check(&s, 1e-5, quadratic(&s)).unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn doubled_gradient_is_caught() {
        let s = store();
        let mut work = s.clone();
        let mut tape = Tape::new();
        let out = quadratic(&s)(&mut tape, &work).unwrap();
        tape.backward_into(out, &mut work).unwrap();
        let wrong: Vec<Tensor> = work.iter().map(|p| p.grad.map(|g| 2.0 * g)).collect();
        let err = grad_check_against(&s, 1e-5, &wrong, quadratic(&s)).unwrap();
        assert!(err > 0.4, "err = {err}");
    }
}
