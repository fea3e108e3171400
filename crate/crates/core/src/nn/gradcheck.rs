//! Central finite-difference checks against the tape's analytic gradients.

use super::params::{Gradients, ParamStore};
use super::tape::{NodeId, Tape};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over all parameters.
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error <= tol
    }
}

/// Compares reverse-mode gradients of `loss` with central differences of step `h`
/// taken over every trainable scalar in `store`.
pub fn check_gradients<F>(store: &ParamStore<f64>, h: f64, loss: F) -> Result<GradCheck, NnError>
where
    F: Fn(&mut Tape<'_, f64>) -> NodeId,
{
    check_gradients_against(store, h, &loss, &loss)
}

/// Like [`check_gradients`], but differences `numeric_loss`, a version of
/// `analytic_loss` whose stop-gradient quantities are frozen at the current point.
pub fn check_gradients_against<F, G>(
    store: &ParamStore<f64>,
    h: f64,
    analytic_loss: F,
    numeric_loss: G,
) -> Result<GradCheck, NnError>
where
    F: Fn(&mut Tape<'_, f64>) -> NodeId,
    G: Fn(&mut Tape<'_, f64>) -> NodeId,
{
    let mut tape = Tape::new(store);
    let out = analytic_loss(&mut tape);
    let grads = tape.backward(out)?;
    let numeric = numeric_gradients(store, h, numeric_loss)?;

    let mut diff_sq = 0.0;
    let mut a_sq = 0.0;
    let mut n_sq = 0.0;
    for r in store.refs() {
        if !store.is_trainable(r.partition) {
            continue;
        }
        for (&a, &n) in grads.get(r).data().iter().zip(numeric.get(r).data()) {
            diff_sq += (a - n).powi(2);
            a_sq += a * a;
            n_sq += n * n;
        }
    }
    let (an, nn) = (a_sq.sqrt(), n_sq.sqrt());
    let denom = an.max(nn);
    let rel_error = if denom == 0.0 { 0.0 } else { diff_sq.sqrt() / denom };
    Ok(GradCheck {
        rel_error,
        analytic_norm: an,
        numeric_norm: nn,
    })
}

/// Central-difference gradient of `loss` for every trainable scalar (zeros elsewhere).
pub fn numeric_gradients<F>(store: &ParamStore<f64>, h: f64, loss: F) -> Result<Gradients<f64>, NnError>
where
    F: Fn(&mut Tape<'_, f64>) -> NodeId,
{
    let mut out = store.zeros_like();
    let mut probe = store.clone();
    for r in store.refs() {
        if !store.is_trainable(r.partition) {
            continue;
        }
        for i in 0..store.get(r).len() {
            let orig = store.get(r).data()[i];
            probe.get_mut(r).data_mut()[i] = orig + h;
            let up = eval(&probe, &loss)?;
            probe.get_mut(r).data_mut()[i] = orig - h;
            let down = eval(&probe, &loss)?;
            probe.get_mut(r).data_mut()[i] = orig;
            out.get_mut(r).data_mut()[i] = (up - down) / (2.0 * h);
        }
    }
    Ok(out)
}

fn eval<F>(store: &ParamStore<f64>, loss: &F) -> Result<f64, NnError>
where
    F: Fn(&mut Tape<'_, f64>) -> NodeId,
{
    let mut tape = Tape::new(store);
    let out = loss(&mut tape);
    tape.check_finite()?;
    Ok(tape.value(out).item())
}
