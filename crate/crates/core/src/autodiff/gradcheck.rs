//! Central finite-difference gradient checking.
//!
//! The checker only needs a closure that rebuilds the forward pass on a fresh
//! tape; it never looks at the reverse-mode rules it is checking.

use rand::seq::index::sample;
use rand::Rng;

use super::{ParamStore, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Worst mismatch found by a gradient check.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Below `REL_FLOOR * max(1, |loss|)` gradients are compared absolutely;
/// central differences carry roughly `1e-11 * |loss|` of rounding noise, so
/// structurally zero gradients would otherwise report huge relative errors.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    rel_err_scaled(analytic, numeric, 1.0)
}

/// [`rel_err`] for a loss of magnitude `loss_scale`.
pub fn rel_err_scaled(analytic: f64, numeric: f64, loss_scale: f64) -> f64 {
    let floor = REL_FLOOR * loss_scale.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of a scalar-valued forward pass against
/// central differences with step [`FD_STEP`].
///
/// `forward` receives a fresh tape, the store, and the input leaves (created
/// from `inputs`), and returns the scalar loss. At most `per_tensor` entries
/// of each parameter and input are probed (all of them when the tensor is
/// smaller), chosen with `rng`.
pub fn check<F, R>(
    store: &mut ParamStore,
    inputs: &[Tensor],
    per_tensor: usize,
    rng: &mut R,
    mut forward: F,
) -> Result<GradReport>
where
    F: FnMut(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let run = |store: &ParamStore, inputs: &[Tensor], forward: &mut F| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = forward(&mut tape, store, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    store.zero_grads();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = forward(&mut tape, store, &vars)?;
    let scale = tape.value(loss).data()[0];
    let grads = tape.backward(loss, store)?;
    let input_grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let mut report = GradReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let record = |label: String, analytic: f64, numeric: f64, report: &mut GradReport| {
        let e = rel_err_scaled(analytic, numeric, scale);
        report.checked += 1;
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = format!("{label}: analytic {analytic:e}, numeric {numeric:e}");
        }
    };

    for pi in 0..store.len() {
        let n = store.get(pi).value.len();
        let picks = sample(rng, n, per_tensor.min(n)).into_vec();
        for j in picks {
            let orig = store.get(pi).value.data()[j];
            store.get_mut(pi).value.data_mut()[j] = orig + FD_STEP;
            let up = run(store, inputs, &mut forward)?;
            store.get_mut(pi).value.data_mut()[j] = orig - FD_STEP;
            let down = run(store, inputs, &mut forward)?;
            store.get_mut(pi).value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = store.get(pi).grad.data()[j];
            record(format!("{}[{j}]", store.get(pi).name), analytic, numeric, &mut report);
        }
    }

    let mut probe = inputs.to_vec();
    for (ii, g) in input_grads.iter().enumerate() {
        let n = probe[ii].len();
        let picks = sample(rng, n, per_tensor.min(n)).into_vec();
        for j in picks {
            let orig = probe[ii].data()[j];
            probe[ii].data_mut()[j] = orig + FD_STEP;
            let up = run(store, &probe, &mut forward)?;
            probe[ii].data_mut()[j] = orig - FD_STEP;
            let down = run(store, &probe, &mut forward)?;
            probe[ii].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            record(format!("input{ii}[{j}]"), g.data()[j], numeric, &mut report);
        }
    }
    Ok(report)
}
