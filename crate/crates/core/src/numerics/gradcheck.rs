//! Central finite-difference oracle for tape gradients.
//!
//! The oracle only ever runs forward passes. Values that the loss detaches are
//! captured on the first pass and replayed on every perturbed pass, so the
//! numeric derivative is taken of the same function the backward pass
//! differentiates.

use crate::error::Result;
use crate::numerics::params::{Bound, ParamStore};
use crate::numerics::tape::{Tape, Var};

/// Denominator floor for relative errors, per unit of loss magnitude, so
/// entries whose true gradient is zero are compared on an absolute scale.
/// Round-off in a central difference grows with `|loss|`, hence the scaling.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub loss: f64,
    pub max_rel_error: f64,
    pub worst_entry: String,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn rel_error(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let floor = REL_FLOOR * loss.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `backward` against central differences with step `h` for every
/// entry of every parameter (at most `max_entries` per parameter, spread
/// evenly when a parameter is larger).
pub fn check_gradients<F>(
    params: &ParamStore,
    h: f64,
    max_entries: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    let loss_value = tape.value(loss).item()?;
    let grads = bound.gradients(&tape.backward(loss)?);
    let replay = tape.detached_values().to_vec();

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut t = Tape::with_detach_replay(replay.clone());
        let b = p.bind_frozen(&mut t);
        let l = f(&mut t, &b)?;
        t.value(l).item()
    };

    let mut report = GradCheckReport {
        loss: loss_value,
        max_rel_error: 0.0,
        worst_entry: String::new(),
        checked: 0,
    };
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name)?.len();
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = params.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads[&name].data()[i];
            let err = rel_error(analytic, numeric, loss_value);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_entry =
                    format!("{name}[{i}]: analytic {analytic:e} vs numeric {numeric:e}");
            }
        }
    }
    Ok(report)
}
