//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::ParameterStore;

const DENOMINATOR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1e-6, |analytic| + |numeric|)`. The
    /// floor keeps exactly-zero gradients (directions the loss is invariant
    /// to, like a bias shared by all four logits) from comparing against
    /// pure rounding noise in the central difference.
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares `backward` against central differences with step `step`.
///
/// `forward` must build the scalar loss on the fresh tape it is given and be
/// deterministic. At most `max_per_param` coordinates are sampled per
/// parameter, at evenly spaced flat indices; `None` checks them all.
pub fn finite_diff_check<F>(
    store: &ParameterStore,
    step: f64,
    max_per_param: Option<usize>,
    mut forward: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = forward(store, &mut tape)?;
    let grads = tape.backward(loss)?;

    let mut probe = store.clone();
    let mut eval = |s: &ParameterStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = forward(s, &mut t)?;
        t.value(l).item()
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for id in store.ids() {
        let n = store.value(id).len();
        let picks: Vec<usize> = match max_per_param {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        for i in picks {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let orig = store.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(DENOMINATOR_FLOOR);
            report.coordinates += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
