use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, ValId};

/// Outcome of a finite-difference sweep over every parameter element.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares analytic gradients against central finite differences.
///
/// `build` must construct the forward graph from scratch for any parameter
/// values, returning the tape and the scalar loss node. The analytic side is
/// one reverse sweep; the numeric side perturbs each element by `±eps`.
/// Relative error uses the larger of the two magnitudes, floored at a small
/// fraction of the gradient's overall scale so that noise on true-zero
/// elements is not amplified into spurious failures.
pub fn finite_diff_check<F>(params: &ParamStore, eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(Tape, ValId)>,
{
    let (tape, loss) = build(params)?;
    let analytic = tape.backward(loss)?;

    let mut grad_scale = 0.0f64;
    for (_, g) in analytic.iter() {
        for v in g.data() {
            grad_scale = grad_scale.max(v.abs());
        }
    }
    let floor = (1e-3 * grad_scale).max(1e-12);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };

    for name in params.names() {
        let base = params.get(name).unwrap().clone();
        for idx in 0..base.numel() {
            let orig = base.data()[idx];
            let mut probe = params.clone();
            probe.get_mut(name).unwrap().data_mut()[idx] = orig + eps;
            let (t_plus, l_plus) = build(&probe)?;
            let f_plus = t_plus.value(l_plus).scalar_value()?;
            probe.get_mut(name).unwrap().data_mut()[idx] = orig - eps;
            let (t_minus, l_minus) = build(&probe)?;
            let f_minus = t_minus.value(l_minus).scalar_value()?;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic.get(name).map_or(0.0, |g| g.data()[idx]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}
