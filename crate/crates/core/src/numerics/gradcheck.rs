use crate::error::{KredError, Result};

use super::{ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares the tape gradient of `f` against central finite differences.
///
/// `f` builds a scalar loss on a fresh tape. Every entry of every parameter in
/// `select` (all parameters when empty) is perturbed by ±`eps`. The relative
/// error of an entry is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(
    params: &mut ParamStore,
    eps: f64,
    select: &[ParamId],
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'s> Fn(&mut Tape<'s>) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(KredError::Config(format!("grad_check eps {eps} outside [1e-7, 1e-4]")));
    }
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape)?;
        check_finite(tape.scalar(loss))?;
        tape.backward(loss)?
    };
    let ids: Vec<ParamId> = if select.is_empty() {
        params.ids().collect()
    } else {
        select.to_vec()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for id in ids {
        let n = params.value(id).len();
        for i in 0..n {
            let original = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = original + eps;
            let plus = evaluate(params, &f)?;
            params.value_mut(id).data_mut()[i] = original - eps;
            let minus = evaluate(params, &f)?;
            params.value_mut(id).data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g[i]);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}

fn evaluate<F>(params: &ParamStore, f: &F) -> Result<f64>
where
    F: for<'s> Fn(&mut Tape<'s>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let loss = f(&mut tape)?;
    check_finite(tape.scalar(loss))
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(KredError::Numeric(format!("objective evaluated to {v}")))
    }
}
