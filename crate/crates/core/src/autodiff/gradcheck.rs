use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

/// Worst entry found by [`grad_check_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Max relative error between reverse-mode gradients and central differences.
///
/// Relative error per entry is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(params: &ParamStore, h: f64, f: F) -> Result<f64>
where
    F: Fn(&Tape, &Bound) -> Result<Var>,
{
    Ok(grad_check_report(params, h, f)?.max_relative_error)
}

pub fn grad_check_report<F>(params: &ParamStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &Bound) -> Result<Var>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = f(&tape, &bound)?;
    let mut grads = tape.backward(loss)?;
    let analytic = bound.collect(&mut grads, params)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let loss = f(&tape, &bound)?;
        Ok(tape.scalar(loss))
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name)?.numel();
        for idx in 0..n {
            let orig = params.get(&name)?.data()[idx];
            probe.get_mut(&name)?.data_mut()[idx] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[idx] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[&name].data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.entries_checked += 1;
            if rel > report.max_relative_error || !rel.is_finite() {
                report.max_relative_error = rel;
                report.worst_param = name.clone();
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
