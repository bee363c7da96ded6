use super::{Tape, Tensor, Var};
use crate::error::{CctError, Result};

/// Where the worst analytic/numeric disagreement was found.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Elements where both gradients were below the resolution threshold and
    /// were compared by absolute error instead.
    pub unresolved: usize,
    pub max_abs_error_unresolved: f64,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(CctError::Usage(format!("gradient check needs a scalar function, got shape {:?}", t.shape())));
    }
    Ok(t.data()[0])
}

/// Compare backward-pass gradients of `f` against central differences with
/// the given `step`, for every element of every input. `f` must be
/// deterministic (no dropout).
pub fn finite_difference_check_many<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    finite_difference_check_filtered(f, inputs, step, 0.0, |_, _| true)
}

/// [`finite_difference_check_many`] restricted to the `(input, element)`
/// pairs for which `include` returns true.
///
/// Central differences in fp64 are quantized to roughly `ulp(f) / (2·step)`,
/// so tiny gradients cannot be resolved to a useful relative accuracy.
/// Elements where both `|analytic|` and `|numeric|` fall below `resolution`
/// are compared by absolute error and reported separately; `resolution = 0`
/// applies the relative measure everywhere.
pub fn finite_difference_check_filtered<F, P>(
    f: F,
    inputs: &[Tensor<f64>],
    step: f64,
    resolution: f64,
    include: P,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    P: Fn(usize, usize) -> bool,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> =
        vars.iter().zip(inputs).map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()])).collect();
    drop(tape);

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        input: 0,
        element: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        unresolved: 0,
        max_abs_error_unresolved: 0.0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, grads) in analytic.iter().enumerate() {
        for (e, &a) in grads.iter().enumerate() {
            if !include(which, e) {
                continue;
            }
            let original = work[which].data()[e];
            work[which].data_mut()[e] = original + step;
            let plus = eval(&work)?;
            work[which].data_mut()[e] = original - step;
            let minus = eval(&work)?;
            work[which].data_mut()[e] = original;
            let numeric = (plus - minus) / (2.0 * step);
            report.checked += 1;
            if a.abs() < resolution && numeric.abs() < resolution {
                report.unresolved += 1;
                report.max_abs_error_unresolved = report.max_abs_error_unresolved.max((a - numeric).abs());
                continue;
            }
            let err = relative_error(a, numeric);
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.input = which;
                report.element = e;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`finite_difference_check_many`]; returns the maximum
/// relative error.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    finite_difference_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step).map(|r| r.max_rel_error)
}
