use super::{Bound, Params, Tape, TensorError, Var};

/// Largest elementwise relative error between the tape gradient of `f` and central
/// finite differences `(f(x + eps) - f(x - eps)) / (2 eps)`.
///
/// The relative error of one element is `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(f: F, params: &Params, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&Tape, &Bound) -> Result<Var, TensorError>,
{
    grad_check_on(f, params, eps, Tape::new)
}

/// As [`grad_check`], with the analytic pass run on a caller-supplied tape.
#[doc(hidden)]
pub fn grad_check_on<F>(
    f: F,
    params: &Params,
    eps: f64,
    analytic_tape: impl Fn() -> Tape,
) -> Result<f64, TensorError>
where
    F: Fn(&Tape, &Bound) -> Result<Var, TensorError>,
{
    let report = grad_check_per_param(f, params, eps, analytic_tape)?;
    Ok(report.into_iter().map(|(_, e)| e).fold(0.0, f64::max))
}

/// Worst relative error of every parameter tensor, by name.
pub fn grad_check_per_param<F>(
    f: F,
    params: &Params,
    eps: f64,
    analytic_tape: impl Fn() -> Tape,
) -> Result<Vec<(String, f64)>, TensorError>
where
    F: Fn(&Tape, &Bound) -> Result<Var, TensorError>,
{
    let tape = analytic_tape();
    let bound = tape.bind(params);
    let loss = f(&tape, &bound)?;
    let grads = tape.backward(loss)?;

    let eval = |p: &Params| -> Result<f64, TensorError> {
        let t = Tape::new();
        let b = t.bind(p);
        let l = f(&t, &b)?;
        t.value(l).item()
    };

    let mut report = Vec::with_capacity(params.len());
    let mut probe = params.clone();
    for id in params.ids() {
        let analytic = grads.wrt(id)?;
        let mut worst: f64 = 0.0;
        for k in 0..params.get(id).numel() {
            let x = params.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = x + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = x - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = x;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[k];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        report.push((params.name(id).to_string(), worst));
    }
    Ok(report)
}
