use super::{Real, Tape, Tensor, TensorError, Var};

/// Largest elementwise `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn max_relative_error<S: Real>(analytic: &[S], numeric: &[S]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| {
            let (a, b) = (a.to_f64().unwrap(), b.to_f64().unwrap());
            (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
        })
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of `f` at `params` against central differences
/// `(f(x+h) - f(x-h)) / 2h` and returns the largest relative error.
///
/// `f` receives a fresh tape and the variable holding the (perturbed)
/// parameters, and must return a scalar loss recorded on that tape.
pub fn grad_check<S, F, E>(f: F, params: &Tensor<S>, h: S) -> std::result::Result<f64, E>
where
    S: Real,
    F: Fn(&mut Tape<S>, Var) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let w = tape.param(params.clone());
    let loss = f(&mut tape, w)?;
    tape.backward(loss)?;
    let analytic = tape.grad(w).expect("param grad").to_vec();

    let eval = |t: Tensor<S>| -> std::result::Result<S, E> {
        let mut tape = Tape::new();
        let w = tape.constant(t);
        let loss = f(&mut tape, w)?;
        Ok(tape.value(loss).item()?)
    };
    let two_h = h + h;
    let mut numeric = Vec::with_capacity(params.numel());
    for i in 0..params.numel() {
        let mut plus = params.clone();
        plus.data_mut()[i] += h;
        let mut minus = params.clone();
        minus.data_mut()[i] -= h;
        numeric.push((eval(plus)? - eval(minus)?) / two_h);
    }
    Ok(max_relative_error(&analytic, &numeric))
}
