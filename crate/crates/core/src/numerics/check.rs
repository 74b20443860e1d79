use super::{NumericsError, Tape, Tensor, Var};

/// Compares the tape gradient of a scalar function against central
/// differences with step `step`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn finite_diff_check<F, E>(f: F, x: &Tensor, step: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<NumericsError>,
{
    finite_diff_check_against(&f, &f, x, step)
}

/// Like [`finite_diff_check`], but the central differences are taken of a
/// separate function `numeric`.
///
/// Needed when `analytic` treats some intermediate as a constant during
/// backward: `numeric` should then evaluate the same expression with that
/// intermediate frozen at its value at `x`.
pub fn finite_diff_check_against<F, G, E>(analytic: F, numeric: G, x: &Tensor, step: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    G: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<NumericsError>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut tape = Tape::new();
    let xv = tape.var(x.clone());
    let root = analytic(&mut tape, xv)?;
    let mut grads = tape.backward(root)?;
    let analytic = grads.take_or_zeros(xv, x.shape());

    let eval = |point: Tensor| -> Result<f64, E> {
        let mut tape = Tape::new();
        let v = tape.var(point);
        let out = numeric(&mut tape, v)?;
        Ok(tape.scalar(out))
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
