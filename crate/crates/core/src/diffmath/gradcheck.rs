use super::tape::{DiffError, Shape, Tape, Var};

/// Compares analytic gradients of a scalar function against central finite
/// differences and returns the largest
/// `|analytic - numeric| / max(1, |analytic|)` over all coordinates of `x`.
///
/// `f` is re-run on a fresh tape for every probe, so it must be
/// deterministic.
pub fn grad_check<F, E>(mut f: F, x: &[f64], shape: Shape, h: f64) -> Result<f64, E>
where
    F: FnMut(&mut Tape, Var) -> Result<Var, E>,
    E: From<DiffError>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(DiffError::Invalid {
            op: "grad_check",
            msg: format!("step must be positive, got {h}"),
        }
        .into());
    }
    let mut tape = Tape::new();
    let xv = tape.var(x.to_vec(), shape.rows, shape.cols)?;
    let out = f(&mut tape, xv)?;
    let y = tape.scalar_value(out);
    if !y.is_finite() {
        return Err(DiffError::NonFinite {
            what: "grad_check forward value".into(),
            value: y,
        }
        .into());
    }
    let analytic = tape.backward(out)?.get_or_zeros(xv, x.len());

    let mut eval = |values: Vec<f64>| -> Result<f64, E> {
        let mut tape = Tape::new();
        let xv = tape.var(values, shape.rows, shape.cols)?;
        let out = f(&mut tape, xv)?;
        let y = tape.scalar_value(out);
        if !y.is_finite() {
            return Err(DiffError::NonFinite {
                what: "grad_check forward value".into(),
                value: y,
            }
            .into());
        }
        Ok(y)
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.to_vec();
        plus[i] += h;
        let mut minus = x.to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
