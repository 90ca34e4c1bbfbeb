use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{max, Scalar};

/// Compares the tape gradient of `objective` at `point` with central differences.
///
/// Returns the largest entrywise relative error, using
/// `max(|analytic|, |numeric|, 1e-8)` as the denominator.
pub fn grad_check<'w, T, F>(objective: F, point: &Matrix<T>, step: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<'w, T>, Var) -> Result<Var>,
{
    let analytic = analytic_gradient(&objective, point)?;
    let numeric = central_differences(&objective, point, step)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// [`grad_check`] with the finite differences taken on `reference`, the same
/// objective recorded in a wider scalar `U`.
///
/// In `f64`, one ulp of noise in the objective becomes `ulp / 2h` of noise in the
/// difference quotient, which exceeds the `1e-8` floor times any useful tolerance
/// wherever the true derivative is near zero (saturated softmax rows, for
/// example). A quad-precision reference pushes that noise below `1e-25`.
pub fn grad_check_reference<'w, 'r, T, U, F, G>(objective: F, reference: G, point: &Matrix<T>, step: f64) -> Result<T>
where
    T: Scalar,
    U: Scalar,
    F: Fn(&mut Tape<'w, T>, Var) -> Result<Var>,
    G: Fn(&mut Tape<'r, U>, Var) -> Result<Var>,
{
    let analytic = analytic_gradient(&objective, point)?;
    let numeric: Matrix<T> = central_differences(&reference, &point.cast::<U>(), U::lit(step))?.cast();
    Ok(max_relative_error(&analytic, &numeric))
}

fn analytic_gradient<'w, T, F>(objective: &F, point: &Matrix<T>) -> Result<Matrix<T>>
where
    T: Scalar,
    F: Fn(&mut Tape<'w, T>, Var) -> Result<Var>,
{
    if !point.is_finite() {
        return Err(Error::NonFinite("grad_check point".into()));
    }
    let mut tape = Tape::new();
    let x = tape.free(point.clone());
    let out = objective(&mut tape, x)?;
    check_finite(tape.scalar(out))?;
    Ok(tape
        .backward(out)?
        .take(x)
        .unwrap_or_else(|| Matrix::zeros(point.rows(), point.cols())))
}

fn central_differences<'w, T, F>(objective: &F, point: &Matrix<T>, step: T) -> Result<Matrix<T>>
where
    T: Scalar,
    F: Fn(&mut Tape<'w, T>, Var) -> Result<Var>,
{
    if !(step > T::zero()) {
        return Err(Error::InvalidArgument(format!("grad_check step must be positive, got {step}")));
    }
    let eval = |p: Matrix<T>| -> Result<T> {
        let mut tape = Tape::new();
        let x = tape.free(p);
        let out = objective(&mut tape, x)?;
        check_finite(tape.scalar(out))
    };
    let two = T::lit(2.0);
    let mut numeric = Matrix::zeros(point.rows(), point.cols());
    for i in 0..point.data().len() {
        let mut plus = point.clone();
        plus.data_mut()[i] = plus.data()[i] + step;
        let mut minus = point.clone();
        minus.data_mut()[i] = minus.data()[i] - step;
        numeric.data_mut()[i] = (eval(plus)? - eval(minus)?) / (two * step);
    }
    Ok(numeric)
}

fn max_relative_error<T: Scalar>(analytic: &Matrix<T>, numeric: &Matrix<T>) -> T {
    let floor = T::lit(1e-8);
    analytic.data().iter().zip(numeric.data()).fold(T::zero(), |worst, (&a, &n)| {
        let denom = max(max(a.abs(), n.abs()), floor);
        max(worst, (a - n).abs() / denom)
    })
}

fn check_finite<T: Scalar>(v: T) -> Result<T> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("objective value {v} during gradient check")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_objective_is_exact() {
        let p = Matrix::from_vec(2, 3, vec![0.3, -1.0, 2.0, 4.0, 0.5, -0.25]).unwrap();
        let err = grad_check(|t: &mut Tape<f64>, x| Ok(t.sum(x)), &p, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let p = Matrix::<f64>::filled(2, 2, 0.7);
        let err = grad_check(
            |t: &mut Tape<f64>, _x| Ok(t.constant_owned(Matrix::scalar(3.0))),
            &p,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let p = Matrix::<f64>::filled(1, 2, 1.0);
        let res = grad_check(
            |t: &mut Tape<f64>, x| {
                let s = t.sum(x);
                Ok(t.affine(s, f64::INFINITY, 0.0))
            },
            &p,
            1e-5,
        );
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }
}
