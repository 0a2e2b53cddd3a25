//! Finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Tape, TensorId};

/// Compare the tape gradient of `f` at `x` against central differences.
///
/// `f` builds a scalar loss from a single `rows x cols` leaf on a fresh tape.
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`. Run in `f64`: the default
/// `eps` regime assumes double-precision headroom.
pub fn grad_check<R, F>(f: F, rows: usize, cols: usize, x: &[R], eps: f64) -> Result<f64>
where
    R: Real,
    F: Fn(&mut Tape<R>, TensorId) -> Result<TensorId>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("grad_check: eps must be positive".into()));
    }
    if x.len() != rows * cols {
        return Err(Error::Shape(format!(
            "grad_check: {} values for shape {rows}x{cols}",
            x.len()
        )));
    }

    let mut tape = Tape::new();
    let leaf = tape.leaf(rows, cols, x.to_vec())?;
    let loss = f(&mut tape, leaf)?;
    if tape.shape(loss) != (1, 1) {
        return Err(Error::Contract(
            "grad_check: f must be scalar-valued".into(),
        ));
    }
    tape.backward(loss)?;
    let analytic = tape.grad(leaf).to_vec();

    let eval = |xs: &[R]| -> Result<f64> {
        let mut t = Tape::new();
        let leaf = t.leaf(rows, cols, xs.to_vec())?;
        let loss = f(&mut t, leaf)?;
        Ok(t.value(loss)[0].to_f64())
    };

    let step = R::from_f64(eps);
    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = eval(&probe)?;
        probe[i] = orig - step;
        let minus = eval(&probe)?;
        probe[i] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i].to_f64();
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x: Vec<f64> = vec![0.7, -1.3, 2.4];
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            1,
            3,
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x: Vec<f64> = vec![1.0, 2.0];
        let err = grad_check(|t, _x| Ok(t.scalar(3.0)), 1, 2, &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let x: Vec<f64> = vec![1.0];
        assert!(grad_check(|t, x| Ok(t.sum(x)), 1, 1, &x, 0.0).is_err());
    }

    #[test]
    fn rejects_non_scalar_function() {
        let x: Vec<f64> = vec![1.0, 2.0];
        let res = grad_check(|_t, x| Ok(x), 1, 2, &x, 1e-5);
        assert!(res.is_err());
    }
}
