use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function of several tensors
/// against central differences with step `h`.
///
/// Returns the largest `|analytic − numeric| / max(1, |analytic|)` over all
/// coordinates of all inputs.
pub fn gradient_check<F>(f: F, points: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("gradient_check", "step must be positive"));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let value = scalar_of(&tape, out)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: "gradient_check evaluation".into(),
            });
        }
        Ok(value)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec)
        })
        .collect();

    let mut worst = 0.0f64;
    let mut probe = points.to_vec();
    for (ti, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            if !a.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("analytic gradient of input {ti}[{k}]"),
                });
            }
            let orig = probe[ti].data()[k];
            probe[ti].data_mut()[k] = orig + h;
            let up = eval(&probe)?;
            probe[ti].data_mut()[k] = orig - h;
            let down = eval(&probe)?;
            probe[ti].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-input form of [`gradient_check`].
pub fn finite_difference_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradient_check(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), h)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    tape.value(v).item().ok_or_else(|| {
        Error::invalid(
            "gradient_check",
            format!("function must return a scalar, got {:?}", tape.value(v).shape()),
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let err = finite_difference_check(
            |t, x| {
                let y = t.mul(x, x)?;
                t.sum(y)
            },
            &Tensor::vector(vec![3.0]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn linear_function_is_exact() {
        let err = finite_difference_check(
            |t, x| {
                let y = t.scale(x, 2.5)?;
                t.sum(y)
            },
            &Tensor::vector(vec![0.3, -1.2, 4.0]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn tanh_sum_random_vector() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let err = finite_difference_check(
            |t, x| {
                let y = t.tanh(x)?;
                t.sum(y)
            },
            &Tensor::vector(x),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_is_reported() {
        let res = finite_difference_check(
            |t, x| {
                let y = t.scale(x, f64::INFINITY)?;
                t.sum(y)
            },
            &Tensor::vector(vec![1.0]),
            1e-5,
        );
        assert!(matches!(res, Err(Error::NonFinite { .. })));
    }
}
