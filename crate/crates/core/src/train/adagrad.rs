use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-coordinate sums of squared gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdagradState {
    pub accumulators: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdagradState {
    /// Zero accumulators shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        AdagradState {
            accumulators: params.into_iter().map(|t| vec![0.0; t.numel()]).collect(),
            step: 0,
        }
    }
}

/// One update of every parameter: `acc += g²; p −= lr·g / (√acc + eps)`.
///
/// All gradients are checked before anything is written, so a non-finite
/// gradient leaves both parameters and state untouched.
pub fn adagrad_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    state: &mut AdagradState,
    lr: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.accumulators.len() {
        return Err(Error::invalid(
            "adagrad_step",
            format!(
                "{} parameters, {} gradients, {} accumulators",
                params.len(),
                grads.len(),
                state.accumulators.len()
            ),
        ));
    }
    for (k, ((p, g), acc)) in params.iter().zip(grads).zip(&state.accumulators).enumerate() {
        if p.numel() != g.len() || g.len() != acc.len() {
            return Err(Error::ShapeMismatch {
                op: "adagrad_step",
                expected: vec![p.numel()],
                found: vec![g.len()],
            });
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient of parameter {k} at coordinate {i}"),
            });
        }
    }
    for ((p, g), acc) in params.iter_mut().zip(grads).zip(&mut state.accumulators) {
        for ((w, &g), a) in p.data_mut().iter_mut().zip(g).zip(acc.iter_mut()) {
            *a += g * g;
            *w -= lr * g / (a.sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(())
}

/// Inverse-time decay: `base_lr / (1 + decay·epoch)`.
pub fn lr_at(epoch: usize, base_lr: f64, decay: f64) -> f64 {
    base_lr / (1.0 + decay * epoch as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn step(p: &mut Tensor, g: f64, state: &mut AdagradState) -> f64 {
        let before = p.data()[0];
        adagrad_step(&mut [p], &[vec![g]], state, 0.01, 1e-8).unwrap();
        p.data()[0] - before
    }

    #[test]
    fn first_step_from_fresh_state() {
        let mut p = Tensor::vector(vec![1.0]);
        let mut s = AdagradState::new([&p]);
        let d = step(&mut p, 3.0, &mut s);
        assert_eq!(s.accumulators[0][0], 9.0);
        assert!((d + 0.01 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Tensor::vector(vec![0.5]);
        let mut s = AdagradState::new([&p]);
        assert_eq!(step(&mut p, 0.0, &mut s), 0.0);
        assert_eq!(s.accumulators[0][0], 0.0);
    }

    #[test]
    fn repeated_unit_gradient_shrinks_by_root_two() {
        let mut p = Tensor::vector(vec![0.0]);
        let mut s = AdagradState::new([&p]);
        let d1 = step(&mut p, 1.0, &mut s);
        let d2 = step(&mut p, 1.0, &mut s);
        assert!((d1 + 0.01).abs() < 1e-9);
        assert!((d2 + 0.01 / 2f64.sqrt()).abs() < 1e-9, "{d2}");
    }

    #[test]
    fn non_finite_gradient_changes_nothing() {
        let mut a = Tensor::vector(vec![1.0, 2.0]);
        let mut b = Tensor::vector(vec![3.0]);
        let mut s = AdagradState::new([&a, &b]);
        let err = adagrad_step(&mut [&mut a, &mut b], &[vec![1.0, 1.0], vec![f64::NAN]], &mut s, 0.1, 1e-8)
            .unwrap_err();
        assert!(err.is_numerical());
        assert_eq!(a.data(), &[1.0, 2.0]);
        assert_eq!(s.step, 0);
        assert!(s.accumulators.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn learning_rate_schedule() {
        assert_eq!(lr_at(0, 0.01, 0.1), 0.01);
        assert!((lr_at(10, 0.01, 0.1) - 0.005).abs() < 1e-15);
        assert_eq!(lr_at(37, 0.01, 0.0), 0.01);
    }

    proptest! {
        #[test]
        fn accumulators_grow_and_steps_shrink(g in 0.01f64..10.0, n in 2usize..20) {
            let mut p = Tensor::vector(vec![0.0]);
            let mut s = AdagradState::new([&p]);
            let mut last_acc = 0.0;
            let mut last_step = f64::INFINITY;
            for k in 0..n {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                let d = step(&mut p, sign * g, &mut s).abs();
                prop_assert!(s.accumulators[0][0] >= last_acc);
                prop_assert!(d <= last_step + 1e-18);
                last_acc = s.accumulators[0][0];
                last_step = d;
            }
        }
    }
}
