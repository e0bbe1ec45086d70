//! Finite-difference gradient oracle.
//!
//! Central differences per coordinate, independent of the tape: the checked
//! function is re-evaluated from scratch at perturbed inputs, so agreement
//! with `Tape::backward` validates the whole reverse path.

use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Default step for 64-bit central differences.
pub const DEFAULT_EPS: Real = 1e-6;

/// Central-difference gradient of a scalar function at `x`:
/// (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) per coordinate.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&Tensor) -> Result<Real>,
    x: &Tensor,
    eps: Real,
) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::Numeric("finite difference step must be positive".into()));
    }
    let mut grad = vec![0.0 as Real; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "function not finite near coordinate {i}: f+={fp}, f-={fm}"
            )));
        }
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Tensor::new(x.shape(), grad)
}

/// max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> Real {
    debug_assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, Real::max)
}

/// Compare the tape gradient of `f` against central differences, for the
/// input and each extra differentiable argument the closure exposes.
///
/// `f` maps a slice of tensors (input followed by parameters) to a scalar
/// via whatever graph it likes; the harness owns perturbation bookkeeping.
pub fn check_function(
    f: &mut dyn FnMut(&[Tensor]) -> Result<(crate::Tape, crate::VarId, Vec<crate::VarId>)>,
    args: &[Tensor],
    eps: Real,
) -> Result<Real> {
    // Analytic gradients from one recorded pass.
    let (tape, out, ids) = f(args)?;
    if tape.value(out).rank() != 0 {
        return Err(Error::Shape("gradcheck target must be a rank-0 output".into()));
    }
    let grads = tape.backward_scalar(out)?;

    let mut worst: Real = 0.0;
    for (k, &id) in ids.iter().enumerate() {
        let analytic = grads
            .get(id)
            .ok_or_else(|| Error::Numeric(format!("no gradient recorded for argument {k}")))?
            .clone();
        let mut eval = |probe: &Tensor| -> Result<Real> {
            let mut alt: Vec<Tensor> = args.to_vec();
            alt[k] = probe.clone();
            let (tape, out, _) = f(&alt)?;
            Ok(tape.value(out).item())
        };
        let numeric = finite_diff_grad(&mut eval, &args[k], eps)?;
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn square_function_matches_hand_derivative() {
        // f(x) = x^2 at 3 -> 6 within 1e-8
        let mut f = |x: &Tensor| -> Result<Real> { Ok(x.item() * x.item()) };
        let g = finite_diff_grad(&mut f, &Tensor::scalar(3.0), DEFAULT_EPS).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn sum_function_gives_ones() {
        let mut f = |x: &Tensor| -> Result<Real> { Ok(x.data().iter().sum()) };
        let x = Tensor::new(&[3], vec![0.3, -1.2, 4.0]).unwrap();
        let g = finite_diff_grad(&mut f, &x, DEFAULT_EPS).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_eps() {
        let mut f = |x: &Tensor| -> Result<Real> { Ok(x.item()) };
        assert!(finite_diff_grad(&mut f, &Tensor::scalar(0.0), 0.0).is_err());
    }

    #[test]
    fn layer_norm_backward_matches_oracle() {
        // f(x) = sum(layer_norm(x)) with gamma = 1: relative error < 1e-6.
        let x = Tensor::new(&[3, 2], vec![0.4, -0.8, 1.3, 0.2, -1.1, 0.9]).unwrap();
        let mut build = |args: &[Tensor]| -> Result<(Tape, crate::VarId, Vec<crate::VarId>)> {
            let mut tape = Tape::new();
            let xi = tape.param(args[0].clone());
            let gamma = tape.constant(Tensor::ones(&[3]));
            let beta = tape.constant(Tensor::zeros(&[3]));
            let y = tape.layer_norm(xi, gamma, beta, 1e-5)?;
            let s = tape.sum(y);
            Ok((tape, s, vec![xi]))
        };
        let err = check_function(&mut build, &[x], DEFAULT_EPS).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        // Negative control: an off-by-2 "analytic" gradient must be flagged.
        let analytic = Tensor::new(&[2], vec![2.0, 4.0]).unwrap();
        let numeric = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        assert!(max_relative_error(&analytic, &numeric) > 0.4);
    }
}
