//! Central finite-difference gradient verification.
//!
//! This is the independent oracle for every reverse-mode gradient in the
//! crate: it only ever calls the forward path, perturbing one coordinate at a
//! time, so it cannot share bugs with `Tape::backward`.

use crate::error::Result;
use crate::nd::Tensor;

/// Central-difference step. Loss scales here are O(1); 1e-5 balances
/// truncation against cancellation for f64.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Largest relative error between an analytic gradient and central finite
/// differences of `f` around `inputs[param_index]`.
///
/// `f` must be a pure function of the inputs returning a scalar loss.
pub fn max_relative_error<F>(
    f: F,
    inputs: &[Tensor],
    param_index: usize,
    analytic: &Tensor,
    step: f64,
) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs[param_index].numel() {
        let orig = inputs[param_index].data()[i];
        work[param_index].data_mut()[i] = orig + step;
        let plus = f(&work)?;
        work[param_index].data_mut()[i] = orig - step;
        let minus = f(&work)?;
        work[param_index].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let exact = analytic.data()[i];
        let denom = exact.abs().max(numeric.abs()).max(1.0);
        worst = worst.max((numeric - exact).abs() / denom);
    }
    Ok(worst)
}

/// Convenience wrapper asserting the 1e-4 relative-error contract.
pub fn assert_gradients_match<F>(
    f: F,
    inputs: &[Tensor],
    param_index: usize,
    analytic: &Tensor,
) -> Result<()>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let err = max_relative_error(&f, inputs, param_index, analytic, DEFAULT_STEP)?;
    if err >= 1e-4 {
        return Err(crate::error::Error::Usage(format!(
            "gradient check failed: max relative error {err:.3e} for input {param_index}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nd::Tape;

    #[test]
    fn test_fd_agrees_on_quadratic() {
        // loss = sum(x^2): gradient 2x
        let x = Tensor::vector(vec![0.5, -1.5, 2.0]);
        let f = |inputs: &[Tensor]| -> Result<f64> {
            Ok(inputs[0].data().iter().map(|v| v * v).sum())
        };
        let analytic = x.map(|v| 2.0 * v);
        assert_gradients_match(f, &[x], 0, &analytic).unwrap();
    }

    #[test]
    fn test_fd_catches_wrong_gradient() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let f = |inputs: &[Tensor]| -> Result<f64> {
            Ok(inputs[0].data().iter().map(|v| v * v).sum())
        };
        let wrong = x.map(|v| 3.0 * v);
        assert!(assert_gradients_match(f, &[x], 0, &wrong).is_err());
    }

    #[test]
    fn test_fd_agrees_with_tape_on_composition() {
        // loss = mean(relu(x W + b)^2), checked for all three inputs
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::matrix(4, 3, (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let w = Tensor::matrix(3, 2, (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let b = Tensor::vector((0..2).map(|_| rng.gen_range(-2.0..2.0)).collect());

        let run = |inputs: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
            let mut tape = Tape::new();
            let xi = tape.leaf(inputs[0].clone());
            let wi = tape.leaf(inputs[1].clone());
            let bi = tape.leaf(inputs[2].clone());
            let lin = tape.matmul(xi, wi)?;
            let biased = tape.add_bias(lin, bi)?;
            let act = tape.relu(biased)?;
            let sq = tape.mul(act, act)?;
            let loss = tape.mean(sq)?;
            let grads = tape.backward(loss)?;
            let gs = vec![
                grads.wrt(xi)?.clone(),
                grads.wrt(wi)?.clone(),
                grads.wrt(bi)?.clone(),
            ];
            Ok((tape.value(loss).scalar_value(), gs))
        };

        let inputs = vec![x, w, b];
        let (_, analytic) = run(&inputs).unwrap();
        for p in 0..3 {
            assert_gradients_match(|ins| run(ins).map(|r| r.0), &inputs, p, &analytic[p]).unwrap();
        }
    }
}
