//! Central finite-difference verification of tape gradients (64-bit).

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Builds a scalar from the given input nodes.
pub trait ScalarFn: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> {}
impl<T: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>> ScalarFn for T {}

fn evaluate(f: &impl ScalarFn, inputs: &[Tensor<f64>]) -> Result<(Tape<f64>, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).data();
    if value.len() != 1 {
        return Err(Error::Evaluation(format!(
            "gradient check needs a scalar output, got shape {:?}",
            tape.shape(out)
        )));
    }
    if !value[0].is_finite() {
        return Err(Error::Evaluation(format!(
            "function value is not finite: {}",
            value[0]
        )));
    }
    Ok((tape, vars, out))
}

/// Analytic gradients of `f` for every input, in input order.
pub fn analytic_grads(f: &impl ScalarFn, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>> {
    let (mut tape, vars, out) = evaluate(f, inputs)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            tape.grad(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect())
}

/// Central-difference gradients `(f(x+ε) − f(x−ε)) / 2ε` per coordinate.
pub fn numeric_grads(
    f: &impl ScalarFn,
    inputs: &[Tensor<f64>],
    epsilon: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grads = vec![0.0; inputs[i].len()];
        for (j, slot) in grads.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + epsilon;
            let plus = scalar_value(f, &work)?;
            work[i].data_mut()[j] = orig - epsilon;
            let minus = scalar_value(f, &work)?;
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * epsilon);
        }
        out.push(grads);
    }
    Ok(out)
}

fn scalar_value(f: &impl ScalarFn, inputs: &[Tensor<f64>]) -> Result<f64> {
    let (tape, _, out) = evaluate(f, inputs)?;
    Ok(tape.value(out).data()[0])
}

/// Relative error with denominator `max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Maximum relative error between analytic and central-difference
/// gradients over every coordinate of every input.
pub fn grad_check(f: impl ScalarFn, inputs: &[Tensor<f64>], epsilon: f64) -> Result<f64> {
    let analytic = analytic_grads(&f, inputs)?;
    let numeric = numeric_grads(&f, inputs, epsilon)?;
    Ok(analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max))
}

/// [`grad_check`] restricted to `coords`, given as `(input, index)` pairs.
/// Makes models with many parameters tractable.
pub fn grad_check_sampled(
    f: impl ScalarFn,
    inputs: &[Tensor<f64>],
    epsilon: f64,
    coords: &[(usize, usize)],
) -> Result<f64> {
    let analytic = analytic_grads(&f, inputs)?;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + epsilon;
        let plus = scalar_value(&f, &work)?;
        work[i].data_mut()[j] = orig - epsilon;
        let minus = scalar_value(&f, &work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[i][j], numeric));
    }
    Ok(worst)
}

/// `n` coordinates drawn uniformly over all inputs, reproducible by `seed`.
pub fn sample_coords(inputs: &[Tensor<f64>], n: usize, seed: u64) -> Vec<(usize, usize)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let total: usize = inputs.iter().map(|t| t.len()).sum();
    (0..n.min(total))
        .map(|_| {
            let mut k = rng.gen_range(0..total);
            let mut i = 0;
            while k >= inputs[i].len() {
                k -= inputs[i].len();
                i += 1;
            }
            (i, k)
        })
        .collect()
}

/// Maximum absolute gradient difference, for functions whose true gradient
/// is zero and relative error is meaningless.
pub fn grad_check_abs(f: impl ScalarFn, inputs: &[Tensor<f64>], epsilon: f64) -> Result<f64> {
    let analytic = analytic_grads(&f, inputs)?;
    let numeric = numeric_grads(&f, inputs, epsilon)?;
    Ok(analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max))
}
