use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Denominator floor for the relative error. Central differences at
/// `DEFAULT_EPSILON` carry roughly `1e-16 * |loss| / epsilon` of roundoff, so
/// derivatives below this magnitude are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Minimum number of coordinates probed per parameter tensor.
const SAMPLES_PER_TENSOR: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// (parameter index, flat coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: (f64, f64),
    pub coordinates_checked: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.scalar(loss))
}

/// Compare reverse-mode gradients of `f` against central differences
/// `(f(x+eps) - f(x-eps)) / 2eps` on up to 50 random coordinates per
/// parameter (all of them for smaller tensors).
///
/// `f` receives the parameters registered on a fresh tape, in order, and
/// returns a scalar loss. Relative error is `|a-n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn grad_check<F>(f: F, params: &[Tensor], epsilon: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::config(format!("epsilon must be positive, got {epsilon}")));
    }
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars)?;
        if !tape.scalar(loss).is_finite() {
            return Err(Error::NonFinite("loss at the unperturbed point".into()));
        }
        tape.backward(loss)?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        coordinates_checked: 0,
    };
    for (pi, param) in params.iter().enumerate() {
        let n = param.len();
        let coords: Vec<usize> = if n <= SAMPLES_PER_TENSOR {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, SAMPLES_PER_TENSOR).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let orig = param.data()[c];
            work[pi].data_mut()[c] = orig + epsilon;
            let plus = evaluate(&f, &work)?;
            work[pi].data_mut()[c] = orig - epsilon;
            let minus = evaluate(&f, &work)?;
            work[pi].data_mut()[c] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("loss when perturbing parameter {pi} coordinate {c}")));
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[pi].data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = (pi, c);
                report.worst_values = (a, numeric);
            }
            report.coordinates_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passes_on_a_correct_composition() {
        let params = vec![Tensor::matrix(2, 3, vec![0.3, -0.2, 0.5, 0.1, 0.9, -0.7]).unwrap(), Tensor::row(vec![0.2, -0.4])];
        let report = grad_check(
            |tape, v| {
                let t = tape.transpose(v[0])?;
                let m = tape.matmul(v[1], v[0])?;
                let m = tape.tanh(m);
                let s = tape.softmax(t, 1)?;
                let a = tape.sum(m);
                let b = tape.sum(s);
                let b = tape.scale(b, 0.5);
                tape.add(a, b)
            },
            &params,
            DEFAULT_EPSILON,
            0,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
        assert_eq!(report.coordinates_checked, 8);
    }

    #[test]
    fn flags_a_detached_factor() {
        // x * stop_grad(x): the tape sees derivative x, the true one is 2x.
        let params = vec![Tensor::row(vec![0.7, -1.3])];
        let report = grad_check(
            |tape, v| {
                let frozen = tape.input(tape.value(v[0]).clone());
                let y = tape.mul(v[0], frozen)?;
                Ok(tape.sum(y))
            },
            &params,
            DEFAULT_EPSILON,
            0,
        )
        .unwrap();
        assert!((report.max_relative_error - 0.5).abs() < 1e-6, "{report:?}");
    }
}
