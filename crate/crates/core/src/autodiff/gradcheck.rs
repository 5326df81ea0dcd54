//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which coordinates of each input to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// At most `per_input` seeded coordinates of every input tensor.
    Sample { per_input: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat coordinate)` where the maximum was attained.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error used throughout: `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of a scalar function with central differences.
///
/// `f` receives a fresh tape and one variable per input tensor and must
/// return a one-element output.
pub fn gradient_check<S, F>(f: F, point: &[Tensor<S>], step: f64, coords: Coords) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |inputs: &[Tensor<S>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        t.value(o).item().map(Scalar::as_f64).ok_or_else(|| Error::NonScalarOutput(t.value(o).shape().to_vec()))
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut work: Vec<Tensor<S>> = point.to_vec();
    for (input, var) in vars.iter().enumerate() {
        let n = point[input].numel();
        let indices: Vec<usize> = match coords {
            Coords::All => (0..n).collect(),
            Coords::Sample { per_input, seed } => {
                if n <= per_input {
                    (0..n).collect()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (input as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    let mut v = sample(&mut rng, n, per_input).into_vec();
                    v.sort_unstable();
                    v
                }
            }
        };
        for j in indices {
            let analytic = grads.get(*var).map_or(0.0, |g| g.data()[j].as_f64());
            let orig = work[input].data()[j];
            work[input].data_mut()[j] = S::of(orig.as_f64() + step);
            let plus = eval(&work)?;
            work[input].data_mut()[j] = S::of(orig.as_f64() - step);
            let minus = eval(&work)?;
            work[input].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((input, j));
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
