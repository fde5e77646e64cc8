//! Gradient verification by central finite differences.
//!
//! For every coordinate of every input leaf the checker rebuilds the graph
//! twice (at ±ε) and compares the central difference against the analytic
//! gradient from `backward`. The reported figure is
//! max over coordinates of |analytic − numeric| / (|numeric| + 1e-8).

use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Location and values of the worst-agreeing coordinate.
#[derive(Clone, Copy, Debug)]
pub struct WorstCoord {
    pub leaf: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of a finite-difference sweep.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst: Option<WorstCoord>,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

fn eval_scalar<F: Real>(
    inputs: &[Tensor<F>],
    build: &impl Fn(&mut Tape<F>, &[Var]) -> Result<Var>,
) -> Result<F> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let root = build(&mut tape, &vars)?;
    if !tape.value(root).is_scalar() {
        return Err(Error::NonScalarRoot(tape.value(root).shape().to_vec()));
    }
    Ok(tape.value(root).item())
}

/// Sweep every coordinate of every input with step `F::fd_epsilon()`.
///
/// `build` must construct a scalar root from the given leaves and be a pure
/// function of their values; it runs 2·N+1 times for N total coordinates.
pub fn finite_difference_check<F: Real>(
    inputs: &[Tensor<F>],
    build: impl Fn(&mut Tape<F>, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    // analytic pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = build(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor<F>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
        })
        .collect();

    let eps = F::fd_epsilon().as_f64();
    let mut max_rel_error = 0.0f64;
    let mut worst = None;

    let mut probe: Vec<Tensor<F>> = inputs.to_vec();
    for li in 0..inputs.len() {
        for ci in 0..inputs[li].numel() {
            let orig = probe[li].data()[ci];
            probe[li].data_mut()[ci] = orig + F::real(eps);
            let f_plus = eval_scalar(&probe, &build)?.as_f64();
            probe[li].data_mut()[ci] = orig - F::real(eps);
            let f_minus = eval_scalar(&probe, &build)?.as_f64();
            probe[li].data_mut()[ci] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[li].data()[ci].as_f64();
            let rel = (a - numeric).abs() / (numeric.abs() + 1e-8);
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = Some(WorstCoord {
                    leaf: li,
                    coord: ci,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(GradCheck { max_rel_error, worst })
}
