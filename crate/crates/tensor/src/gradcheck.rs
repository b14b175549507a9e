//! Central finite-difference gradient checking.
//!
//! Only the forward pass of the checked function is used to build the numeric
//! estimate, so the check is independent of every backward rule.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Largest discrepancy found by [`check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index, analytic, numeric)` at the worst element.
    pub worst: (usize, usize, f64, f64),
    pub checked: usize,
    /// Elements excluded by [`check_piecewise`] because `f` has a kink within `±h`.
    pub kinks: usize,
}

/// Relative error with a magnitude floor, so that two near-zero values compare as equal.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares backprop gradients of the scalar `f(inputs)` against central differences
/// with step `h`, for every element of every input (or at most `max_per_input`
/// evenly spaced elements per input, when given).
pub fn check<F>(
    inputs: &[Tensor],
    f: F,
    h: f64,
    max_per_input: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    run(inputs, f, h, max_per_input, None)
}

/// Like [`check`], for piecewise-smooth functions (ReLU networks). An element whose
/// error exceeds `tol` is re-estimated with step `h / 10`; if the two central
/// differences disagree by more than `tol` the function is not smooth on
/// `[x - h, x + h]`, and the element is counted in `kinks` instead of scored.
/// The test uses forward evaluations only, so a wrong backward rule still shows
/// up as an error: both estimates then agree with each other but not with backprop.
pub fn check_piecewise<F>(
    inputs: &[Tensor],
    f: F,
    h: f64,
    max_per_input: Option<usize>,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    run(inputs, f, h, max_per_input, Some(tol))
}

fn run<F>(
    inputs: &[Tensor],
    f: F,
    h: f64,
    max_per_input: Option<usize>,
    kink_tol: Option<f64>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            g.grad(*v)
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0, 0.0, 0.0),
        checked: 0,
        kinks: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let step = max_per_input.map_or(1, |m| n.div_ceil(m.max(1)));
        for e in (0..n).step_by(step) {
            let mut central = |step: f64| -> Result<f64> {
                let orig = t.data()[e];
                work[i].data_mut()[e] = orig + step;
                let plus = eval(&work)?;
                work[i].data_mut()[e] = orig - step;
                let minus = eval(&work)?;
                work[i].data_mut()[e] = orig;
                Ok((plus - minus) / (2.0 * step))
            };
            let numeric = central(h)?;
            let err = rel_error(analytic[i][e], numeric);
            if let Some(tol) = kink_tol {
                if err > tol && rel_error(numeric, central(h / 10.0)?) > tol {
                    report.kinks += 1;
                    continue;
                }
            }
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, e, analytic[i][e], numeric);
            }
        }
    }
    Ok(report)
}
