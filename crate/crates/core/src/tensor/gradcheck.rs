use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Max over all entries of `|a − g| / max(1, |a|, |g|)`.
    pub max_rel_error: f64,
    /// Which parameter and flat entry attained the maximum.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

/// Compares tape adjoints of `f` against central finite differences
/// `(f(θ+εe) − f(θ−εe)) / 2ε` for every entry of every parameter.
///
/// `f` receives one trainable [`Var`] per parameter, in order, and must
/// return a `1 × 1` node. Parameters are restored before returning.
pub fn grad_check<F>(params: &mut [Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |params: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(params)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params.iter())
        .map(|(v, p)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()))
        })
        .collect();
    drop(tape);
    compare_with_finite_differences(params, &analytic, eps, |tape, vars| f(tape, vars))
}

/// Finite-difference half of [`grad_check`]: compares a supplied set of
/// gradients (one per parameter) against central differences of `f`.
pub fn compare_with_finite_differences<F>(
    params: &mut [Tensor],
    analytic: &[Tensor],
    eps: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert_eq!(params.len(), analytic.len());
    let eval = |params: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        entries_checked: 0,
    };
    for pi in 0..params.len() {
        for ei in 0..params[pi].data().len() {
            let orig = params[pi].data()[ei];
            params[pi].data_mut()[ei] = orig + eps;
            let (t, _, o) = eval(params)?;
            let plus = t.value(o).item();
            params[pi].data_mut()[ei] = orig - eps;
            let (t, _, o) = eval(params)?;
            let minus = t.value(o).item();
            params[pi].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[ei];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = (pi, ei);
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}
