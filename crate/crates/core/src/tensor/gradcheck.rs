use super::{Matrix, Tape, Var};
use crate::error::Result;

/// Compare tape gradients of `f` against central differences.
///
/// `f` builds a scalar on a fresh tape from leaf handles of `params`. Returns
/// the largest `|fd - g| / (|g| + 1e-8)` over every coordinate of every
/// parameter.
pub fn finite_diff_check<F>(f: F, params: &[Matrix], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for (p, &var) in vars.iter().enumerate() {
        let g = grads.get(var);
        for idx in 0..params[p].len() {
            let orig = params[p].data()[idx];
            work[p].data_mut()[idx] = orig + step;
            let plus = eval(&work)?;
            work[p].data_mut()[idx] = orig - step;
            let minus = eval(&work)?;
            work[p].data_mut()[idx] = orig;

            let fd = (plus - minus) / (2.0 * step);
            let analytic = g.data()[idx];
            worst = worst.max((fd - analytic).abs() / (analytic.abs() + 1e-8));
        }
    }
    Ok(worst)
}
