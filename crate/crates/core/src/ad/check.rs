//! Central finite-difference gradient checking.

use super::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Coordinates whose perturbation moves a kink input or row norm lying
/// within this distance of its singularity are skipped.
pub const KINK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    /// (input index, flat coordinate) of the worst checked coordinate.
    pub worst: Option<(usize, usize)>,
    /// (analytic, numeric) at `worst`.
    pub worst_values: Option<(f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }

    /// Folds another report into this one.
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            if other.worst.is_some() {
                self.worst = other.worst;
                self.worst_values = other.worst_values;
            }
        }
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

/// Denominator floor of [`relative_error`]. Central differences at
/// `h = 1e-6` carry roundoff near `ε·|f|/h ≈ 1e-10`, so smaller gradients
/// are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// Relative error |a − n| / max(|a|, |n|, [`RELATIVE_ERROR_FLOOR`]).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[Tensor], grad: bool) -> Result<(Graph, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), grad)).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::shape("grad_check", format!("function returned shape {:?}", v.shape())));
    }
    if !v.item().is_finite() {
        return Err(Error::Numerical(format!("function value {} is not finite", v.item())));
    }
    Ok((g, out))
}

/// Compares reverse-mode gradients of scalar `f` at `inputs` against
/// central differences `(f(x+h) − f(x−h)) / 2h`, coordinate by coordinate.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let (mut g, out) = evaluate(&f, inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = (0..inputs.len())
        .map(|i| {
            g.grad(Var(i))
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; inputs[i].numel()])
        })
        .collect();
    let base = g.kink_margins();
    drop(g);

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ci in 0..t.numel() {
            let x0 = t.data()[ci];
            work[ti].data_mut()[ci] = x0 + h;
            let (gp, op) = evaluate(&f, &work, false)?;
            work[ti].data_mut()[ci] = x0 - h;
            let (gm, om) = evaluate(&f, &work, false)?;
            work[ti].data_mut()[ci] = x0;

            let (mp, mm) = (gp.kink_margins(), gm.kink_margins());
            let near_kink = mp.len() != base.len()
                || mm.len() != base.len()
                || base.iter().zip(mp.iter().zip(&mm)).any(|(b, (p, m))| {
                    (p != b || m != b) && b.abs() < KINK_TOLERANCE
                });
            if near_kink {
                report.skipped += 1;
                continue;
            }
            let numeric = (gp.value(op).item() - gm.value(om).item()) / (2.0 * h);
            let err = relative_error(analytic[ti][ci], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((ti, ci));
                report.worst_values = Some((analytic[ti][ci], numeric));
            }
        }
    }
    Ok(report)
}
