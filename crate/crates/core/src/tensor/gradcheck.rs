use super::{Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over checked components.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn eval<F>(f: &F, x: &Tensor, differentiable: bool) -> Result<(Tape, Var, Var), TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let xv = if differentiable {
        tape.param(x.clone())?
    } else {
        tape.constant(x.clone())?
    };
    let y = f(&mut tape, xv)?;
    if tape.value(y).numel() != 1 {
        return Err(super::shape_err(
            "grad_check",
            format!("function must be scalar, got {:?}", tape.shape(y)),
        ));
    }
    Ok((tape, xv, y))
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// of step `h` over every component of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_sampled(f, x, h, &all)
}

/// Like [`grad_check`], restricted to the listed component indices.
pub fn grad_check_sampled<F>(
    f: F,
    x: &Tensor,
    h: f64,
    indices: &[usize],
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    if !(h > 0.0) {
        return Err(super::invalid("grad_check", "step must be positive"));
    }
    let (tape, xv, y) = eval(&f, x, true)?;
    let analytic = tape.backward(y)?.wrt(xv);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    let mut probe = x.clone();
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let (t, _, y) = eval(&f, &probe, false)?;
        let plus = t.value(y).item();
        probe.data_mut()[i] = orig - h;
        let (t, _, y) = eval(&f, &probe, false)?;
        let minus = t.value(y).item();
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        if !numeric.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        let rel = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_zero_error() {
        let x = Tensor::new(vec![4], vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let r = grad_check(|t, x| t.sum(x), &x, 1e-5).unwrap();
        assert_eq!(r.checked, 4);
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn rejects_non_scalar_and_bad_step() {
        let x = Tensor::zeros(&[2]);
        assert!(grad_check(|_, x| Ok(x), &x, 1e-5).is_err());
        assert!(grad_check(|t, x| t.sum(x), &x, 0.0).is_err());
    }
}
