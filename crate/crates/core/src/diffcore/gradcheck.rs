//! Central finite-difference checks for analytic gradients.

use super::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::error::{Error, Result};

/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Compares the reverse-mode gradient of `f` at `x` with central differences
/// of step `h` and returns the worst relative error over all coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, Var) -> Result<Var>,
{
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        finite(g.scalar(out), "function value")
    };

    let mut g = Graph::new();
    let v = g.variable(x.clone());
    let out = f(&mut g, v)?;
    finite(g.scalar(out), "function value")?;
    let grads = g.backward(out)?;
    let zeros = vec![0.0; x.len()];
    let analytic = grads.wrt(v).unwrap_or(&zeros);

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(rel_error(finite(analytic[i], "gradient")?, numeric));
    }
    Ok(worst)
}

/// Finite-difference check over parameters of a [`ParamSet`]. `stride`
/// subsamples coordinates within each tensor (1 checks every entry).
pub fn grad_check_params<F>(f: F, params: &ParamSet, h: f64, stride: usize) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, &'g ParamSet) -> Result<Var>,
{
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, p)?;
        finite(g.scalar(out), "function value")
    };
    let grads = {
        let mut g = Graph::new();
        let out = f(&mut g, params)?;
        finite(g.scalar(out), "function value")?;
        g.backward(out)?
    };
    let mut analytic = params.clone();
    analytic.zero_grads();
    analytic.accumulate(&grads, 1.0);

    let mut work = params.clone();
    let mut worst = 0.0f64;
    for p in 0..params.len() {
        let id = ParamId(p);
        for i in (0..params.get(id).len()).step_by(stride.max(1)) {
            let orig = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_error(finite(analytic.grad(id)[i], "gradient")?, numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_exact() {
        // f(x) = xᵀ A x with a fixed non-symmetric A.
        let a = Tensor::new(vec![3, 3], vec![2.0, -1.0, 0.5, 0.3, 1.5, -0.2, 0.0, 0.7, 1.1]).unwrap();
        let x = Tensor::new(vec![3, 1], vec![0.4, -1.2, 2.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let a = g.constant(a.clone());
                let ax = g.matmul(a, x)?;
                let p = g.mul(ax, x)?;
                Ok(g.sum(p))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let err = grad_check(|g, _| Ok(g.constant(Tensor::scalar(7.0))), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        let r = grad_check(|g, x| Ok(g.scale(x, f64::INFINITY)), &x, 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
