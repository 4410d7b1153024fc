//! Central finite-difference gradient checking.

use super::matrix::Matrix;
use super::network::{NetworkParams, ParamGrads};
use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Denominator floor of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Flat index of the worst scalar.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against central differences of `loss` around `x0`.
pub fn check_vector<F>(
    x0: &[f64],
    analytic: &[f64],
    loss: F,
    eps: f64,
    exec: Exec,
) -> Result<FdReport>
where
    F: Fn(&[f64]) -> Result<f64> + Sync + Send,
{
    if !(eps > 0.0 && eps < 1e-2) {
        return Err(Error::InvalidConfig(format!("finite-difference eps {eps} not in (0, 1e-2)")));
    }
    if x0.len() != analytic.len() {
        return Err(Error::shape("check_vector", x0.len(), analytic.len()));
    }
    let numeric = par::map_range(exec, x0.len(), |i| -> Result<f64> {
        let mut x = x0.to_vec();
        x[i] = x0[i] + eps;
        let plus = loss(&x)?;
        x[i] = x0[i] - eps;
        let minus = loss(&x)?;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFinite("finite-difference loss"));
        }
        Ok((plus - minus) / (2.0 * eps))
    });
    let mut report = FdReport { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    for (i, n) in numeric.into_iter().enumerate() {
        let n = n?;
        let e = relative_error(analytic[i], n);
        if e > report.max_rel_error || i == 0 {
            report = FdReport { max_rel_error: e, worst_index: i, analytic: analytic[i], numeric: n };
        }
    }
    Ok(report)
}

/// Checks gradients of a loss over a matrix argument.
pub fn check_matrix<F>(x0: &Matrix, analytic: &Matrix, loss: F, eps: f64) -> Result<FdReport>
where
    F: Fn(&Matrix) -> Result<f64> + Sync + Send,
{
    if x0.shape() != analytic.shape() {
        return Err(Error::shape(
            "check_matrix",
            format!("{:?}", x0.shape()),
            format!("{:?}", analytic.shape()),
        ));
    }
    let (r, c) = x0.shape();
    check_vector(
        x0.as_slice(),
        analytic.as_slice(),
        |v| loss(&Matrix::from_vec(r, c, v.to_vec())?),
        eps,
        Exec::Sequential,
    )
}

/// Checks analytic network gradients against central differences of
/// `loss` perturbing one trainable scalar at a time.
pub fn finite_diff_check<F>(
    params: &NetworkParams,
    analytic: &ParamGrads,
    loss: F,
    eps: f64,
    exec: Exec,
) -> Result<FdReport>
where
    F: Fn(&NetworkParams) -> Result<f64> + Sync + Send,
{
    let x0 = params.trainable_vec();
    let a = analytic.to_vec();
    check_vector(
        &x0,
        &a,
        |v| {
            let mut p = params.clone();
            p.set_trainable_vec(v)?;
            loss(&p)
        },
        eps,
        exec,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numnet::{forward, NetworkSpec, StatsMode};

    #[test]
    fn quadratic_weight_loss_is_exact() {
        let spec = NetworkSpec::bn_mlp(4, &[5], 3).unwrap();
        let p = NetworkParams::init(&spec, 0);
        // L = ‖θ‖²/2 over all trainable scalars, gradient θ
        let mut g = ParamGrads::zeros_like(&p);
        for ((_, gl), (_, pl)) in g.leaves_mut().into_iter().zip(p.leaves()) {
            gl.copy_from_slice(pl);
        }
        let r = finite_diff_check(
            &p,
            &g,
            |q| Ok(q.trainable_vec().iter().map(|v| v * v).sum::<f64>() / 2.0),
            1e-5,
            Exec::Sequential,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let spec = NetworkSpec::bn_mlp(3, &[4], 2).unwrap();
        let p = NetworkParams::init(&spec, 1);
        let g = ParamGrads::zeros_like(&p);
        let r = finite_diff_check(&p, &g, |_| Ok(4.2), 1e-5, Exec::Parallel).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn rejects_bad_eps_and_nonfinite_loss() {
        assert!(check_vector(&[1.0], &[0.0], |_| Ok(0.0), 0.0, Exec::Sequential).is_err());
        assert!(check_vector(&[1.0], &[0.0], |_| Ok(0.0), 0.1, Exec::Sequential).is_err());
        let err = check_vector(&[1.0], &[0.0], |_| Ok(f64::NAN), 1e-5, Exec::Sequential);
        assert_eq!(err.unwrap_err(), Error::NonFinite("finite-difference loss"));
    }

    #[test]
    fn detects_wrong_gradient() {
        let spec = NetworkSpec::bn_mlp(3, &[4], 2).unwrap();
        let p = NetworkParams::init(&spec, 2);
        let x = Matrix::from_fn(6, 3, |i, j| ((i * 3 + j) as f64).sin());
        let g = ParamGrads::zeros_like(&p);
        let r = finite_diff_check(
            &p,
            &g,
            |q| Ok(forward(&spec, q, &x, StatsMode::Batch)?.logits.as_slice().iter().map(|v| v * v).sum()),
            1e-5,
            Exec::Sequential,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.5);
    }
}
