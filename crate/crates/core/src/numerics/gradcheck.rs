use super::{Matrix, NumericsError, Tape, Var};
use crate::scalar::{cast, Scalar};

pub const DEFAULT_GRAD_CHECK_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport<T> {
    /// max |analytic - numeric| / max(1, |numeric|) over every entry.
    pub max_rel_error: T,
    /// (parameter index, flat entry index) of the worst entry.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

/// Compares tape gradients with central differences.
///
/// `loss` receives a fresh tape and one parameter [`Var`] per matrix in
/// `params`, and must return a `1×1` loss built from them.
pub fn grad_check<T, F>(
    loss: F,
    params: &[Matrix<T>],
    eps: T,
) -> Result<GradCheckReport<T>, NumericsError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var, NumericsError>,
{
    if !(cast::<T>(1e-7)..=cast::<T>(1e-3)).contains(&eps) {
        return Err(NumericsError::InvalidArgument(format!(
            "grad_check eps {eps} outside [1e-7, 1e-3]"
        )));
    }

    let eval = |values: &[Matrix<T>], index: usize| -> Result<T, NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.param(m.clone())).collect();
        match loss(&mut tape, &vars) {
            Ok(out) => {
                let v = tape.value(out).get(0, 0);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(NumericsError::NonFiniteLoss { param_index: index })
                }
            }
            Err(e) if e.is_numerical() => Err(NumericsError::NonFiniteLoss { param_index: index }),
            Err(e) => Err(e),
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|m| tape.param(m.clone())).collect();
    let out = loss(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<Matrix<T>> = params.to_vec();
    let two = cast::<T>(2.0);
    let mut report = GradCheckReport {
        max_rel_error: T::zero(),
        worst: (0, 0),
        entries_checked: 0,
    };
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.wrt(vars[pi], param.shape());
        for k in 0..param.len() {
            let orig = param.data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let plus = eval(&work, pi)?;
            work[pi].data_mut()[k] = orig - eps;
            let minus = eval(&work, pi)?;
            work[pi].data_mut()[k] = orig;

            let numeric = (plus - minus) / (two * eps);
            let err = (analytic.data()[k] - numeric).abs() / T::one().max(numeric.abs());
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, k);
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_has_all_ones_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Matrix::<f64>::uniform(3, 4, 1.0, &mut rng);
        let r = grad_check(|t, p| t.sum(p[0]), &[m], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-10);
        assert_eq!(r.entries_checked, 12);
    }

    #[test]
    fn softmax_then_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Matrix::<f64>::uniform(4, 5, 2.0, &mut rng);
        let v = Matrix::<f64>::uniform(5, 3, 1.0, &mut rng);
        let r = grad_check(
            |t, p| {
                let s = t.softmax_rows(p[0]);
                let y = t.matmul(s, p[1])?;
                t.sum(y)
            },
            &[m, v],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn eps_out_of_range_is_rejected() {
        let m = Matrix::<f64>::zeros(1, 1);
        assert!(grad_check(|t, p| t.sum(p[0]), &[m.clone()], 1e-2).is_err());
        assert!(grad_check(|t, p| t.sum(p[0]), &[m], 1e-9).is_err());
    }

    #[test]
    fn non_finite_loss_names_parameter() {
        let a = Matrix::<f64>::filled(1, 1, 1.0);
        let b = Matrix::<f64>::filled(1, 1, 1e300);
        let err = grad_check(
            |t, p| {
                let x = t.matmul(p[1], p[1])?;
                let y = t.matmul(p[0], x)?;
                t.sum(y)
            },
            &[a, b],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            NumericsError::NonFinite { .. } | NumericsError::NonFiniteLoss { .. }
        ));
    }
}
