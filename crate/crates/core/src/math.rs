use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `log(sum(exp(xs)))`, returning `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.into_iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Inverse of a symmetric positive-definite matrix, symmetrized.
pub fn spd_inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))?;
    let inv = chol.inverse();
    Ok(symmetrize(&inv))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Solves `a x = b` for symmetric positive-definite `a`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))?;
    Ok(chol.solve(b))
}

/// `a += s * b` for equally shaped matrices.
#[inline]
pub fn add_scaled(a: &mut DMatrix<f64>, s: f64, b: &DMatrix<f64>) {
    a.zip_apply(b, |x, y| *x += s * y);
}

/// Right-multiplies `lhs` by the inverse of the symmetric moment matrix
/// `moment`. A ridge of `1e-8 * trace / n` is added when the plain Cholesky
/// factorization fails; the returned flag reports whether it was needed.
pub fn solve_moment_right(
    lhs: &DMatrix<f64>,
    moment: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, bool)> {
    let n = moment.nrows();
    let sym = symmetrize(moment);
    let (chol, ridged) = match sym.clone().cholesky() {
        Some(c) => (c, false),
        None => {
            let ridge = 1e-8 * sym.trace().abs().max(f64::MIN_POSITIVE) / n as f64;
            let reg = &sym + DMatrix::identity(n, n) * ridge;
            let c = reg
                .cholesky()
                .ok_or_else(|| Error::Numerical("moment matrix singular after ridge".into()))?;
            (c, true)
        }
    };
    // X moment = lhs  <=>  moment X^T = lhs^T
    let xt = chol.solve(&lhs.transpose());
    Ok((xt.transpose(), ridged))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_direct() {
        let xs = [-1.0, 0.5, 2.0];
        let direct = xs.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(xs) - direct).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_survives_underflow() {
        let v = log_sum_exp([-1000.0, -1000.0]);
        assert!((v - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(std::iter::empty::<f64>()), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp([f64::NEG_INFINITY, -3.0]), -3.0);
    }

    #[test]
    fn ridge_kicks_in_for_singular_moment() {
        let moment = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let lhs = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let (_, ridged) = solve_moment_right(&lhs, &moment).unwrap();
        assert!(ridged);
    }
}
