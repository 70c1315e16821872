//! Robust (sandwich) covariance from the Hessian and per-individual scores.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Reciprocal condition number below which the Hessian is treated as singular.
pub const SINGULAR_RCOND: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Sandwich {
    pub covariance: DMatrix<f64>,
    /// Ratio of smallest to largest singular value of the Hessian.
    pub rcond: f64,
    /// True when a pseudo-inverse replaced the inverse.
    pub pseudo_inverse: bool,
}

/// H⁻¹ B H⁻¹ with B = Σ_i g_i g_iᵀ over the rows of `scores`, symmetrised.
pub fn robust_covariance(hessian: &DMatrix<f64>, scores: &DMatrix<f64>) -> Result<Sandwich> {
    let n = hessian.nrows();
    if hessian.ncols() != n {
        return Err(Error::Dimension {
            what: "Hessian columns",
            expected: n,
            found: hessian.ncols(),
        });
    }
    if scores.ncols() != n {
        return Err(Error::Dimension {
            what: "score columns",
            expected: n,
            found: scores.ncols(),
        });
    }
    let meat = scores.transpose() * scores;
    let svd = hessian.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let rcond = if smax > 0.0 { smin / smax } else { 0.0 };
    let pseudo_inverse = !(rcond > SINGULAR_RCOND);
    let bread = if pseudo_inverse {
        log::warn!("Hessian is singular or ill-conditioned (rcond {rcond:.3e}); using a pseudo-inverse");
        svd.pseudo_inverse(SINGULAR_RCOND * smax.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::invalid(e.to_string()))?
    } else {
        hessian
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::invalid("Hessian inversion failed"))?
    };
    let c = &bread * meat * &bread;
    let covariance = (&c + c.transpose()) * 0.5;
    Ok(Sandwich {
        covariance,
        rcond,
        pseudo_inverse,
    })
}

/// Hessian by central differences of a gradient, step `rel_step * max(|x_j|, 1)`, symmetrised.
pub fn hessian_from_gradient(gradient: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], rel_step: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let mut y = x.to_vec();
    for j in 0..n {
        let step = rel_step * x[j].abs().max(1.0);
        y[j] = x[j] + step;
        let up = gradient(&y);
        y[j] = x[j] - step;
        let down = gradient(&y);
        y[j] = x[j];
        for i in 0..n {
            h[(i, j)] = (up[i] - down[i]) / (2.0 * step);
        }
    }
    (&h + h.transpose()) * 0.5
}

/// Estimate over the square root of the covariance diagonal.
pub fn t_ratios(estimates: &[f64], covariance: &DMatrix<f64>) -> Vec<f64> {
    estimates
        .iter()
        .enumerate()
        .map(|(i, e)| e / covariance[(i, i)].sqrt())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn information_equality_gives_inverse_information() {
        let info = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        // scores whose outer-product sum equals `info`
        let chol = info.clone().cholesky().unwrap().l().transpose();
        let s = robust_covariance(&(-&info), &chol).unwrap();
        let expected = info.try_inverse().unwrap();
        assert!((s.covariance - expected).abs().max() < 1e-12);
        assert!(!s.pseudo_inverse);
    }

    #[test]
    fn hand_case() {
        let h = -DMatrix::<f64>::identity(2, 2);
        let scores = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        let s = robust_covariance(&h, &scores).unwrap();
        assert_eq!(s.covariance, DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]));
        let t = t_ratios(&[1.0, 1.0], &s.covariance);
        assert_eq!(t, vec![0.5, 1.0 / 3.0]);
    }

    #[test]
    fn row_order_is_irrelevant_and_output_symmetric() {
        let h = DMatrix::from_row_slice(3, 3, &[-5.0, 1.0, 0.5, 1.0, -4.0, 0.2, 0.5, 0.2, -3.0]);
        let scores = DMatrix::from_fn(6, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let a = robust_covariance(&h, &scores).unwrap().covariance;
        let rows: Vec<_> = (0..6).rev().map(|i| scores.row(i).into_owned()).collect();
        let b = robust_covariance(&h, &DMatrix::from_rows(&rows)).unwrap().covariance;
        assert!((&a - &b).abs().max() < 1e-12);
        assert_eq!(a, a.transpose());
    }

    #[test]
    fn singular_hessian_uses_pseudo_inverse() {
        let h = DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, -1.0, -1.0]);
        let scores = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]);
        let s = robust_covariance(&h, &scores).unwrap();
        assert!(s.pseudo_inverse);
        assert!(s.covariance.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn hessian_of_quadratic() {
        let grad = |x: &[f64]| vec![-2.0 * x[0] + x[1], x[0] - 6.0 * x[1]];
        let h = hessian_from_gradient(grad, &[0.3, -1.0], 1e-5);
        let expected = DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, 1.0, -6.0]);
        assert!((h - expected).abs().max() < 1e-8);
    }
}
