//! Closed-form ridge regression on standardized data.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::sym_pinv_solve;
use crate::points::Points;
use crate::preprocess::{standardize, Standardization};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    /// `d_Y × d_X`, row-major, acting on standardized predictors.
    pub m: Vec<f64>,
    pub b: Vec<f64>,
    pub lambda: f64,
    pub standardization: Standardization,
}

/// Minimizes `‖Y - X Mᵀ - 1 bᵀ‖² + λ ‖M‖²` on standardized data; `b` is not penalized.
pub fn fit_ridge(train_x: &Points, train_y: &Points, lambda: f64) -> Result<RidgeModel> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::invalid(format!("ridge lambda must be >= 0, got {lambda}")));
    }
    let (ds, _) = standardize(train_x, train_y, None, 0, 0)?;
    let (n, dx, dy) = (ds.x.len(), ds.x.dim(), ds.y.dim());
    let x = DMatrix::from_row_slice(n, dx, ds.x.as_slice());
    let y = DMatrix::from_row_slice(n, dy, ds.y.as_slice());
    let xm = x.row_mean();
    let ym = y.row_mean();
    let mut xc = x.clone();
    let mut yc = y.clone();
    for i in 0..n {
        xc.row_mut(i).zip_apply(&xm, |v, m| *v -= m);
        yc.row_mut(i).zip_apply(&ym, |v, m| *v -= m);
    }
    let mut gram = xc.transpose() * &xc;
    for j in 0..dx {
        gram[(j, j)] += lambda;
    }
    let rhs = xc.transpose() * &yc;
    let mt = sym_pinv_solve(gram, &rhs);
    // b = ȳ - M x̄
    let b_row = &ym - &xm * &mt;
    let m_mat = mt.transpose();
    let mut m = Vec::with_capacity(dy * dx);
    for i in 0..dy {
        for j in 0..dx {
            m.push(m_mat[(i, j)]);
        }
    }
    Ok(RidgeModel {
        m,
        b: b_row.iter().copied().collect(),
        lambda,
        standardization: ds.standardization,
    })
}

/// Predictions in original response units.
pub fn predict_ridge(model: &RidgeModel, test_x: &Points) -> Result<Points> {
    let xs = model.standardization.standardize_x(test_x)?;
    let (dx, dy) = (xs.dim(), model.b.len());
    let mut z = Points::zeros(xs.len(), dy);
    for (k, x) in xs.rows().enumerate() {
        let out = z.row_mut(k);
        for i in 0..dy {
            let mut s = model.b[i];
            for j in 0..dx {
                s += model.m[i * dx + j] * x[j];
            }
            out[i] = s;
        }
    }
    model.standardization.unstandardize_y(&z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, d: usize, seed: u64) -> Points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Points::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn linear(x: &Points) -> Points {
        Points::from_vec(x.len(), 2, x.rows().flat_map(|r| [r[0] - 2.0 * r[1] + 1.0, 0.5 * r[2] - 3.0]).collect()).unwrap()
    }

    #[test]
    fn two_point_slope() {
        let x = Points::from_rows(&[[-1.0], [1.0]]).unwrap();
        let y = Points::from_rows(&[[-1.0], [1.0]]).unwrap();
        let m = fit_ridge(&x, &y, 1.0).unwrap();
        assert!((m.m[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!(m.b[0].abs() < 1e-15);
        let p = predict_ridge(&m, &Points::from_rows(&[[1.0]]).unwrap()).unwrap();
        assert!((p.row(0)[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn unregularized_recovers_linear_map() {
        let x = random(40, 3, 1);
        let y = linear(&x);
        let m = fit_ridge(&x, &y, 0.0).unwrap();
        let t = random(5, 3, 2);
        let p = predict_ridge(&m, &t).unwrap();
        let truth = linear(&t);
        for (a, b) in p.as_slice().iter().zip(truth.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(p.len(), 5);
        assert_eq!(p.dim(), 2);
    }

    #[test]
    fn heavy_shrinkage_predicts_the_mean() {
        let x = random(30, 3, 3);
        let y = linear(&x);
        let m = fit_ridge(&x, &y, 1e14).unwrap();
        let p = predict_ridge(&m, &random(3, 3, 4)).unwrap();
        for r in p.rows() {
            for j in 0..2 {
                assert!((r[j] - m.standardization.mu_y[j]).abs() < 1e-8);
            }
        }
        let zero = RidgeModel { m: vec![0.0; 6], b: vec![0.0; 2], ..m.clone() };
        let p = predict_ridge(&zero, &random(2, 3, 5)).unwrap();
        assert_eq!(p.row(1), &m.standardization.mu_y[..]);
    }

    #[test]
    fn solution_zeroes_the_gradient() {
        let x = random(25, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = Points::from_vec(25, 1, (0..25).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let lambda = 0.7;
        let m = fit_ridge(&x, &y, lambda).unwrap();
        let xs = m.standardization.standardize_x(&x).unwrap();
        let ys = m.standardization.standardize_y(&y).unwrap();
        let mut gm = vec![0.0; 4];
        let mut gb = 0.0;
        for (xr, yr) in xs.rows().zip(ys.rows()) {
            let r = yr[0] - m.b[0] - (0..4).map(|j| m.m[j] * xr[j]).sum::<f64>();
            for j in 0..4 {
                gm[j] += -2.0 * r * xr[j];
            }
            gb += -2.0 * r;
        }
        for j in 0..4 {
            gm[j] += 2.0 * lambda * m.m[j];
            assert!(gm[j].abs() < 1e-8);
        }
        assert!(gb.abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_input() {
        let x = random(5, 3, 8);
        assert!(fit_ridge(&x, &linear(&x), -1.0).is_err());
        let m = fit_ridge(&x, &linear(&x), 1.0).unwrap();
        assert!(predict_ridge(&m, &random(2, 2, 9)).is_err());
    }
}
