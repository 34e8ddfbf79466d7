use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-approximated GELU.
pub fn gelu(x: &ArrayViewD<'_, f64>) -> ArrayD<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
}

pub fn gelu_backward(x: &ArrayViewD<'_, f64>, dy: &ArrayViewD<'_, f64>) -> ArrayD<f64> {
    let mut dx = dy.to_owned();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let u = GELU_C * (v + GELU_A * v * v * v);
        let t = u.tanh();
        let sech2 = 1.0 - t * t;
        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
        *d *= 0.5 * (1.0 + t) + 0.5 * v * sech2 * du;
    });
    dx
}

pub fn relu(x: &ArrayViewD<'_, f64>) -> ArrayD<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(x: &ArrayViewD<'_, f64>, dy: &ArrayViewD<'_, f64>) -> ArrayD<f64> {
    let mut dx = dy.to_owned();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// In-place numerically stable softmax over the last axis.
pub fn softmax_last_inplace(x: &mut ArrayViewMutD<'_, f64>) {
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Backward through softmax given its output `y`: dx = y * (dy - sum(dy*y)).
pub fn softmax_last_backward(y: &ArrayViewD<'_, f64>, dy: &ArrayViewD<'_, f64>) -> ArrayD<f64> {
    let mut dx = dy.to_owned();
    for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
        let dot: f64 = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
        for (d, &yv) in drow.iter_mut().zip(yrow.iter()) {
            *d = yv * (*d - dot);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_fn_grad, FD_TOL};
    use crate::nn::init::{seeded, uniform};

    #[test]
    fn gelu_known_values() {
        let x = ndarray::arr1(&[0.0, 1.0, -2.0, 0.5, 3.0]).into_dyn();
        let y = gelu(&x.view());
        let want = [0.0, 0.841191990608, -0.045402305912, 0.345714009825, 2.996362607918];
        for (a, b) in y.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn gelu_grad_matches_fd() {
        let mut rng = seeded(11);
        let x = uniform(&[3, 7], -2.0, 2.0, &mut rng);
        let w = uniform(&[3, 7], -1.0, 1.0, &mut rng);
        let analytic = gelu_backward(&x.view(), &w.view());
        let err = check_fn_grad(&x, &analytic, 21, &mut rng, &mut |xv| {
            (gelu(&xv.view()) * &w).sum()
        });
        assert!(err < FD_TOL, "rel err {err}");
    }

    #[test]
    fn relu_grad_matches_fd() {
        let mut rng = seeded(12);
        // keep inputs away from the kink
        let x = uniform(&[4, 6], -2.0, 2.0, &mut rng)
            .mapv(|v| if v.abs() < 0.2 { v + 0.5 } else { v });
        let w = uniform(&[4, 6], -1.0, 1.0, &mut rng);
        let analytic = relu_backward(&x.view(), &w.view());
        let err = check_fn_grad(&x, &analytic, 24, &mut rng, &mut |xv| {
            (relu(&xv.view()) * &w).sum()
        });
        assert!(err < FD_TOL, "rel err {err}");
    }

    #[test]
    fn softmax_known_row() {
        let mut x = ndarray::arr2(&[[1.0, 2.0, 3.0]]).into_dyn();
        softmax_last_inplace(&mut x.view_mut());
        let want = [0.090030573170, 0.244728471055, 0.665240955775];
        for (a, b) in x.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rows_normalize_and_shift_invariant() {
        let mut rng = seeded(13);
        let x = uniform(&[5, 4], -3.0, 3.0, &mut rng);
        let mut a = x.clone();
        softmax_last_inplace(&mut a.view_mut());
        for row in a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let mut b = x.mapv(|v| v + 100.0);
        softmax_last_inplace(&mut b.view_mut());
        for (p, q) in a.iter().zip(b.iter()) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_grad_matches_fd() {
        let mut rng = seeded(14);
        let x = uniform(&[3, 5], -2.0, 2.0, &mut rng);
        let w = uniform(&[3, 5], -1.0, 1.0, &mut rng);
        let mut y = x.clone();
        softmax_last_inplace(&mut y.view_mut());
        let analytic = softmax_last_backward(&y.view(), &w.view());
        let err = check_fn_grad(&x, &analytic, 15, &mut rng, &mut |xv| {
            let mut yv = xv.clone();
            softmax_last_inplace(&mut yv.view_mut());
            (yv * &w).sum()
        });
        assert!(err < FD_TOL, "rel err {err}");
    }
}
