use ndarray::{Array2, ArrayView2, Axis};

use super::init::{trunc_normal, Prng};
use super::param::{join, Param, Parameterized};

/// Dense layer `y = x W + b` acting on the last axis. Weight layout is
/// `[in, out]` so a `[rows, in]` input right-multiplies directly.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, bias: bool, rng: &mut Prng) -> Self {
        Linear {
            weight: Param::new(trunc_normal(&[in_dim, out_dim], 0.02, rng)),
            bias: bias.then(|| Param::zeros(&[out_dim])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.as2());
        if let Some(b) = &self.bias {
            y += &b.as1();
        }
        y
    }

    /// Accumulates dW and db, returns dx. `x` must be the forward input.
    pub fn backward(&mut self, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        let dw = x.t().dot(&dy);
        self.weight.grad += &dw;
        if let Some(b) = &mut self.bias {
            b.grad += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.weight.as2().t())
    }
}

impl Parameterized for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_all_params, check_fn_grad, FD_TOL};
    use crate::nn::init::{seeded, uniform};
    use crate::nn::param::zero_grads;
    use ndarray::arr2;

    #[test]
    fn forward_known_values() {
        let mut rng = seeded(1);
        let mut lin = Linear::new(2, 2, true, &mut rng);
        lin.weight.value = arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn();
        lin.bias.as_mut().unwrap().value = ndarray::arr1(&[0.5, -0.5]).into_dyn();
        let x = arr2(&[[1.0, 1.0], [2.0, 0.0]]);
        let y = lin.forward(x.view());
        assert_eq!(y, arr2(&[[4.5, 5.5], [2.5, 3.5]]));
    }

    #[test]
    fn grads_match_fd() {
        let mut rng = seeded(2);
        let mut lin = Linear::new(4, 3, true, &mut rng);
        let x = uniform(&[5, 4], -1.0, 1.0, &mut rng);
        let w = uniform(&[5, 3], -1.0, 1.0, &mut rng);
        let x2 = x.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let w2 = w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        zero_grads(&mut lin);
        let dx = lin.backward(x2, w2).into_dyn();

        let err = check_fn_grad(&x, &dx, 20, &mut rng, &mut |xv| {
            let xv2 = xv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            (lin.forward(xv2) * &w2).sum()
        });
        assert!(err < FD_TOL, "input rel err {err}");

        let (name, perr) = check_all_params(&mut lin, 10, &mut rng, &mut |m| {
            (m.forward(x2) * &w2).sum()
        });
        assert!(perr < FD_TOL, "{name} rel err {perr}");
    }
}
