use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};

use super::param::{join, Param, Parameterized};

const EPS: f64 = 1e-5;

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

pub struct LayerNormCache {
    /// Normalized input before scale/shift, `[rows, dim]`.
    xhat: Array2<f64>,
    /// Per-row 1 / sqrt(var + eps).
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(Array1::ones(dim).into_dyn()),
            beta: Param::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mean = x.mean_axis(Axis(1)).unwrap();
        let mut xhat = x.to_owned();
        for (mut row, m) in xhat.rows_mut().into_iter().zip(mean.iter()) {
            row -= *m;
        }
        let inv_std = xhat.map_axis(Axis(1), |r| {
            let var = r.iter().map(|v| v * v).sum::<f64>() / d;
            1.0 / (var + EPS).sqrt()
        });
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter()) {
            row *= *s;
        }
        let mut y = xhat.clone();
        y *= &self.gamma.as1();
        y += &self.beta.as1();
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        let d = dy.ncols() as f64;
        self.beta.grad += &dy.sum_axis(Axis(0));
        self.gamma.grad += &(&dy * &cache.xhat).sum_axis(Axis(0));

        // dx = inv_std/d * (d*g - sum(g) - xhat * sum(g*xhat)), g = dy*gamma
        let g = &dy * &self.gamma.as1();
        let sum_g = g.sum_axis(Axis(1));
        let sum_gx = (&g * &cache.xhat).sum_axis(Axis(1));
        let mut dx = g * d;
        for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
            ndarray::Zip::from(&mut row)
                .and(cache.xhat.row(i))
                .for_each(|v, &xh| *v = (*v - sum_g[i] - xh * sum_gx[i]) * cache.inv_std[i] / d);
        }
        dx
    }
}

impl Parameterized for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Batch normalization over channels-last `[B, H, W, C]` maps with
/// per-channel statistics.
///
/// Training mode normalizes by batch statistics and updates the running
/// estimates; eval mode uses the running estimates, which makes each
/// sample's output independent of the rest of the batch.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
}

pub struct BatchNormCache {
    /// Normalized input, flattened to `[B*H*W, C]`.
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(Array1::ones(channels).into_dyn()),
            beta: Param::zeros(&[channels]),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward_train(&mut self, x: ArrayView4<'_, f64>) -> (Array4<f64>, BatchNormCache) {
        let (b, h, w, c) = x.dim();
        let n = (b * h * w) as f64;
        let flat = x.to_shape((b * h * w, c)).unwrap();
        let mean = flat.mean_axis(Axis(0)).unwrap();
        let mut xhat = flat.to_owned();
        xhat -= &mean;
        let var = xhat.map_axis(Axis(0), |col| col.iter().map(|v| v * v).sum::<f64>() / n);
        let inv_std = var.mapv(|v| 1.0 / (v + EPS).sqrt());
        xhat *= &inv_std;
        for k in 0..c {
            self.running_mean[k] =
                (1.0 - self.momentum) * self.running_mean[k] + self.momentum * mean[k];
            self.running_var[k] =
                (1.0 - self.momentum) * self.running_var[k] + self.momentum * var[k];
        }
        let mut y = xhat.clone();
        y *= &self.gamma.as1();
        y += &self.beta.as1();
        (
            y.into_shape_with_order((b, h, w, c)).unwrap(),
            BatchNormCache { xhat, inv_std },
        )
    }

    pub fn forward_eval(&self, x: ArrayView4<'_, f64>) -> Array4<f64> {
        let (b, h, w, c) = x.dim();
        let scale: Array1<f64> = self
            .running_var
            .iter()
            .zip(self.gamma.as1().iter())
            .map(|(v, g)| g / (v + EPS).sqrt())
            .collect();
        let mut y = x.to_shape((b * h * w, c)).unwrap().to_owned();
        y -= &self.running_mean;
        y *= &scale;
        y += &self.beta.as1();
        y.into_shape_with_order((b, h, w, c)).unwrap()
    }

    pub fn backward(&mut self, cache: &BatchNormCache, dy: ArrayView4<'_, f64>) -> Array4<f64> {
        let (b, h, w, c) = dy.dim();
        let n = (b * h * w) as f64;
        let dyf = dy.to_shape((b * h * w, c)).unwrap();
        let sum_dy = dyf.sum_axis(Axis(0));
        let sum_dyx = (&dyf * &cache.xhat).sum_axis(Axis(0));
        self.beta.grad += &sum_dy;
        self.gamma.grad += &sum_dyx;

        // dx = gamma*inv_std/n * (n*dy - sum(dy) - xhat * sum(dy*xhat))
        let mut dx = dyf.to_owned() * n;
        dx -= &sum_dy;
        dx -= &(&cache.xhat * &sum_dyx);
        let coeff: Array1<f64> = self
            .gamma
            .as1()
            .iter()
            .zip(cache.inv_std.iter())
            .map(|(g, s)| g * s / n)
            .collect();
        dx *= &coeff;
        dx.into_shape_with_order((b, h, w, c)).unwrap()
    }
}

impl Parameterized for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ndarray::ArrayD<f64>)) {
        f(&join(prefix, "running_mean"), &self.running_mean.clone().into_dyn());
        f(&join(prefix, "running_var"), &self.running_var.clone().into_dyn());
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<f64>)) {
        let mut m = self.running_mean.clone().into_dyn();
        f(&join(prefix, "running_mean"), &mut m);
        self.running_mean = m.into_dimensionality().unwrap();
        let mut v = self.running_var.clone().into_dyn();
        f(&join(prefix, "running_var"), &mut v);
        self.running_var = v.into_dimensionality().unwrap();
    }
}
