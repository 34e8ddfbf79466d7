use ndarray::{concatenate, s, Array4, ArrayView4, Axis, Zip};

use crate::error::{Error, Result};
use crate::nn::conv::{
    maxpool2, maxpool2_backward, upsample2_bilinear, upsample2_bilinear_backward, Conv2d,
};
use crate::nn::init::Prng;
use crate::nn::norm::{BatchNorm2d, BatchNormCache};
use crate::nn::param::{join, Param, Parameterized};

/// Configuration of the convolutional encoder-decoder backbone.
///
/// `stages` is the number of pooling steps; feature widths double each
/// stage from `base_width` with a half-width bottleneck, mirroring the
/// bilinear-upsampling U-Net layout.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CnnConfig {
    pub base_width: usize,
    pub stages: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig { base_width: 64, stages: 4 }
    }
}

impl CnnConfig {
    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be positive".into()));
        }
        if self.stages == 0 {
            return Err(Error::Config("stages must be positive".into()));
        }
        Ok(())
    }

    pub fn validate_input(&self, b: usize, c: usize, h: usize, w: usize) -> Result<()> {
        if b == 0 {
            return Err(Error::Dimension("empty batch".into()));
        }
        if c != 1 {
            return Err(Error::Dimension(format!(
                "expected single-channel input, got {} channels",
                c
            )));
        }
        let div = 1usize << self.stages;
        if h % div != 0 {
            return Err(Error::Dimension(format!(
                "input height {} not divisible by {} across {} pooling stages",
                h, div, self.stages
            )));
        }
        if w % div != 0 {
            return Err(Error::Dimension(format!(
                "input width {} not divisible by {} across {} pooling stages",
                w, div, self.stages
            )));
        }
        Ok(())
    }
}

fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

fn relu_backward(pre: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(pre).for_each(|d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Layout helpers between the public `[B, C, H, W]` interface and the
/// channels-last internals.
pub fn nchw_to_nhwc(x: &ArrayView4<'_, f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    Array4::from_shape_fn((b, h, w, c), |(bi, i, j, ci)| x[(bi, ci, i, j)])
}

pub fn nhwc_to_nchw(x: &ArrayView4<'_, f64>) -> Array4<f64> {
    let (b, h, w, c) = x.dim();
    Array4::from_shape_fn((b, c, h, w), |(bi, ci, i, j)| x[(bi, i, j, ci)])
}

/// Two 3x3 convolutions, each followed by batch normalization and ReLU.
#[derive(Debug, Clone)]
pub struct DoubleConv {
    pub c1: Conv2d,
    pub b1: BatchNorm2d,
    pub c2: Conv2d,
    pub b2: BatchNorm2d,
}

pub struct DoubleConvCache {
    x: Array4<f64>,
    bn1: BatchNormCache,
    a1: Array4<f64>,
    h1: Array4<f64>,
    bn2: BatchNormCache,
    a2: Array4<f64>,
}

impl DoubleConv {
    pub fn new(cin: usize, cout: usize, cmid: usize, rng: &mut Prng) -> Self {
        DoubleConv {
            c1: Conv2d::new(cin, cmid, 3, rng),
            b1: BatchNorm2d::new(cmid),
            c2: Conv2d::new(cmid, cout, 3, rng),
            b2: BatchNorm2d::new(cout),
        }
    }

    pub fn forward_train(&mut self, x: &ArrayView4<'_, f64>) -> (Array4<f64>, DoubleConvCache) {
        let z1 = self.c1.forward(x);
        let (a1, bn1) = self.b1.forward_train(z1.view());
        let h1 = relu(&a1);
        let z2 = self.c2.forward(&h1.view());
        let (a2, bn2) = self.b2.forward_train(z2.view());
        let y = relu(&a2);
        (y, DoubleConvCache { x: x.to_owned(), bn1, a1, h1, bn2, a2 })
    }

    pub fn forward_eval(&self, x: &ArrayView4<'_, f64>) -> Array4<f64> {
        let z1 = self.c1.forward(x);
        let h1 = relu(&self.b1.forward_eval(z1.view()));
        let z2 = self.c2.forward(&h1.view());
        relu(&self.b2.forward_eval(z2.view()))
    }

    pub fn backward(&mut self, cache: &DoubleConvCache, dy: &ArrayView4<'_, f64>) -> Array4<f64> {
        let da2 = relu_backward(&cache.a2, &dy.to_owned());
        let dz2 = self.b2.backward(&cache.bn2, da2.view());
        let dh1 = self.c2.backward(&cache.h1.view(), &dz2.view());
        let da1 = relu_backward(&cache.a1, &dh1);
        let dz1 = self.b1.backward(&cache.bn1, da1.view());
        self.c1.backward(&cache.x.view(), &dz1.view())
    }
}

impl Parameterized for DoubleConv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.c1.visit(&join(prefix, "c1"), f);
        self.b1.visit(&join(prefix, "b1"), f);
        self.c2.visit(&join(prefix, "c2"), f);
        self.b2.visit(&join(prefix, "b2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.c1.visit_mut(&join(prefix, "c1"), f);
        self.b1.visit_mut(&join(prefix, "b1"), f);
        self.c2.visit_mut(&join(prefix, "c2"), f);
        self.b2.visit_mut(&join(prefix, "b2"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ndarray::ArrayD<f64>)) {
        self.b1.visit_buffers(&join(prefix, "b1"), f);
        self.b2.visit_buffers(&join(prefix, "b2"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<f64>)) {
        self.b1.visit_buffers_mut(&join(prefix, "b1"), f);
        self.b2.visit_buffers_mut(&join(prefix, "b2"), f);
    }
}

/// Encoder-decoder segmentation network with skip connections: double-conv
/// blocks, 2x max pooling on the way down, bilinear upsampling and channel
/// concatenation on the way up, 1x1 class head.
#[derive(Debug, Clone)]
pub struct UNet {
    pub cfg: CnnConfig,
    pub num_classes: usize,
    inc: DoubleConv,
    downs: Vec<DoubleConv>,
    ups: Vec<DoubleConv>,
    outc: Conv2d,
}

pub struct UNetCache {
    inc: DoubleConvCache,
    pools: Vec<Array4<u8>>,
    downs: Vec<DoubleConvCache>,
    ups: Vec<DoubleConvCache>,
    /// Channel count of the skip half in each decoder concatenation.
    skip_ch: Vec<usize>,
    outc_in: Array4<f64>,
    sides: Vec<usize>,
}

impl UNet {
    pub fn new(cfg: CnnConfig, num_classes: usize, rng: &mut Prng) -> Result<Self> {
        cfg.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let s = cfg.stages;
        let w = cfg.base_width;
        let inc = DoubleConv::new(1, w, w, rng);
        let mut downs = Vec::new();
        for i in 0..s {
            let cin = cfg.width(i);
            let cout = if i + 1 == s { cfg.width(s - 1) } else { cfg.width(i + 1) };
            downs.push(DoubleConv::new(cin, cout, cout, rng));
        }
        let mut ups = Vec::new();
        for k in 0..s {
            let up_ch = if k == 0 { cfg.width(s - 1) } else { ups_out(&cfg, k - 1) };
            let skip = cfg.width(s - 1 - k);
            let cin = up_ch + skip;
            let cout = ups_out(&cfg, k);
            ups.push(DoubleConv::new(cin, cout, cin / 2, rng));
        }
        let outc = Conv2d::new(w, num_classes, 1, rng);
        Ok(UNet { cfg, num_classes, inc, downs, ups, outc })
    }

    pub fn forward_train(&mut self, x: &ArrayView4<'_, f64>) -> Result<(Array4<f64>, UNetCache)> {
        let (b, c, h, w) = x.dim();
        self.cfg.validate_input(b, c, h, w)?;
        let stages = self.cfg.stages;
        let xn = nchw_to_nhwc(x);
        let mut sides = Vec::new();

        let (f0, inc_cache) = self.inc.forward_train(&xn.view());
        let mut feats = vec![f0];
        let mut pools = Vec::new();
        let mut down_caches = Vec::new();
        for i in 0..stages {
            let (p, idx) = maxpool2(&feats[i].view());
            sides.push(p.dim().1);
            pools.push(idx);
            let (f, cache) = self.downs[i].forward_train(&p.view());
            feats.push(f);
            down_caches.push(cache);
        }

        let mut t = feats[stages].clone();
        let mut up_caches = Vec::new();
        let mut skip_ch = Vec::new();
        for k in 0..stages {
            let u = upsample2_bilinear(&t.view());
            let skip = &feats[stages - 1 - k];
            skip_ch.push(skip.dim().3);
            let cat = concatenate(Axis(3), &[skip.view(), u.view()]).unwrap();
            sides.push(cat.dim().1);
            let (y, cache) = self.ups[k].forward_train(&cat.view());
            t = y;
            up_caches.push(cache);
        }

        let logits_nhwc = self.outc.forward(&t.view());
        let logits = nhwc_to_nchw(&logits_nhwc.view());
        Ok((
            logits,
            UNetCache {
                inc: inc_cache,
                pools,
                downs: down_caches,
                ups: up_caches,
                skip_ch,
                outc_in: t,
                sides,
            },
        ))
    }

    pub fn forward_eval(&self, x: &ArrayView4<'_, f64>) -> Result<Array4<f64>> {
        let (b, c, h, w) = x.dim();
        self.cfg.validate_input(b, c, h, w)?;
        let stages = self.cfg.stages;
        let xn = nchw_to_nhwc(x);
        let mut feats = vec![self.inc.forward_eval(&xn.view())];
        for i in 0..stages {
            let (p, _) = maxpool2(&feats[i].view());
            feats.push(self.downs[i].forward_eval(&p.view()));
        }
        let mut t = feats[stages].clone();
        for k in 0..stages {
            let u = upsample2_bilinear(&t.view());
            let skip = &feats[stages - 1 - k];
            let cat = concatenate(Axis(3), &[skip.view(), u.view()]).unwrap();
            t = self.ups[k].forward_eval(&cat.view());
        }
        Ok(nhwc_to_nchw(&self.outc.forward(&t.view()).view()))
    }

    /// Feature-map sides along the forward pass: one entry per pooled
    /// encoder level, then one per decoder level.
    pub fn feature_trace(&mut self, x: &ArrayView4<'_, f64>) -> Result<Vec<usize>> {
        Ok(self.forward_train(x)?.1.sides)
    }

    /// Accumulate parameter gradients from `dlogits` (`[B, K, H, W]`).
    pub fn backward(&mut self, cache: &UNetCache, dlogits: &ArrayView4<'_, f64>) {
        let stages = self.cfg.stages;
        let dl = nchw_to_nhwc(dlogits);
        let mut dt = self.outc.backward(&cache.outc_in.view(), &dl.view());

        let mut dskips: Vec<Option<Array4<f64>>> = vec![None; stages];
        for k in (0..stages).rev() {
            let dcat = self.ups[k].backward(&cache.ups[k], &dt.view());
            let sc = cache.skip_ch[k];
            let dskip = dcat.slice(s![.., .., .., ..sc]).to_owned();
            let du = dcat.slice(s![.., .., .., sc..]).to_owned();
            dskips[stages - 1 - k] = Some(dskip);
            dt = upsample2_bilinear_backward(&du.view());
        }

        for i in (0..stages).rev() {
            let dp = self.downs[i].backward(&cache.downs[i], &dt.view());
            dt = maxpool2_backward(&dp.view(), &cache.pools[i]);
            if let Some(ds) = &dskips[i] {
                dt += ds;
            }
        }
        self.inc.backward(&cache.inc, &dt.view());
    }
}

fn ups_out(cfg: &CnnConfig, k: usize) -> usize {
    if k + 1 == cfg.stages {
        cfg.base_width
    } else {
        cfg.width(cfg.stages - 2 - k)
    }
}

impl Parameterized for UNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.inc.visit(&join(prefix, "inc"), f);
        for (i, d) in self.downs.iter().enumerate() {
            d.visit(&join(prefix, &format!("down{}", i)), f);
        }
        for (k, u) in self.ups.iter().enumerate() {
            u.visit(&join(prefix, &format!("up{}", k)), f);
        }
        self.outc.visit(&join(prefix, "outc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.inc.visit_mut(&join(prefix, "inc"), f);
        for (i, d) in self.downs.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("down{}", i)), f);
        }
        for (k, u) in self.ups.iter_mut().enumerate() {
            u.visit_mut(&join(prefix, &format!("up{}", k)), f);
        }
        self.outc.visit_mut(&join(prefix, "outc"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ndarray::ArrayD<f64>)) {
        self.inc.visit_buffers(&join(prefix, "inc"), f);
        for (i, d) in self.downs.iter().enumerate() {
            d.visit_buffers(&join(prefix, &format!("down{}", i)), f);
        }
        for (k, u) in self.ups.iter().enumerate() {
            u.visit_buffers(&join(prefix, &format!("up{}", k)), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<f64>)) {
        self.inc.visit_buffers_mut(&join(prefix, "inc"), f);
        for (i, d) in self.downs.iter_mut().enumerate() {
            d.visit_buffers_mut(&join(prefix, &format!("down{}", i)), f);
        }
        for (k, u) in self.ups.iter_mut().enumerate() {
            u.visit_buffers_mut(&join(prefix, &format!("up{}", k)), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_param_grad, FD_TOL};
    use crate::nn::init::{seeded, uniform};
    use crate::nn::param::zero_grads;

    fn tiny_cfg() -> CnnConfig {
        CnnConfig { base_width: 2, stages: 2 }
    }

    fn rand4(shape: [usize; 4], seed: u64) -> Array4<f64> {
        let mut rng = seeded(seed);
        uniform(&shape, -1.0, 1.0, &mut rng)
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
    }

    #[test]
    fn unet_shapes_and_feature_trace() {
        let mut rng = seeded(80);
        let mut net = UNet::new(CnnConfig { base_width: 4, stages: 4 }, 3, &mut rng).unwrap();
        let x = rand4([1, 1, 64, 64], 81);
        let (logits, _) = net.forward_train(&x.view()).unwrap();
        assert_eq!(logits.dim(), (1, 3, 64, 64));
        let trace = net.feature_trace(&x.view()).unwrap();
        assert_eq!(trace, vec![32, 16, 8, 4, 8, 16, 32, 64]);
    }

    #[test]
    fn unet_rejects_indivisible_input() {
        let mut rng = seeded(82);
        let net = UNet::new(tiny_cfg(), 2, &mut rng).unwrap();
        let x = Array4::<f64>::zeros((1, 1, 10, 8));
        match net.forward_eval(&x.view()) {
            Err(Error::Dimension(msg)) => assert!(msg.contains("height")),
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn unet_eval_is_per_sample_independent() {
        let mut rng = seeded(83);
        let mut net = UNet::new(tiny_cfg(), 2, &mut rng).unwrap();
        // push running stats away from their init
        let warm = rand4([3, 1, 8, 8], 84);
        let _ = net.forward_train(&warm.view()).unwrap();
        let a = rand4([1, 1, 8, 8], 85);
        let b = rand4([1, 1, 8, 8], 86);
        let batch = concatenate(Axis(0), &[a.view(), b.view()]).unwrap();
        let single = net.forward_eval(&a.view()).unwrap();
        let joint = net.forward_eval(&batch.view()).unwrap();
        for (u, v) in single.iter().zip(joint.slice(s![0..1, .., .., ..]).iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn unet_two_stage_grads_match_fd() {
        let mut rng = seeded(87);
        let mut net = UNet::new(tiny_cfg(), 2, &mut rng).unwrap();
        let x = rand4([2, 1, 16, 16], 88);
        let w = rand4([2, 2, 16, 16], 89);
        zero_grads(&mut net);
        let (_, cache) = net.forward_train(&x.view()).unwrap();
        net.backward(&cache, &w.view());
        let mut rng2 = seeded(90);
        for name in [
            "inc.c1.weight",
            "inc.b1.gamma",
            "down0.c2.weight",
            "down1.c1.weight",
            "up0.c1.weight",
            "up1.c2.weight",
            "outc.weight",
            "outc.bias",
        ] {
            let err = check_param_grad(&mut net, name, 5, &mut rng2, &mut |m: &mut UNet| {
                let (y, _) = m.forward_train(&x.view()).unwrap();
                (y * &w).sum()
            });
            assert!(err < FD_TOL, "{name} rel err {err}");
        }
    }

    #[test]
    fn double_conv_grads_match_fd() {
        let mut rng = seeded(91);
        let mut dc = DoubleConv::new(2, 3, 2, &mut rng);
        let x = rand4([2, 4, 4, 2], 92);
        let w = rand4([2, 4, 4, 3], 93);
        zero_grads(&mut dc);
        let (_, cache) = dc.forward_train(&x.view());
        dc.backward(&cache, &w.view());
        let mut rng2 = seeded(94);
        for name in ["c1.weight", "b1.beta", "c2.weight", "b2.gamma"] {
            let err = check_param_grad(&mut dc, name, 6, &mut rng2, &mut |m: &mut DoubleConv| {
                let (y, _) = m.forward_train(&x.view());
                (y * &w).sum()
            });
            assert!(err < FD_TOL, "{name} rel err {err}");
        }
    }
}
