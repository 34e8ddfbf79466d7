use ndarray::{s, Array1, Array2, Array4, ArrayView4, Axis};

use super::init::{kaiming_normal, Prng};
use super::param::{join, Param, Parameterized};

/// Stride-1 2D convolution with symmetric zero padding over channels-last
/// `[B, H, W, C]` maps. The whole kernel support is gathered into one
/// `[B*H*W, k*k*Cin]` im2col matrix so each pass is a single wide matmul,
/// which keeps dgemm efficient even at small channel counts. Kernel 3x3
/// (pad 1) and 1x1 (pad 0) are the cases used by the segmentation
/// backbones.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[k, k, in_channels, out_channels]`
    pub weight: Param,
    pub bias: Param,
    pub pad: usize,
}

/// Output/source window for kernel offset `d = ki - pad` on an axis of
/// length `n`: output positions `o0..o1` read source positions `o+d`.
fn axis_span(n: usize, d: isize) -> (usize, usize) {
    let o0 = 0.max(-d) as usize;
    let o1 = (n as isize - 0.max(d)) as usize;
    (o0, o1)
}

/// Gathers the kernel support of every output position into
/// `[B*H*W, k*k*Cin]`; out-of-image taps stay zero.
fn im2col(x: &ArrayView4<'_, f64>, k: usize, pad: usize) -> Array2<f64> {
    let (b, h, w, cin) = x.dim();
    let p = pad as isize;
    let mut col = Array2::zeros((b * h * w, k * k * cin));
    let mut col4 = col
        .view_mut()
        .into_shape_with_order((b, h, w, k * k * cin))
        .unwrap();
    for ki in 0..k {
        let di = ki as isize - p;
        let (r0, r1) = axis_span(h, di);
        for kj in 0..k {
            let dj = kj as isize - p;
            let (c0, c1) = axis_span(w, dj);
            if r0 >= r1 || c0 >= c1 {
                continue;
            }
            let src = x.slice(s![
                ..,
                (r0 as isize + di) as usize..(r1 as isize + di) as usize,
                (c0 as isize + dj) as usize..(c1 as isize + dj) as usize,
                ..
            ]);
            let lane = (ki * k + kj) * cin;
            col4.slice_mut(s![.., r0..r1, c0..c1, lane..lane + cin])
                .assign(&src);
        }
    }
    col
}

/// Scatter-adds a `[B*H*W, k*k*Cin]` gradient back onto the input map,
/// reversing `im2col`.
fn col2im(dcol: &Array2<f64>, dim: (usize, usize, usize, usize), k: usize, pad: usize) -> Array4<f64> {
    let (b, h, w, cin) = dim;
    let p = pad as isize;
    let dcol4 = dcol.view().into_shape_with_order((b, h, w, k * k * cin)).unwrap();
    let mut dx = Array4::zeros((b, h, w, cin));
    for ki in 0..k {
        let di = ki as isize - p;
        let (r0, r1) = axis_span(h, di);
        for kj in 0..k {
            let dj = kj as isize - p;
            let (c0, c1) = axis_span(w, dj);
            if r0 >= r1 || c0 >= c1 {
                continue;
            }
            let lane = (ki * k + kj) * cin;
            let mut dst = dx.slice_mut(s![
                ..,
                (r0 as isize + di) as usize..(r1 as isize + di) as usize,
                (c0 as isize + dj) as usize..(c1 as isize + dj) as usize,
                ..
            ]);
            dst += &dcol4.slice(s![.., r0..r1, c0..c1, lane..lane + cin]);
        }
    }
    dx
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, rng: &mut Prng) -> Self {
        assert!(k % 2 == 1, "only odd kernels are used");
        Conv2d {
            weight: Param::new(kaiming_normal(&[k, k, in_ch, out_ch], in_ch * k * k, rng)),
            bias: Param::zeros(&[out_ch]),
            pad: k / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[3]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &ArrayView4<'_, f64>) -> Array4<f64> {
        let (b, h, w, cin) = x.dim();
        let cout = self.out_channels();
        let k = self.kernel();
        let col = im2col(x, k, self.pad);
        let wf = self
            .weight
            .value
            .view()
            .into_shape_with_order((k * k * cin, cout))
            .unwrap();
        let mut y = col.dot(&wf);
        y += &self.bias.as1();
        y.into_shape_with_order((b, h, w, cout)).unwrap()
    }

    pub fn backward(&mut self, x: &ArrayView4<'_, f64>, dy: &ArrayView4<'_, f64>) -> Array4<f64> {
        let (b, h, w, cin) = x.dim();
        let cout = self.out_channels();
        let k = self.kernel();
        let dyf = dy.to_shape((b * h * w, cout)).unwrap();
        let db: Array1<f64> = dyf.sum_axis(Axis(0));
        self.bias.grad += &db;

        let col = im2col(x, k, self.pad);
        let dwf: Array2<f64> = col.t().dot(&dyf);
        let mut wg = self
            .weight
            .grad
            .view_mut()
            .into_shape_with_order((k * k * cin, cout))
            .unwrap();
        wg += &dwf;

        let wf = self
            .weight
            .value
            .view()
            .into_shape_with_order((k * k * cin, cout))
            .unwrap();
        let dcol = dyf.dot(&wf.t());
        col2im(&dcol, (b, h, w, cin), k, self.pad)
    }
}

impl Parameterized for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// 2x2 max pooling with stride 2 on `[B, H, W, C]`. Returns the pooled map
/// plus the winning corner index (0..4) needed by the backward scatter.
pub fn maxpool2(x: &ArrayView4<'_, f64>) -> (Array4<f64>, Array4<u8>) {
    let (b, h, w, c) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::zeros((b, oh, ow, c));
    let mut idx = Array4::zeros((b, oh, ow, c));
    for bi in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                for ci in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut which = 0u8;
                    for (q, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        let v = x[(bi, 2 * i + di, 2 * j + dj, ci)];
                        if v > best {
                            best = v;
                            which = q as u8;
                        }
                    }
                    y[(bi, i, j, ci)] = best;
                    idx[(bi, i, j, ci)] = which;
                }
            }
        }
    }
    (y, idx)
}

pub fn maxpool2_backward(dy: &ArrayView4<'_, f64>, idx: &Array4<u8>) -> Array4<f64> {
    let (b, oh, ow, c) = dy.dim();
    let mut dx = Array4::zeros((b, oh * 2, ow * 2, c));
    const OFF: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];
    for bi in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                for ci in 0..c {
                    let (di, dj) = OFF[idx[(bi, i, j, ci)] as usize];
                    dx[(bi, 2 * i + di, 2 * j + dj, ci)] += dy[(bi, i, j, ci)];
                }
            }
        }
    }
    dx
}

/// Interpolation taps for doubling one axis of length `n` (half-pixel
/// centers, clamped at the borders).
fn up2_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|d| {
            let s = (d as f64 + 0.5) / 2.0 - 0.5;
            let f = s.floor();
            let frac = s - f;
            let i0 = (f.max(0.0) as usize).min(n - 1);
            let i1 = ((f + 1.0).max(0.0) as usize).min(n - 1);
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear 2x upsampling on `[B, H, W, C]` (fixed weights, no
/// parameters). Separable: rows are doubled first, then columns, each as
/// whole-slice blends.
pub fn upsample2_bilinear(x: &ArrayView4<'_, f64>) -> Array4<f64> {
    let (b, h, w, c) = x.dim();
    let rt = up2_taps(h);
    let ct = up2_taps(w);
    let mut tall = Array4::zeros((b, 2 * h, w, c));
    for (i, &(i0, i1, f)) in rt.iter().enumerate() {
        let mut dst = tall.slice_mut(s![.., i, .., ..]);
        dst.assign(&x.slice(s![.., i0, .., ..]));
        if f > 0.0 {
            dst *= 1.0 - f;
            dst.scaled_add(f, &x.slice(s![.., i1, .., ..]));
        }
    }
    let mut y = Array4::zeros((b, 2 * h, 2 * w, c));
    for (j, &(j0, j1, f)) in ct.iter().enumerate() {
        let mut dst = y.slice_mut(s![.., .., j, ..]);
        dst.assign(&tall.slice(s![.., .., j0, ..]));
        if f > 0.0 {
            dst *= 1.0 - f;
            dst.scaled_add(f, &tall.slice(s![.., .., j1, ..]));
        }
    }
    y
}

pub fn upsample2_bilinear_backward(dy: &ArrayView4<'_, f64>) -> Array4<f64> {
    let (b, oh, ow, c) = dy.dim();
    let (h, w) = (oh / 2, ow / 2);
    let rt = up2_taps(h);
    let ct = up2_taps(w);
    let mut tall = Array4::zeros((b, oh, w, c));
    for (j, &(j0, j1, f)) in ct.iter().enumerate() {
        let src = dy.slice(s![.., .., j, ..]);
        tall.slice_mut(s![.., .., j0, ..]).scaled_add(1.0 - f, &src);
        if f > 0.0 {
            tall.slice_mut(s![.., .., j1, ..]).scaled_add(f, &src);
        }
    }
    let mut dx = Array4::zeros((b, h, w, c));
    for (i, &(i0, i1, f)) in rt.iter().enumerate() {
        let src = tall.slice(s![.., i, .., ..]);
        dx.slice_mut(s![.., i0, .., ..]).scaled_add(1.0 - f, &src);
        if f > 0.0 {
            dx.slice_mut(s![.., i1, .., ..]).scaled_add(f, &src);
        }
    }
    dx
}
