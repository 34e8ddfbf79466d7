use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};

use super::act::{gelu, gelu_backward};
use super::init::{trunc_normal, Prng};
use super::linear::Linear;
use super::param::{join, Param, Parameterized};

pub const MASK_NEG: f64 = -1e9;

/// Cyclic shift along the two spatial axes of `[B, H, W, C]`.
/// `y[b, (i+sh) mod H, (j+sw) mod W, c] = x[b, i, j, c]`.
pub fn roll2d(x: &ArrayView4<'_, f64>, sh: isize, sw: isize) -> Array4<f64> {
    let (b, h, w, c) = x.dim();
    let mut y = Array4::zeros((b, h, w, c));
    let hh = h as isize;
    let ww = w as isize;
    for bi in 0..b {
        for i in 0..h {
            let ti = ((i as isize + sh).rem_euclid(hh)) as usize;
            for j in 0..w {
                let tj = ((j as isize + sw).rem_euclid(ww)) as usize;
                for ci in 0..c {
                    y[(bi, ti, tj, ci)] = x[(bi, i, j, ci)];
                }
            }
        }
    }
    y
}

/// Split `[B, H, W, C]` into non-overlapping `m x m` windows:
/// `[B * (H/m) * (W/m), m*m, C]`, batch-major then row-major window order.
pub fn window_partition(x: &ArrayView4<'_, f64>, m: usize) -> Array3<f64> {
    let (b, h, w, c) = x.dim();
    assert!(h % m == 0 && w % m == 0, "grid not divisible by window");
    let (nh, nw) = (h / m, w / m);
    let mut out = Array3::zeros((b * nh * nw, m * m, c));
    for bi in 0..b {
        for wi in 0..nh {
            for wj in 0..nw {
                let widx = bi * nh * nw + wi * nw + wj;
                for i in 0..m {
                    for j in 0..m {
                        for ci in 0..c {
                            out[(widx, i * m + j, ci)] = x[(bi, wi * m + i, wj * m + j, ci)];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`window_partition`].
pub fn window_reverse(wins: &ArrayView3<'_, f64>, m: usize, b: usize, h: usize, w: usize) -> Array4<f64> {
    let c = wins.dim().2;
    let (nh, nw) = (h / m, w / m);
    let mut out = Array4::zeros((b, h, w, c));
    for bi in 0..b {
        for wi in 0..nh {
            for wj in 0..nw {
                let widx = bi * nh * nw + wi * nw + wj;
                for i in 0..m {
                    for j in 0..m {
                        for ci in 0..c {
                            out[(bi, wi * m + i, wj * m + j, ci)] = wins[(widx, i * m + j, ci)];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Additive attention mask for shifted windows on an `h x w` grid.
/// Returns `[windows_per_image, m*m, m*m]` with `MASK_NEG` where two
/// positions came from different pre-shift regions, or `None` when
/// `shift == 0`.
pub fn attn_mask(h: usize, w: usize, m: usize, shift: usize) -> Option<Array3<f64>> {
    if shift == 0 {
        return None;
    }
    let mut ids = Array2::<f64>::zeros((h, w));
    let bounds = |n: usize| [(0, n - m), (n - m, n - shift), (n - shift, n)];
    let mut region = 0.0;
    for (r0, r1) in bounds(h) {
        for (c0, c1) in bounds(w) {
            ids.slice_mut(s![r0..r1, c0..c1]).fill(region);
            region += 1.0;
        }
    }
    let ids4 = ids
        .into_shape_with_order((1, h, w, 1))
        .unwrap();
    let wins = window_partition(&ids4.view(), m);
    let (nw, n, _) = wins.dim();
    let mut mask = Array3::zeros((nw, n, n));
    for wi in 0..nw {
        for i in 0..n {
            for j in 0..n {
                if wins[(wi, i, 0)] != wins[(wi, j, 0)] {
                    mask[(wi, i, j)] = MASK_NEG;
                }
            }
        }
    }
    Some(mask)
}

/// Learned relative position bias for an `m x m` window, one value per
/// head and relative offset.
#[derive(Debug, Clone)]
pub struct RelativePositionBias {
    /// `[(2m-1)^2, heads]`
    pub table: Param,
    index: Array2<usize>,
    heads: usize,
}

impl RelativePositionBias {
    pub fn new(window: usize, heads: usize, rng: &mut Prng) -> Self {
        let m = window;
        let span = 2 * m - 1;
        let n = m * m;
        let mut index = Array2::zeros((n, n));
        for a in 0..n {
            let (ai, aj) = (a / m, a % m);
            for b in 0..n {
                let (bi, bj) = (b / m, b % m);
                let di = ai as isize - bi as isize + (m - 1) as isize;
                let dj = aj as isize - bj as isize + (m - 1) as isize;
                index[(a, b)] = di as usize * span + dj as usize;
            }
        }
        RelativePositionBias {
            table: Param::new(trunc_normal(&[span * span, heads], 0.02, rng)),
            index,
            heads,
        }
    }

    /// `[heads, n, n]` bias gathered from the table.
    pub fn bias(&self) -> Array3<f64> {
        let n = self.index.dim().0;
        let table = self.table.as2();
        let mut out = Array3::zeros((self.heads, n, n));
        for hd in 0..self.heads {
            for i in 0..n {
                for j in 0..n {
                    out[(hd, i, j)] = table[(self.index[(i, j)], hd)];
                }
            }
        }
        out
    }

    pub fn backward(&mut self, d: &ArrayView3<'_, f64>) {
        let n = self.index.dim().0;
        let mut grad = self.table.grad.view_mut();
        for hd in 0..self.heads {
            for i in 0..n {
                for j in 0..n {
                    grad[[self.index[(i, j)], hd]] += d[(hd, i, j)];
                }
            }
        }
    }
}

impl Parameterized for RelativePositionBias {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "table"), &self.table);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "table"), &mut self.table);
    }
}

/// Multi-head self-attention over fixed-size windows.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub rel_bias: Option<RelativePositionBias>,
    pub heads: usize,
    pub scale: f64,
}

#[derive(Debug)]
pub struct AttnCache {
    /// flattened input `[nw*n, c]`
    x2: Array2<f64>,
    /// qkv output `[nw*n, 3c]`
    qkv_out: Array2<f64>,
    /// post-softmax attention `[nw, heads, n, n]`
    attn: Array4<f64>,
    /// pre-projection context `[nw*n, c]`
    ctx: Array2<f64>,
    n: usize,
}

impl WindowAttention {
    pub fn new(dim: usize, heads: usize, window: usize, rel_bias: bool, rng: &mut Prng) -> Self {
        assert!(dim % heads == 0, "dim must divide into heads");
        let head_dim = dim / heads;
        WindowAttention {
            qkv: Linear::new(dim, 3 * dim, true, rng),
            proj: Linear::new(dim, dim, true, rng),
            rel_bias: if rel_bias {
                Some(RelativePositionBias::new(window, heads, rng))
            } else {
                None
            },
            heads,
            scale: (head_dim as f64).powf(-0.5),
        }
    }

    pub fn dim(&self) -> usize {
        self.proj.in_dim()
    }

    /// `x`: `[nw, n, c]` windows; `mask`: `[windows_per_image, n, n]`
    /// additive mask shared across the batch.
    pub fn forward(
        &self,
        x: &ArrayView3<'_, f64>,
        mask: Option<&Array3<f64>>,
    ) -> (Array3<f64>, AttnCache) {
        let (nw, n, c) = x.dim();
        let hd = c / self.heads;
        let x2 = x.to_shape((nw * n, c)).unwrap().to_owned();
        let qkv_out = self.qkv.forward(x2.view());
        let bias = self.rel_bias.as_ref().map(|rb| rb.bias());
        let mut attn = Array4::zeros((nw, self.heads, n, n));
        let mut ctx = Array2::zeros((nw * n, c));
        for w in 0..nw {
            let rows = qkv_out.slice(s![w * n..(w + 1) * n, ..]);
            for h in 0..self.heads {
                let q = rows.slice(s![.., h * hd..(h + 1) * hd]);
                let k = rows.slice(s![.., c + h * hd..c + (h + 1) * hd]);
                let v = rows.slice(s![.., 2 * c + h * hd..2 * c + (h + 1) * hd]);
                let mut a = q.dot(&k.t());
                a *= self.scale;
                if let Some(b) = &bias {
                    a += &b.index_axis(Axis(0), h);
                }
                if let Some(m) = mask {
                    a += &m.index_axis(Axis(0), w % m.dim().0);
                }
                // row-wise stable softmax
                for mut row in a.rows_mut() {
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    row.mapv_inplace(|v| (v - mx).exp());
                    let s: f64 = row.sum();
                    row.mapv_inplace(|v| v / s);
                }
                let y_h = a.dot(&v);
                ctx.slice_mut(s![w * n..(w + 1) * n, h * hd..(h + 1) * hd])
                    .assign(&y_h);
                attn.slice_mut(s![w, h, .., ..]).assign(&a);
            }
        }
        let y2 = self.proj.forward(ctx.view());
        let y = y2.into_shape_with_order((nw, n, c)).unwrap();
        (y, AttnCache { x2, qkv_out, attn, ctx, n })
    }

    pub fn backward(&mut self, cache: &AttnCache, dy: &ArrayView3<'_, f64>) -> Array3<f64> {
        let (nw, n, c) = dy.dim();
        let hd = c / self.heads;
        let dy2 = dy.to_shape((nw * n, c)).unwrap().to_owned();
        let dctx = self.proj.backward(cache.ctx.view(), dy2.view());
        let mut dqkv = Array2::<f64>::zeros((nw * n, 3 * c));
        let mut dbias = self
            .rel_bias
            .as_ref()
            .map(|_| Array3::<f64>::zeros((self.heads, n, n)));
        for w in 0..nw {
            let rows = cache.qkv_out.slice(s![w * n..(w + 1) * n, ..]);
            for h in 0..self.heads {
                let q = rows.slice(s![.., h * hd..(h + 1) * hd]);
                let k = rows.slice(s![.., c + h * hd..c + (h + 1) * hd]);
                let v = rows.slice(s![.., 2 * c + h * hd..2 * c + (h + 1) * hd]);
                let a = cache.attn.slice(s![w, h, .., ..]);
                let dy_h = dctx.slice(s![w * n..(w + 1) * n, h * hd..(h + 1) * hd]);
                let dv = a.t().dot(&dy_h);
                let da = dy_h.dot(&v.t());
                // softmax backward per row
                let mut ds = Array2::zeros((n, n));
                for i in 0..n {
                    let ai = a.row(i);
                    let dai = da.row(i);
                    let dot: f64 = ai.iter().zip(dai.iter()).map(|(x, y)| x * y).sum();
                    for j in 0..n {
                        ds[(i, j)] = ai[j] * (dai[j] - dot);
                    }
                }
                if let Some(db) = dbias.as_mut() {
                    let mut slice = db.index_axis_mut(Axis(0), h);
                    slice += &ds;
                }
                let dq = ds.dot(&k).mapv(|v| v * self.scale);
                let dk = ds.t().dot(&q).mapv(|v| v * self.scale);
                dqkv.slice_mut(s![w * n..(w + 1) * n, h * hd..(h + 1) * hd])
                    .assign(&dq);
                dqkv.slice_mut(s![w * n..(w + 1) * n, c + h * hd..c + (h + 1) * hd])
                    .assign(&dk);
                dqkv.slice_mut(s![w * n..(w + 1) * n, 2 * c + h * hd..2 * c + (h + 1) * hd])
                    .assign(&dv);
            }
        }
        if let (Some(rb), Some(db)) = (self.rel_bias.as_mut(), dbias) {
            rb.backward(&db.view());
        }
        let dx2 = self.qkv.backward(cache.x2.view(), dqkv.view());
        dx2.into_shape_with_order((nw, cache.n, c)).unwrap()
    }
}

impl Parameterized for WindowAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
        if let Some(rb) = &self.rel_bias {
            rb.visit(&join(prefix, "rel_bias"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
        if let Some(rb) = &mut self.rel_bias {
            rb.visit_mut(&join(prefix, "rel_bias"), f);
        }
    }
}

/// Two-layer feed-forward block with GELU, applied token-wise.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug)]
pub struct MlpCache {
    x: Array2<f64>,
    h_pre: Array2<f64>,
}

impl Mlp {
    pub fn new(dim: usize, hidden: usize, rng: &mut Prng) -> Self {
        Mlp {
            fc1: Linear::new(dim, hidden, true, rng),
            fc2: Linear::new(hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, MlpCache) {
        let h_pre = self.fc1.forward(x);
        let h = gelu(&h_pre.view().into_dyn());
        let h2 = h.into_dimensionality::<ndarray::Ix2>().unwrap();
        let y = self.fc2.forward(h2.view());
        (y, MlpCache { x: x.to_owned(), h_pre })
    }

    pub fn backward(&mut self, cache: &MlpCache, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        let h = gelu(&cache.h_pre.view().into_dyn())
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let dh = self.fc2.backward(h.view(), dy);
        let dh_pre = gelu_backward(&cache.h_pre.view().into_dyn(), &dh.view().into_dyn())
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        self.fc1.backward(cache.x.view(), dh_pre.view())
    }
}

impl Parameterized for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}
