use ndarray::{concatenate, s, Array2, Array3, Array4, ArrayView4, Axis};

use crate::error::{Error, Result};
use crate::nn::attention::{
    attn_mask, roll2d, window_partition, window_reverse, AttnCache, Mlp, MlpCache,
    WindowAttention,
};
use crate::nn::init::Prng;
use crate::nn::linear::Linear;
use crate::nn::norm::{LayerNorm, LayerNormCache};
use crate::nn::param::{join, Param, Parameterized};

/// Configuration of the hierarchical windowed-attention backbone.
///
/// Stage `i` operates on a token grid of side `img_size / patch_size / 2^i`
/// at dimension `embed_dim * 2^i`; the last stage is the bottleneck.
/// Windows larger than a stage's grid are clamped to the grid side (and
/// the shifted variant degenerates to the plain one there).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    pub img_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Blocks per stage, encoder side; the decoder mirrors all but the last.
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub window: usize,
    /// Learned relative position bias inside each window.
    pub rel_bias: bool,
    /// Accept 1-channel input by replicating it to 3 before projection
    /// (for interop with externally trained 3-channel weights).
    pub replicate_input: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            img_size: 224,
            patch_size: 4,
            embed_dim: 96,
            depths: vec![2, 2, 2, 2],
            num_heads: vec![3, 6, 12, 24],
            window: 7,
            rel_bias: true,
            replicate_input: false,
        }
    }
}

impl AttentionConfig {
    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn head_dim(&self, stage: usize) -> usize {
        self.stage_dim(stage) / self.num_heads[stage]
    }

    /// Token grid side at `stage`.
    pub fn stage_grid(&self, stage: usize) -> usize {
        (self.img_size / self.patch_size) >> stage
    }

    /// Effective window at `stage` after clamping to the grid.
    pub fn stage_window(&self, stage: usize) -> usize {
        self.window.min(self.stage_grid(stage))
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() {
            return Err(Error::Config("depths must name at least one stage".into()));
        }
        if self.depths.len() != self.num_heads.len() {
            return Err(Error::Config(format!(
                "depths ({}) and num_heads ({}) must have equal length",
                self.depths.len(),
                self.num_heads.len()
            )));
        }
        if self.patch_size == 0 || self.window == 0 || self.embed_dim == 0 {
            return Err(Error::Config(
                "patch_size, window and embed_dim must be positive".into(),
            ));
        }
        if self.img_size % self.patch_size != 0 {
            return Err(Error::Dimension(format!(
                "img_size {} not divisible by patch_size {}",
                self.img_size, self.patch_size
            )));
        }
        let base = self.img_size / self.patch_size;
        let down = 1 << (self.stages() - 1);
        if base % down != 0 {
            return Err(Error::Dimension(format!(
                "token grid {} not divisible by the {}x stage downsampling",
                base, down
            )));
        }
        for i in 0..self.stages() {
            let dim = self.stage_dim(i);
            let heads = self.num_heads[i];
            if heads == 0 || dim % heads != 0 {
                return Err(Error::Config(format!(
                    "stage {} dim {} not divisible by {} heads",
                    i, dim, heads
                )));
            }
            let g = self.stage_grid(i);
            if g == 0 {
                return Err(Error::Dimension(format!(
                    "stage {} token grid collapsed to zero (img_size {} too small)",
                    i, self.img_size
                )));
            }
            let m = self.stage_window(i);
            if g % m != 0 {
                return Err(Error::Dimension(format!(
                    "stage {} grid {} not divisible by window {}",
                    i, g, m
                )));
            }
        }
        Ok(())
    }

    /// Check a concrete input against this configuration.
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
        if h != self.img_size || w != self.img_size {
            return Err(Error::Dimension(format!(
                "input {}x{} does not match configured size {}x{}; the side must be \
                 divisible by patch size {} and by {} across stages",
                h,
                w,
                self.img_size,
                self.img_size,
                self.patch_size,
                self.patch_size << (self.stages() - 1),
            )));
        }
        Ok(())
    }
}

/// Non-overlapping patch projection to the initial token grid.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub norm: LayerNorm,
    pub patch: usize,
    pub in_ch: usize,
}

pub struct PatchEmbedCache {
    patches: Array2<f64>,
    ln: LayerNormCache,
}

impl PatchEmbed {
    pub fn new(patch: usize, in_ch: usize, dim: usize, rng: &mut Prng) -> Self {
        PatchEmbed {
            proj: Linear::new(patch * patch * in_ch, dim, true, rng),
            norm: LayerNorm::new(dim),
            patch,
            in_ch,
        }
    }

    /// `x`: `[B, C, H, W]` image, C = 1 (replicated to `in_ch` if needed).
    /// Returns the token grid `[B, H/p, W/p, dim]`.
    pub fn forward(&self, x: &ArrayView4<'_, f64>) -> Result<(Array4<f64>, PatchEmbedCache)> {
        let (b, c, h, w) = x.dim();
        let p = self.patch;
        if h % p != 0 {
            return Err(Error::Dimension(format!(
                "input height {} not divisible by patch size {}",
                h, p
            )));
        }
        if w % p != 0 {
            return Err(Error::Dimension(format!(
                "input width {} not divisible by patch size {}",
                w, p
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let mut patches = Array2::zeros((b * gh * gw, p * p * self.in_ch));
        for bi in 0..b {
            for gi in 0..gh {
                for gj in 0..gw {
                    let row = (bi * gh + gi) * gw + gj;
                    for pi in 0..p {
                        for pj in 0..p {
                            for ci in 0..self.in_ch {
                                // replicate the single channel when in_ch > c
                                let src = if ci < c { ci } else { 0 };
                                patches[(row, (pi * p + pj) * self.in_ch + ci)] =
                                    x[(bi, src, gi * p + pi, gj * p + pj)];
                            }
                        }
                    }
                }
            }
        }
        let t = self.proj.forward(patches.view());
        let (y, ln) = self.norm.forward(t.view());
        let dim = self.proj.out_dim();
        let grid = y.into_shape_with_order((b, gh, gw, dim)).unwrap();
        Ok((grid, PatchEmbedCache { patches, ln }))
    }

    pub fn backward(&mut self, cache: &PatchEmbedCache, dy: &ArrayView4<'_, f64>) {
        let (b, gh, gw, dim) = dy.dim();
        let flat = dy.to_shape((b * gh * gw, dim)).unwrap();
        let dt = self.norm.backward(&cache.ln, flat.view());
        self.proj.backward(cache.patches.view(), dt.view());
    }
}

impl Parameterized for PatchEmbed {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.proj.visit(&join(prefix, "proj"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// One pre-norm transformer block on a token grid: windowed attention
/// (cyclically shifted in every second block) and a token-wise MLP, each
/// behind a residual connection.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub window: usize,
    pub shifted: bool,
}

pub struct SwinBlockCache {
    ln1: LayerNormCache,
    attn: AttnCache,
    ln2: LayerNormCache,
    mlp: MlpCache,
    shift: usize,
    m: usize,
}

impl SwinBlock {
    pub fn new(
        dim: usize,
        heads: usize,
        window: usize,
        shifted: bool,
        rel_bias: bool,
        rng: &mut Prng,
    ) -> Self {
        SwinBlock {
            norm1: LayerNorm::new(dim),
            attn: WindowAttention::new(dim, heads, window, rel_bias, rng),
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, 4 * dim, rng),
            window,
            shifted,
        }
    }

    fn geometry(&self, gh: usize, gw: usize) -> Result<(usize, usize)> {
        let g = gh.min(gw);
        let m = self.window.min(g);
        if gh % m != 0 || gw % m != 0 {
            return Err(Error::Dimension(format!(
                "token grid {}x{} not divisible by window {}",
                gh, gw, m
            )));
        }
        let shift = if self.shifted && g > m { m / 2 } else { 0 };
        Ok((m, shift))
    }

    pub fn forward(&self, x: &ArrayView4<'_, f64>) -> Result<(Array4<f64>, SwinBlockCache)> {
        let (b, gh, gw, c) = x.dim();
        let (m, shift) = self.geometry(gh, gw)?;
        let flat = x.to_shape((b * gh * gw, c)).unwrap();
        let (n1, ln1) = self.norm1.forward(flat.view());
        let grid = n1.into_shape_with_order((b, gh, gw, c)).unwrap();
        let grid = if shift > 0 {
            roll2d(&grid.view(), -(shift as isize), -(shift as isize))
        } else {
            grid
        };
        let wins = window_partition(&grid.view(), m);
        let mask = if shift > 0 { attn_mask(gh, gw, m, shift) } else { None };
        let (aw, attnc) = self.attn.forward(&wins.view(), mask.as_ref());
        let ar = window_reverse(&aw.view(), m, b, gh, gw);
        let ar = if shift > 0 {
            roll2d(&ar.view(), shift as isize, shift as isize)
        } else {
            ar
        };
        let h = x.to_owned() + &ar;
        let hflat = h.to_shape((b * gh * gw, c)).unwrap();
        let (n2, ln2) = self.norm2.forward(hflat.view());
        let (mo, mlpc) = self.mlp.forward(n2.view());
        let y = h + &mo.into_shape_with_order((b, gh, gw, c)).unwrap();
        Ok((y, SwinBlockCache { ln1, attn: attnc, ln2, mlp: mlpc, shift, m }))
    }

    pub fn backward(&mut self, cache: &SwinBlockCache, dy: &ArrayView4<'_, f64>) -> Array4<f64> {
        let (b, gh, gw, c) = dy.dim();
        let (m, shift) = (cache.m, cache.shift);
        let dyf = dy.to_shape((b * gh * gw, c)).unwrap();
        let dn2 = self.mlp.backward(&cache.mlp, dyf.view());
        let dh_ln = self.norm2.backward(&cache.ln2, dn2.view());
        let dh = dy.to_owned() + &dh_ln.into_shape_with_order((b, gh, gw, c)).unwrap();

        let dar = if shift > 0 {
            roll2d(&dh.view(), -(shift as isize), -(shift as isize))
        } else {
            dh.clone()
        };
        let dwins = window_partition(&dar.view(), m);
        let dwin_in = self.attn.backward(&cache.attn, &dwins.view());
        let dgrid = window_reverse(&dwin_in.view(), m, b, gh, gw);
        let dgrid = if shift > 0 {
            roll2d(&dgrid.view(), shift as isize, shift as isize)
        } else {
            dgrid
        };
        let dn1 = dgrid.to_shape((b * gh * gw, c)).unwrap().to_owned();
        let dx_ln = self.norm1.backward(&cache.ln1, dn1.view());
        dh + &dx_ln.into_shape_with_order((b, gh, gw, c)).unwrap()
    }
}

impl Parameterized for SwinBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// 4-to-1 token concatenation followed by a linear reduction to 2C.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduce: Linear,
}

pub struct PatchMergeCache {
    normed: Array2<f64>,
    ln: LayerNormCache,
}

impl PatchMerge {
    pub fn new(dim: usize, rng: &mut Prng) -> Self {
        PatchMerge {
            norm: LayerNorm::new(4 * dim),
            reduce: Linear::new(4 * dim, 2 * dim, false, rng),
        }
    }

    pub fn forward(&self, x: &ArrayView4<'_, f64>) -> Result<(Array4<f64>, PatchMergeCache)> {
        let (b, h, w, c) = x.dim();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "patch merge needs an even grid, got {}x{}",
                h, w
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut gathered = Array2::zeros((b * oh * ow, 4 * c));
        for bi in 0..b {
            for i in 0..oh {
                for j in 0..ow {
                    let row = (bi * oh + i) * ow + j;
                    // quadrant order: (0,0), (1,0), (0,1), (1,1)
                    for (q, (di, dj)) in [(0, 0), (1, 0), (0, 1), (1, 1)].iter().enumerate() {
                        for ci in 0..c {
                            gathered[(row, q * c + ci)] = x[(bi, 2 * i + di, 2 * j + dj, ci)];
                        }
                    }
                }
            }
        }
        let (n, ln) = self.norm.forward(gathered.view());
        let y = self.reduce.forward(n.view());
        let grid = y.into_shape_with_order((b, oh, ow, 2 * c)).unwrap();
        Ok((grid, PatchMergeCache { normed: n, ln }))
    }

    pub fn backward(&mut self, cache: &PatchMergeCache, dy: &ArrayView4<'_, f64>) -> Array4<f64> {
        let (b, oh, ow, c2) = dy.dim();
        let c = c2 / 2;
        let flat = dy.to_shape((b * oh * ow, c2)).unwrap();
        let dn = self.reduce.backward(cache.normed.view(), flat.view());
        let dg = self.norm.backward(&cache.ln, dn.view());
        let mut dx = Array4::zeros((b, 2 * oh, 2 * ow, c));
        for bi in 0..b {
            for i in 0..oh {
                for j in 0..ow {
                    let row = (bi * oh + i) * ow + j;
                    for (q, (di, dj)) in [(0, 0), (1, 0), (0, 1), (1, 1)].iter().enumerate() {
                        for ci in 0..c {
                            dx[(bi, 2 * i + di, 2 * j + dj, ci)] = dg[(row, q * c + ci)];
                        }
                    }
                }
            }
        }
        dx
    }
}

impl Parameterized for PatchMerge {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.reduce.visit(&join(prefix, "reduce"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
    }
}

/// Linear expansion followed by a pixel-shuffle style rearrangement.
/// `factor = 2` halves the dimension while doubling the grid; `factor = 4`
/// (the final expansion) keeps the dimension and quadruples the grid.
#[derive(Debug, Clone)]
pub struct PatchExpand {
    pub expand: Linear,
    pub norm: LayerNorm,
    pub factor: usize,
}

pub struct PatchExpandCache {
    x: Array2<f64>,
    ln: LayerNormCache,
}

impl PatchExpand {
    pub fn new(dim: usize, factor: usize, rng: &mut Prng) -> Result<Self> {
        let out_dim = match factor {
            2 => {
                if dim % 2 != 0 {
                    return Err(Error::Dimension(format!(
                        "patch expand needs an even dim, got {}",
                        dim
                    )));
                }
                dim / 2
            }
            4 => dim,
            _ => return Err(Error::Config(format!("unsupported expand factor {}", factor))),
        };
        Ok(PatchExpand {
            expand: Linear::new(dim, factor * factor * out_dim, false, rng),
            norm: LayerNorm::new(out_dim),
            factor,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.norm.dim()
    }

    pub fn forward(&self, x: &ArrayView4<'_, f64>) -> Result<(Array4<f64>, PatchExpandCache)> {
        let (b, h, w, c) = x.dim();
        if c != self.expand.in_dim() {
            return Err(Error::Dimension(format!(
                "patch expand built for dim {}, got {}",
                self.expand.in_dim(),
                c
            )));
        }
        let p = self.factor;
        let oc = self.out_dim();
        let flat = x.to_shape((b * h * w, c)).unwrap();
        let t = self.expand.forward(flat.view());
        // [b*h*w, p*p*oc] -> [b, h*p, w*p, oc]
        let mut grid = Array4::zeros((b, h * p, w * p, oc));
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let row = (bi * h + i) * w + j;
                    for pi in 0..p {
                        for pj in 0..p {
                            for ci in 0..oc {
                                grid[(bi, i * p + pi, j * p + pj, ci)] =
                                    t[(row, (pi * p + pj) * oc + ci)];
                            }
                        }
                    }
                }
            }
        }
        let gflat = grid.to_shape((b * h * p * w * p, oc)).unwrap();
        let (n, ln) = self.norm.forward(gflat.view());
        let y = n.into_shape_with_order((b, h * p, w * p, oc)).unwrap();
        Ok((y, PatchExpandCache { x: flat.to_owned(), ln }))
    }

    pub fn backward(&mut self, cache: &PatchExpandCache, dy: &ArrayView4<'_, f64>) -> Array4<f64> {
        let (b, hp, wp, oc) = dy.dim();
        let p = self.factor;
        let (h, w) = (hp / p, wp / p);
        let c = self.expand.in_dim();
        let dyf = dy.to_shape((b * hp * wp, oc)).unwrap();
        let dg = self.norm.backward(&cache.ln, dyf.view());
        let dgrid = dg.into_shape_with_order((b, hp, wp, oc)).unwrap();
        let mut dt = Array2::zeros((b * h * w, p * p * oc));
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let row = (bi * h + i) * w + j;
                    for pi in 0..p {
                        for pj in 0..p {
                            for ci in 0..oc {
                                dt[(row, (pi * p + pj) * oc + ci)] =
                                    dgrid[(bi, i * p + pi, j * p + pj, ci)];
                            }
                        }
                    }
                }
            }
        }
        let dx = self.expand.backward(cache.x.view(), dt.view());
        dx.into_shape_with_order((b, h, w, c)).unwrap()
    }
}

impl Parameterized for PatchExpand {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.expand.visit(&join(prefix, "expand"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.expand.visit_mut(&join(prefix, "expand"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// U-shaped windowed-attention segmentation network: patch embedding,
/// hierarchical encoder with merges, mirrored decoder with expands and
/// concatenation+linear skip fusion, 4x final expansion, linear class head.
#[derive(Debug, Clone)]
pub struct VitNet {
    pub cfg: AttentionConfig,
    pub num_classes: usize,
    embed: PatchEmbed,
    enc: Vec<Vec<SwinBlock>>,
    merges: Vec<PatchMerge>,
    norm_enc: LayerNorm,
    expands: Vec<PatchExpand>,
    fuses: Vec<Linear>,
    dec: Vec<Vec<SwinBlock>>,
    norm_up: LayerNorm,
    final_expand: PatchExpand,
    head: Linear,
}

pub struct VitCache {
    embed: PatchEmbedCache,
    enc: Vec<Vec<SwinBlockCache>>,
    merges: Vec<PatchMergeCache>,
    norm_enc: LayerNormCache,
    /// Concatenated [decoder, skip] inputs of each fuse layer.
    fuse_in: Vec<Array2<f64>>,
    expands: Vec<PatchExpandCache>,
    dec: Vec<Vec<SwinBlockCache>>,
    norm_up: LayerNormCache,
    final_expand: PatchExpandCache,
    /// Input rows of the class head.
    head_in: Array2<f64>,
    grids: Vec<usize>,
}

impl VitNet {
    pub fn new(cfg: AttentionConfig, num_classes: usize, rng: &mut Prng) -> Result<Self> {
        cfg.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let in_ch = if cfg.replicate_input { 3 } else { 1 };
        let stages = cfg.stages();
        let embed = PatchEmbed::new(cfg.patch_size, in_ch, cfg.embed_dim, rng);
        let mut enc = Vec::new();
        let mut merges = Vec::new();
        for i in 0..stages {
            let mut blocks = Vec::new();
            for j in 0..cfg.depths[i] {
                blocks.push(SwinBlock::new(
                    cfg.stage_dim(i),
                    cfg.num_heads[i],
                    cfg.stage_window(i),
                    j % 2 == 1,
                    cfg.rel_bias,
                    rng,
                ));
            }
            enc.push(blocks);
            if i + 1 < stages {
                merges.push(PatchMerge::new(cfg.stage_dim(i), rng));
            }
        }
        let norm_enc = LayerNorm::new(cfg.stage_dim(stages - 1));
        let mut expands = Vec::new();
        let mut fuses = Vec::new();
        let mut dec = Vec::new();
        for k in 0..stages - 1 {
            // decoder step k goes from stage (stages-1-k) down to (stages-2-k)
            let hi = stages - 1 - k;
            let lo = hi - 1;
            expands.push(PatchExpand::new(cfg.stage_dim(hi), 2, rng)?);
            fuses.push(Linear::new(2 * cfg.stage_dim(lo), cfg.stage_dim(lo), false, rng));
            let mut blocks = Vec::new();
            for j in 0..cfg.depths[lo] {
                blocks.push(SwinBlock::new(
                    cfg.stage_dim(lo),
                    cfg.num_heads[lo],
                    cfg.stage_window(lo),
                    j % 2 == 1,
                    cfg.rel_bias,
                    rng,
                ));
            }
            dec.push(blocks);
        }
        let norm_up = LayerNorm::new(cfg.embed_dim);
        let final_expand = PatchExpand::new(cfg.embed_dim, 4, rng)?;
        let head = Linear::new(cfg.embed_dim, num_classes, true, rng);
        Ok(VitNet {
            cfg,
            num_classes,
            embed,
            enc,
            merges,
            norm_enc,
            expands,
            fuses,
            dec,
            norm_up,
            final_expand,
            head,
        })
    }

    /// Forward pass on `[B, 1, H, W]` producing logits `[B, K, H, W]` and
    /// the cache consumed by [`VitNet::backward`].
    pub fn forward_train(&self, x: &ArrayView4<'_, f64>) -> Result<(Array4<f64>, VitCache)> {
        let (b, c, h, w) = x.dim();
        self.cfg.validate_input(b, c, h, w)?;
        let stages = self.cfg.stages();
        let mut grids = Vec::new();

        let (mut t, embed_cache) = self.embed.forward(x)?;
        let mut enc_caches = Vec::new();
        let mut merge_caches = Vec::new();
        let mut skips: Vec<Array4<f64>> = Vec::new();
        for i in 0..stages {
            grids.push(t.dim().1);
            if i + 1 < stages {
                skips.push(t.clone());
            }
            let mut stage_caches = Vec::new();
            for blk in &self.enc[i] {
                let (y, cache) = blk.forward(&t.view())?;
                t = y;
                stage_caches.push(cache);
            }
            enc_caches.push(stage_caches);
            if i + 1 < stages {
                let (y, cache) = self.merges[i].forward(&t.view())?;
                t = y;
                merge_caches.push(cache);
            }
        }
        let (bb, gh, gw, cc) = t.dim();
        let tflat = t.to_shape((bb * gh * gw, cc)).unwrap();
        let (n, norm_enc_cache) = self.norm_enc.forward(tflat.view());
        t = n.into_shape_with_order((bb, gh, gw, cc)).unwrap();

        let mut fuse_in = Vec::new();
        let mut expand_caches = Vec::new();
        let mut dec_caches = Vec::new();
        for k in 0..stages - 1 {
            let (y, cache) = self.expands[k].forward(&t.view())?;
            expand_caches.push(cache);
            let skip = &skips[stages - 2 - k];
            let (db, dh, dw, dc) = y.dim();
            let cat = concatenate(
                Axis(3),
                &[y.view(), skip.view()],
            )
            .unwrap();
            let cat2 = cat.to_shape((db * dh * dw, 2 * dc)).unwrap().to_owned();
            let fused = self.fuses[k].forward(cat2.view());
            fuse_in.push(cat2);
            t = fused.into_shape_with_order((db, dh, dw, dc)).unwrap();
            grids.push(dh);
            let mut stage_caches = Vec::new();
            for blk in &self.dec[k] {
                let (y, cache) = blk.forward(&t.view())?;
                t = y;
                stage_caches.push(cache);
            }
            dec_caches.push(stage_caches);
        }

        let (bb, gh, gw, cc) = t.dim();
        let tflat = t.to_shape((bb * gh * gw, cc)).unwrap();
        let (n, norm_up_cache) = self.norm_up.forward(tflat.view());
        let t = n.into_shape_with_order((bb, gh, gw, cc)).unwrap();
        let (full, final_cache) = self.final_expand.forward(&t.view())?;
        let (fb, fh, fw, fc) = full.dim();
        grids.push(fh);
        let head_in = full.to_shape((fb * fh * fw, fc)).unwrap().to_owned();
        let logits_rows = self.head.forward(head_in.view());
        let k = self.num_classes;
        let mut logits = Array4::zeros((fb, k, fh, fw));
        for bi in 0..fb {
            for i in 0..fh {
                for j in 0..fw {
                    let row = (bi * fh + i) * fw + j;
                    for ci in 0..k {
                        logits[(bi, ci, i, j)] = logits_rows[(row, ci)];
                    }
                }
            }
        }
        Ok((
            logits,
            VitCache {
                embed: embed_cache,
                enc: enc_caches,
                merges: merge_caches,
                norm_enc: norm_enc_cache,
                fuse_in,
                expands: expand_caches,
                dec: dec_caches,
                norm_up: norm_up_cache,
                final_expand: final_cache,
                head_in,
                grids,
            },
        ))
    }

    /// Inference forward; identical math to the training pass.
    pub fn forward_eval(&self, x: &ArrayView4<'_, f64>) -> Result<Array4<f64>> {
        Ok(self.forward_train(x)?.0)
    }

    /// Token-grid sides seen along the forward pass, ending with the
    /// output resolution.
    pub fn grid_trace(&self, x: &ArrayView4<'_, f64>) -> Result<Vec<usize>> {
        Ok(self.forward_train(x)?.1.grids)
    }

    /// Accumulate parameter gradients from `dlogits` (`[B, K, H, W]`).
    pub fn backward(&mut self, cache: &VitCache, dlogits: &ArrayView4<'_, f64>) {
        let (b, k, h, w) = dlogits.dim();
        let stages = self.cfg.stages();
        let mut drows = Array2::zeros((b * h * w, k));
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let row = (bi * h + i) * w + j;
                    for ci in 0..k {
                        drows[(row, ci)] = dlogits[(bi, ci, i, j)];
                    }
                }
            }
        }
        let dfull = self.head.backward(cache.head_in.view(), drows.view());
        let c0 = self.cfg.embed_dim;
        let g0 = self.cfg.stage_grid(0);
        let dfull4 = dfull.into_shape_with_order((b, h, w, c0)).unwrap();
        let dt = self.final_expand.backward(&cache.final_expand, &dfull4.view());
        let dtflat = dt.to_shape((b * g0 * g0, c0)).unwrap();
        let dn = self.norm_up.backward(&cache.norm_up, dtflat.view());
        let mut dgrid = dn.into_shape_with_order((b, g0, g0, c0)).unwrap();

        let mut dskips: Vec<Option<Array4<f64>>> = vec![None; stages];
        for k in (0..stages - 1).rev() {
            for (blk, bc) in self.dec[k].iter_mut().zip(cache.dec[k].iter()).rev() {
                dgrid = blk.backward(bc, &dgrid.view());
            }
            let (db, dh, dw, dc) = dgrid.dim();
            let dflat = dgrid.to_shape((db * dh * dw, dc)).unwrap().to_owned();
            let dcat = self.fuses[k].backward(cache.fuse_in[k].view(), dflat.view());
            let dcat4 = dcat.into_shape_with_order((db, dh, dw, 2 * dc)).unwrap();
            let dy = dcat4.slice(s![.., .., .., ..dc]).to_owned();
            let dskip = dcat4.slice(s![.., .., .., dc..]).to_owned();
            dskips[stages - 2 - k] = Some(dskip);
            dgrid = self.expands[k].backward(&cache.expands[k], &dy.view());
        }

        let (bb, gh, gw, cc) = dgrid.dim();
        let dflat = dgrid.to_shape((bb * gh * gw, cc)).unwrap().to_owned();
        let dn = self.norm_enc.backward(&cache.norm_enc, dflat.view());
        let mut dt = dn.into_shape_with_order((bb, gh, gw, cc)).unwrap();

        for i in (0..stages).rev() {
            if i + 1 < stages {
                dt = self.merges[i].backward(&cache.merges[i], &dt.view());
            }
            for (blk, bc) in self.enc[i].iter_mut().zip(cache.enc[i].iter()).rev() {
                dt = blk.backward(bc, &dt.view());
            }
            if let Some(ds) = &dskips[i] {
                dt += ds;
            }
        }
        self.embed.backward(&cache.embed, &dt.view());
    }
}

impl Parameterized for VitNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.embed.visit(&join(prefix, "embed"), f);
        for (i, stage) in self.enc.iter().enumerate() {
            for (j, blk) in stage.iter().enumerate() {
                blk.visit(&join(prefix, &format!("enc{}.b{}", i, j)), f);
            }
        }
        for (i, m) in self.merges.iter().enumerate() {
            m.visit(&join(prefix, &format!("merge{}", i)), f);
        }
        self.norm_enc.visit(&join(prefix, "norm_enc"), f);
        for (k, e) in self.expands.iter().enumerate() {
            e.visit(&join(prefix, &format!("expand{}", k)), f);
        }
        for (k, fu) in self.fuses.iter().enumerate() {
            fu.visit(&join(prefix, &format!("fuse{}", k)), f);
        }
        for (k, stage) in self.dec.iter().enumerate() {
            for (j, blk) in stage.iter().enumerate() {
                blk.visit(&join(prefix, &format!("dec{}.b{}", k, j)), f);
            }
        }
        self.norm_up.visit(&join(prefix, "norm_up"), f);
        self.final_expand.visit(&join(prefix, "final"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        for (i, stage) in self.enc.iter_mut().enumerate() {
            for (j, blk) in stage.iter_mut().enumerate() {
                blk.visit_mut(&join(prefix, &format!("enc{}.b{}", i, j)), f);
            }
        }
        for (i, m) in self.merges.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &format!("merge{}", i)), f);
        }
        self.norm_enc.visit_mut(&join(prefix, "norm_enc"), f);
        for (k, e) in self.expands.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("expand{}", k)), f);
        }
        for (k, fu) in self.fuses.iter_mut().enumerate() {
            fu.visit_mut(&join(prefix, &format!("fuse{}", k)), f);
        }
        for (k, stage) in self.dec.iter_mut().enumerate() {
            for (j, blk) in stage.iter_mut().enumerate() {
                blk.visit_mut(&join(prefix, &format!("dec{}.b{}", k, j)), f);
            }
        }
        self.norm_up.visit_mut(&join(prefix, "norm_up"), f);
        self.final_expand.visit_mut(&join(prefix, "final"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Tokens-form view of a grid: `[B, H, W, C]` -> `[B, H*W, C]`.
pub fn grid_to_tokens(x: &ArrayView4<'_, f64>) -> Array3<f64> {
    let (b, h, w, c) = x.dim();
    x.to_shape((b, h * w, c)).unwrap().to_owned()
}

/// Standalone patch embedding returning tokens `[B, N, C]` per the module
/// interface; used directly by shape tests.
pub fn patch_embed_tokens(
    pe: &PatchEmbed,
    x: &ArrayView4<'_, f64>,
) -> Result<(Array3<f64>, PatchEmbedCache)> {
    let (grid, cache) = pe.forward(x)?;
    Ok((grid_to_tokens(&grid.view()), cache))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_param_grad, FD_TOL};
    use crate::nn::init::{seeded, uniform};
    use crate::nn::param::{num_params, zero_grads};
    use ndarray::{Array3, ArrayView3};

    fn tiny_cfg() -> AttentionConfig {
        AttentionConfig {
            img_size: 16,
            patch_size: 4,
            embed_dim: 8,
            depths: vec![2, 2],
            num_heads: vec![2, 4],
            window: 2,
            rel_bias: true,
            replicate_input: false,
        }
    }

    fn rand4(shape: [usize; 4], seed: u64) -> Array4<f64> {
        let mut rng = seeded(seed);
        uniform(&shape, -1.0, 1.0, &mut rng)
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
    }

    #[test]
    fn patch_embed_shapes() {
        let mut rng = seeded(40);
        let pe = PatchEmbed::new(4, 1, 96, &mut rng);
        let x = rand4([2, 1, 8, 8], 41);
        let (tokens, _) = patch_embed_tokens(&pe, &x.view()).unwrap();
        assert_eq!(tokens.dim(), (2, 4, 96));
    }

    #[test]
    fn patch_embed_zero_projection_gives_zero_tokens() {
        let mut rng = seeded(42);
        let mut pe = PatchEmbed::new(4, 1, 8, &mut rng);
        pe.proj.weight.value.fill(0.0);
        if let Some(b) = pe.proj.bias.as_mut() {
            b.value.fill(0.0);
        }
        let x = Array4::zeros((1, 1, 8, 8));
        let (tokens, _) = pe.forward(&x.view()).unwrap();
        assert!(tokens.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_embed_rejects_indivisible_input() {
        let mut rng = seeded(43);
        let pe = PatchEmbed::new(4, 1, 8, &mut rng);
        let x = Array4::<f64>::zeros((1, 1, 10, 8));
        let err = match pe.forward(&x.view()) {
            Err(e) => e,
            Ok(_) => panic!("expected a dimension error"),
        };
        assert!(format!("{err}").contains("height"));
    }

    #[test]
    fn merge_halves_grid_and_doubles_dim() {
        let mut rng = seeded(44);
        let m = PatchMerge::new(96, &mut rng);
        let x = rand4([1, 56, 56, 96], 45);
        let (y, _) = m.forward(&x.view()).unwrap();
        assert_eq!(y.dim(), (1, 28, 28, 192));
        let odd = rand4([1, 3, 4, 96], 46);
        assert!(m.forward(&odd.view()).is_err());
    }

    #[test]
    fn expand_doubles_grid_and_halves_dim() {
        let mut rng = seeded(47);
        let e = PatchExpand::new(768, 2, &mut rng).unwrap();
        let x = rand4([1, 7, 7, 768], 48);
        let (y, _) = e.forward(&x.view()).unwrap();
        assert_eq!(y.dim(), (1, 14, 14, 384));
        assert!(PatchExpand::new(7, 2, &mut rng).is_err());
    }

    #[test]
    fn expand_after_merge_restores_shape() {
        let mut rng = seeded(49);
        let m = PatchMerge::new(8, &mut rng);
        let e = PatchExpand::new(16, 2, &mut rng).unwrap();
        let x = rand4([1, 4, 4, 8], 50);
        let (merged, _) = m.forward(&x.view()).unwrap();
        let (back, _) = e.forward(&merged.view()).unwrap();
        assert_eq!(back.dim(), x.dim());
    }

    #[test]
    fn block_preserves_shape_and_zero_projections_are_identity() {
        let mut rng = seeded(51);
        // 7x7 grid with window 7: one window, no shift
        let mut blk = SwinBlock::new(96, 3, 7, true, true, &mut rng);
        blk.attn.proj.weight.value.fill(0.0);
        if let Some(b) = blk.attn.proj.bias.as_mut() {
            b.value.fill(0.0);
        }
        blk.mlp.fc2.weight.value.fill(0.0);
        if let Some(b) = blk.mlp.fc2.bias.as_mut() {
            b.value.fill(0.0);
        }
        let x = rand4([2, 7, 7, 96], 52);
        let (y, _) = blk.forward(&x.view()).unwrap();
        assert_eq!(y.dim(), (2, 7, 7, 96));
        for (a, b) in y.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn msa_single_token_window_is_value_projection() {
        let mut rng = seeded(53);
        let attn = WindowAttention::new(4, 2, 1, true, &mut rng);
        let x = uniform(&[3, 1, 4], -1.0, 1.0, &mut rng);
        let x3 = x.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let (y, _) = attn.forward(&x3, None);
        // expected: proj(V(x)) since the softmax over one key is 1
        let x2 = x.to_shape((3, 4)).unwrap().to_owned();
        let qkv = attn.qkv.forward(x2.view());
        let v = qkv.slice(s![.., 8..12]).to_owned();
        let want = attn.proj.forward(v.view());
        for (a, b) in y.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn msa_identical_tokens_attend_uniformly() {
        let mut rng = seeded(54);
        let attn = WindowAttention::new(4, 2, 2, false, &mut rng);
        let mut x = Array3::zeros((1, 4, 4));
        let row = uniform(&[4], -1.0, 1.0, &mut rng);
        for t in 0..4 {
            for c in 0..4 {
                x[(0, t, c)] = row[c];
            }
        }
        let (y, _) = attn.forward(&x.view(), None);
        for t in 1..4 {
            for c in 0..4 {
                assert!((y[(0, t, c)] - y[(0, 0, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn msa_matches_brute_force_oracle() {
        let mut rng = seeded(55);
        let heads = 2;
        let dim = 6;
        let hd = dim / heads;
        let attn = WindowAttention::new(dim, heads, 3, false, &mut rng);
        let x = uniform(&[1, 3, dim], -1.0, 1.0, &mut rng);
        let x3: ArrayView3<'_, f64> = x.view().into_dimensionality().unwrap();
        let (y, _) = attn.forward(&x3, None);

        // independent direct evaluation from the raw weights
        let x2 = x.to_shape((3, dim)).unwrap().to_owned();
        let qkv = attn.qkv.forward(x2.view());
        let scale = (hd as f64).powf(-0.5);
        let mut ctx = Array2::<f64>::zeros((3, dim));
        for h in 0..heads {
            for i in 0..3 {
                let mut scores = [0.0f64; 3];
                for j in 0..3 {
                    let mut dot = 0.0;
                    for d in 0..hd {
                        dot += qkv[(i, h * hd + d)] * qkv[(j, dim + h * hd + d)];
                    }
                    scores[j] = dot * scale;
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..3 {
                    let p = exps[j] / z;
                    for d in 0..hd {
                        ctx[(i, h * hd + d)] += p * qkv[(j, 2 * dim + h * hd + d)];
                    }
                }
            }
        }
        let want = attn.proj.forward(ctx.view());
        for (a, b) in y.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn block_pair_grads_match_fd() {
        let mut rng = seeded(56);
        // grid 4x4, window 2: the shifted block exercises masking
        let mut b0 = SwinBlock::new(4, 2, 2, false, true, &mut rng);
        let mut b1 = SwinBlock::new(4, 2, 2, true, true, &mut rng);
        let x = rand4([1, 4, 4, 4], 57);
        let w = rand4([1, 4, 4, 4], 58);
        zero_grads(&mut b0);
        zero_grads(&mut b1);
        let (y0, c0) = b0.forward(&x.view()).unwrap();
        let (_, c1) = b1.forward(&y0.view()).unwrap();
        let dy0 = b1.backward(&c1, &w.view());
        b0.backward(&c0, &dy0.view());

        let mut rng2 = seeded(59);
        let mut eval0 = |m: &mut SwinBlock| {
            let (y0, _) = m.forward(&x.view()).unwrap();
            let (y1, _) = b1.forward(&y0.view()).unwrap();
            (y1 * &w).sum()
        };
        for name in ["attn.qkv.weight", "mlp.fc1.weight", "norm1.gamma", "attn.rel_bias.table"] {
            let err = check_param_grad(&mut b0, name, 6, &mut rng2, &mut eval0);
            assert!(err < FD_TOL, "b0 {name} rel err {err}");
        }
        let mut eval1 = |m: &mut SwinBlock| {
            let (y0, _) = b0.forward(&x.view()).unwrap();
            let (y1, _) = m.forward(&y0.view()).unwrap();
            (y1 * &w).sum()
        };
        for name in ["attn.proj.weight", "mlp.fc2.bias", "norm2.beta"] {
            let err = check_param_grad(&mut b1, name, 6, &mut rng2, &mut eval1);
            assert!(err < FD_TOL, "b1 {name} rel err {err}");
        }
    }

    #[test]
    fn merge_and_expand_grads_match_fd() {
        let mut rng = seeded(60);
        let mut m = PatchMerge::new(8, &mut rng);
        let x = rand4([1, 4, 4, 8], 61);
        let w = rand4([1, 2, 2, 16], 62);
        zero_grads(&mut m);
        let (_, cache) = m.forward(&x.view()).unwrap();
        m.backward(&cache, &w.view());
        let mut rng2 = seeded(63);
        for name in ["reduce.weight", "norm.gamma", "norm.beta"] {
            let err = check_param_grad(&mut m, name, 8, &mut rng2, &mut |mm| {
                (mm.forward(&x.view()).unwrap().0 * &w).sum()
            });
            assert!(err < FD_TOL, "merge {name} rel err {err}");
        }

        let mut e = PatchExpand::new(8, 2, &mut rng).unwrap();
        let w2 = rand4([1, 8, 8, 4], 64);
        zero_grads(&mut e);
        let (_, cache) = e.forward(&x.view()).unwrap();
        e.backward(&cache, &w2.view());
        for name in ["expand.weight", "norm.gamma"] {
            let err = check_param_grad(&mut e, name, 8, &mut rng2, &mut |ee| {
                (ee.forward(&x.view()).unwrap().0 * &w2).sum()
            });
            assert!(err < FD_TOL, "expand {name} rel err {err}");
        }
    }

    #[test]
    fn vit_end_to_end_shapes_and_determinism() {
        let mut rng = seeded(65);
        let net = VitNet::new(tiny_cfg(), 3, &mut rng).unwrap();
        assert!(num_params(&net) > 0);
        let x = rand4([2, 1, 16, 16], 66);
        let (logits, _) = net.forward_train(&x.view()).unwrap();
        assert_eq!(logits.dim(), (2, 3, 16, 16));
        assert!(logits.iter().all(|v| v.is_finite()));
        let again = net.forward_eval(&x.view()).unwrap();
        assert_eq!(logits, again);
        let trace = net.grid_trace(&x.view()).unwrap();
        assert_eq!(trace, vec![4, 2, 4, 16]);
    }

    #[test]
    fn vit_rejects_wrong_size() {
        let mut rng = seeded(67);
        let net = VitNet::new(tiny_cfg(), 3, &mut rng).unwrap();
        let x = Array4::<f64>::zeros((1, 1, 20, 20));
        match net.forward_eval(&x.view()) {
            Err(Error::Dimension(msg)) => assert!(msg.contains("divisible")),
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn vit_full_net_param_grads_match_fd() {
        let mut rng = seeded(68);
        let mut net = VitNet::new(tiny_cfg(), 2, &mut rng).unwrap();
        let x = rand4([1, 1, 16, 16], 69);
        let w = rand4([1, 2, 16, 16], 70);
        zero_grads(&mut net);
        let (_, cache) = net.forward_train(&x.view()).unwrap();
        net.backward(&cache, &w.view());
        let mut rng2 = seeded(71);
        for name in [
            "embed.proj.weight",
            "enc0.b1.attn.qkv.weight",
            "merge0.reduce.weight",
            "norm_enc.gamma",
            "expand0.expand.weight",
            "fuse0.weight",
            "dec0.b0.mlp.fc1.weight",
            "final.expand.weight",
            "head.weight",
            "head.bias",
        ] {
            let err = check_param_grad(&mut net, name, 4, &mut rng2, &mut |m| {
                let (y, _) = m.forward_train(&x.view()).unwrap();
                (y * &w).sum()
            });
            assert!(err < FD_TOL, "{name} rel err {err}");
        }
    }
}
