//! Evaluation measures: six confusion-count ratios plus exact Hausdorff
//! and average surface distance on class boundaries, per class and
//! averaged into a report.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Per-class pixel counts. `fn_` is the false-negative count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

pub fn confusion(
    pred: &ArrayView2<'_, u8>,
    gt: &ArrayView2<'_, u8>,
    class: u8,
) -> Result<ConfusionCounts> {
    if pred.dim() != gt.dim() {
        return Err(Error::Dimension(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut c = ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 0 };
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p == class, g == class) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Similarity {
    pub dice: f64,
    pub iou: f64,
    pub acc: f64,
    pub pre: f64,
    pub sen: f64,
    pub spe: f64,
}

/// Ratio with the absent-class convention: a zero denominator scores 1.0
/// when the complementary error count is also zero (the class is missing
/// from prediction and truth alike) and 0.0 otherwise.
fn ratio(num: u64, den: u64, other_miss: u64) -> f64 {
    if den == 0 {
        if other_miss == 0 { 1.0 } else { 0.0 }
    } else {
        num as f64 / den as f64
    }
}

pub fn similarity_metrics(c: &ConfusionCounts) -> Similarity {
    let total = c.tp + c.fp + c.fn_ + c.tn;
    Similarity {
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, 0),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_, 0),
        acc: ratio(c.tp + c.tn, total, 0),
        pre: ratio(c.tp, c.tp + c.fp, c.fn_),
        sen: ratio(c.tp, c.tp + c.fn_, c.fp),
        spe: ratio(c.tn, c.tn + c.fp, c.fn_),
    }
}

/// Mask pixels with at least one 4-neighbor outside the mask; positions
/// beyond the image edge count as outside, so border pixels qualify.
pub fn boundary(mask: &ArrayView2<'_, bool>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if !mask[(i, j)] {
                continue;
            }
            let exposed = i == 0
                || j == 0
                || i == h - 1
                || j == w - 1
                || !mask[(i - 1, j)]
                || !mask[(i + 1, j)]
                || !mask[(i, j - 1)]
                || !mask[(i, j + 1)];
            if exposed {
                out.push((i, j));
            }
        }
    }
    out
}

/// Squared one-dimensional distance transform (lower envelope of
/// parabolas); `f` holds squared source costs, infinities allowed as a
/// large finite sentinel by the caller.
fn dt1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut d = vec![0.0f64; n];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sect = |p: usize, q: usize| -> f64 {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * q - 2 * p) as f64
    };
    for q in 1..n {
        let mut s = sect(v[k], q);
        while s <= z[k] {
            k -= 1;
            s = sect(v[k], q);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dj = q as f64 - v[k] as f64;
        *dq = dj * dj + f[v[k]];
    }
    d
}

/// Exact Euclidean distance from every pixel to the nearest point of
/// `points` (which must be nonempty), via the two-pass squared transform.
fn distance_field(points: &[(usize, usize)], h: usize, w: usize) -> Array2<f64> {
    // a finite stand-in for "no source in this column": larger than any
    // achievable squared distance, so it never wins the envelope
    let large = ((h * h + w * w) as f64) + 1.0;
    let mut f = Array2::from_elem((h, w), large);
    // column pass: squared vertical distance to the nearest source above
    // or below, by two linear sweeps
    let mut col_dist = Array2::from_elem((h, w), f64::INFINITY);
    for &(i, j) in points {
        col_dist[(i, j)] = 0.0;
    }
    for j in 0..w {
        for i in 1..h {
            let up = col_dist[(i - 1, j)] + 1.0;
            if up < col_dist[(i, j)] {
                col_dist[(i, j)] = up;
            }
        }
        for i in (0..h.saturating_sub(1)).rev() {
            let dn = col_dist[(i + 1, j)] + 1.0;
            if dn < col_dist[(i, j)] {
                col_dist[(i, j)] = dn;
            }
        }
        for i in 0..h {
            let d = col_dist[(i, j)];
            if d.is_finite() {
                f[(i, j)] = d * d;
            }
        }
    }
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        let row: Vec<f64> = (0..w).map(|j| f[(i, j)]).collect();
        let dr = dt1d(&row);
        for j in 0..w {
            out[(i, j)] = dr[j].sqrt();
        }
    }
    out
}

fn check_same_shape(a: &ArrayView2<'_, bool>, b: &ArrayView2<'_, bool>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "masks {:?} and {:?} differ in shape",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn diag(h: usize, w: usize) -> f64 {
    ((h - 1) as f64).hypot((w - 1) as f64)
}

fn surface_distances(
    pred: &ArrayView2<'_, bool>,
    gt: &ArrayView2<'_, bool>,
) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    check_same_shape(pred, gt)?;
    let (h, w) = pred.dim();
    let bp = boundary(pred);
    let bg = boundary(gt);
    if bp.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    let to_gt = distance_field(&bg, h, w);
    let to_pred = distance_field(&bp, h, w);
    let dp: Vec<f64> = bp.iter().map(|&p| to_gt[p]).collect();
    let dg: Vec<f64> = bg.iter().map(|&p| to_pred[p]).collect();
    Ok(Some((dp, dg)))
}

/// Exact symmetric Hausdorff distance between the two mask boundaries.
/// Both masks empty scores 0; exactly one empty scores the image
/// diagonal.
pub fn hausdorff(pred: &ArrayView2<'_, bool>, gt: &ArrayView2<'_, bool>) -> Result<f64> {
    let (h, w) = pred.dim();
    match surface_distances(pred, gt)? {
        Some((dp, dg)) => Ok(dp
            .iter()
            .chain(dg.iter())
            .cloned()
            .fold(0.0, f64::max)),
        None => {
            if pred.iter().any(|&v| v) || gt.iter().any(|&v| v) {
                Ok(diag(h, w))
            } else {
                Ok(0.0)
            }
        }
    }
}

/// Average surface distance: the mean, over both boundaries pooled, of
/// each point's distance to the other boundary. Empty-mask conventions
/// as for [`hausdorff`].
pub fn asd(pred: &ArrayView2<'_, bool>, gt: &ArrayView2<'_, bool>) -> Result<f64> {
    let (h, w) = pred.dim();
    match surface_distances(pred, gt)? {
        Some((dp, dg)) => {
            let n = (dp.len() + dg.len()) as f64;
            Ok((dp.iter().sum::<f64>() + dg.iter().sum::<f64>()) / n)
        }
        None => {
            if pred.iter().any(|&v| v) || gt.iter().any(|&v| v) {
                Ok(diag(h, w))
            } else {
                Ok(0.0)
            }
        }
    }
}

pub fn class_mask(labels: &ArrayView2<'_, u8>, class: u8) -> Array2<bool> {
    labels.mapv(|v| v == class)
}

/// Case-averaged metrics for one class.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub dice: f64,
    pub iou: f64,
    pub acc: f64,
    pub pre: f64,
    pub sen: f64,
    pub spe: f64,
    pub hd: f64,
    pub asd: f64,
}

/// The eight reported measures, averaged over cases and the evaluated
/// classes, with the per-class breakdown retained.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub mdice: f64,
    pub miou: f64,
    pub acc: f64,
    pub pre: f64,
    pub sen: f64,
    pub spe: f64,
    pub hd: f64,
    pub asd: f64,
    pub per_class: Vec<ClassReport>,
}

impl MetricReport {
    pub fn csv_header() -> &'static str {
        "Framework,mDice,mIOU,Acc,Pre,Sen,Spe,HD,ASD"
    }

    pub fn csv_row(&self, name: &str) -> String {
        format!(
            "{name},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.mdice, self.miou, self.acc, self.pre, self.sen, self.spe, self.hd, self.asd
        )
    }

    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("mdice", self.mdice),
            ("miou", self.miou),
            ("acc", self.acc),
            ("pre", self.pre),
            ("sen", self.sen),
            ("spe", self.spe),
            ("hd", self.hd),
            ("asd", self.asd),
        ] {
            s.push_str(&format!("{k} = {v}\n"));
        }
        for c in &self.per_class {
            s.push_str(&format!(
                "class{}.dice = {}\nclass{}.iou = {}\nclass{}.hd = {}\nclass{}.asd = {}\n",
                c.class, c.dice, c.class, c.iou, c.class, c.hd, c.class, c.asd
            ));
        }
        s
    }
}

/// Evaluates predicted label maps against ground truth over the classes
/// `first_class..num_classes` (pass 1 to skip background, 0 to include
/// it), averaging per class across cases and then across classes.
pub fn evaluate_classes(
    preds: &[Array2<u8>],
    gts: &[Array2<u8>],
    num_classes: usize,
    first_class: usize,
) -> Result<MetricReport> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Argument(format!(
            "need equal nonempty prediction/truth sets, got {} and {}",
            preds.len(),
            gts.len()
        )));
    }
    if first_class >= num_classes {
        return Err(Error::Argument(format!(
            "first class {first_class} out of range for {num_classes} classes"
        )));
    }
    let n = preds.len() as f64;
    let mut per_class = Vec::new();
    for class in first_class..num_classes {
        let mut acc = [0.0f64; 8];
        for (p, g) in preds.iter().zip(gts.iter()) {
            for &v in p.iter().chain(g.iter()) {
                if v as usize >= num_classes {
                    return Err(Error::Argument(format!(
                        "label {v} out of range for {num_classes} classes"
                    )));
                }
            }
            let s = similarity_metrics(&confusion(&p.view(), &g.view(), class as u8)?);
            let pm = class_mask(&p.view(), class as u8);
            let gm = class_mask(&g.view(), class as u8);
            acc[0] += s.dice;
            acc[1] += s.iou;
            acc[2] += s.acc;
            acc[3] += s.pre;
            acc[4] += s.sen;
            acc[5] += s.spe;
            acc[6] += hausdorff(&pm.view(), &gm.view())?;
            acc[7] += asd(&pm.view(), &gm.view())?;
        }
        per_class.push(ClassReport {
            class,
            dice: acc[0] / n,
            iou: acc[1] / n,
            acc: acc[2] / n,
            pre: acc[3] / n,
            sen: acc[4] / n,
            spe: acc[5] / n,
            hd: acc[6] / n,
            asd: acc[7] / n,
        });
    }
    let k = per_class.len() as f64;
    let mean = |f: &dyn Fn(&ClassReport) -> f64| per_class.iter().map(f).sum::<f64>() / k;
    Ok(MetricReport {
        mdice: mean(&|c| c.dice),
        miou: mean(&|c| c.iou),
        acc: mean(&|c| c.acc),
        pre: mean(&|c| c.pre),
        sen: mean(&|c| c.sen),
        spe: mean(&|c| c.spe),
        hd: mean(&|c| c.hd),
        asd: mean(&|c| c.asd),
        per_class,
    })
}

/// Foreground-class evaluation (the reported "m" averages exclude the
/// background class 0).
pub fn evaluate(preds: &[Array2<u8>], gts: &[Array2<u8>], num_classes: usize) -> Result<MetricReport> {
    evaluate_classes(preds, gts, num_classes, 1)
}
