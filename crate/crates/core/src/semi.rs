//! Semi-supervised machinery: argmax pseudo labels, the exponential
//! moving-average teacher update, the consistency ramp schedule and input
//! perturbation.

use ndarray::{Array3, Array4, ArrayView4};
use rand::RngExt;

use crate::data::SegBatch;
use crate::error::{Error, Result};
use crate::nn::init::derive;
use crate::nn::param::{named_params, Parameterized};

/// Per-pixel argmax over the class channel. No gradient flows through the
/// result; ties resolve to the lowest class id.
pub fn pseudo_label(logits: &ArrayView4<'_, f64>) -> Array3<u8> {
    let (b, k, h, w) = logits.dim();
    debug_assert!(k <= u8::MAX as usize + 1);
    Array3::from_shape_fn((b, h, w), |(bi, i, j)| {
        let mut best = 0usize;
        let mut bv = logits[(bi, 0, i, j)];
        for c in 1..k {
            let v = logits[(bi, c, i, j)];
            if v > bv {
                bv = v;
                best = c;
            }
        }
        best as u8
    })
}

/// Step counter and cap defining the teacher averaging factor
/// α(t) = min(1 − 1/(t+1), alpha_cap); α(0) = 0, so the first update
/// copies the student.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EmaState {
    pub t: u64,
    pub alpha_cap: f64,
}

impl EmaState {
    pub fn new(alpha_cap: f64) -> Result<Self> {
        if !(alpha_cap > 0.0 && alpha_cap <= 1.0) {
            return Err(Error::Config(format!(
                "alpha_cap must be in (0, 1], got {alpha_cap}"
            )));
        }
        Ok(EmaState { t: 0, alpha_cap })
    }

    pub fn alpha(&self) -> f64 {
        (1.0 - 1.0 / (self.t as f64 + 1.0)).min(self.alpha_cap)
    }
}

/// θ̄ ← α·θ̄ + (1−α)·θ element-wise over all trainable parameters, then
/// advance the step counter. Buffers (running statistics) are copied from
/// the student verbatim.
pub fn ema_update<M: Parameterized>(teacher: &mut M, student: &M, state: &mut EmaState) -> Result<()> {
    let alpha = state.alpha();
    let student_params = named_params(student);
    let mut err: Option<Error> = None;
    let mut idx = 0usize;
    teacher.visit_mut("", &mut |name, p| {
        if err.is_some() {
            return;
        }
        match student_params.get(idx) {
            Some((sname, sval)) if sname == name => {
                if sval.shape() != p.value.shape() {
                    err = Some(Error::Structure(format!(
                        "parameter {name}: student shape {:?} does not match teacher {:?}",
                        sval.shape(),
                        p.value.shape()
                    )));
                    return;
                }
                p.value.zip_mut_with(sval, |t, &s| *t = alpha * *t + (1.0 - alpha) * s);
            }
            Some((sname, _)) => {
                err = Some(Error::Structure(format!(
                    "parameter name mismatch: teacher has {name}, student has {sname}"
                )));
            }
            None => {
                err = Some(Error::Structure(format!(
                    "student is missing parameter {name}"
                )));
            }
        }
        idx += 1;
    });
    if err.is_none() && idx != student_params.len() {
        err = Some(Error::Structure(format!(
            "student has {} parameters, teacher visited {idx}",
            student_params.len()
        )));
    }
    if let Some(e) = err {
        return Err(e);
    }

    let mut student_bufs: Vec<ndarray::ArrayD<f64>> = Vec::new();
    student.visit_buffers("", &mut |_, b| student_bufs.push(b.clone()));
    let mut bi = 0usize;
    teacher.visit_buffers_mut("", &mut |_, b| {
        if let Some(sb) = student_bufs.get(bi) {
            *b = sb.clone();
        }
        bi += 1;
    });

    state.t += 1;
    Ok(())
}

/// Stepwise consistency ramp λ(t) = exp(−5·(1 − g(t)/t_max)²) where g(t)
/// snaps t down to the `update_every` grid (and exactly to t_max at the
/// end), so the weight is constant within each window.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RampSchedule {
    pub t_max: u64,
    pub update_every: u64,
}

impl RampSchedule {
    pub fn new(t_max: u64, update_every: u64) -> Result<Self> {
        if t_max == 0 || update_every == 0 {
            return Err(Error::Config(
                "t_max and update_every must be positive".into(),
            ));
        }
        Ok(RampSchedule { t_max, update_every })
    }

    pub fn weight(&self, t: u64) -> Result<f64> {
        if t > self.t_max {
            return Err(Error::Argument(format!(
                "ramp step {t} exceeds t_max {}",
                self.t_max
            )));
        }
        let g = if t == self.t_max { t } else { (t / self.update_every) * self.update_every };
        let r = 1.0 - g as f64 / self.t_max as f64;
        Ok((-5.0 * r * r).exp())
    }
}

/// Additive uniform noise with standard deviation ≈ `strength`, clipped
/// to ±0.2, applied to the unlabeled images of the batch only. Labeled
/// images and masks pass through untouched.
pub fn perturb(batch: &SegBatch, strength: f64, seed: u64) -> SegBatch {
    let mut out = batch.clone();
    if strength == 0.0 {
        return out;
    }
    let amp = (strength * 3f64.sqrt()).min(0.2);
    let mut rng = derive(seed, "perturb");
    let (b, _, h, w) = out.images.dim();
    for bi in batch.labeled_count..b {
        for i in 0..h {
            for j in 0..w {
                out.images[(bi, 0, i, j)] += rng.random_range(-amp..=amp);
            }
        }
    }
    out
}

/// Noise on a raw image tensor (used for teacher-input perturbation at
/// evaluation ablations); same law as [`perturb`].
pub fn perturb_images(images: &ArrayView4<'_, f64>, strength: f64, seed: u64) -> Array4<f64> {
    let mut out = images.to_owned();
    if strength == 0.0 {
        return out;
    }
    let amp = (strength * 3f64.sqrt()).min(0.2);
    let mut rng = derive(seed, "perturb");
    out.mapv_inplace(|v| v + rng.random_range(-amp..=amp));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Learner,
    Teacher,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Learner => "learner",
            Role::Teacher => "teacher",
        })
    }
}

/// A named network slot in an assembled framework. Teachers carry the id
/// of the learner whose weights they average and never receive gradients.
pub struct NetworkHandle {
    pub id: String,
    pub role: Role,
    pub net: crate::backbones::Net,
    pub ema_source: Option<String>,
}

impl NetworkHandle {
    pub fn learner(id: &str, net: crate::backbones::Net) -> Self {
        NetworkHandle { id: id.to_string(), role: Role::Learner, net, ema_source: None }
    }

    pub fn teacher(id: &str, net: crate::backbones::Net, source: &str) -> Self {
        NetworkHandle {
            id: id.to_string(),
            role: Role::Teacher,
            net,
            ema_source: Some(source.to_string()),
        }
    }

    pub fn arch(&self) -> crate::backbones::NetKind {
        self.net.kind()
    }
}

/// Logit map produced by one handle for one batch. `cache` is present
/// only for trainable forward passes; teacher outputs carry none, so no
/// gradient can reach them.
pub struct Prediction {
    pub logits: Array4<f64>,
    pub source: String,
    pub trainable: bool,
    pub cache: Option<crate::backbones::NetCache>,
}

/// Runs every handle on the batch: learners in training mode (the EMA
/// source additionally sees the perturbed unlabeled images), teachers in
/// inference mode with no cache. Predictions come back in handle order.
pub fn forward_all(
    batch: &SegBatch,
    handles: &mut [NetworkHandle],
    perturb_strength: f64,
    seed: u64,
) -> Result<Vec<Prediction>> {
    if handles.is_empty() {
        return Err(Error::Argument("no handles to run".into()));
    }
    let k0 = handles[0].net.num_classes();
    for h in handles.iter() {
        if h.net.num_classes() != k0 {
            return Err(Error::Config(format!(
                "handle {} predicts {} classes, expected {k0}",
                h.id,
                h.net.num_classes()
            )));
        }
    }
    let ema_sources: Vec<String> = handles
        .iter()
        .filter_map(|h| h.ema_source.clone())
        .collect();
    let noisy = if perturb_strength > 0.0 && !ema_sources.is_empty() {
        Some(perturb(batch, perturb_strength, seed))
    } else {
        None
    };
    let mut out = Vec::with_capacity(handles.len());
    for h in handles.iter_mut() {
        let pred = match h.role {
            Role::Learner => {
                let images = match &noisy {
                    Some(n) if ema_sources.iter().any(|s| s == &h.id) => n.images.view(),
                    _ => batch.images.view(),
                };
                let (logits, cache) = h.net.forward_train(&images)?;
                Prediction { logits, source: h.id.clone(), trainable: true, cache: Some(cache) }
            }
            Role::Teacher => {
                let logits = h.net.forward_eval(&batch.images.view())?;
                Prediction { logits, source: h.id.clone(), trainable: false, cache: None }
            }
        };
        out.push(pred);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::{seeded, uniform};
    use crate::nn::linear::Linear;
    use ndarray::{Array3, Array4};

    #[test]
    fn pseudo_label_matches_brute_force_and_is_shift_invariant() {
        let mut rng = seeded(120);
        let logits = uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut rng)
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let lab = pseudo_label(&logits.view());
        for bi in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let mut best = 0;
                    for c in 1..3 {
                        if logits[(bi, c, i, j)] > logits[(bi, best, i, j)] {
                            best = c;
                        }
                    }
                    assert_eq!(lab[(bi, i, j)], best as u8);
                }
            }
        }
        let shifted = logits.mapv(|v| 3.0 * v + 7.0);
        assert_eq!(lab, pseudo_label(&shifted.view()));

        let mut forced = Array4::zeros((1, 4, 2, 2));
        forced.index_axis_mut(ndarray::Axis(1), 2).fill(5.0);
        assert!(pseudo_label(&forced.view()).iter().all(|&v| v == 2));
    }

    #[test]
    fn alpha_schedule() {
        let mut s = EmaState::new(0.99).unwrap();
        assert_eq!(s.alpha(), 0.0);
        s.t = 1;
        assert!((s.alpha() - 0.5).abs() < 1e-15);
        let mut prev = 0.0;
        for t in 0..2000 {
            s.t = t;
            let a = s.alpha();
            assert!(a >= prev && a <= 0.99);
            prev = a;
        }
        assert!(EmaState::new(0.0).is_err());
        assert!(EmaState::new(1.5).is_err());
    }

    #[test]
    fn ema_copies_then_midpoints_and_tracks_running_average() {
        let mut rng = seeded(121);
        let student = Linear::new(3, 2, true, &mut rng);
        let mut teacher = Linear::new(3, 2, true, &mut rng);
        let mut state = EmaState::new(0.99).unwrap();
        ema_update(&mut teacher, &student, &mut state).unwrap();
        assert_eq!(teacher.weight.value, student.weight.value);

        let snapshot = teacher.weight.value.clone();
        let mut student2 = student.clone();
        student2.weight.value += 1.0;
        ema_update(&mut teacher, &student2, &mut state).unwrap();
        for ((t, a), b) in teacher
            .weight
            .value
            .iter()
            .zip(snapshot.iter())
            .zip(student2.weight.value.iter())
        {
            assert!((t - 0.5 * (a + b)).abs() < 1e-12);
        }

        // alpha_cap = 1 gives the running mean of the inputs
        let mut mean_state = EmaState::new(1.0).unwrap();
        let mut avg = Linear::new(3, 2, true, &mut seeded(122));
        let mut expect = ndarray::ArrayD::<f64>::zeros(avg.weight.value.shape());
        for step in 0..100 {
            let mut s = student.clone();
            s.weight.value.mapv_inplace(|v| v + step as f64 * 0.01);
            ema_update(&mut avg, &s, &mut mean_state).unwrap();
            expect = &expect * (step as f64 / (step as f64 + 1.0))
                + &s.weight.value * (1.0 / (step as f64 + 1.0));
        }
        for (a, b) in avg.weight.value.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ema_converges_to_frozen_student() {
        let mut rng = seeded(123);
        let student = Linear::new(4, 4, true, &mut rng);
        let mut teacher = Linear::new(4, 4, true, &mut rng);
        let mut state = EmaState::new(0.99).unwrap();
        let mut last_gap = f64::INFINITY;
        for _ in 0..2000 {
            ema_update(&mut teacher, &student, &mut state).unwrap();
            let gap = teacher
                .weight
                .value
                .iter()
                .zip(student.weight.value.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(gap <= last_gap + 1e-15);
            last_gap = gap;
        }
        assert!(last_gap < 1e-6, "gap {last_gap}");
    }

    #[test]
    fn ema_rejects_shape_mismatch() {
        let mut rng = seeded(124);
        let student = Linear::new(3, 2, true, &mut rng);
        let mut teacher = Linear::new(2, 3, true, &mut rng);
        let mut state = EmaState::new(0.99).unwrap();
        let msg = format!(
            "{}",
            ema_update(&mut teacher, &student, &mut state).unwrap_err()
        );
        assert!(msg.contains("weight"), "{msg}");
    }

    #[test]
    fn ramp_endpoints_and_steps() {
        let r = RampSchedule::new(30000, 150).unwrap();
        assert!((r.weight(0).unwrap() - (-5.0f64).exp()).abs() < 1e-12);
        assert_eq!(r.weight(30000).unwrap(), 1.0);
        assert!((r.weight(15000).unwrap() - (-1.25f64).exp()).abs() < 1e-12);
        // stepwise: constant within a window
        assert_eq!(r.weight(149).unwrap(), r.weight(0).unwrap());
        assert_eq!(r.weight(150).unwrap(), r.weight(299).unwrap());
        let mut prev = 0.0;
        for t in 0..=30000 {
            let w = r.weight(t).unwrap();
            assert!(w >= prev);
            prev = w;
        }
        assert!(r.weight(30001).is_err());
    }

    #[test]
    fn forward_all_tags_roles_and_perturbs_only_the_ema_source() {
        use crate::backbones::{cnn, vit, Net};
        let vcfg = vit::AttentionConfig {
            img_size: 16,
            patch_size: 4,
            embed_dim: 8,
            depths: vec![2, 2],
            num_heads: vec![2, 4],
            window: 2,
            ..Default::default()
        };
        let ccfg = cnn::CnnConfig { base_width: 2, stages: 2 };
        let mut rng = seeded(126);
        let a = Net::Cnn(cnn::UNet::new(ccfg, 3, &mut rng).unwrap());
        let b = Net::Vit(vit::VitNet::new(vcfg.clone(), 3, &mut rng).unwrap());
        let c = Net::Vit(vit::VitNet::new(vcfg.clone(), 3, &mut rng).unwrap());
        let mut handles = vec![
            NetworkHandle::learner("net_a", a),
            NetworkHandle::learner("net_b", b),
            NetworkHandle::teacher("net_c", c, "net_b"),
        ];
        let mut state = EmaState::new(0.99).unwrap();
        let (students, teachers) = handles.split_at_mut(2);
        ema_update(&mut teachers[0].net, &students[1].net, &mut state).unwrap();

        let images = uniform(&[2, 1, 16, 16], 0.0, 1.0, &mut rng)
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let batch = SegBatch {
            images,
            masks: Array3::zeros((1, 16, 16)),
            labeled_count: 1,
            ids: vec!["p".into(), "q".into()],
        };

        let clean = forward_all(&batch, &mut handles, 0.0, 7).unwrap();
        assert_eq!(clean.len(), 3);
        assert_eq!(
            clean.iter().map(|p| p.source.as_str()).collect::<Vec<_>>(),
            ["net_a", "net_b", "net_c"]
        );
        assert_eq!(
            clean.iter().map(|p| p.trainable).collect::<Vec<_>>(),
            [true, true, false]
        );
        assert!(clean[0].cache.is_some() && clean[2].cache.is_none());
        for p in &clean {
            assert_eq!(p.logits.dim(), (2, 3, 16, 16));
        }
        // teacher was copied from net_b, so clean logits agree
        assert!(clean[1]
            .logits
            .iter()
            .zip(clean[2].logits.iter())
            .all(|(x, y)| (x - y).abs() < 1e-12));

        let noisy = forward_all(&batch, &mut handles, 0.1, 7).unwrap();
        assert_eq!(noisy[0].logits, clean[0].logits);
        assert_eq!(noisy[2].logits, clean[2].logits);
        assert_ne!(noisy[1].logits, clean[1].logits);

        let mut pair = handles.drain(..2).collect::<Vec<_>>();
        let two = forward_all(&batch, &mut pair, 0.1, 7).unwrap();
        assert_eq!(two.len(), 2);
        // no teacher, hence no EMA source, hence no perturbation
        assert_eq!(two[1].logits, clean[1].logits);
    }

    #[test]
    fn forward_all_rejects_class_count_mismatch() {
        use crate::backbones::{cnn, Net};
        let ccfg = cnn::CnnConfig { base_width: 2, stages: 2 };
        let mut rng = seeded(127);
        let mut handles = vec![
            NetworkHandle::learner("net_a", Net::Cnn(cnn::UNet::new(ccfg, 3, &mut rng).unwrap())),
            NetworkHandle::learner("net_b", Net::Cnn(cnn::UNet::new(ccfg, 2, &mut rng).unwrap())),
        ];
        let batch = SegBatch {
            images: Array4::zeros((2, 1, 16, 16)),
            masks: Array3::zeros((1, 16, 16)),
            labeled_count: 1,
            ids: vec!["p".into(), "q".into()],
        };
        let msg = match forward_all(&batch, &mut handles, 0.0, 7) {
            Err(e) => format!("{e}"),
            Ok(_) => panic!("class mismatch accepted"),
        };
        assert!(msg.contains("net_b") && msg.contains("classes"), "{msg}");
    }

    #[test]
    fn perturb_touches_only_unlabeled_and_is_bounded() {
        let mut rng = seeded(125);
        let images = uniform(&[4, 1, 6, 6], 0.0, 1.0, &mut rng)
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let batch = SegBatch {
            images: images.clone(),
            masks: Array3::zeros((2, 6, 6)),
            labeled_count: 2,
            ids: (0..4).map(|i| format!("c{i}")).collect(),
        };
        let out = perturb(&batch, 0.1, 9);
        for bi in 0..2 {
            for i in 0..6 {
                for j in 0..6 {
                    assert_eq!(out.images[(bi, 0, i, j)], images[(bi, 0, i, j)]);
                }
            }
        }
        let mut any_change = false;
        for bi in 2..4 {
            for i in 0..6 {
                for j in 0..6 {
                    let d = out.images[(bi, 0, i, j)] - images[(bi, 0, i, j)];
                    assert!(d.abs() <= 0.2 + 1e-12);
                    any_change |= d != 0.0;
                }
            }
        }
        assert!(any_change);
        assert_eq!(out.masks, batch.masks);
        assert_eq!(out.images, perturb(&batch, 0.1, 9).images);
        assert_eq!(perturb(&batch, 0.0, 9).images, images);
    }
}
