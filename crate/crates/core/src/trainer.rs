//! The optimization loop: momentum SGD over an assembled framework,
//! consistency ramping, teacher averaging, periodic validation and
//! best-checkpoint retention.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4, ArrayD};

use crate::backbones::{load_params, save_params};
use crate::data::{case_tensors, next_batch, Dataset, SplitManifest};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::nn::init::derive_seed;
use crate::nn::param::{zero_grads, Parameterized};
use crate::objectives::{semi_loss_grad, sup_loss_grad, total_loss, LossBreakdown, LossParts};
use crate::semi::{RampSchedule, Role};
use crate::topology::{instantiate, Assembly, FrameworkSpec, NetsConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Poly,
    Constant,
}

/// Optimization hyperparameters. `lambda2_scale` multiplies the ramp
/// weight for teacher-sourced consistency terms, decoupling λ2 from λ1
/// when set away from 1.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub max_iterations: u64,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub eval_every: u64,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    pub ramp_update_every: u64,
    pub perturb_strength: f64,
    pub lambda2_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iterations: 30000,
            batch_size: 24,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            eval_every: 200,
            seed: 1337,
            lr_schedule: LrSchedule::Poly,
            ramp_update_every: 150,
            perturb_strength: 0.1,
            lambda2_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 || self.perturb_strength < 0.0 || self.lambda2_scale < 0.0 {
            return Err(Error::Config(
                "weight_decay, perturb_strength and lambda2_scale must be nonnegative".into(),
            ));
        }
        if self.eval_every == 0 || self.ramp_update_every == 0 {
            return Err(Error::Config(
                "eval_every and ramp_update_every must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate for the 0-based step index.
    pub fn lr(&self, t: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr0,
            LrSchedule::Poly => {
                let frac = 1.0 - t as f64 / self.max_iterations.max(1) as f64;
                self.lr0 * frac.powf(0.9)
            }
        }
    }
}

/// Momentum SGD with weight decay folded into the gradient:
/// v ← μ·v + (g + wd·p), p ← p − lr·v. Velocities are keyed by parameter
/// name and start at zero.
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, ArrayD<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    pub fn step<M: Parameterized>(&mut self, net: &mut M, lr: f64) -> Result<()> {
        let mu = self.momentum;
        let wd = self.weight_decay;
        let vel = &mut self.velocity;
        let mut bad: Option<String> = None;
        net.visit_mut("", &mut |name, p| {
            if bad.is_some() {
                return;
            }
            if p.grad.iter().any(|g| !g.is_finite()) {
                bad = Some(name.to_string());
                return;
            }
            let v = vel
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            ndarray::Zip::from(v.view_mut())
                .and(&p.grad)
                .and(&p.value)
                .for_each(|v, &g, &x| *v = mu * *v + g + wd * x);
            ndarray::Zip::from(&mut p.value)
                .and(v.view())
                .for_each(|x, &v| *x -= lr * v);
        });
        match bad {
            Some(name) => Err(Error::Numeric(format!(
                "non-finite gradient in parameter {name}"
            ))),
            None => Ok(()),
        }
    }
}

/// A saved evaluation point: archives of every network under `dir` plus
/// the validation report that ranked it.
#[derive(Debug, Clone)]
pub struct CheckpointRecord {
    pub iteration: u64,
    pub dir: PathBuf,
    pub report: MetricReport,
    pub best: bool,
}

/// Contents of `manifest.toml` inside each checkpoint directory.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointManifest {
    pub iteration: u64,
    pub spec: FrameworkSpec,
    pub nets: NetsConfig,
    pub train: TrainConfig,
    pub report: MetricReport,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best: CheckpointRecord,
    pub final_iteration: u64,
    /// (iteration, validation mIOU of the test node), in evaluation order.
    pub val_history: Vec<(u64, f64)>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Inference of the test node over the named cases, chunked to bound
/// memory, scored against the stored masks.
pub fn eval_cases(
    asm: &Assembly,
    ds: &Dataset,
    ids: &[String],
    chunk: usize,
) -> Result<MetricReport> {
    if ids.is_empty() {
        return Err(Error::Argument("no cases to evaluate".into()));
    }
    let (images, masks) = case_tensors(ds, ids)?;
    let mut preds: Vec<Array2<u8>> = Vec::with_capacity(ids.len());
    let step = chunk.max(1);
    let mut start = 0;
    while start < ids.len() {
        let end = (start + step).min(ids.len());
        let view = images.slice(ndarray::s![start..end, .., .., ..]);
        preds.extend(asm.predict(&view)?);
        start = end;
    }
    let gts: Vec<Array2<u8>> = masks.outer_iter().map(|m| m.to_owned()).collect();
    evaluate(&preds, &gts, ds.num_classes)
}

/// Per-case test-node mIOU, id-aligned with `ids`. Feeds cumulative
/// distribution plots.
pub fn per_case_miou(
    asm: &Assembly,
    ds: &Dataset,
    ids: &[String],
    chunk: usize,
) -> Result<Vec<(String, f64)>> {
    if ids.is_empty() {
        return Err(Error::Argument("no cases to evaluate".into()));
    }
    let (images, masks) = case_tensors(ds, ids)?;
    let mut out = Vec::with_capacity(ids.len());
    let step = chunk.max(1);
    let mut start = 0;
    while start < ids.len() {
        let end = (start + step).min(ids.len());
        let view = images.slice(ndarray::s![start..end, .., .., ..]);
        for (offset, pred) in asm.predict(&view)?.into_iter().enumerate() {
            let i = start + offset;
            let report = evaluate(&[pred], &[masks.index_axis(ndarray::Axis(0), i).to_owned()], ds.num_classes)?;
            out.push((ids[i].clone(), report.miou));
        }
        start = end;
    }
    Ok(out)
}

fn save_checkpoint(
    asm: &Assembly,
    nets: &NetsConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    iteration: u64,
    report: &MetricReport,
) -> Result<PathBuf> {
    let dir = out_dir.join(format!("ckpt_{iteration}"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for h in &asm.handles {
        save_params(&h.net, &dir.join(format!("{}.npz", h.id)))?;
    }
    let manifest = CheckpointManifest {
        iteration,
        spec: asm.spec.clone(),
        nets: nets.clone(),
        train: cfg.clone(),
        report: report.clone(),
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    write_file(&dir.join("manifest.toml"), &text)?;
    Ok(dir)
}

/// Runs the full loop: batch → forward all networks (with perturbation on
/// the averaging source) → supervised + weighted consistency losses →
/// one backward pass per learner → SGD step each → teacher averaging.
/// Every `eval_every` iterations the test node is scored on the
/// validation split and archived; the best-mIOU checkpoint and the final
/// one are kept, intermediate ones pruned. The per-iteration loss
/// breakdown streams to `metrics.log`.
pub fn train(
    asm: &mut Assembly,
    ds: &Dataset,
    manifest: &SplitManifest,
    nets: &NetsConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("metrics.log");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "{}", LossBreakdown::tsv_header()).map_err(|e| Error::io(&log_path, e))?;

    let mut val_history: Vec<(u64, f64)> = Vec::new();
    let mut best: Option<CheckpointRecord> = None;
    let mut last_kept: Option<PathBuf> = None;

    let evaluate_and_save = |asm: &Assembly,
                                 iteration: u64,
                                 best: &mut Option<CheckpointRecord>,
                                 last_kept: &mut Option<PathBuf>,
                                 val_history: &mut Vec<(u64, f64)>|
     -> Result<()> {
        let report = eval_cases(asm, ds, &manifest.val, cfg.batch_size)?;
        val_history.push((iteration, report.miou));
        let dir = save_checkpoint(asm, nets, cfg, out_dir, iteration, &report)?;
        let improved = best.as_ref().map_or(true, |b| report.miou > b.report.miou);
        // prune whatever the previous evaluation left behind, unless it
        // is still the best
        if let Some(old) = last_kept.take() {
            let is_best = best.as_ref().map_or(false, |b| b.dir == old);
            if !is_best && old != dir {
                let _ = fs::remove_dir_all(&old);
            }
        }
        if improved {
            if let Some(prev) = best.as_ref() {
                if prev.dir != dir {
                    let _ = fs::remove_dir_all(&prev.dir);
                }
            }
            *best = Some(CheckpointRecord {
                iteration,
                dir: dir.clone(),
                report,
                best: true,
            });
        }
        *last_kept = Some(dir);
        Ok(())
    };

    if cfg.max_iterations == 0 {
        evaluate_and_save(asm, 0, &mut best, &mut last_kept, &mut val_history)?;
        let best = best.unwrap();
        return Ok(TrainOutcome { best, final_iteration: 0, val_history });
    }

    let ramp = RampSchedule::new(cfg.max_iterations, cfg.ramp_update_every)?;
    let mut optimizers: Vec<Option<Sgd>> = asm
        .handles
        .iter()
        .map(|h| match h.role {
            Role::Learner => Some(Sgd::new(cfg.momentum, cfg.weight_decay)),
            Role::Teacher => None,
        })
        .collect();

    for t in 1..=cfg.max_iterations {
        let batch = next_batch(ds, manifest, cfg.batch_size, cfg.seed, t)?;
        let noise_seed = derive_seed(cfg.seed, &format!("noise{t}"));
        let preds = asm.forward(&batch, cfg.perturb_strength, noise_seed)?;

        let lambda = ramp.weight(t)?;
        let lambda2 = lambda * cfg.lambda2_scale;
        let mut parts = LossParts::default();
        let mut dlogits: Vec<Option<Array4<f64>>> = (0..asm.handles.len()).map(|_| None).collect();
        let add_grad = |slot: &mut Option<Array4<f64>>, g: Array4<f64>, w: f64| {
            match slot {
                Some(acc) => acc.zip_mut_with(&g, |a, &b| *a += w * b),
                None => *slot = Some(if w == 1.0 { g } else { g * w }),
            }
        };

        for term in &asm.sup_terms {
            let (loss, grad) = sup_loss_grad(&preds[term.learner], &batch.masks.view())?;
            parts.sup.push(loss);
            add_grad(&mut dlogits[term.learner], grad, 1.0);
        }
        for term in &asm.semi_terms {
            let (loss, grad) =
                semi_loss_grad(&preds[term.dst], &preds[term.src], batch.labeled_count)?;
            if term.teacher_sourced {
                parts.semi_teacher.push(loss);
                add_grad(&mut dlogits[term.dst], grad, lambda2);
            } else {
                parts.semi_learner.push(loss);
                add_grad(&mut dlogits[term.dst], grad, lambda);
            }
        }
        let breakdown = total_loss(&parts, lambda, lambda2);
        if !breakdown.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {t}: {}",
                breakdown.tsv_row(t)
            )));
        }
        writeln!(log, "{}", breakdown.tsv_row(t)).map_err(|e| Error::io(&log_path, e))?;

        let lr = cfg.lr(t - 1);
        for (i, pred) in preds.into_iter().enumerate() {
            let Some(grad) = dlogits[i].take() else { continue };
            let cache = pred
                .cache
                .ok_or_else(|| Error::Structure(format!("no gradient path into {}", pred.source)))?;
            zero_grads(&mut asm.handles[i].net);
            asm.handles[i].net.backward(&cache, &grad.view())?;
            optimizers[i]
                .as_mut()
                .expect("loss wired into a teacher")
                .step(&mut asm.handles[i].net, lr)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("{m} at iteration {t}")),
                    other => other,
                })?;
        }
        asm.ema_step()?;

        if t % cfg.eval_every == 0 || t == cfg.max_iterations {
            evaluate_and_save(asm, t, &mut best, &mut last_kept, &mut val_history)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let best = best.expect("final iteration always evaluates");
    Ok(TrainOutcome {
        best,
        final_iteration: cfg.max_iterations,
        val_history,
    })
}

/// Reloads a checkpoint directory into a fresh assembly and scores its
/// test node on the given cases (inference mode: frozen statistics, no
/// perturbation, no gradients).
pub fn evaluate_checkpoint(dir: &Path, ds: &Dataset, ids: &[String]) -> Result<MetricReport> {
    if ids.is_empty() {
        return Err(Error::Argument("no cases to evaluate".into()));
    }
    let manifest = load_manifest(dir)?;
    let mut asm = instantiate(&manifest.spec, &manifest.nets, 0)?;
    for h in &mut asm.handles {
        load_params(&mut h.net, &dir.join(format!("{}.npz", h.id)))?;
    }
    eval_cases(&asm, ds, ids, manifest.train.batch_size)
}

pub fn load_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.toml");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Parse(format!("checkpoint manifest: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::cnn::CnnConfig;
    use crate::backbones::vit::AttentionConfig;
    use crate::data::{generate_synthetic, load_dataset, make_splits};
    use crate::nn::init::seeded;
    use crate::nn::linear::Linear;
    use crate::nn::param::named_params;
    use crate::topology::preset;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("coseg-trainer-tests").join(name);
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn tiny_nets() -> NetsConfig {
        NetsConfig {
            cnn: CnnConfig { base_width: 2, stages: 2 },
            vit: AttentionConfig {
                img_size: 16,
                patch_size: 4,
                embed_dim: 8,
                depths: vec![2, 2],
                num_heads: vec![2, 4],
                window: 2,
                ..Default::default()
            },
            num_classes: 4,
            alpha_cap: 0.99,
        }
    }

    fn tiny_cfg(iters: u64) -> TrainConfig {
        TrainConfig {
            max_iterations: iters,
            batch_size: 4,
            lr0: 0.05,
            eval_every: 5,
            seed: 33,
            ramp_update_every: 2,
            ..Default::default()
        }
    }

    fn tiny_data(dir: &Path) -> (Dataset, SplitManifest) {
        generate_synthetic(dir, 12, 4, 16, 5).unwrap();
        let ds = load_dataset(dir, 4, None).unwrap();
        let manifest = make_splits(&ds, 0.4, 5).unwrap();
        (ds, manifest)
    }

    #[test]
    fn sgd_known_steps_and_momentum_recurrence() {
        let mut rng = seeded(800);
        let mut net = Linear::new(1, 1, false, &mut rng);
        net.weight.value.fill(1.0);
        net.weight.grad = ArrayD::zeros(net.weight.value.raw_dim());

        let mut opt = Sgd::new(0.0, 0.0);
        opt.step(&mut net, 0.01).unwrap();
        assert_eq!(net.weight.value[[0, 0]], 1.0);

        net.weight.grad.fill(0.1);
        opt.step(&mut net, 0.01).unwrap();
        assert!((net.weight.value[[0, 0]] - 0.999).abs() < 1e-15);

        // five steps of the momentum recurrence, hand-unrolled
        let mut opt = Sgd::new(0.9, 0.01);
        let mut p_ref = net.weight.value[[0, 0]];
        let mut v_ref = 0.0;
        let grads = [0.1, -0.2, 0.05, 0.0, 0.3];
        for g in grads {
            net.weight.grad.fill(g);
            opt.step(&mut net, 0.02).unwrap();
            v_ref = 0.9 * v_ref + (g + 0.01 * p_ref);
            p_ref -= 0.02 * v_ref;
            assert!((net.weight.value[[0, 0]] - p_ref).abs() < 1e-12);
        }

        net.weight.grad.fill(f64::NAN);
        let msg = format!("{}", opt.step(&mut net, 0.02).unwrap_err());
        assert!(msg.contains("weight"), "{msg}");
    }

    #[test]
    fn lr_schedules() {
        let cfg = TrainConfig { max_iterations: 100, lr0: 0.01, ..Default::default() };
        assert_eq!(cfg.lr(0), 0.01);
        assert!((cfg.lr(50) - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!(cfg.lr(99) > 0.0);
        let flat = TrainConfig { lr_schedule: LrSchedule::Constant, ..cfg };
        assert_eq!(flat.lr(99), flat.lr0);
    }

    #[test]
    fn zero_iteration_run_evaluates_initialization() {
        let dir = tmp("zero-run");
        let (ds, manifest) = tiny_data(&dir.join("data"));
        let nets = tiny_nets();
        let mut asm = instantiate(&preset("cnn-cnn-cps").unwrap(), &nets, 21).unwrap();
        let out = train(&mut asm, &ds, &manifest, &nets, &tiny_cfg(0), &dir.join("run")).unwrap();
        assert_eq!(out.best.iteration, 0);
        assert_eq!(out.val_history.len(), 1);
        assert!(out.best.dir.join("net_a.npz").exists());
        assert!(out.best.dir.join("manifest.toml").exists());
    }

    #[test]
    fn short_run_logs_every_iteration_and_is_deterministic() {
        let dir = tmp("short-run");
        let (ds, manifest) = tiny_data(&dir.join("data"));
        let nets = tiny_nets();
        let cfg = tiny_cfg(10);

        let mut asm = instantiate(&preset("cnn-cnn-cps").unwrap(), &nets, 21).unwrap();
        let out1 = train(&mut asm, &ds, &manifest, &nets, &cfg, &dir.join("run1")).unwrap();
        let log1 = fs::read_to_string(dir.join("run1").join("metrics.log")).unwrap();
        let rows: Vec<&str> = log1.lines().collect();
        assert_eq!(rows.len(), 11); // header + one row per iteration
        assert!(rows[0].starts_with("iteration\t"));

        // lambda column: nondecreasing, stepwise over the update grid,
        // exactly 1 at the end
        let lam: Vec<f64> = rows[1..]
            .iter()
            .map(|r| r.split('\t').nth(7).unwrap().parse().unwrap())
            .collect();
        assert!(lam.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(lam[1], lam[2]); // iterations 2 and 3 share a 2-wide window
        assert_eq!(lam[9], 1.0);
        assert!(lam[0] > 0.0);

        let mut asm2 = instantiate(&preset("cnn-cnn-cps").unwrap(), &nets, 21).unwrap();
        let out2 = train(&mut asm2, &ds, &manifest, &nets, &cfg, &dir.join("run2")).unwrap();
        assert_eq!(out1.val_history, out2.val_history);
        let log2 = fs::read_to_string(dir.join("run2").join("metrics.log")).unwrap();
        assert_eq!(log1, log2);

        // best checkpoint and the final one survive pruning
        let kept: Vec<String> = fs::read_dir(dir.join("run1"))
            .unwrap()
            .filter_map(|e| {
                let n = e.unwrap().file_name().into_string().unwrap();
                n.starts_with("ckpt_").then_some(n)
            })
            .collect();
        assert!(kept.contains(&format!("ckpt_{}", out1.best.iteration)));
        assert!(kept.contains(&"ckpt_10".to_string()));
        assert!(kept.len() <= 2);

        // parameters actually moved
        let p0 = named_params(&instantiate(&preset("cnn-cnn-cps").unwrap(), &nets, 21).unwrap().handles[0].net);
        let p1 = named_params(&asm.handles[0].net);
        assert!(p0.iter().zip(p1.iter()).any(|(a, b)| a.1 != b.1));
    }

    #[test]
    fn teacher_framework_trains_and_checkpoint_reloads_identically() {
        let dir = tmp("teacher-run");
        let (ds, manifest) = tiny_data(&dir.join("data"));
        let nets = tiny_nets();
        let cfg = TrainConfig { max_iterations: 4, eval_every: 2, ..tiny_cfg(4) };
        let mut asm = instantiate(&preset("w").unwrap(), &nets, 22).unwrap();
        let before_teacher = named_params(&asm.handles[2].net);
        let out = train(&mut asm, &ds, &manifest, &nets, &cfg, &dir.join("run")).unwrap();
        assert_eq!(out.final_iteration, 4);
        assert_eq!(out.val_history.len(), 2);
        let after_teacher = named_params(&asm.handles[2].net);
        assert!(before_teacher
            .iter()
            .zip(after_teacher.iter())
            .any(|(a, b)| a.1 != b.1));

        let r1 = evaluate_checkpoint(&out.best.dir, &ds, &manifest.test).unwrap();
        let r2 = evaluate_checkpoint(&out.best.dir, &ds, &manifest.test).unwrap();
        assert_eq!(r1, r2);
        assert!(evaluate_checkpoint(&out.best.dir, &ds, &[]).is_err());

        let loaded = load_manifest(&out.best.dir).unwrap();
        assert_eq!(loaded.iteration, out.best.iteration);
        assert_eq!(loaded.spec.label(), "cnn-vit-vit-c");
        assert_eq!(loaded.report.miou, out.best.report.miou);
    }

    #[test]
    fn poisoned_parameters_abort_with_iteration() {
        let dir = tmp("nan-run");
        let (ds, manifest) = tiny_data(&dir.join("data"));
        let nets = tiny_nets();
        let mut asm = instantiate(&preset("cnn-cnn-cps").unwrap(), &nets, 23).unwrap();
        asm.handles[0].net.visit_mut("", &mut |name, p| {
            if name == "inc.c1.weight" {
                p.value.fill(f64::NAN);
            }
        });
        let err = train(&mut asm, &ds, &manifest, &nets, &tiny_cfg(2), &dir.join("run"));
        let msg = format!("{}", err.unwrap_err());
        assert!(msg.contains("iteration 1"), "{msg}");
    }
}
