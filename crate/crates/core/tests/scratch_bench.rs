use std::time::Instant;

use coseg_core::backbones::cnn::CnnConfig;
use coseg_core::backbones::vit::AttentionConfig;
use coseg_core::data::{generate_synthetic, load_dataset, make_splits};
use coseg_core::topology::{instantiate, preset, NetsConfig};
use coseg_core::trainer::{evaluate_checkpoint, train, TrainConfig};

#[test]
fn bench_optim_matrix() {
    let dir = std::env::temp_dir().join("coseg-optim");
    let _ = std::fs::remove_dir_all(&dir);
    let data = dir.join("data");
    generate_synthetic(&data, 200, 4, 64, 5).unwrap();
    let ds = load_dataset(&data, 4, None).unwrap();
    let manifest = make_splits(&ds, 0.1, 5).unwrap();

    let nets = NetsConfig {
        cnn: CnnConfig { base_width: 4, stages: 4 },
        vit: AttentionConfig {
            img_size: 64,
            patch_size: 4,
            embed_dim: 8,
            depths: vec![2, 2, 2, 2],
            num_heads: vec![2, 4, 8, 8],
            window: 4,
            ..Default::default()
        },
        num_classes: 4,
        alpha_cap: 0.99,
    };
    let seed = 64u64;
    for (tag, batch, lr0) in [
        ("A b8 lr.01", 8usize, 0.01),
        ("B b8 lr.03", 8, 0.03),
        ("C b4 lr.03", 4, 0.03),
    ] {
        for name in ["vit-sup", "w"] {
            let cfg = TrainConfig {
                max_iterations: 2000,
                batch_size: batch,
                lr0,
                eval_every: 200,
                seed,
                ..Default::default()
            };
            let mut asm = instantiate(&preset(name).unwrap(), &nets, seed).unwrap();
            let t0 = Instant::now();
            let out = train(&mut asm, &ds, &manifest, &nets, &cfg, &dir.join(format!("{tag}_{name}"))).unwrap();
            let report = evaluate_checkpoint(&out.best.dir, &ds, &manifest.test).unwrap();
            println!(
                "{tag} {name}: test miou {:.4} (best iter {} val {:.4}) in {:.0}s hist {:?}",
                report.miou,
                out.best.iteration,
                out.best.report.miou,
                t0.elapsed().as_secs_f64(),
                out.val_history.iter().map(|(_, m)| (m * 100.0).round() / 100.0).collect::<Vec<_>>()
            );
        }
    }
}
