//! `coseg`: batch entry points for synthetic data generation, training,
//! checkpoint evaluation, ratio and topology sweeps, and figure
//! emission. Everything lands on disk; nothing is interactive.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. When
//! `COSEG_OUT_ROOT` is set, relative output paths are rooted under it.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use coseg_core::backbones::cnn::CnnConfig;
use coseg_core::backbones::load_params;
use coseg_core::backbones::vit::AttentionConfig;
use coseg_core::data::{generate_synthetic, load_dataset, make_splits, Dataset, SplitManifest};
use coseg_core::metrics::MetricReport;
use coseg_core::plots::cumulative_histogram_svg;
use coseg_core::sweep::{run_spec, sweep_ratio, sweep_topology};
use coseg_core::topology::{
    instantiate, preset, preset_names, FrameworkSpec, NetsConfig, GRID_PRESETS,
};
use coseg_core::trainer::{eval_cases, load_manifest, per_case_miou, LrSchedule, TrainConfig};
use coseg_core::{Error, Result};

/// Fully resolved run settings: flat keys, loadable from TOML, each
/// overridable by a flag. A copy is written verbatim into the output
/// directory before anything runs, so the run is reproducible from the
/// emitted file alone. Network defaults target the bundled synthetic
/// generator (64 px); scale them up in a config file for larger data.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    data_dir: String,
    out_dir: String,
    preset: String,
    /// Framework spec TOML; wins over `preset` when nonempty.
    spec_file: String,
    labeled_ratio: f64,
    split_seed: u64,
    /// 0 keeps the stored resolution.
    resize_to: usize,
    num_classes: usize,
    cnn_base_width: usize,
    cnn_stages: usize,
    vit_img_size: usize,
    vit_patch_size: usize,
    vit_embed_dim: usize,
    vit_depths: Vec<usize>,
    vit_num_heads: Vec<usize>,
    vit_window: usize,
    alpha_cap: f64,
    max_iterations: u64,
    batch_size: usize,
    lr0: f64,
    momentum: f64,
    weight_decay: f64,
    eval_every: u64,
    seed: u64,
    /// "poly" or "constant".
    lr_schedule: String,
    ramp_update_every: u64,
    perturb_strength: f64,
    lambda2_scale: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: "data".into(),
            out_dir: "out/run".into(),
            preset: "w".into(),
            spec_file: String::new(),
            labeled_ratio: 0.1,
            split_seed: 7,
            resize_to: 0,
            num_classes: 4,
            cnn_base_width: 8,
            cnn_stages: 4,
            vit_img_size: 64,
            vit_patch_size: 4,
            vit_embed_dim: 16,
            vit_depths: vec![2, 2, 2, 2],
            vit_num_heads: vec![2, 4, 8, 16],
            vit_window: 4,
            alpha_cap: 0.99,
            max_iterations: 2000,
            batch_size: 8,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            eval_every: 200,
            seed: 1337,
            lr_schedule: "poly".into(),
            ramp_update_every: 150,
            perturb_strength: 0.1,
            lambda2_scale: 1.0,
        }
    }
}

impl RunConfig {
    fn nets(&self) -> NetsConfig {
        NetsConfig {
            cnn: CnnConfig { base_width: self.cnn_base_width, stages: self.cnn_stages },
            vit: AttentionConfig {
                img_size: self.vit_img_size,
                patch_size: self.vit_patch_size,
                embed_dim: self.vit_embed_dim,
                depths: self.vit_depths.clone(),
                num_heads: self.vit_num_heads.clone(),
                window: self.vit_window,
                ..Default::default()
            },
            num_classes: self.num_classes,
            alpha_cap: self.alpha_cap,
        }
    }

    fn train_cfg(&self) -> Result<TrainConfig> {
        let lr_schedule = match self.lr_schedule.as_str() {
            "poly" => LrSchedule::Poly,
            "constant" => LrSchedule::Constant,
            other => {
                return Err(Error::Config(format!(
                    "lr_schedule must be poly or constant, got {other}"
                )))
            }
        };
        let cfg = TrainConfig {
            max_iterations: self.max_iterations,
            batch_size: self.batch_size,
            lr0: self.lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            eval_every: self.eval_every,
            seed: self.seed,
            lr_schedule,
            ramp_update_every: self.ramp_update_every,
            perturb_strength: self.perturb_strength,
            lambda2_scale: self.lambda2_scale,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn spec(&self) -> Result<FrameworkSpec> {
        if self.spec_file.is_empty() {
            preset(&self.preset)
        } else {
            let path = Path::new(&self.spec_file);
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            FrameworkSpec::from_toml(&text)
        }
    }

    fn load_data(&self) -> Result<(Dataset, SplitManifest)> {
        let resize = if self.resize_to == 0 { None } else { Some(self.resize_to) };
        let ds = load_dataset(Path::new(&self.data_dir), self.num_classes, resize)?;
        let manifest = make_splits(&ds, self.labeled_ratio, self.split_seed)?;
        Ok((ds, manifest))
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

/// Shared run flags; each one overrides the corresponding config key.
#[derive(Args, Debug, Clone)]
struct RunFlags {
    /// Flat TOML run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory holding images/ and masks/.
    #[arg(long)]
    data: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Framework preset name (see `coseg presets`).
    #[arg(long)]
    preset: Option<String>,
    /// Framework spec TOML file; wins over --preset.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Labeled fraction of the training pool, in (0, 1].
    #[arg(long)]
    ratio: Option<f64>,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Iteration budget.
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_every: Option<u64>,
}

impl RunFlags {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = load_run_config(self.config.as_deref())?;
        if let Some(v) = &self.data {
            cfg.data_dir = v.clone();
        }
        if let Some(v) = &self.out {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = &self.preset {
            cfg.preset = v.clone();
            cfg.spec_file.clear();
        }
        if let Some(v) = &self.spec {
            cfg.spec_file = v.display().to_string();
        }
        if let Some(v) = self.ratio {
            cfg.labeled_ratio = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.iters {
            cfg.max_iterations = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
        }
        Ok(cfg)
    }
}

fn resolve_out(path: &str) -> PathBuf {
    let p = PathBuf::from(path);
    match std::env::var_os("COSEG_OUT_ROOT") {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p,
    }
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out_dir = resolve_out(&cfg.out_dir);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("run config serialization: {e}")))?;
    let path = out_dir.join("run_config.toml");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(out_dir)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| {
            x.parse()
                .map_err(|_| Error::Argument(format!("bad {what} entry: {x}")))
        })
        .collect()
}

#[derive(Parser)]
#[command(name = "coseg", version, about = "semi-supervised co-training segmentation workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic grayscale segmentation dataset.
    Synth {
        /// Number of cases.
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Mask classes including background (2 to 4).
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one framework and report its test node's test metrics.
    Train {
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Re-score a saved checkpoint on a dataset split.
    Eval {
        /// Checkpoint directory (ckpt_<iter> inside a run directory).
        #[arg(long)]
        ckpt: PathBuf,
        /// "test" or "val".
        #[arg(long, default_value = "test")]
        split: String,
        /// Override the dataset directory recorded in the run config.
        #[arg(long)]
        data: Option<String>,
        /// Where to write per_image_iou.csv (default: the checkpoint dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep labeled-data ratios for one or more presets.
    SweepRatio {
        #[command(flatten)]
        flags: RunFlags,
        /// Comma-separated labeled percentages.
        #[arg(long, default_value = "1,2,5,10,20,30,50,100")]
        ratios: String,
        /// Comma-separated preset names.
        #[arg(long, default_value = "w")]
        presets: String,
        /// Comma-separated seeds (default: the config seed).
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Sweep framework topologies into a results CSV plus heatmaps.
    SweepTopology {
        #[command(flatten)]
        flags: RunFlags,
        /// Comma-separated preset names and/or spec TOML paths
        /// (default: every shipped grid preset).
        #[arg(long)]
        specs: Option<String>,
        /// Validate and assemble only; skip training, report zeros.
        #[arg(long)]
        dry_run: bool,
    },
    /// Cumulative IOU histogram from per-image CSVs emitted by `eval`.
    Hist {
        #[arg(long, required = true, num_args = 1..)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Output SVG path.
        #[arg(long)]
        out: PathBuf,
    },
    /// List shipped framework presets.
    Presets,
}

fn cmd_synth(n: usize, classes: usize, size: usize, seed: u64, out: &Path) -> Result<()> {
    let dir = resolve_out(&out.display().to_string());
    generate_synthetic(&dir, n, classes, size, seed)?;
    println!("wrote {n} image/mask pairs ({size}x{size} px, {classes} classes) to {}", dir.display());
    Ok(())
}

fn cmd_train(flags: &RunFlags) -> Result<()> {
    let cfg = flags.resolve()?;
    let spec = cfg.spec()?;
    let nets = cfg.nets();
    let tcfg = cfg.train_cfg()?;
    let out_dir = prepare_out(&cfg)?;
    let (ds, manifest) = cfg.load_data()?;
    let report = run_spec(&spec, &ds, &manifest, &nets, &tcfg, &out_dir)?;
    let label = spec.label();
    let table = format!("{}\n{}\n", MetricReport::csv_header(), report.csv_row(&label));
    print!("{table}");
    let path = out_dir.join("results.csv");
    fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
    println!("run artifacts in {}", out_dir.display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, split: &str, data: Option<&str>, out: Option<&Path>) -> Result<()> {
    let run_dir = ckpt
        .parent()
        .ok_or_else(|| Error::Argument("checkpoint path has no parent directory".into()))?;
    let mut cfg = load_run_config(Some(&run_dir.join("run_config.toml")))?;
    if let Some(d) = data {
        cfg.data_dir = d.to_string();
    }
    let (ds, manifest) = cfg.load_data()?;
    let ids = match split {
        "test" => &manifest.test,
        "val" => &manifest.val,
        other => {
            return Err(Error::Argument(format!(
                "unknown split {other}, expected test or val"
            )))
        }
    };

    let ck = load_manifest(ckpt)?;
    let mut asm = instantiate(&ck.spec, &ck.nets, 0)?;
    for h in &mut asm.handles {
        load_params(&mut h.net, &ckpt.join(format!("{}.npz", h.id)))?;
    }
    let report = eval_cases(&asm, &ds, ids, ck.train.batch_size)?;
    print!("{}", report.to_kv_text());

    let rows = per_case_miou(&asm, &ds, ids, ck.train.batch_size)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| ckpt.to_path_buf());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut csv = String::from("case,iou\n");
    for (id, iou) in &rows {
        csv.push_str(&format!("{id},{iou:.4}\n"));
    }
    let path = dir.join("per_image_iou.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_sweep_ratio(flags: &RunFlags, ratios: &str, presets: &str, seeds: Option<&str>) -> Result<()> {
    let cfg = flags.resolve()?;
    let out_dir = prepare_out(&cfg)?;
    let resize = if cfg.resize_to == 0 { None } else { Some(cfg.resize_to) };
    let ds = load_dataset(Path::new(&cfg.data_dir), cfg.num_classes, resize)?;
    let percents: Vec<f64> = parse_list(ratios, "ratio")?;
    let fractions: Vec<f64> = percents.iter().map(|p| p / 100.0).collect();
    let presets: Vec<String> = parse_list(presets, "preset")?;
    let seeds: Vec<u64> = match seeds {
        Some(s) => parse_list(s, "seed")?,
        None => vec![cfg.seed],
    };
    let table = sweep_ratio(
        &presets,
        &fractions,
        &seeds,
        &ds,
        &cfg.nets(),
        &cfg.train_cfg()?,
        &out_dir,
    )?;
    print!("{}", table.csv());
    println!("sweep artifacts in {}", out_dir.display());
    Ok(())
}

fn cmd_sweep_topology(flags: &RunFlags, specs: Option<&str>, dry_run: bool) -> Result<()> {
    let cfg = flags.resolve()?;
    let items: Vec<String> = match specs {
        Some(s) => parse_list(s, "spec")?,
        None => GRID_PRESETS.iter().map(|s| s.to_string()).collect(),
    };
    if items.is_empty() {
        return Err(Error::Argument("no specs to sweep".into()));
    }
    let mut resolved = Vec::with_capacity(items.len());
    for item in &items {
        if item.ends_with(".toml") {
            let path = Path::new(item);
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            resolved.push(FrameworkSpec::from_toml(&text)?);
        } else {
            resolved.push(preset(item)?);
        }
    }
    let out_dir = prepare_out(&cfg)?;
    let (ds, manifest) = cfg.load_data()?;
    let outcome = sweep_topology(
        &resolved,
        &ds,
        &manifest,
        &cfg.nets(),
        &cfg.train_cfg()?,
        &out_dir,
        dry_run,
    )?;
    println!(
        "{} frameworks swept, {} failed; results in {}",
        outcome.rows.len(),
        outcome.failures.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_hist(reports: &[PathBuf], bins: usize, out: &Path) -> Result<()> {
    let mut values = Vec::new();
    for path in reports {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for line in text.lines().skip(1) {
            let iou = line
                .rsplit(',')
                .next()
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::Parse(format!("bad row in {}: {line}", path.display())))?;
            values.push(iou);
        }
    }
    if values.is_empty() {
        return Err(Error::Argument("no per-image IOU rows in the given reports".into()));
    }
    let out = resolve_out(&out.display().to_string());
    cumulative_histogram_svg(&out, "cumulative IOU distribution", &values, bins)?;
    println!("wrote {} ({} values)", out.display(), values.len());
    Ok(())
}

fn cmd_presets() -> Result<()> {
    for name in preset_names() {
        let spec = preset(name)?;
        println!(
            "{name:<16} nodes={} edges={} test={}",
            spec.nodes.len(),
            spec.edges.len(),
            spec.test_node
        );
    }
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth { n, classes, size, seed, out } => cmd_synth(n, classes, size, seed, &out),
        Cmd::Train { flags } => cmd_train(&flags),
        Cmd::Eval { ckpt, split, data, out } => {
            cmd_eval(&ckpt, &split, data.as_deref(), out.as_deref())
        }
        Cmd::SweepRatio { flags, ratios, presets, seeds } => {
            cmd_sweep_ratio(&flags, &ratios, &presets, seeds.as_deref())
        }
        Cmd::SweepTopology { flags, specs, dry_run } => {
            cmd_sweep_topology(&flags, specs.as_deref(), dry_run)
        }
        Cmd::Hist { reports, bins, out } => cmd_hist(&reports, bins, &out),
        Cmd::Presets => cmd_presets(),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) | Error::Config(_) | Error::InvalidSpec(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
