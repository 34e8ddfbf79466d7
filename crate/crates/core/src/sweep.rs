//! Batch experiment drivers: run one framework spec end to end, sweep a
//! list of specs into a results CSV plus per-metric heatmap grids, and
//! sweep labeled-data ratios into a method-by-ratio mIOU table.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::data::{make_splits, Dataset, SplitManifest};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::nn::init::derive_seed;
use crate::plots::{heatmap_png, line_chart_svg, Series};
use crate::topology::{
    grid_position, instantiate, preset, FrameworkSpec, NetsConfig, GRID_COL_LABELS,
    GRID_ROW_LABELS,
};
use crate::trainer::{evaluate_checkpoint, train, TrainConfig};

/// Heatmap/CSV metric order; the flag marks metrics where lower is
/// better so their color scale is flipped.
pub const SWEEP_METRICS: [(&str, bool); 8] = [
    ("mDice", false),
    ("mIOU", false),
    ("Acc", false),
    ("Pre", false),
    ("Sen", false),
    ("Spe", false),
    ("ASD", true),
    ("HD", true),
];

fn metric_value(r: &MetricReport, name: &str) -> f64 {
    match name {
        "mDice" => r.mdice,
        "mIOU" => r.miou,
        "Acc" => r.acc,
        "Pre" => r.pre,
        "Sen" => r.sen,
        "Spe" => r.spe,
        "ASD" => r.asd,
        "HD" => r.hd,
        other => unreachable!("unknown metric {other}"),
    }
}

pub struct SweepOutcome {
    /// One entry per swept spec, in input order. `None` marks a failed run.
    pub rows: Vec<(String, Option<MetricReport>)>,
    pub failures: Vec<(String, String)>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn zero_report() -> MetricReport {
    MetricReport {
        mdice: 0.0,
        miou: 0.0,
        acc: 0.0,
        pre: 0.0,
        sen: 0.0,
        spe: 0.0,
        hd: 0.0,
        asd: 0.0,
        per_class: Vec::new(),
    }
}

/// Trains one spec in its own directory and scores the best checkpoint
/// on the test split. The training seed is derived from the base seed
/// and the spec label, so sweep entries are independent and a direct
/// call reproduces the sweep's cell.
pub fn run_spec(
    spec: &FrameworkSpec,
    ds: &Dataset,
    manifest: &SplitManifest,
    nets: &NetsConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<MetricReport> {
    let label = spec.label();
    let run_cfg = TrainConfig { seed: derive_seed(cfg.seed, &format!("run:{label}")), ..cfg.clone() };
    let mut asm = instantiate(spec, nets, run_cfg.seed)?;
    let outcome = train(&mut asm, ds, manifest, nets, &run_cfg, out_dir)?;
    evaluate_checkpoint(&outcome.best.dir, ds, &manifest.test)
}

/// Places per-spec values into the supervision-mode × CNN-count grid
/// when every spec has a canonical cell, otherwise into a single row in
/// sweep order. Unoccupied cells are NaN.
fn arrange(specs: &[FrameworkSpec], values: &[f64]) -> (Array2<f64>, bool) {
    let positions: Vec<Option<(usize, usize)>> = specs.iter().map(grid_position).collect();
    if positions.iter().all(|p| p.is_some()) {
        let mut grid = Array2::from_elem((GRID_ROW_LABELS.len(), GRID_COL_LABELS.len()), f64::NAN);
        for (p, &v) in positions.iter().zip(values) {
            let (r, c) = p.unwrap();
            grid[[r, c]] = v;
        }
        (grid, true)
    } else {
        (Array2::from_shape_vec((1, values.len()), values.to_vec()).unwrap(), false)
    }
}

fn grid_csv(grid: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in grid.outer_iter() {
        let cells: Vec<String> = row
            .iter()
            .map(|v| if v.is_finite() { format!("{v:.4}") } else { "nan".into() })
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Runs every spec in order with per-spec failure isolation, then emits
/// `results.csv`, one heatmap PNG and raw grid CSV per metric, and a
/// `failures.log` if anything broke. `dry_run` skips training entirely
/// and only exercises validation and assembly, reporting zeros.
pub fn sweep_topology(
    specs: &[FrameworkSpec],
    ds: &Dataset,
    manifest: &SplitManifest,
    nets: &NetsConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    dry_run: bool,
) -> Result<SweepOutcome> {
    if specs.is_empty() {
        return Err(Error::Argument("no specs to sweep".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut rows: Vec<(String, Option<MetricReport>)> = Vec::with_capacity(specs.len());
    let mut failures: Vec<(String, String)> = Vec::new();
    for spec in specs {
        let label = spec.label();
        let result = if dry_run {
            spec.ensure_valid()
                .and_then(|_| instantiate(spec, nets, 0))
                .map(|_| zero_report())
        } else {
            run_spec(spec, ds, manifest, nets, cfg, &out_dir.join("runs").join(&label))
        };
        match result {
            Ok(report) => rows.push((label, Some(report))),
            Err(e) => {
                failures.push((label.clone(), e.to_string()));
                rows.push((label, None));
            }
        }
    }

    let mut csv = String::from(MetricReport::csv_header());
    csv.push('\n');
    for (label, report) in &rows {
        match report {
            Some(r) => csv.push_str(&r.csv_row(label)),
            None => csv.push_str(&format!("{label},nan,nan,nan,nan,nan,nan,nan,nan")),
        }
        csv.push('\n');
    }
    write_file(&out_dir.join("results.csv"), &csv)?;

    let mut canonical = true;
    for (name, lower_is_better) in SWEEP_METRICS {
        let values: Vec<f64> = rows
            .iter()
            .map(|(_, r)| r.as_ref().map_or(f64::NAN, |r| metric_value(r, name)))
            .collect();
        let (grid, canon) = arrange(specs, &values);
        canonical = canon;
        let stem = name.to_lowercase();
        write_file(&out_dir.join(format!("grid_{stem}.csv")), &grid_csv(&grid))?;
        heatmap_png(&out_dir.join(format!("heatmap_{stem}.png")), &grid, lower_is_better)?;
    }
    if canonical {
        let axes = format!(
            "rows: {}\ncols: {}\n",
            GRID_ROW_LABELS.join(" | "),
            GRID_COL_LABELS.join(" | ")
        );
        write_file(&out_dir.join("grid_axes.txt"), &axes)?;
    }
    if !failures.is_empty() {
        let log: String =
            failures.iter().map(|(label, e)| format!("{label}: {e}\n")).collect();
        write_file(&out_dir.join("failures.log"), &log)?;
    }
    Ok(SweepOutcome { rows, failures })
}

pub struct RatioTable {
    pub methods: Vec<String>,
    /// Labeled fractions in input order; columns of `cells`.
    pub ratios: Vec<f64>,
    /// Mean test mIOU over seeds; NaN where every seed failed.
    pub cells: Array2<f64>,
}

fn pct_label(ratio: f64) -> String {
    let p = ratio * 100.0;
    if (p - p.round()).abs() < 1e-9 {
        format!("{}%", p.round() as u32)
    } else {
        format!("{p:.1}%")
    }
}

impl RatioTable {
    pub fn csv(&self) -> String {
        let mut out = String::from("Framework");
        for &r in &self.ratios {
            out.push(',');
            out.push_str(&pct_label(r));
        }
        out.push('\n');
        for (i, m) in self.methods.iter().enumerate() {
            out.push_str(m);
            for j in 0..self.ratios.len() {
                let v = self.cells[[i, j]];
                if v.is_finite() {
                    out.push_str(&format!(",{v:.4}"));
                } else {
                    out.push_str(",nan");
                }
            }
            out.push('\n');
        }
        out
    }
}

/// For each preset × labeled ratio, averages the test mIOU over the
/// given seeds (each seed redraws the splits) and emits the table as
/// `ratio_miou.csv` plus a log-x line chart. Per-cell failures leave a
/// NaN and are recorded in `failures.log`.
pub fn sweep_ratio(
    presets: &[String],
    ratios: &[f64],
    seeds: &[u64],
    ds: &Dataset,
    nets: &NetsConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<RatioTable> {
    if presets.is_empty() || ratios.is_empty() || seeds.is_empty() {
        return Err(Error::Argument("presets, ratios and seeds must be nonempty".into()));
    }
    if let Some(&bad) = ratios.iter().find(|&&r| r <= 0.0 || r > 1.0) {
        return Err(Error::Argument(format!("labeled ratio {bad} outside (0, 1]")));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut methods = Vec::with_capacity(presets.len());
    let mut cells = Array2::from_elem((presets.len(), ratios.len()), f64::NAN);
    let mut failures: Vec<String> = Vec::new();
    for (i, name) in presets.iter().enumerate() {
        let spec = preset(name)?;
        let label = spec.label();
        for (j, &ratio) in ratios.iter().enumerate() {
            let mut mious = Vec::new();
            for &seed in seeds {
                let tag = format!("{label}_{}_s{seed}", pct_label(ratio));
                let attempt = make_splits(ds, ratio, seed).and_then(|manifest| {
                    let run_cfg = TrainConfig { seed, ..cfg.clone() };
                    run_spec(&spec, ds, &manifest, nets, &run_cfg, &out_dir.join("runs").join(&tag))
                });
                match attempt {
                    Ok(report) => mious.push(report.miou),
                    Err(e) => failures.push(format!("{tag}: {e}")),
                }
            }
            if !mious.is_empty() {
                cells[[i, j]] = mious.iter().sum::<f64>() / mious.len() as f64;
            }
        }
        methods.push(label);
    }

    let table = RatioTable { methods, ratios: ratios.to_vec(), cells };
    write_file(&out_dir.join("ratio_miou.csv"), &table.csv())?;
    let series: Vec<Series> = table
        .methods
        .iter()
        .enumerate()
        .map(|(i, m)| Series {
            name: m.clone(),
            points: table
                .ratios
                .iter()
                .enumerate()
                .map(|(j, &r)| (r * 100.0, table.cells[[i, j]]))
                .collect(),
        })
        .collect();
    line_chart_svg(
        &out_dir.join("ratio_chart.svg"),
        "test mIOU by labeled ratio",
        "labeled data (%)",
        "mIOU",
        &series,
        true,
    )?;
    if !failures.is_empty() {
        let mut log = failures.join("\n");
        log.push('\n');
        write_file(&out_dir.join("failures.log"), &log)?;
    }
    Ok(table)
}
