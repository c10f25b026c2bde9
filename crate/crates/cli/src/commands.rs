use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use owseg_core::data::{generate_synthetic, load_coco, load_results, write_results, CategorySplit, SceneSpec, Supervision};
use owseg_core::evaluation::{rank_by_score, EvalImage, EvalPrediction};
use owseg_core::trainer::{predict_dataset, CHECKPOINT_FILE};
use owseg_core::{average_recall, train, ArReport, BoxXyxy, Device, EvalConfig, EvalMode, Model, ObjectnessVariant};

use crate::args::{AblateArgs, EvalArgs, GenDataArgs, ReportArgs, SuiteArg, TrainArgs};
use crate::config::{read_json, RunConfig, CONFIG_FILE};
use crate::manifest::{write_json, Manifest};
use crate::table::{metric_values, Table};

pub const SCENE_FILE: &str = "scene.json";
pub const RESULTS_FILE: &str = "results.json";
pub const REPORT_CSV: &str = "report.csv";

pub fn report_file(mode: EvalMode) -> String {
    format!("report_{mode}.json")
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn gen_data(args: &GenDataArgs, root: &Path) -> Result<PathBuf> {
    let mut spec: SceneSpec = match &args.config {
        Some(path) => read_json(path)?,
        None => SceneSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let out = args.out.clone().unwrap_or_else(|| root.join(format!("data-seed{}", spec.seed)));
    create_dir(&out)?;
    let ds = generate_synthetic(&spec, args.num_images)?;
    ds.write_coco(&out)?;
    write_json(&out.join(SCENE_FILE), &spec)?;
    let config = serde_json::json!({ "scene": spec, "num_images": args.num_images });
    Manifest::new("gen-data", &config, spec.seed)?.write(&out)?;
    log::info!("wrote {} images to {}", ds.len(), out.display());
    Ok(out)
}

/// Trains `cfg` into `dir`: config, manifest, metrics log and checkpoint.
pub fn train_run(cfg: &RunConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    Manifest::new("train", cfg, cfg.seed())?.write(dir)?;
    let dataset = cfg.load_dataset()?;
    let mut model = Model::new(cfg.model.clone(), &Device::Cpu)?;
    log::info!(
        "training {} ({} parameters) on {} images for {} epochs",
        cfg.model.variant,
        model.num_parameters(),
        dataset.len(),
        cfg.train.epochs
    );
    let outcome = train(&mut model, &cfg.train, &dataset, dir)?;
    log::info!("{} steps; checkpoint {}", outcome.steps, outcome.checkpoint.display());
    Ok(())
}

pub fn train_cmd(args: &TrainArgs, root: &Path) -> Result<PathBuf> {
    let cfg = RunConfig::resolve(&args.overrides)?;
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| root.join(format!("train-{}-seed{}", cfg.model.variant, cfg.seed())));
    train_run(&cfg, &dir)?;
    Ok(dir)
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub box_report: ArReport,
    pub mask_report: Option<ArReport>,
}

fn write_reports(out: &Path, reports: &[&ArReport]) -> Result<()> {
    let mut csv = format!("{}\n", ArReport::csv_header());
    for r in reports {
        write_json(&out.join(report_file(r.mode)), r)?;
        for row in r.csv_rows() {
            csv.push_str(&row);
            csv.push('\n');
        }
    }
    std::fs::write(out.join(REPORT_CSV), csv)?;
    Ok(())
}

/// Evaluates the checkpoint in `run` in both modes and writes the reports,
/// the predictions and a manifest into `out`.
pub fn eval_run(run: &Path, eval: &EvalConfig, out: &Path) -> Result<EvalOutput> {
    let mut cfg: RunConfig = read_json(&run.join(CONFIG_FILE))?;
    cfg.eval = eval.clone();
    cfg.validate()?;
    create_dir(out)?;
    Manifest::new("eval", &cfg, cfg.seed())?.write(out)?;
    let dataset = cfg.load_dataset()?;
    let ckpt = run.join(CHECKPOINT_FILE);
    let (model, _) = Model::load(&ckpt, Some(&cfg.model), &Device::Cpu)
        .with_context(|| format!("loading {}", ckpt.display()))?;
    let k = eval.budgets.iter().copied().max().unwrap_or(1);
    let preds = predict_dataset(&model, &dataset, k, cfg.eval_batch_size)?;
    let box_report = average_recall(&preds.images, &EvalConfig { mode: EvalMode::Box, ..eval.clone() })?;
    let mask_report = average_recall(&preds.images, &EvalConfig { mode: EvalMode::Mask, ..eval.clone() })?;
    write_results(&out.join(RESULTS_FILE), &preds.results)?;
    write_reports(out, &[&box_report, &mask_report])?;
    Ok(EvalOutput { box_report, mask_report: Some(mask_report) })
}

/// Scores a COCO results file against COCO ground truth. Mask mode is
/// skipped unless every prediction carries a segmentation.
pub fn eval_results(annotations: &Path, results: &Path, base: &[String], eval: &EvalConfig, out: &Path) -> Result<EvalOutput> {
    let coco = read_json::<owseg_core::data::CocoFile>(annotations)?;
    let split = if base.is_empty() {
        CategorySplit::all_base(coco.categories.iter().map(|c| c.id))
    } else {
        let known: BTreeSet<&str> = coco.categories.iter().map(|c| c.name.as_str()).collect();
        if let Some(b) = base.iter().find(|b| !known.contains(b.as_str())) {
            bail!("unknown base category `{b}`");
        }
        let (b, n): (Vec<_>, Vec<_>) = coco.categories.iter().partition(|c| base.contains(&c.name));
        CategorySplit::new(b.iter().map(|c| c.id), n.iter().map(|c| c.id))?
    };
    let dataset = load_coco(annotations, &split, Supervision::All)?;
    let mut by_image = load_results(results)?;
    let mut images = Vec::with_capacity(dataset.len());
    let mut all_masks = true;
    for s in &dataset.samples {
        let mut preds = Vec::new();
        for r in by_image.remove(&s.image_id).unwrap_or_default() {
            let mask = r.segmentation.as_ref().map(|m| m.decode()).transpose()?;
            all_masks &= mask.is_some();
            preds.push(EvalPrediction { bbox: BoxXyxy::from_xywh(r.bbox)?, mask, score: r.score });
        }
        rank_by_score(&mut preds);
        images.push(EvalImage { image_id: s.image_id, gts: s.eval_ground_truth(), preds });
    }
    if let Some(id) = by_image.keys().next() {
        log::warn!("results mention image {id}, which is not in the annotations; ignored");
    }
    create_dir(out)?;
    let config = serde_json::json!({
        "annotations": annotations, "results": results, "base": base, "eval": eval,
    });
    Manifest::new("eval", &config, 0)?.write(out)?;
    let box_report = average_recall(&images, &EvalConfig { mode: EvalMode::Box, ..eval.clone() })?;
    let mask_report = if all_masks {
        Some(average_recall(&images, &EvalConfig { mode: EvalMode::Mask, ..eval.clone() })?)
    } else {
        log::warn!("some predictions have no segmentation; mask AR skipped");
        None
    };
    let mut reports = vec![&box_report];
    reports.extend(mask_report.as_ref());
    write_reports(out, &reports)?;
    Ok(EvalOutput { box_report, mask_report })
}

pub fn eval_cmd(args: &EvalArgs, root: &Path) -> Result<PathBuf> {
    let apply = |mut eval: EvalConfig| {
        if let Some(p) = args.protocol {
            eval.protocol = p.into();
        }
        if let Some(k) = args.budget {
            eval.budgets = vec![k];
        }
        eval
    };
    match (&args.run, &args.annotations, &args.results) {
        (Some(run), None, None) => {
            let cfg: RunConfig = read_json(&run.join(CONFIG_FILE))?;
            let eval = apply(cfg.eval);
            let out = args.out.clone().unwrap_or_else(|| run.join(format!("eval-{}", eval.protocol)));
            let res = eval_run(run, &eval, &out)?;
            log_summary(&res);
            Ok(out)
        }
        (None, Some(ann), Some(results)) => {
            let eval = apply(EvalConfig::default());
            let out = args.out.clone().unwrap_or_else(|| root.join("eval"));
            let res = eval_results(ann, results, &args.base, &eval, &out)?;
            log_summary(&res);
            Ok(out)
        }
        _ => bail!("pass either --run DIR or --annotations FILE --results FILE"),
    }
}

fn log_summary(res: &EvalOutput) {
    let f = |v: Option<f64>| v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"));
    log::info!("box AR {}", f(res.box_report.ar));
    if let Some(m) = &res.mask_report {
        log::info!("mask AR {}", f(m.ar));
    }
}

/// One cell of an ablation: a label row and the config it trains.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub name: String,
    pub labels: Vec<String>,
    pub config: RunConfig,
}

pub const VARIANT_TABLE: &str = "table_variants";
pub const NECK_TABLE: &str = "table_neck";
pub const CELLS_DIR: &str = "cells";

/// The five objectness variants; everything else stays as in `base`.
pub fn variant_cells(base: &RunConfig) -> Vec<AblationCell> {
    ObjectnessVariant::ALL
        .iter()
        .map(|&v| {
            let mut config = base.clone();
            config.model.variant = v;
            AblationCell { name: format!("variant-{v}"), labels: vec![v.to_string()], config }
        })
        .collect()
}

/// Fusion neck off, then on. Deformable convolutions stay off in both.
pub fn neck_cells(base: &RunConfig) -> Vec<AblationCell> {
    [false, true]
        .into_iter()
        .map(|bifpn| {
            let mut config = base.clone();
            config.model.bifpn = bifpn;
            config.model.deformable = false;
            let mark = |on: bool| if on { "✓" } else { "✗" }.to_string();
            AblationCell {
                name: format!("neck-{}", if bifpn { "bifpn" } else { "lateral" }),
                labels: vec![mark(false), mark(bifpn)],
                config,
            }
        })
        .collect()
}

fn run_cell(cell: &AblationCell, dir: &Path) -> Result<EvalOutput> {
    let result = catch_unwind(AssertUnwindSafe(|| -> Result<EvalOutput> {
        train_run(&cell.config, dir)?;
        eval_run(dir, &cell.config.eval, &dir.join("eval"))
    }));
    match result {
        Ok(r) => r,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(anyhow!("panicked: {msg}"))
        }
    }
}

/// Trains and evaluates every cell in order. A failing cell is recorded
/// and the suite moves on.
pub fn run_suite(title: &str, label_columns: &[&str], cells: &[AblationCell], out: &Path) -> Result<Table> {
    let mut table = Table::new(title, label_columns);
    for cell in cells {
        let dir = out.join(CELLS_DIR).join(&cell.name);
        log::info!("ablation cell {}", cell.name);
        match run_cell(cell, &dir) {
            Ok(EvalOutput { box_report, mask_report: Some(mask_report) }) => {
                table.push_ok(cell.labels.clone(), metric_values(&box_report, &mask_report));
            }
            Ok(_) => table.push_failed(cell.labels.clone(), "no mask report".into()),
            Err(e) => {
                log::error!("cell {} failed: {e:#}", cell.name);
                table.push_failed(cell.labels.clone(), format!("{e:#}"));
            }
        }
    }
    Ok(table)
}

pub fn ablate_cmd(args: &AblateArgs, root: &Path) -> Result<PathBuf> {
    let base = RunConfig::resolve(&args.overrides)?;
    let out = args.out.clone().unwrap_or_else(|| root.join("ablate"));
    create_dir(&out)?;
    Manifest::new("ablate", &base, base.seed())?.write(&out)?;
    if matches!(args.suite, SuiteArg::Variants | SuiteArg::All) {
        let t = run_suite("Objectness variants", &["Method"], &variant_cells(&base), &out)?;
        t.write_all(&out, VARIANT_TABLE)?;
        println!("{}", t.to_markdown());
    }
    if matches!(args.suite, SuiteArg::Neck | SuiteArg::All) {
        let t = run_suite("Neck", &["DCN", "BiFPN"], &neck_cells(&base), &out)?;
        t.write_all(&out, NECK_TABLE)?;
        println!("{}", t.to_markdown());
    }
    Ok(out)
}

pub const REPORT_TABLE: &str = "report";

/// Reads `report_box.json` and `report_mask.json` from each input; a run
/// directory is accepted in place of its `eval-plain` subdirectory.
pub fn report_cmd(args: &ReportArgs, root: &Path) -> Result<PathBuf> {
    if !args.labels.is_empty() && args.labels.len() != args.inputs.len() {
        bail!("{} labels for {} inputs", args.labels.len(), args.inputs.len());
    }
    let mut table = Table::new("Average recall", &["Method"]);
    for (i, input) in args.inputs.iter().enumerate() {
        let dir = if input.join(report_file(EvalMode::Box)).exists() {
            input.clone()
        } else {
            input.join("eval-plain")
        };
        let label = args.labels.get(i).cloned().unwrap_or_else(|| {
            input.file_name().map_or_else(|| input.display().to_string(), |n| n.to_string_lossy().into_owned())
        });
        let box_report: ArReport = read_json(&dir.join(report_file(EvalMode::Box)))?;
        let mask_path = dir.join(report_file(EvalMode::Mask));
        let mask_report: ArReport = if mask_path.exists() {
            read_json(&mask_path)?
        } else {
            ArReport { ar: None, ar_50: None, ar_75: None, ar_small: None, ar_medium: None, ar_large: None, ..box_report.clone() }
        };
        table.push_ok(vec![label], metric_values(&box_report, &mask_report));
    }
    let out = args.out.clone().unwrap_or_else(|| root.join("report"));
    create_dir(&out)?;
    table.write_all(&out, REPORT_TABLE)?;
    let config = serde_json::json!({ "inputs": args.inputs, "labels": args.labels });
    Manifest::new("report", &config, 0)?.write(&out)?;
    println!("{}", table.to_markdown());
    Ok(out)
}
