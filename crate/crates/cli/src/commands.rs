use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;

use spd_core::checkpoint::{load_model, read_text, save_model, write_atomic, Overlay};
use spd_core::config::Datasets;
use spd_core::cost::{calibrate_compute_time, cost_sweep_csv, plan_cost, SystemProfile};
use spd_core::model::{init_model, train_toy};
use spd_core::pipeline::{
    category_counts, evaluate, optimize as run_optimize, read_decisions, sweep as run_sweep, sweep_csv,
    verify_replay, OptimizeOptions, OptimizedArtifact, SweepSpec,
};
use spd_core::sensitivity::scan as run_scan;
use spd_core::{Category, Model, PipelineConfig, Result, SensitivityReport, SpdError, Strategy, SyncPlan};

use crate::Common;

fn out_dir(cfg: &PipelineConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn base_model(cfg: &PipelineConfig) -> Result<Model> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| SpdError::Config("no checkpoint given (--checkpoint or `checkpoint` in the config)".into()))?;
    load_model(path)
}

fn profiles(cfg: &PipelineConfig) -> Result<Vec<SystemProfile>> {
    cfg.profiles
        .iter()
        .map(|p| Ok(SystemProfile::preset(p, cfg.devices)?.with_compute_time(cfg.compute_time_per_block)))
        .collect()
}

fn datasets(cfg: &PipelineConfig, model: &Model) -> Result<Datasets> {
    if cfg.calib_seq_len > model.config.max_seq {
        return Err(SpdError::Config(format!(
            "calib_seq_len {} exceeds the model's max_seq {}",
            cfg.calib_seq_len, model.config.max_seq
        )));
    }
    cfg.datasets()
}

fn options(cfg: &PipelineConfig, strategy: Strategy) -> OptimizeOptions {
    OptimizeOptions {
        distill: cfg.distill_hyper(),
        prefix: cfg.prefix_mode,
        grouping: cfg.grouping_options(),
        signature_samples: cfg.signature_samples,
        signature_tokens: cfg.signature_tokens,
        ..OptimizeOptions::new(cfg.devices, strategy)
    }
}

fn sensitivity(common: &Common, cfg: &PipelineConfig, model: &Model, data: &Datasets) -> Result<SensitivityReport> {
    match &common.report {
        Some(p) => {
            let r: SensitivityReport = serde_json::from_str(&read_text(p)?)?;
            if r.n_layers() != model.n_layers() {
                return Err(SpdError::Config(format!(
                    "report covers {} blocks, model has {}",
                    r.n_layers(),
                    model.n_layers()
                )));
            }
            Ok(r)
        }
        None => {
            eprintln!("scanning {} blocks on {} devices", model.n_layers(), cfg.devices);
            run_scan(model, cfg.devices, &data.calib, cfg.tau1, cfg.tau2)
        }
    }
}

fn load_plan(common: &Common, n_layers: usize) -> Result<SyncPlan> {
    match &common.plan {
        Some(p) => {
            let plan: SyncPlan = serde_json::from_str(&read_text(p)?)?;
            plan.validate(n_layers)?;
            Ok(plan)
        }
        None => Ok(SyncPlan::all_tp(n_layers)),
    }
}

pub fn pretrain(common: &Common) -> Result<()> {
    let (cfg, _) = common.resolve()?;
    let model_cfg = cfg.model_config();
    let model = init_model(&model_cfg, cfg.seed)?;
    let data = datasets(&cfg, &model)?;
    eprintln!("training for {} steps on {} tokens", cfg.train_steps, data.train.len());
    let (trained, losses) = train_toy(&model, &data.train, &cfg.train_hyper())?;
    let dir = out_dir(&cfg)?;
    let ckpt = dir.join("model.ckpt");
    save_model(&trained, &ckpt)?;
    let mut curve = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(curve, "{i},{l}");
    }
    write_atomic(dir.join("train_loss.csv"), curve.as_bytes())?;
    let ppl = evaluate(&trained, &SyncPlan::all_tp(trained.n_layers()), 1, &data.eval, &[], 1, 1)?.ppl;
    println!(
        "{}",
        json!({ "checkpoint": ckpt, "final_loss": losses.last(), "heldout_ppl": ppl, "steps": losses.len() })
    );
    Ok(())
}

pub fn scan(common: &Common) -> Result<()> {
    let (cfg, _) = common.resolve()?;
    let model = base_model(&cfg)?;
    let data = datasets(&cfg, &model)?;
    let report = run_scan(&model, cfg.devices, &data.calib, cfg.tau1, cfg.tau2)?;
    let dir = out_dir(&cfg)?;
    write_json(&dir.join("sensitivity.json"), &report)?;
    write_atomic(dir.join("suffix_curve.csv"), report.curve_csv().as_bytes())?;
    let counts: serde_json::Map<String, serde_json::Value> = category_counts(&report)
        .iter()
        .map(|(c, n)| (category_name(*c), json!(n)))
        .collect();
    println!("{}", json!({ "ranking": report.ranking, "categories": counts, "scores": report.scores }));
    Ok(())
}

pub fn optimize(common: &Common) -> Result<()> {
    let (cfg, _) = common.resolve()?;
    let base = base_model(&cfg)?;
    let data = datasets(&cfg, &base)?;
    let profiles = profiles(&cfg)?;
    let report = sensitivity(common, &cfg, &base, &data)?;
    let n_spd = cfg.budget.resolve(base.n_layers())?;
    eprintln!("dropping {n_spd} of {} sync-points with {}", base.n_layers(), cfg.mode);
    let optimized = run_optimize(&base, &report, &data.calib, n_spd, &options(&cfg, cfg.mode))?;
    verify_replay(&optimized.decisions, &optimized.plan, &report)?;
    let baseline = evaluate(
        &base,
        &SyncPlan::all_tp(base.n_layers()),
        cfg.devices,
        &data.eval,
        &profiles,
        cfg.batch,
        cfg.cost_seq_len,
    )?;
    let result =
        evaluate(&optimized.model, &optimized.plan, cfg.devices, &data.eval, &profiles, cfg.batch, cfg.cost_seq_len)?;
    let artifact = OptimizedArtifact { optimized, report, baseline, result };
    let dir = out_dir(&cfg)?;
    artifact.write(&dir)?;
    println!(
        "{}",
        json!({
            "out": dir,
            "spd_blocks": artifact.result.spd_blocks,
            "baseline_ppl": artifact.baseline.ppl,
            "ppl": artifact.result.ppl,
            "allreduce_count": artifact.result.allreduce_count,
        })
    );
    Ok(())
}

pub fn eval_ppl(common: &Common) -> Result<()> {
    let (cfg, _) = common.resolve()?;
    let mut model = base_model(&cfg)?;
    if let Some(o) = &common.overlay {
        model = Overlay::load(o)?.apply(&model)?;
    }
    let plan = load_plan(common, model.n_layers())?;
    let data = datasets(&cfg, &model)?;
    let e = evaluate(&model, &plan, cfg.devices, &data.eval, &[], 1, 1)?;
    println!("{}", json!({ "ppl": e.ppl, "spd_blocks": e.spd_blocks, "allreduce_count": e.allreduce_count }));
    Ok(())
}

pub fn eval_cost(common: &Common) -> Result<()> {
    let (cfg, _) = common.resolve()?;
    let model = match &cfg.checkpoint {
        Some(_) => Some(base_model(&cfg)?),
        None => None,
    };
    let model_cfg = model.as_ref().map_or_else(|| cfg.model_config(), |m| m.config.clone());
    let plan = load_plan(common, model_cfg.n_layers)?;
    let mut profiles = profiles(&cfg)?;
    if common.calibrate_compute {
        let model = model.as_ref().ok_or_else(|| {
            SpdError::Config("--calibrate-compute needs a checkpoint to time".into())
        })?;
        let tokens: Vec<u32> = (0..cfg.cost_seq_len.min(model_cfg.max_seq)).map(|i| (i % model_cfg.vocab_size) as u32).collect();
        let secs = calibrate_compute_time(model, cfg.devices, &tokens, 3)?;
        eprintln!("calibrated compute time per block: {secs:.3e} s");
        profiles = profiles.into_iter().map(|p| p.with_compute_time(secs)).collect();
    }
    let reports = profiles
        .iter()
        .map(|p| plan_cost(&plan, &model_cfg, p, cfg.batch, cfg.cost_seq_len))
        .collect::<Result<Vec<_>>>()?;
    let dir = out_dir(&cfg)?;
    write_json(&dir.join("cost.json"), &reports)?;
    write_atomic(
        dir.join("cost_sweep.csv"),
        cost_sweep_csv(&model_cfg, &profiles, cfg.batch, cfg.cost_seq_len)?.as_bytes(),
    )?;
    println!("{}", serde_json::to_string(&reports)?);
    Ok(())
}

pub fn sweep(common: &Common) -> Result<()> {
    let (cfg, modes) = common.resolve()?;
    let modes = if common.mode.is_some() { modes } else { Strategy::ALL.to_vec() };
    let base = base_model(&cfg)?;
    let data = datasets(&cfg, &base)?;
    let profiles = profiles(&cfg)?;
    let report = sensitivity(common, &cfg, &base, &data)?;
    let budgets: Vec<usize> = (0..=base.n_layers()).collect();
    let spec = SweepSpec { budgets: &budgets, modes: &modes, profiles: &profiles, batch: cfg.batch, seq_len: cfg.cost_seq_len };
    let rows = run_sweep(&base, &report, &data.calib, &data.eval, &spec, &options(&cfg, cfg.mode), |b, m, ppl| {
        eprintln!("budget {b} {m}: ppl {ppl:.4}")
    })?;
    let dir = out_dir(&cfg)?;
    write_json(&dir.join("sensitivity.json"), &report)?;
    write_atomic(dir.join("sweep.csv"), sweep_csv(&rows).as_bytes())?;
    println!("{}", json!({ "rows": rows.len(), "out": dir.join("sweep.csv") }));
    Ok(())
}

pub fn export_report(common: &Common) -> Result<()> {
    let (cfg, _) = common.resolve()?;
    let dir = PathBuf::from(&cfg.out);
    let report: SensitivityReport = serde_json::from_str(&read_text(dir.join("sensitivity.json"))?)?;
    let mut md = String::from("# Sync-point drop report\n\n## Block sensitivity\n\n");
    let _ = writeln!(md, "Devices: {}; thresholds: {} / {}\n", report.devices, report.tau1, report.tau2);
    md.push_str("| block | score | category | rank |\n|---|---|---|---|\n");
    for (b, s) in report.scores.iter().enumerate() {
        let rank = report.ranking.iter().position(|&r| r == b).unwrap_or(b);
        let _ = writeln!(md, "| {b} | {s:.6} | {} | {rank} |", category_name(report.categories[b]));
    }
    md.push_str("\n| category | blocks |\n|---|---|\n");
    let counts = category_counts(&report);
    for (c, n) in counts {
        let _ = writeln!(md, "| {} | {n} |", category_name(c));
    }
    let mut summary = json!({
        "categories": counts.iter().map(|(c, n)| (category_name(*c), *n)).collect::<std::collections::BTreeMap<_, _>>(),
        "ranking": report.ranking,
    });
    let decisions_path = dir.join("decisions.jsonl");
    if decisions_path.exists() {
        let decisions = read_decisions(&decisions_path)?;
        let plan: SyncPlan = serde_json::from_str(&read_text(dir.join("plan.json"))?)?;
        verify_replay(&decisions, &plan, &report)?;
        md.push_str("\n## Decisions\n\n| rank | block | category | treatment | distill loss |\n|---|---|---|---|---|\n");
        for d in &decisions {
            let loss = d
                .distill
                .as_ref()
                .map_or(String::from("-"), |s| format!("{:.3e} -> {:.3e}", s.initial_loss, s.final_loss));
            let _ = writeln!(
                md,
                "| {} | {} | {} | {:?} | {loss} |",
                d.planned.rank,
                d.planned.block,
                category_name(d.planned.category),
                d.planned.treatment
            );
        }
        summary["decisions"] = json!(decisions.len());
        summary["spd_blocks"] = json!(plan.spd_count());
    }
    for (name, title) in [("evaluation.csv", "Evaluation"), ("sweep.csv", "Sweep"), ("suffix_curve.csv", "Suffix curve")] {
        let path = dir.join(name);
        if path.exists() {
            let _ = writeln!(md, "\n## {title}\n");
            md.push_str(&csv_to_markdown(&read_text(path)?));
        }
    }
    write_atomic(dir.join("report.md"), md.as_bytes())?;
    write_json(&dir.join("report.json"), &summary)?;
    println!("{}", json!({ "report": dir.join("report.md") }));
    Ok(())
}

fn category_name(c: Category) -> String {
    format!("{c:?}").to_uppercase()
}

fn csv_to_markdown(csv: &str) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().filter(|l| !l.is_empty()).enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
        if i == 0 {
            let _ = writeln!(out, "|{}", "---|".repeat(cells.len()));
        }
    }
    out
}
