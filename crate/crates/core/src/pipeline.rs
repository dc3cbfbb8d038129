//! Budgeted sync-point drop: rank blocks by sensitivity, treat the least
//! sensitive ones according to their category, and evaluate the result.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_text, write_atomic, Overlay};
use crate::corpus::CalibrationSet;
use crate::cost::{plan_cost, CostReport, SystemProfile};
use crate::distill::{
    cache_block_inputs_with_plan, distill_block, DistillHyper, DistillJob, DistillStats, PrefixMode,
};
use crate::error::{Result, SpdError};
use crate::grouping::{group_heads, reorder_block_weights, GroupingOptions, GroupingReport};
use crate::model::{perplexity, Model};
use crate::parallel::{BlockMode, BlockPlan, ParallelModel, SyncPlan};
use crate::sensitivity::{Category, SensitivityReport};

/// Which treatments are available to blocks selected for dropping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Every selected block is dropped as-is.
    #[serde(rename = "zs")]
    Zs,
    /// Sensitive and extremely sensitive blocks are distilled first.
    #[serde(rename = "zs+b2b")]
    ZsB2b,
    /// As above, with head grouping before distilling extremely sensitive blocks.
    #[serde(rename = "zs+b2b+hg")]
    ZsB2bHg,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Zs, Strategy::ZsB2b, Strategy::ZsB2bHg];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Zs => "zs",
            Strategy::ZsB2b => "zs+b2b",
            Strategy::ZsB2bHg => "zs+b2b+hg",
        }
    }

    pub fn treatment(self, category: Category) -> Treatment {
        match (self, category) {
            (Strategy::Zs, _) | (_, Category::Isb) => Treatment::ZeroShot,
            (Strategy::ZsB2b, _) | (Strategy::ZsB2bHg, Category::Sb) => Treatment::Distill,
            (Strategy::ZsB2bHg, Category::Esb) => Treatment::GroupAndDistill,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = SpdError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| SpdError::Config(format!("unknown mode `{s}`; expected zs, zs+b2b or zs+b2b+hg")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Treatment {
    ZeroShot,
    Distill,
    GroupAndDistill,
}

/// One block chosen for dropping and how it will be treated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedBlock {
    /// Position in the ascending sensitivity ranking.
    pub rank: usize,
    pub block: usize,
    pub score: f64,
    pub category: Category,
    pub treatment: Treatment,
}

/// The first `n_spd` blocks of the ranking with their treatments.
pub fn plan_blocks(report: &SensitivityReport, n_spd: usize, strategy: Strategy) -> Result<Vec<PlannedBlock>> {
    let n = report.n_layers();
    if n_spd > n {
        return Err(SpdError::Config(format!("budget {n_spd} exceeds {n} blocks")));
    }
    Ok(report.ranking[..n_spd]
        .iter()
        .enumerate()
        .map(|(rank, &block)| PlannedBlock {
            rank,
            block,
            score: report.scores[block],
            category: report.categories[block],
            treatment: strategy.treatment(report.categories[block]),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOptions {
    pub devices: usize,
    pub strategy: Strategy,
    pub distill: DistillHyper,
    pub prefix: PrefixMode,
    pub grouping: GroupingOptions,
    /// Sequences and tokens per sequence used for head signatures and MLP matching.
    pub signature_samples: usize,
    pub signature_tokens: usize,
}

impl OptimizeOptions {
    pub fn new(devices: usize, strategy: Strategy) -> Self {
        Self {
            devices,
            strategy,
            distill: DistillHyper::default(),
            prefix: PrefixMode::AllTp,
            grouping: GroupingOptions::default(),
            signature_samples: 4,
            signature_tokens: 128,
        }
    }
}

/// Log entry for one treated block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    #[serde(flatten)]
    pub planned: PlannedBlock,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub distill: Option<DistillStatsRecord>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grouping: Option<GroupingReport>,
}

/// Serializable mirror of [`DistillStats`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillStatsRecord {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

impl From<DistillStats> for DistillStatsRecord {
    fn from(s: DistillStats) -> Self {
        Self { initial_loss: s.initial_loss, final_loss: s.final_loss, epoch_losses: s.epoch_losses, steps: s.steps }
    }
}

#[derive(Debug, Clone)]
pub struct Optimized {
    /// Base model with every rewritten block substituted.
    pub model: Model,
    pub plan: SyncPlan,
    pub overlay: Overlay,
    pub decisions: Vec<Decision>,
}

/// Applies the budgeted treatment to `base`. Blocks are visited in ranking
/// order; each is marked SPD after its treatment.
pub fn optimize(
    base: &Model,
    report: &SensitivityReport,
    calib: &CalibrationSet,
    n_spd: usize,
    opts: &OptimizeOptions,
) -> Result<Optimized> {
    let n = base.n_layers();
    if report.n_layers() != n {
        return Err(SpdError::Contract(format!("report covers {} blocks, model has {n}", report.n_layers())));
    }
    base.config.check_devices(opts.devices)?;
    let planned = plan_blocks(report, n_spd, opts.strategy)?;
    let mut model = base.clone();
    let mut plan = SyncPlan::all_tp(n);
    let mut overlay = Overlay::new(base)?;
    let mut decisions = Vec::with_capacity(planned.len());
    let sig_set = calib.subset(opts.signature_samples, opts.signature_tokens);
    for p in planned {
        let i = p.block;
        let inputs_for = |set: &CalibrationSet, model: &Model, plan: &SyncPlan| match opts.prefix {
            PrefixMode::AllTp => cache_block_inputs_with_plan(base, &SyncPlan::all_tp(n), set, i, opts.devices),
            PrefixMode::Converted => cache_block_inputs_with_plan(model, plan, set, i, opts.devices),
        };
        let mut decision = Decision { planned: p.clone(), distill: None, grouping: None };
        if p.treatment != Treatment::ZeroShot {
            let mut teacher = model.blocks[i].clone();
            if p.treatment == Treatment::GroupAndDistill {
                let sig_inputs = inputs_for(&sig_set, &model, &plan)?;
                let mut gopts = opts.grouping.clone();
                gopts.seed = gopts.seed.wrapping_add(i as u64);
                let g = group_heads(i, &teacher, &model.config, &sig_inputs, opts.devices, &gopts)?;
                teacher = reorder_block_weights(&teacher, &g.grouping.head_order, &model.config)?;
                decision.grouping = Some(g);
            }
            let inputs = inputs_for(calib, &model, &plan)?;
            let job = DistillJob::new(&model.config, i, teacher, inputs, opts.devices, opts.distill.clone())?;
            let out = distill_block(job)?;
            decision.distill = Some(out.stats.into());
            overlay.blocks.insert(i, out.student.clone());
            model.blocks[i] = out.student;
        }
        plan.blocks[i] = BlockPlan::spd();
        decisions.push(decision);
    }
    Ok(Optimized { model, plan, overlay, decisions })
}

/// Rebuilds the sync plan implied by a decision log.
pub fn replay_plan(decisions: &[Decision], n_layers: usize) -> Result<SyncPlan> {
    let mut plan = SyncPlan::all_tp(n_layers);
    for (k, d) in decisions.iter().enumerate() {
        if d.planned.rank != k {
            return Err(SpdError::Contract(format!("decision {k} has rank {}", d.planned.rank)));
        }
        let slot = plan
            .blocks
            .get_mut(d.planned.block)
            .ok_or_else(|| SpdError::Contract(format!("decision names block {}", d.planned.block)))?;
        if slot.mode == BlockMode::Spd {
            return Err(SpdError::Contract(format!("block {} decided twice", d.planned.block)));
        }
        *slot = BlockPlan::spd();
    }
    Ok(plan)
}

/// Checks that `decisions` replays to `saved` and matches the ranking in
/// `report`.
pub fn verify_replay(decisions: &[Decision], saved: &SyncPlan, report: &SensitivityReport) -> Result<()> {
    let replayed = replay_plan(decisions, report.n_layers())?;
    if &replayed != saved {
        return Err(SpdError::Contract("decision log does not reproduce the saved plan".into()));
    }
    for d in decisions {
        if report.ranking.get(d.planned.rank) != Some(&d.planned.block) {
            return Err(SpdError::Contract(format!(
                "decision for block {} disagrees with the ranking",
                d.planned.block
            )));
        }
    }
    Ok(())
}

/// One evaluation of a model under a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub spd_blocks: usize,
    pub ppl: f64,
    pub allreduce_count: usize,
    pub costs: Vec<CostReport>,
}

pub fn evaluate(
    model: &Model,
    plan: &SyncPlan,
    devices: usize,
    eval: &CalibrationSet,
    profiles: &[SystemProfile],
    batch: usize,
    seq_len: usize,
) -> Result<Evaluation> {
    let ppl = perplexity(&ParallelModel::new(model, plan, devices)?, eval)?;
    let costs = profiles
        .iter()
        .map(|p| plan_cost(plan, &model.config, p, batch, seq_len))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        spd_blocks: plan.spd_count(),
        ppl,
        allreduce_count: 2 * plan.len() - plan.spd_count(),
        costs,
    })
}

pub fn evaluation_csv(rows: &[Evaluation]) -> String {
    let mut out = String::from("spd_blocks,ppl,allreduce_count,profile,transfer_latency_s,total_latency_s,speedup\n");
    for r in rows {
        for c in &r.costs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.spd_blocks, r.ppl, r.allreduce_count, c.profile, c.transfer_latency_s, c.total_latency_s,
                c.speedup_vs_full_tp
            );
        }
    }
    out
}

/// Everything one optimization run produces.
#[derive(Debug, Clone)]
pub struct OptimizedArtifact {
    pub optimized: Optimized,
    pub report: SensitivityReport,
    pub baseline: Evaluation,
    pub result: Evaluation,
}

impl OptimizedArtifact {
    /// Writes `overlay.ckpt`, `plan.json`, `decisions.jsonl`,
    /// `sensitivity.json`, `evaluation.csv` and one `grouping_block<i>.json`
    /// per grouped block into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.optimized.overlay.save(dir.join("overlay.ckpt"))?;
        write_atomic(dir.join("plan.json"), serde_json::to_string_pretty(&self.optimized.plan)?.as_bytes())?;
        let mut log = String::new();
        for d in &self.optimized.decisions {
            log.push_str(&serde_json::to_string(d)?);
            log.push('\n');
        }
        write_atomic(dir.join("decisions.jsonl"), log.as_bytes())?;
        write_atomic(dir.join("sensitivity.json"), serde_json::to_string_pretty(&self.report)?.as_bytes())?;
        let table = evaluation_csv(&[self.baseline.clone(), self.result.clone()]);
        write_atomic(dir.join("evaluation.csv"), table.as_bytes())?;
        for d in &self.optimized.decisions {
            if let Some(g) = &d.grouping {
                write_atomic(
                    dir.join(format!("grouping_block{}.json", g.block)),
                    serde_json::to_string_pretty(g)?.as_bytes(),
                )?;
            }
        }
        Ok(())
    }
}

pub fn read_decisions(path: impl AsRef<Path>) -> Result<Vec<Decision>> {
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(SpdError::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub budget: usize,
    pub spd_fraction: f64,
    pub mode: Strategy,
    pub profile: String,
    pub ppl: f64,
    pub allreduce_count: usize,
    pub transfer_bytes: usize,
    pub transfer_latency_s: f64,
    pub total_latency_s: f64,
    pub speedup: f64,
}

pub const SWEEP_HEADER: &str =
    "budget,spd_fraction,mode,profile,ppl,allreduce_count,transfer_bytes,transfer_latency_s,total_latency_s,speedup";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.budget,
            r.spd_fraction,
            r.mode,
            r.profile,
            r.ppl,
            r.allreduce_count,
            r.transfer_bytes,
            r.transfer_latency_s,
            r.total_latency_s,
            r.speedup
        );
    }
    out
}

pub struct SweepSpec<'a> {
    pub budgets: &'a [usize],
    pub modes: &'a [Strategy],
    pub profiles: &'a [SystemProfile],
    pub batch: usize,
    pub seq_len: usize,
}

/// Runs an independent optimization for every (budget, mode) pair and
/// prices the resulting plan under every profile.
pub fn sweep(
    base: &Model,
    report: &SensitivityReport,
    calib: &CalibrationSet,
    eval: &CalibrationSet,
    spec: &SweepSpec<'_>,
    opts: &OptimizeOptions,
    mut progress: impl FnMut(usize, Strategy, f64),
) -> Result<Vec<SweepRow>> {
    let n = base.n_layers();
    let mut rows = Vec::new();
    for &budget in spec.budgets {
        for &mode in spec.modes {
            let run = optimize(base, report, calib, budget, &OptimizeOptions { strategy: mode, ..opts.clone() })?;
            let e = evaluate(&run.model, &run.plan, opts.devices, eval, spec.profiles, spec.batch, spec.seq_len)?;
            progress(budget, mode, e.ppl);
            for c in e.costs {
                rows.push(SweepRow {
                    budget,
                    spd_fraction: budget as f64 / n as f64,
                    mode,
                    profile: c.profile,
                    ppl: e.ppl,
                    allreduce_count: c.allreduce_count,
                    transfer_bytes: c.total_transfer_bytes,
                    transfer_latency_s: c.transfer_latency_s,
                    total_latency_s: c.total_latency_s,
                    speedup: c.speedup_vs_full_tp,
                });
            }
        }
    }
    Ok(rows)
}

/// Count of blocks per category.
pub fn category_counts(report: &SensitivityReport) -> [(Category, usize); 3] {
    let count = |c| report.categories.iter().filter(|&&k| k == c).count();
    [(Category::Isb, count(Category::Isb)), (Category::Sb, count(Category::Sb)), (Category::Esb, count(Category::Esb))]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(scores: &[f64]) -> SensitivityReport {
        let mut curve = vec![0.0; scores.len() + 1];
        curve[scores.len()] = 10.0;
        for i in (0..scores.len()).rev() {
            curve[i] = curve[i + 1] + scores[i];
        }
        SensitivityReport::from_curve(curve, 2, 0.05, 10.0).unwrap()
    }

    #[test]
    fn treatments_per_mode() {
        assert_eq!(Strategy::Zs.treatment(Category::Esb), Treatment::ZeroShot);
        assert_eq!(Strategy::ZsB2b.treatment(Category::Esb), Treatment::Distill);
        assert_eq!(Strategy::ZsB2bHg.treatment(Category::Esb), Treatment::GroupAndDistill);
        assert_eq!(Strategy::ZsB2bHg.treatment(Category::Isb), Treatment::ZeroShot);
        assert_eq!("zs+b2b".parse::<Strategy>().unwrap(), Strategy::ZsB2b);
        assert!("b2b".parse::<Strategy>().is_err());
        assert_eq!(serde_json::to_string(&Strategy::ZsB2bHg).unwrap(), "\"zs+b2b+hg\"");
    }

    #[test]
    fn planned_blocks_follow_ranking() {
        let r = report(&[20.0, 0.01, 1.0, 0.02]);
        let p = plan_blocks(&r, 3, Strategy::ZsB2bHg).unwrap();
        let blocks: Vec<usize> = p.iter().map(|b| b.block).collect();
        assert_eq!(blocks, vec![1, 3, 2]);
        assert_eq!(p[2].treatment, Treatment::Distill);
        assert!(plan_blocks(&r, 0, Strategy::Zs).unwrap().is_empty());
        assert!(plan_blocks(&r, 5, Strategy::Zs).is_err());
    }

    #[test]
    fn replay_round_trip() {
        let r = report(&[20.0, 0.01, 1.0, 0.02]);
        let decisions: Vec<Decision> = plan_blocks(&r, 2, Strategy::Zs)
            .unwrap()
            .into_iter()
            .map(|planned| Decision { planned, distill: None, grouping: None })
            .collect();
        let plan = replay_plan(&decisions, 4).unwrap();
        assert_eq!(plan, SyncPlan::with_spd(4, &[1, 3]));
        verify_replay(&decisions, &plan, &r).unwrap();
        assert!(verify_replay(&decisions, &SyncPlan::all_tp(4), &r).is_err());
        let line = serde_json::to_string(&decisions[0]).unwrap();
        assert_eq!(serde_json::from_str::<Decision>(&line).unwrap(), decisions[0]);
    }
}
