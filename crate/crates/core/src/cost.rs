//! Analytical ring all-reduce cost model for sync plans.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpdError};
use crate::model::{Model, ModelConfig};
use crate::parallel::{BlockMode, ParallelModel, SyncPlan};
use crate::tensor::ELEM_SIZE;

pub const HIGH_BANDWIDTH: f64 = 300e9;
pub const LOW_BANDWIDTH: f64 = 10e9;
pub const INTER_NODE_BANDWIDTH: f64 = 50e9;
/// Fixed cost of one ring step.
pub const DEFAULT_HOP_LATENCY: f64 = 5e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemProfile {
    pub name: String,
    pub devices: usize,
    pub nodes: usize,
    /// Bytes per second between devices of one node.
    pub intra_bw: f64,
    /// Bytes per second between nodes; required when `nodes > 1`.
    pub inter_bw: Option<f64>,
    /// Seconds per ring step.
    pub per_collective_latency: f64,
    /// Bytes per element of the synchronized activations.
    pub element_size: usize,
    /// Seconds of compute per decoder block.
    pub compute_time_per_block: f64,
}

impl SystemProfile {
    /// Named presets: `hbw-1node`, `lbw-1node`, `hbw-2node`, `lbw-2node`.
    pub fn preset(name: &str, devices: usize) -> Result<Self> {
        let (intra, nodes) = match name {
            "hbw-1node" | "hbw" => (HIGH_BANDWIDTH, 1),
            "lbw-1node" | "lbw" => (LOW_BANDWIDTH, 1),
            "hbw-2node" => (HIGH_BANDWIDTH, 2),
            "lbw-2node" => (LOW_BANDWIDTH, 2),
            other => return Err(SpdError::Config(format!("unknown system profile `{other}`"))),
        };
        let p = Self {
            name: name.to_string(),
            devices,
            nodes,
            intra_bw: intra,
            inter_bw: (nodes > 1).then_some(INTER_NODE_BANDWIDTH),
            per_collective_latency: DEFAULT_HOP_LATENCY,
            element_size: ELEM_SIZE,
            compute_time_per_block: 0.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["hbw-1node", "lbw-1node", "hbw-2node", "lbw-2node"]
    }

    pub fn with_compute_time(mut self, seconds: f64) -> Self {
        self.compute_time_per_block = seconds;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SpdError::Config(format!("profile `{}`: {m}", self.name)));
        if self.devices == 0 {
            return bad("needs at least one device".into());
        }
        if !(self.intra_bw > 0.0) {
            return bad(format!("intra-node bandwidth {} must be positive", self.intra_bw));
        }
        match (self.nodes, self.inter_bw) {
            (0, _) | (3.., _) => return bad(format!("{} nodes unsupported", self.nodes)),
            (2, _) if self.devices % 2 != 0 => return bad(format!("{} devices do not split over two nodes", self.devices)),
            (2, None) => return bad("two nodes need an inter-node bandwidth".into()),
            (2, Some(b)) if !(b > 0.0) => return bad(format!("inter-node bandwidth {b} must be positive")),
            _ => {}
        }
        if !(self.per_collective_latency >= 0.0) || !(self.compute_time_per_block >= 0.0) {
            return bad("latencies must be non-negative".into());
        }
        if self.element_size == 0 {
            return bad("element size must be positive".into());
        }
        Ok(())
    }

    /// Bandwidth of the slowest ring link.
    pub fn effective_bw(&self) -> f64 {
        match (self.nodes, self.inter_bw) {
            (2, Some(inter)) => self.intra_bw.min(inter),
            _ => self.intra_bw,
        }
    }
}

/// Ring all-reduce of `tensor_bytes`: `2(D-1)/D * bytes / bw + 2(D-1) * hop`.
/// A single device needs no transfer.
pub fn allreduce_cost(tensor_bytes: usize, profile: &SystemProfile) -> Result<f64> {
    profile.validate()?;
    if tensor_bytes == 0 {
        return Err(SpdError::Config("all-reduce of zero bytes".into()));
    }
    let d = profile.devices as f64;
    let steps = 2.0 * (d - 1.0);
    Ok(steps / d * tensor_bytes as f64 / profile.effective_bw() + steps * profile.per_collective_latency)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCost {
    pub block: usize,
    pub mode: BlockMode,
    pub allreduces: usize,
    pub bytes: usize,
    pub transfer_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub profile: String,
    pub devices: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub allreduce_count: usize,
    pub total_transfer_bytes: usize,
    pub transfer_latency_s: f64,
    pub compute_latency_s: f64,
    pub total_latency_s: f64,
    /// Full-TP total latency over this plan's total latency.
    pub speedup_vs_full_tp: f64,
    pub per_block: Vec<BlockCost>,
}

fn plan_totals(
    plan: &SyncPlan,
    config: &ModelConfig,
    profile: &SystemProfile,
    batch: usize,
    seq_len: usize,
) -> Result<(Vec<BlockCost>, f64)> {
    plan.validate(config.n_layers)?;
    if batch == 0 || seq_len == 0 {
        return Err(SpdError::Config("batch and sequence length must be positive".into()));
    }
    let bytes = batch * seq_len * config.d_model * profile.element_size;
    let one = allreduce_cost(bytes, profile)?;
    let per_block: Vec<BlockCost> = plan
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let n = match b.mode {
                BlockMode::Tp => 2,
                BlockMode::Spd => 1,
            };
            BlockCost { block: i, mode: b.mode, allreduces: n, bytes: n * bytes, transfer_s: n as f64 * one }
        })
        .collect();
    let transfer = per_block.iter().map(|b| b.transfer_s).sum();
    Ok((per_block, transfer))
}

/// Predicted latency of one forward pass over `batch x seq_len` tokens.
pub fn plan_cost(
    plan: &SyncPlan,
    config: &ModelConfig,
    profile: &SystemProfile,
    batch: usize,
    seq_len: usize,
) -> Result<CostReport> {
    let (per_block, transfer) = plan_totals(plan, config, profile, batch, seq_len)?;
    let compute = config.n_layers as f64 * profile.compute_time_per_block;
    let (_, full_transfer) = plan_totals(&SyncPlan::all_tp(config.n_layers), config, profile, batch, seq_len)?;
    let total = transfer + compute;
    Ok(CostReport {
        profile: profile.name.clone(),
        devices: profile.devices,
        batch,
        seq_len,
        allreduce_count: per_block.iter().map(|b| b.allreduces).sum(),
        total_transfer_bytes: per_block.iter().map(|b| b.bytes).sum(),
        transfer_latency_s: transfer,
        compute_latency_s: compute,
        total_latency_s: total,
        speedup_vs_full_tp: if total > 0.0 { (full_transfer + compute) / total } else { 1.0 },
        per_block,
    })
}

/// Plans with the first `k` blocks in SPD mode for `k = 0..=L`, priced under
/// every profile, as CSV.
pub fn cost_sweep_csv(
    config: &ModelConfig,
    profiles: &[SystemProfile],
    batch: usize,
    seq_len: usize,
) -> Result<String> {
    let l = config.n_layers;
    let mut out = String::from(
        "profile,spd_blocks,allreduce_count,total_transfer_bytes,transfer_latency_s,total_latency_s,speedup\n",
    );
    for p in profiles {
        for k in 0..=l {
            let blocks: Vec<usize> = (0..k).collect();
            let r = plan_cost(&SyncPlan::with_spd(l, &blocks), config, p, batch, seq_len)?;
            out.push_str(&format!(
                "{},{k},{},{},{},{},{}\n",
                r.profile, r.allreduce_count, r.total_transfer_bytes, r.transfer_latency_s, r.total_latency_s,
                r.speedup_vs_full_tp
            ));
        }
    }
    Ok(out)
}

/// Wall-clock seconds per block of an all-TP forward over `tokens`, averaged
/// over `repeats` runs.
pub fn calibrate_compute_time(model: &Model, devices: usize, tokens: &[u32], repeats: usize) -> Result<f64> {
    let exec = ParallelModel::new(model, &SyncPlan::all_tp(model.n_layers()), devices)?;
    let start = Instant::now();
    for _ in 0..repeats.max(1) {
        exec.forward(tokens)?;
    }
    Ok(start.elapsed().as_secs_f64() / (repeats.max(1) * model.n_layers().max(1)) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layers: usize) -> ModelConfig {
        ModelConfig { n_layers: layers, ..ModelConfig::default() }
    }

    #[test]
    fn ring_formula() {
        let mut p = SystemProfile::preset("hbw-1node", 4).unwrap();
        p.per_collective_latency = 0.0;
        let c = allreduce_cost(1_000_000, &p).unwrap();
        assert!((c - 1.5 * 1e6 / 300e9).abs() < 1e-18);
        p.devices = 1;
        assert_eq!(allreduce_cost(1_000_000, &p).unwrap(), 0.0);
        assert!(allreduce_cost(0, &p).is_err());
    }

    #[test]
    fn two_nodes_use_slowest_link() {
        let p = SystemProfile::preset("hbw-2node", 8).unwrap();
        assert_eq!(p.effective_bw(), INTER_NODE_BANDWIDTH);
        let l = SystemProfile::preset("lbw-2node", 8).unwrap();
        assert_eq!(l.effective_bw(), LOW_BANDWIDTH);
        let mut broken = p.clone();
        broken.inter_bw = None;
        assert!(broken.validate().is_err());
        assert!(SystemProfile::preset("fast", 2).is_err());
    }

    #[test]
    fn plan_counts_and_speedup() {
        let mut p = SystemProfile::preset("lbw-1node", 4).unwrap().with_compute_time(0.0);
        p.per_collective_latency = 0.0;
        let c = cfg(10);
        let full = plan_cost(&SyncPlan::all_tp(10), &c, &p, 1, 128).unwrap();
        assert_eq!(full.allreduce_count, 20);
        assert_eq!(full.speedup_vs_full_tp, 1.0);
        let spd = plan_cost(&SyncPlan::all_spd(10), &c, &p, 1, 128).unwrap();
        assert_eq!(spd.allreduce_count, 10);
        assert!((spd.speedup_vs_full_tp - 2.0).abs() < 1e-12);
        let seven = plan_cost(&SyncPlan::with_spd(10, &[0, 1, 2, 3, 4, 5, 6]), &c, &p, 1, 128).unwrap();
        assert_eq!(seven.allreduce_count, 13);
        assert!((seven.speedup_vs_full_tp - 20.0 / 13.0).abs() < 1e-12);
    }

    #[test]
    fn compute_dilutes_speedup() {
        let c = cfg(10);
        let base = SystemProfile::preset("hbw-1node", 4).unwrap();
        let t = plan_cost(&SyncPlan::all_tp(10), &c, &base, 1, 64).unwrap().transfer_latency_s;
        // Transfer is 40% of the full-TP total.
        let p = base.with_compute_time(t * 1.5 / 10.0);
        let r = plan_cost(&SyncPlan::with_spd(10, &[0, 1, 2, 3, 4, 5, 6]), &c, &p, 1, 64).unwrap();
        let expect = 1.0 / (0.6 + 0.4 * 13.0 / 20.0);
        assert!((r.speedup_vs_full_tp - expect).abs() < 1e-12, "{}", r.speedup_vs_full_tp);
    }
}
