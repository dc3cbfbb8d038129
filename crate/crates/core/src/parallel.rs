//! Simulated `D`-device tensor-parallel execution.
//!
//! Devices run in a fixed round-robin order on one tape. Every all-reduce is
//! an ascending-device-order sum, so a run is bit-reproducible and the ring
//! topology only matters to the cost model.
//!
//! A TP block has two sync-points (attention output, MLP output). An SPD
//! block drops the first: each device feeds `norm2(X_i + Y_i)` from its own
//! partial attention output into its MLP partition and folds `Y_i` into the
//! single remaining all-reduce.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SpdError};
use crate::model::{
    attention_heads, mlp_partial, norm, BlockVars, DecoderBlockWeights, LogitsSource, Model,
    ModelConfig, NormParams,
};
use crate::tensor::{Tensor, ELEM_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockMode {
    Tp,
    Spd,
}

/// Where a residual term joins the MLP output of an SPD block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualSite {
    BeforeMlpAllreduce,
    AfterMlpAllreduce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ablation {
    pub attn_residual_site: ResidualSite,
    pub bias_residual_site: ResidualSite,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            attn_residual_site: ResidualSite::BeforeMlpAllreduce,
            bias_residual_site: ResidualSite::AfterMlpAllreduce,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockPlan {
    pub mode: BlockMode,
    #[serde(default)]
    pub ablation: Ablation,
}

impl BlockPlan {
    pub fn tp() -> Self {
        Self { mode: BlockMode::Tp, ablation: Ablation::default() }
    }

    pub fn spd() -> Self {
        Self { mode: BlockMode::Spd, ablation: Ablation::default() }
    }
}

/// Per-block execution modes. Serializes as a JSON list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SyncPlan {
    pub blocks: Vec<BlockPlan>,
}

impl SyncPlan {
    pub fn all_tp(n_layers: usize) -> Self {
        Self { blocks: vec![BlockPlan::tp(); n_layers] }
    }

    pub fn all_spd(n_layers: usize) -> Self {
        Self { blocks: vec![BlockPlan::spd(); n_layers] }
    }

    /// Blocks `>= first_spd` are SPD, earlier ones TP.
    pub fn suffix(n_layers: usize, first_spd: usize) -> Self {
        Self {
            blocks: (0..n_layers)
                .map(|i| if i >= first_spd { BlockPlan::spd() } else { BlockPlan::tp() })
                .collect(),
        }
    }

    /// Plan with SPD exactly on `spd_blocks`.
    pub fn with_spd(n_layers: usize, spd_blocks: &[usize]) -> Self {
        let mut plan = Self::all_tp(n_layers);
        for &b in spd_blocks {
            plan.blocks[b].mode = BlockMode::Spd;
        }
        plan
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn spd_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.mode == BlockMode::Spd).count()
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.blocks.len() != n_layers {
            return Err(SpdError::Config(format!(
                "plan covers {} blocks, model has {n_layers}",
                self.blocks.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncSite {
    AttnOut,
    MlpOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    AllReduceSum,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectiveEvent {
    pub kind: CollectiveKind,
    pub block: usize,
    pub site: SyncSite,
    pub shape: Vec<usize>,
    pub bytes: usize,
}

#[derive(Debug, Clone)]
pub struct DeviceMesh {
    devices: usize,
    pub trace: Vec<CollectiveEvent>,
}

impl DeviceMesh {
    pub fn new(devices: usize) -> Result<Self> {
        if devices == 0 {
            return Err(SpdError::Config("a mesh needs at least one device".into()));
        }
        Ok(Self { devices, trace: Vec::new() })
    }

    pub fn devices(&self) -> usize {
        self.devices
    }

    fn record(&mut self, shape: &[usize], block: usize, site: SyncSite) {
        self.trace.push(CollectiveEvent {
            kind: CollectiveKind::AllReduceSum,
            block,
            site,
            shape: shape.to_vec(),
            bytes: shape.iter().product::<usize>() * ELEM_SIZE,
        });
    }

    fn check_parts(&self, shapes: &[&[usize]]) -> Result<()> {
        if shapes.len() != self.devices {
            return Err(SpdError::Contract(format!(
                "all-reduce over {} parts on a {}-device mesh",
                shapes.len(),
                self.devices
            )));
        }
        if shapes.iter().any(|s| *s != shapes[0]) {
            return Err(SpdError::Contract("all-reduce parts differ in shape".into()));
        }
        Ok(())
    }

    /// Element-wise sum in ascending device order; traces one event.
    pub fn all_reduce_sum(&mut self, parts: &[Tensor], block: usize, site: SyncSite) -> Result<Tensor> {
        let shapes: Vec<&[usize]> = parts.iter().map(Tensor::shape).collect();
        self.check_parts(&shapes)?;
        let mut acc = parts[0].clone();
        for p in &parts[1..] {
            acc = acc.add(p)?;
        }
        acc.requires_grad = false;
        self.record(shapes[0], block, site);
        Ok(acc)
    }

    /// Differentiable all-reduce on a tape; same summation order as
    /// [`all_reduce_sum`](Self::all_reduce_sum).
    pub fn all_reduce_on(&mut self, tape: &mut Tape, parts: &[Var], block: usize, site: SyncSite) -> Result<Var> {
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| tape.value(p).shape().to_vec()).collect();
        let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        self.check_parts(&refs)?;
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = tape.add(acc, p)?;
        }
        self.record(&shapes[0], block, site);
        Ok(acc)
    }

    pub fn allreduce_count(&self) -> usize {
        self.trace.len()
    }

    pub fn traced_bytes(&self) -> usize {
        self.trace.iter().map(|e| e.bytes).sum()
    }

    /// One JSON object per line.
    pub fn write_trace_jsonl(&self, mut w: impl Write) -> Result<()> {
        for e in &self.trace {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Weight slices resident on one device.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceShard {
    /// Original head indices held by this device, in local order.
    pub heads: Vec<usize>,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub w_gate: Option<Tensor>,
    pub w_down: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardedBlock {
    pub devices: Vec<DeviceShard>,
    /// Replicated attention output bias.
    pub bo: Option<Tensor>,
    /// Replicated MLP down-projection bias, added once after the all-reduce.
    pub b_down: Tensor,
    pub norm1: NormParams,
    pub norm2: NormParams,
    pub mode: BlockMode,
    pub ablation: Ablation,
    pub config: ModelConfig,
}

pub(crate) fn check_head_order(order: &[usize], n_heads: usize) -> Result<()> {
    let mut seen = vec![false; n_heads];
    if order.len() != n_heads {
        return Err(SpdError::Contract(format!("head order of length {} for {n_heads} heads", order.len())));
    }
    for &h in order {
        if h >= n_heads || std::mem::replace(&mut seen[h], true) {
            return Err(SpdError::Contract(format!("head order {order:?} is not a permutation")));
        }
    }
    Ok(())
}

/// Gathers head-sized column groups (`by_rows == false`) or row groups.
pub(crate) fn gather_heads(t: &Tensor, heads: &[usize], head_dim: usize, by_rows: bool) -> Result<Tensor> {
    let parts: Vec<Tensor> = heads
        .iter()
        .map(|&h| {
            if by_rows {
                t.slice_rows(h * head_dim, head_dim)
            } else {
                t.slice_cols(h * head_dim, head_dim)
            }
        })
        .collect::<Result<_>>()?;
    if by_rows {
        Tensor::concat_rows(&parts)
    } else {
        Tensor::concat_cols(&parts)
    }
}

/// Splits a block across `devices`: device `i` holds heads
/// `head_order[i*N/D..(i+1)*N/D]` (identity order when `None`) and the
/// `i`-th contiguous MLP partition.
pub fn shard_block(
    block: &DecoderBlockWeights,
    config: &ModelConfig,
    devices: usize,
    head_order: Option<&[usize]>,
) -> Result<ShardedBlock> {
    config.check_devices(devices)?;
    let n = config.n_heads;
    let identity: Vec<usize> = (0..n).collect();
    let order = head_order.unwrap_or(&identity);
    check_head_order(order, n)?;
    let per = n / devices;
    let ff = config.d_ff / devices;
    let hd = config.head_dim;
    let shards = (0..devices)
        .map(|i| {
            let heads = order[i * per..(i + 1) * per].to_vec();
            Ok(DeviceShard {
                wq: gather_heads(&block.wq, &heads, hd, false)?,
                wk: gather_heads(&block.wk, &heads, hd, false)?,
                wv: gather_heads(&block.wv, &heads, hd, false)?,
                wo: gather_heads(&block.wo, &heads, hd, true)?,
                w_up: block.w_up.slice_cols(i * ff, ff)?,
                b_up: block.b_up.slice_vec(i * ff, ff)?,
                w_gate: block.w_gate.as_ref().map(|g| g.slice_cols(i * ff, ff)).transpose()?,
                w_down: block.w_down.slice_rows(i * ff, ff)?,
                heads,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShardedBlock {
        devices: shards,
        bo: block.bo.clone(),
        b_down: block.b_down.clone(),
        norm1: block.norm1.clone(),
        norm2: block.norm2.clone(),
        mode: BlockMode::Tp,
        ablation: Ablation::default(),
        config: config.clone(),
    })
}

/// Concatenates device slices in device order.
pub fn unshard(s: &ShardedBlock) -> Result<DecoderBlockWeights> {
    let collect = |f: &dyn Fn(&DeviceShard) -> Tensor| s.devices.iter().map(f).collect::<Vec<_>>();
    let w_gate = if s.devices[0].w_gate.is_some() {
        Some(Tensor::concat_cols(&collect(&|d| d.w_gate.clone().expect("uniform shards")))?)
    } else {
        None
    };
    Ok(DecoderBlockWeights {
        wq: Tensor::concat_cols(&collect(&|d| d.wq.clone()))?,
        wk: Tensor::concat_cols(&collect(&|d| d.wk.clone()))?,
        wv: Tensor::concat_cols(&collect(&|d| d.wv.clone()))?,
        wo: Tensor::concat_rows(&collect(&|d| d.wo.clone()))?,
        bo: s.bo.clone(),
        w_up: Tensor::concat_cols(&collect(&|d| d.w_up.clone()))?,
        b_up: Tensor::concat_vec(&collect(&|d| d.b_up.clone()))?,
        w_gate,
        w_down: Tensor::concat_rows(&collect(&|d| d.w_down.clone()))?,
        b_down: s.b_down.clone(),
        norm1: s.norm1.clone(),
        norm2: s.norm2.clone(),
    })
}

/// Tape handles for one device's slices.
#[derive(Debug, Clone)]
pub struct DeviceVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w_up: Var,
    pub b_up: Var,
    pub w_gate: Option<Var>,
    pub w_down: Var,
}

/// Tape handles for a sharded block.
#[derive(Debug, Clone)]
pub struct ShardVars {
    pub devices: Vec<DeviceVars>,
    pub bo: Option<Var>,
    pub b_down: Var,
    pub norm1: (Var, Option<Var>),
    pub norm2: (Var, Option<Var>),
}

impl ShardVars {
    /// Loads a sharded block's tensors as constants.
    pub fn load(tape: &mut Tape, s: &ShardedBlock) -> Self {
        let mut put = |t: &Tensor| tape.constant(t.clone());
        let devices = s
            .devices
            .iter()
            .map(|d| DeviceVars {
                wq: put(&d.wq),
                wk: put(&d.wk),
                wv: put(&d.wv),
                wo: put(&d.wo),
                w_up: put(&d.w_up),
                b_up: put(&d.b_up),
                w_gate: d.w_gate.as_ref().map(&mut put),
                w_down: put(&d.w_down),
            })
            .collect();
        Self {
            devices,
            bo: s.bo.as_ref().map(&mut put),
            b_down: put(&s.b_down),
            norm1: (put(&s.norm1.weight), s.norm1.bias.as_ref().map(&mut put)),
            norm2: (put(&s.norm2.weight), s.norm2.bias.as_ref().map(&mut put)),
        }
    }

    /// Contiguous differentiable slices of full-block handles, so gradients
    /// flow back to the unsharded parameters.
    pub fn slice_from(tape: &mut Tape, b: &BlockVars, config: &ModelConfig, devices: usize) -> Result<Self> {
        config.check_devices(devices)?;
        let width = config.d_model / devices;
        let ff = config.d_ff / devices;
        let devices = (0..devices)
            .map(|i| {
                Ok(DeviceVars {
                    wq: tape.slice_cols(b.wq, i * width, width)?,
                    wk: tape.slice_cols(b.wk, i * width, width)?,
                    wv: tape.slice_cols(b.wv, i * width, width)?,
                    wo: tape.slice_rows(b.wo, i * width, width)?,
                    w_up: tape.slice_cols(b.w_up, i * ff, ff)?,
                    b_up: tape.slice_vec(b.b_up, i * ff, ff)?,
                    w_gate: b.w_gate.map(|g| tape.slice_cols(g, i * ff, ff)).transpose()?,
                    w_down: tape.slice_rows(b.w_down, i * ff, ff)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { devices, bo: b.bo, b_down: b.b_down, norm1: b.norm1, norm2: b.norm2 })
    }
}

fn is_uniform(xs: &[Var]) -> bool {
    xs.iter().all(|&x| x == xs[0])
}

/// Applies `f` per device, computing once when every input is the same value.
fn per_device(
    tape: &mut Tape,
    xs: &[Var],
    mut f: impl FnMut(&mut Tape, Var) -> Result<Var>,
) -> Result<Vec<Var>> {
    if is_uniform(xs) {
        let v = f(tape, xs[0])?;
        Ok(vec![v; xs.len()])
    } else {
        xs.iter().map(|&x| f(tape, x)).collect()
    }
}

/// Partial attention outputs `P_i = Attn_i(norm1(X_i)) W_O,i`.
fn partial_attention(tape: &mut Tape, s: &ShardVars, xs: &[Var], cfg: &ModelConfig) -> Result<Vec<Var>> {
    let n1 = per_device(tape, xs, |t, x| norm(t, x, s.norm1, cfg))?;
    s.devices
        .iter()
        .zip(&n1)
        .map(|(d, &x)| {
            let heads = attention_heads(tape, x, d.wq, d.wk, d.wv, cfg.head_dim)?;
            tape.matmul(heads, d.wo)
        })
        .collect()
}

fn check_inputs(xs: &[Var], s: &ShardVars) -> Result<()> {
    if xs.len() != s.devices.len() {
        return Err(SpdError::Contract(format!(
            "{} device inputs for a {}-way shard",
            xs.len(),
            s.devices.len()
        )));
    }
    Ok(())
}

/// Fully synchronous block. Each device uses its own input stream; the
/// result is identical across devices whenever the inputs are.
pub fn tp_block_on(
    tape: &mut Tape,
    mesh: &mut DeviceMesh,
    s: &ShardVars,
    xs: &[Var],
    block: usize,
    cfg: &ModelConfig,
) -> Result<Vec<Var>> {
    check_inputs(xs, s)?;
    let partials = partial_attention(tape, s, xs, cfg)?;
    let attn = mesh.all_reduce_on(tape, &partials, block, SyncSite::AttnOut)?;
    let y = match s.bo {
        Some(bo) => tape.add_row(attn, bo)?,
        None => attn,
    };
    let n2 = per_device(tape, xs, |t, x| {
        let h = t.add(x, y)?;
        norm(t, h, s.norm2, cfg)
    })?;
    let z: Vec<Var> = s
        .devices
        .iter()
        .zip(&n2)
        .map(|(d, &x)| mlp_partial(tape, x, d.w_up, d.b_up, d.w_gate, d.w_down, cfg.mlp_kind))
        .collect::<Result<_>>()?;
    let mlp = mesh.all_reduce_on(tape, &z, block, SyncSite::MlpOut)?;
    // Summed as X + ((ΣP + ΣZ [+ b]) + b_down) so a one-device SPD block
    // reproduces it bit for bit.
    let mut sum = tape.add(attn, mlp)?;
    if let Some(bo) = s.bo {
        sum = tape.add_row(sum, bo)?;
    }
    let sum = tape.add_row(sum, s.b_down)?;
    per_device(tape, xs, |t, x| t.add(x, sum))
}

/// Sync-point-dropped block: one all-reduce after the MLP.
pub fn spd_block_on(
    tape: &mut Tape,
    mesh: &mut DeviceMesh,
    s: &ShardVars,
    xs: &[Var],
    ablation: Ablation,
    block: usize,
    cfg: &ModelConfig,
) -> Result<Vec<Var>> {
    check_inputs(xs, s)?;
    let partials = partial_attention(tape, s, xs, cfg)?;
    let mut reduce_in = Vec::with_capacity(xs.len());
    for ((d, &x), &p) in s.devices.iter().zip(xs).zip(&partials) {
        let y = match s.bo {
            Some(bo) => tape.add_row(p, bo)?,
            None => p,
        };
        let local = tape.add(x, y)?;
        let n2 = norm(tape, local, s.norm2, cfg)?;
        let z = mlp_partial(tape, n2, d.w_up, d.b_up, d.w_gate, d.w_down, cfg.mlp_kind)?;
        let mut r = match ablation.attn_residual_site {
            ResidualSite::BeforeMlpAllreduce => tape.add(p, z)?,
            ResidualSite::AfterMlpAllreduce => z,
        };
        if let (Some(bo), ResidualSite::BeforeMlpAllreduce) = (s.bo, ablation.bias_residual_site) {
            r = tape.add_row(r, bo)?;
        }
        reduce_in.push(r);
    }
    let reduced = mesh.all_reduce_on(tape, &reduce_in, block, SyncSite::MlpOut)?;
    let finish = |tape: &mut Tape, x: Var, p: Var| -> Result<Var> {
        let mut sum = reduced;
        if ablation.attn_residual_site == ResidualSite::AfterMlpAllreduce {
            sum = tape.add(sum, p)?;
        }
        if let (Some(bo), ResidualSite::AfterMlpAllreduce) = (s.bo, ablation.bias_residual_site) {
            sum = tape.add_row(sum, bo)?;
        }
        let sum = tape.add_row(sum, s.b_down)?;
        tape.add(x, sum)
    };
    if ablation.attn_residual_site == ResidualSite::BeforeMlpAllreduce && is_uniform(xs) {
        let out = finish(tape, xs[0], partials[0])?;
        Ok(vec![out; xs.len()])
    } else {
        xs.iter().zip(&partials).map(|(&x, &p)| finish(tape, x, p)).collect()
    }
}

/// Runs a TP-mode sharded block on a replicated input.
pub fn tp_block_forward(s: &ShardedBlock, x: &Tensor, mesh: &mut DeviceMesh, block: usize) -> Result<Tensor> {
    if s.mode != BlockMode::Tp {
        return Err(SpdError::Contract("tp_block_forward on a block in SPD mode".into()));
    }
    let mut tape = Tape::new();
    let vars = ShardVars::load(&mut tape, s);
    let xv = tape.constant(x.clone());
    let xs = vec![xv; s.devices.len()];
    let out = tp_block_on(&mut tape, mesh, &vars, &xs, block, &s.config)?;
    Ok(tape.value(out[0]).clone())
}

/// Runs an SPD-mode sharded block on per-device inputs.
pub fn spd_block_forward(
    s: &ShardedBlock,
    xs: &[Tensor],
    mesh: &mut DeviceMesh,
    block: usize,
) -> Result<Vec<Tensor>> {
    if s.mode != BlockMode::Spd {
        return Err(SpdError::Contract("spd_block_forward on a block in TP mode".into()));
    }
    let mut tape = Tape::new();
    let vars = ShardVars::load(&mut tape, s);
    let xv = load_streams(&mut tape, xs);
    let out = spd_block_on(&mut tape, mesh, &vars, &xv, s.ablation, block, &s.config)?;
    Ok(out.iter().map(|&v| tape.value(v).clone()).collect())
}

/// Loads per-device streams, sharing one leaf between bit-identical inputs.
fn load_streams(tape: &mut Tape, xs: &[Tensor]) -> Vec<Var> {
    if xs.iter().all(|x| x == &xs[0]) {
        let v = tape.constant(xs[0].clone());
        vec![v; xs.len()]
    } else {
        xs.iter().map(|x| tape.constant(x.clone())).collect()
    }
}

/// Per-device logits of a plan run plus its collective trace.
#[derive(Debug, Clone)]
pub struct PlanOutput {
    pub logits: Vec<Tensor>,
    pub trace: Vec<CollectiveEvent>,
}

/// A model sharded once for a given plan and device count.
#[derive(Debug, Clone)]
pub struct ParallelModel<'a> {
    model: &'a Model,
    shards: Vec<ShardedBlock>,
    devices: usize,
}

impl<'a> ParallelModel<'a> {
    pub fn new(model: &'a Model, plan: &SyncPlan, devices: usize) -> Result<Self> {
        plan.validate(model.n_layers())?;
        let shards = model
            .blocks
            .iter()
            .zip(&plan.blocks)
            .map(|(b, p)| {
                let mut s = shard_block(b, &model.config, devices, None)?;
                s.mode = p.mode;
                s.ablation = p.ablation;
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { model, shards, devices })
    }

    pub fn devices(&self) -> usize {
        self.devices
    }

    /// Per-device residual streams entering block `stop` (or after the last
    /// block when `stop == n_layers`).
    fn run_streams(&self, tape: &mut Tape, mesh: &mut DeviceMesh, tokens: &[u32], stop: usize) -> Result<Vec<Var>> {
        let ids = self.model.check_tokens(tokens)?;
        let embed = tape.constant(self.model.embed.clone());
        let pos = tape.constant(self.model.pos.clone());
        let tok = tape.gather_rows(embed, &ids)?;
        let p = tape.slice_rows(pos, 0, ids.len())?;
        let h = tape.add(tok, p)?;
        let mut xs = vec![h; self.devices];
        for (i, s) in self.shards.iter().enumerate().take(stop) {
            let vars = ShardVars::load(tape, s);
            xs = match s.mode {
                BlockMode::Tp => tp_block_on(tape, mesh, &vars, &xs, i, &self.model.config)?,
                BlockMode::Spd => spd_block_on(tape, mesh, &vars, &xs, s.ablation, i, &self.model.config)?,
            };
        }
        Ok(xs)
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<PlanOutput> {
        let mut tape = Tape::new();
        let mut mesh = DeviceMesh::new(self.devices)?;
        let xs = self.run_streams(&mut tape, &mut mesh, tokens, self.shards.len())?;
        let cfg = &self.model.config;
        let fw = tape.constant(self.model.final_norm.weight.clone());
        let fb = self.model.final_norm.bias.as_ref().map(|b| tape.constant(b.clone()));
        let head = match &self.model.head {
            Some(h) => tape.constant(h.clone()),
            None => {
                let e = tape.constant(self.model.embed.clone());
                tape.transpose(e)?
            }
        };
        let logits = per_device(&mut tape, &xs, |t, x| {
            let n = norm(t, x, (fw, fb), cfg)?;
            t.matmul(n, head)
        })?;
        Ok(PlanOutput {
            logits: logits.iter().map(|&v| tape.value(v).clone()).collect(),
            trace: mesh.trace,
        })
    }

    /// Device-0 hidden state entering block `index`.
    pub fn block_input(&self, tokens: &[u32], index: usize) -> Result<Tensor> {
        if index >= self.shards.len() {
            return Err(SpdError::Config(format!(
                "block {index} out of range for {} blocks",
                self.shards.len()
            )));
        }
        let mut tape = Tape::new();
        let mut mesh = DeviceMesh::new(self.devices)?;
        let xs = self.run_streams(&mut tape, &mut mesh, tokens, index)?;
        Ok(tape.value(xs[0]).clone())
    }
}

impl LogitsSource for ParallelModel<'_> {
    /// Device 0's logits.
    fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
        Ok(self.forward(tokens)?.logits.swap_remove(0))
    }
}

pub fn model_forward_plan(model: &Model, plan: &SyncPlan, devices: usize, tokens: &[u32]) -> Result<PlanOutput> {
    ParallelModel::new(model, plan, devices)?.forward(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, reference_block, ModelConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 4,
            head_dim: 4,
            d_ff: 32,
            vocab_size: 13,
            max_seq: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn shard_d1_is_whole_block() {
        let m = init_model(&cfg(), 1).unwrap();
        let s = shard_block(&m.blocks[0], &m.config, 1, None).unwrap();
        assert_eq!(s.devices[0].wq, m.blocks[0].wq);
        assert_eq!(s.devices[0].w_down, m.blocks[0].w_down);
    }

    #[test]
    fn shard_d2_head_placement_and_round_trip() {
        let m = init_model(&cfg(), 1).unwrap();
        let s = shard_block(&m.blocks[0], &m.config, 2, None).unwrap();
        assert_eq!(s.devices[0].heads, vec![0, 1]);
        assert_eq!(s.devices[1].heads, vec![2, 3]);
        assert_eq!(unshard(&s).unwrap(), m.blocks[0]);
        assert!(matches!(shard_block(&m.blocks[0], &m.config, 3, None), Err(SpdError::Config(_))));
        assert!(shard_block(&m.blocks[0], &m.config, 2, Some(&[0, 1, 1, 3])).is_err());
    }

    #[test]
    fn all_reduce_examples() {
        let x = Tensor::new(vec![2], vec![1.5, -2.0]).unwrap();
        let mut mesh = DeviceMesh::new(1).unwrap();
        assert_eq!(mesh.all_reduce_sum(&[x.clone()], 0, SyncSite::AttnOut).unwrap(), x);
        assert_eq!(mesh.trace.len(), 1);
        let mut mesh = DeviceMesh::new(2).unwrap();
        let z = mesh.all_reduce_sum(&[x.clone(), x.scale(-1.0)], 0, SyncSite::MlpOut).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(mesh.trace[0].bytes, 2 * ELEM_SIZE);
        let err = mesh.all_reduce_sum(&[x.clone(), Tensor::zeros(&[3])], 0, SyncSite::MlpOut);
        assert!(matches!(err, Err(SpdError::Contract(_))));
    }

    #[test]
    fn mode_mismatch_is_contract_error() {
        let m = init_model(&cfg(), 1).unwrap();
        let s = shard_block(&m.blocks[0], &m.config, 2, None).unwrap();
        let x = Tensor::zeros(&[3, 16]);
        let mut mesh = DeviceMesh::new(2).unwrap();
        assert!(matches!(
            spd_block_forward(&s, &[x.clone(), x.clone()], &mut mesh, 0),
            Err(SpdError::Contract(_))
        ));
        let mut s = s;
        s.mode = BlockMode::Spd;
        assert!(matches!(tp_block_forward(&s, &x, &mut mesh, 0), Err(SpdError::Contract(_))));
    }

    #[test]
    fn tp_d1_matches_reference_block() {
        let m = init_model(&cfg(), 2).unwrap();
        let h = Tensor::new(vec![3, 16], (0..48).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect()).unwrap();
        let s = shard_block(&m.blocks[0], &m.config, 1, None).unwrap();
        let mut mesh = DeviceMesh::new(1).unwrap();
        let tp = tp_block_forward(&s, &h, &mut mesh, 0).unwrap();
        let mut tape = Tape::new();
        let bv = BlockVars::load(&mut tape, &m.blocks[0], false);
        let hv = tape.constant(h);
        let r = reference_block(&mut tape, &bv, hv, &m.config).unwrap();
        assert!(tp.max_rel_diff(tape.value(r), 1e-12).unwrap() < 1e-13);
        assert_eq!(mesh.trace.len(), 2);
    }

    #[test]
    fn plan_json_is_a_list() {
        let mut plan = SyncPlan::suffix(3, 1);
        plan.blocks[2].ablation.attn_residual_site = ResidualSite::AfterMlpAllreduce;
        let json = serde_json::to_string(&plan).unwrap();
        assert!(json.starts_with('['));
        assert_eq!(serde_json::from_str::<SyncPlan>(&json).unwrap(), plan);
        let bare: SyncPlan = serde_json::from_str(r#"[{"mode":"tp"},{"mode":"spd"}]"#).unwrap();
        assert_eq!(bare, SyncPlan::suffix(2, 1));
    }

    #[test]
    fn plan_length_mismatch_is_config_error() {
        let m = init_model(&cfg(), 2).unwrap();
        assert!(matches!(
            model_forward_plan(&m, &SyncPlan::all_tp(3), 2, &[1, 2]),
            Err(SpdError::Config(_))
        ));
    }
}
