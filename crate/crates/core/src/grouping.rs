//! Head grouping for blocks that are too sensitive to drop as-is.
//!
//! Heads are partitioned into one equal-size group per device so that heads
//! with similar attention patterns land on different devices, each group is
//! matched to an MLP partition, and the block weights are permuted so that
//! contiguous sharding realizes the chosen placement.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{normalize, softmax_causal, Tape};
use crate::error::{Result, SpdError};
use crate::model::{mlp_partial, DecoderBlockWeights, ModelConfig};
use crate::parallel::{check_head_order, gather_heads};
use crate::tensor::{Elem, Tensor};

/// Largest number of balanced partitions exact mode will enumerate.
pub const EXACT_PARTITION_BUDGET: u128 = 5_000_000;
/// Largest device count for the exhaustive group-to-partition matching.
pub const MAX_MATCH_DEVICES: usize = 8;
pub const DEFAULT_RESTARTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScatterMode {
    /// Enumerate every balanced partition.
    #[default]
    Exact,
    /// Random balanced starts improved by pairwise swaps.
    Greedy,
}

/// How a group's MLP partial output is reduced to a single score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpNorm {
    /// Mean over tokens of the per-token L2 norm.
    #[default]
    MeanTokenL2,
    /// Frobenius norm over every token of every sequence.
    Frobenius,
}

/// One flattened attention-probability signature per head, in head order.
/// Each signature concatenates the `T x T` causal probability matrices of
/// every input sequence.
pub fn head_score_vectors(
    block: &DecoderBlockWeights,
    config: &ModelConfig,
    inputs: &[Tensor],
) -> Result<Vec<Vec<Elem>>> {
    if inputs.is_empty() {
        return Err(SpdError::Data("head signatures need at least one sequence".into()));
    }
    let hd = config.head_dim;
    let scale = 1.0 / (hd as Elem).sqrt();
    let mut sigs = vec![Vec::new(); config.n_heads];
    for x in inputs {
        let n1 = normalize(x, &block.norm1.weight, block.norm1.bias.as_ref(), config.norm_kind, config.norm_eps)?;
        let q = n1.matmul(&block.wq)?;
        let k = n1.matmul(&block.wk)?;
        for (h, sig) in sigs.iter_mut().enumerate() {
            let qh = q.slice_cols(h * hd, hd)?;
            let kt = k.slice_cols(h * hd, hd)?.transpose()?;
            let probs = softmax_causal(&qh.matmul(&kt)?.scale(scale))?;
            sig.extend_from_slice(probs.data());
        }
    }
    Ok(sigs)
}

/// Euclidean distances between signatures.
pub fn pairwise_distances(signatures: &[Vec<Elem>]) -> Result<Vec<Vec<f64>>> {
    let n = signatures.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            if signatures[i].len() != signatures[j].len() {
                return Err(SpdError::Dimension(format!(
                    "signature lengths {} and {} differ",
                    signatures[i].len(),
                    signatures[j].len()
                )));
            }
            let s: f64 = signatures[i]
                .iter()
                .zip(&signatures[j])
                .map(|(a, b)| {
                    let t = (*a - *b) as f64;
                    t * t
                })
                .sum();
            d[i][j] = s.sqrt();
            d[j][i] = d[i][j];
        }
    }
    Ok(d)
}

/// Sum of within-group distances over all groups.
pub fn within_group_distance(dist: &[Vec<f64>], groups: &[Vec<usize>]) -> f64 {
    groups
        .iter()
        .map(|g| {
            let mut s = 0.0;
            for (a, &i) in g.iter().enumerate() {
                for &j in &g[a + 1..] {
                    s += dist[i][j];
                }
            }
            s
        })
        .sum()
}

/// Number of ways to split `n` labelled heads into `d` unlabelled groups of
/// `n / d`, or `None` on overflow.
pub fn balanced_partition_count(n: usize, d: usize) -> Option<u128> {
    if d == 0 || n % d != 0 {
        return Some(0);
    }
    let per = n / d;
    let choose = |a: usize, b: usize| -> Option<u128> {
        let mut r: u128 = 1;
        for i in 0..b {
            r = r.checked_mul((a - i) as u128)? / (i as u128 + 1);
        }
        Some(r)
    };
    // Place the lowest remaining head first, then choose its companions.
    let mut total: u128 = 1;
    let mut left = n;
    for _ in 0..d {
        total = total.checked_mul(choose(left - 1, per - 1)?)?;
        left -= per;
    }
    Some(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterOutcome {
    /// Sorted groups, ordered by their smallest head.
    pub groups: Vec<Vec<usize>>,
    /// Within-group distance summed over groups.
    pub objective: f64,
    pub mode: ScatterMode,
    /// Partitions scored (exact) or swap passes taken (greedy).
    pub evaluated: u64,
    /// `(start, end)` objective of each greedy restart.
    pub restarts: Vec<(f64, f64)>,
}

fn canonical(mut groups: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    for g in &mut groups {
        g.sort_unstable();
    }
    groups.sort();
    groups
}

fn check_scatter_shape(n: usize, devices: usize) -> Result<usize> {
    if devices == 0 || n == 0 || n % devices != 0 {
        return Err(SpdError::Config(format!("{n} heads cannot be split evenly over {devices} devices")));
    }
    Ok(n / devices)
}

/// Partitions heads into `devices` equal groups maximizing the summed
/// within-group distance between head signatures.
pub fn head_scatter(
    signatures: &[Vec<Elem>],
    devices: usize,
    mode: ScatterMode,
    restarts: usize,
    seed: u64,
) -> Result<ScatterOutcome> {
    let dist = pairwise_distances(signatures)?;
    match mode {
        ScatterMode::Exact => scatter_exact(&dist, devices),
        ScatterMode::Greedy => scatter_greedy(&dist, devices, restarts, seed),
    }
}

struct Search<'a> {
    dist: &'a [Vec<f64>],
    per: usize,
    devices: usize,
    groups: Vec<Vec<usize>>,
    best: Option<(f64, Vec<Vec<usize>>)>,
    evaluated: u64,
}

impl Search<'_> {
    // Head `e` joins an open group or starts the next one; groups are thus
    // labelled by their smallest head and each partition is visited once,
    // in lexicographic order of its group-assignment vector.
    fn visit(&mut self, e: usize, score: f64) {
        let n = self.dist.len();
        if e == n {
            self.evaluated += 1;
            if self.best.as_ref().is_none_or(|(b, _)| score > *b) {
                self.best = Some((score, self.groups.clone()));
            }
            return;
        }
        for g in 0..self.groups.len() {
            if self.groups[g].len() < self.per {
                let gain: f64 = self.groups[g].iter().map(|&j| self.dist[e][j]).sum();
                self.groups[g].push(e);
                self.visit(e + 1, score + gain);
                self.groups[g].pop();
            }
        }
        if self.groups.len() < self.devices {
            self.groups.push(vec![e]);
            self.visit(e + 1, score);
            self.groups.pop();
        }
    }
}

fn scatter_exact(dist: &[Vec<f64>], devices: usize) -> Result<ScatterOutcome> {
    let n = dist.len();
    let per = check_scatter_shape(n, devices)?;
    match balanced_partition_count(n, devices) {
        Some(c) if c <= EXACT_PARTITION_BUDGET => {}
        count => {
            return Err(SpdError::Capacity(format!(
                "exact grouping of {n} heads over {devices} devices needs {} partitions, budget is {EXACT_PARTITION_BUDGET}",
                count.map_or("more than 2^128".to_string(), |c| c.to_string())
            )))
        }
    }
    let mut search = Search { dist, per, devices, groups: Vec::new(), best: None, evaluated: 0 };
    search.visit(0, 0.0);
    let (_, groups) = search.best.expect("at least one balanced partition exists");
    let groups = canonical(groups);
    Ok(ScatterOutcome {
        objective: within_group_distance(dist, &groups),
        groups,
        mode: ScatterMode::Exact,
        evaluated: search.evaluated,
        restarts: Vec::new(),
    })
}

/// Best-improvement pairwise swaps until no swap increases the objective.
/// Returns the number of swaps applied.
pub fn improve_by_swaps(dist: &[Vec<f64>], groups: &mut [Vec<usize>]) -> u64 {
    let tol = 1e-12 * (1.0 + within_group_distance(dist, groups).abs());
    let mut swaps = 0;
    loop {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for a in 0..groups.len() {
            for b in a + 1..groups.len() {
                for (ia, &i) in groups[a].iter().enumerate() {
                    for (jb, &j) in groups[b].iter().enumerate() {
                        let mut delta = 0.0;
                        for &k in &groups[a] {
                            if k != i {
                                delta += dist[j][k] - dist[i][k];
                            }
                        }
                        for &k in &groups[b] {
                            if k != j {
                                delta += dist[i][k] - dist[j][k];
                            }
                        }
                        if delta > tol && best.is_none_or(|(d, ..)| delta > d) {
                            best = Some((delta, a, ia, b, jb));
                        }
                    }
                }
            }
        }
        let Some((_, a, ia, b, jb)) = best else { return swaps };
        let i = groups[a][ia];
        groups[a][ia] = groups[b][jb];
        groups[b][jb] = i;
        swaps += 1;
    }
}

fn scatter_greedy(dist: &[Vec<f64>], devices: usize, restarts: usize, seed: u64) -> Result<ScatterOutcome> {
    let n = dist.len();
    let per = check_scatter_shape(n, devices)?;
    if restarts == 0 {
        return Err(SpdError::Config("greedy grouping needs at least one restart".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    let mut trace = Vec::with_capacity(restarts);
    let mut evaluated = 0;
    for _ in 0..restarts {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut groups: Vec<Vec<usize>> = order.chunks(per).map(<[usize]>::to_vec).collect();
        let start = within_group_distance(dist, &groups);
        evaluated += improve_by_swaps(dist, &mut groups);
        let end = within_group_distance(dist, &groups);
        let groups = canonical(groups);
        trace.push((start, end));
        if best.as_ref().is_none_or(|(b, _)| end > *b) {
            best = Some((end, groups));
        }
    }
    let (_, groups) = best.expect("restarts > 0");
    Ok(ScatterOutcome {
        objective: within_group_distance(dist, &groups),
        groups,
        mode: ScatterMode::Greedy,
        evaluated,
        restarts: trace,
    })
}

/// Group-to-partition assignment: `matching[g]` is the device whose MLP
/// partition serves head group `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub matching: Vec<usize>,
    /// `scores[g][m]`, the MLP output magnitude of partition `m` fed by group `g`.
    pub scores: Vec<Vec<f64>>,
    pub objective: f64,
}

/// Permutation maximizing `sum_g scores[g][matching[g]]`, enumerating
/// permutations in lexicographic order and keeping the first maximum.
pub fn match_from_scores(scores: &[Vec<f64>]) -> Result<MatchOutcome> {
    let d = scores.len();
    if d == 0 || scores.iter().any(|r| r.len() != d) {
        return Err(SpdError::Dimension("score matrix must be square and non-empty".into()));
    }
    if d > MAX_MATCH_DEVICES {
        return Err(SpdError::Capacity(format!(
            "exhaustive matching over {d} devices exceeds the limit of {MAX_MATCH_DEVICES}"
        )));
    }
    let total = |p: &[usize]| p.iter().enumerate().map(|(g, &m)| scores[g][m]).sum::<f64>();
    let mut perm: Vec<usize> = (0..d).collect();
    let mut best = (total(&perm), perm.clone());
    while next_permutation(&mut perm) {
        let s = total(&perm);
        if s > best.0 {
            best = (s, perm.clone());
        }
    }
    Ok(MatchOutcome { matching: best.1, scores: scores.to_vec(), objective: best.0 })
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else { return false };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).expect("successor exists");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Scores every (group, partition) pair on `inputs` and picks the best
/// assignment. Partition `m` is the `m`-th contiguous slice of the MLP.
pub fn mlp_match(
    block: &DecoderBlockWeights,
    config: &ModelConfig,
    inputs: &[Tensor],
    groups: &[Vec<usize>],
    norm: MlpNorm,
) -> Result<MatchOutcome> {
    match_from_scores(&group_partition_scores(block, config, inputs, groups, norm)?)
}

pub fn group_partition_scores(
    block: &DecoderBlockWeights,
    config: &ModelConfig,
    inputs: &[Tensor],
    groups: &[Vec<usize>],
    norm: MlpNorm,
) -> Result<Vec<Vec<f64>>> {
    let d = groups.len();
    config.check_devices(d)?;
    let order: Vec<usize> = groups.iter().flatten().copied().collect();
    check_head_order(&order, config.n_heads)?;
    if groups.iter().any(|g| g.len() != config.n_heads / d) {
        return Err(SpdError::Contract("head groups must have equal size".into()));
    }
    if inputs.is_empty() {
        return Err(SpdError::Data("MLP matching needs at least one sequence".into()));
    }
    let hd = config.head_dim;
    let ff = config.d_ff / d;
    let mut acc = vec![vec![0.0f64; d]; d];
    let mut tokens = 0usize;
    for x in inputs {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let n1w = tape.constant(block.norm1.weight.clone());
        let n1b = block.norm1.bias.clone().map(|b| tape.constant(b));
        let n1 = tape.normalize(xv, n1w, n1b, config.norm_kind, config.norm_eps)?;
        let wq = tape.constant(block.wq.clone());
        let wk = tape.constant(block.wk.clone());
        let wv = tape.constant(block.wv.clone());
        let heads = crate::model::attention_heads(&mut tape, n1, wq, wk, wv, hd)?;
        let heads = tape.value(heads).clone();
        tokens += x.dims2()?.0;
        for (g, group) in groups.iter().enumerate() {
            let mut y = gather_heads(&heads, group, hd, false)?.matmul(&gather_heads(&block.wo, group, hd, true)?)?;
            if let Some(bo) = &block.bo {
                y = add_bias_rows(&y, bo)?;
            }
            let h = x.add(&y)?;
            let n2 = normalize(&h, &block.norm2.weight, block.norm2.bias.as_ref(), config.norm_kind, config.norm_eps)?;
            for (m, slot) in acc[g].iter_mut().enumerate() {
                let mut t = Tape::new();
                let n2v = t.constant(n2.clone());
                let up = t.constant(block.w_up.slice_cols(m * ff, ff)?);
                let bu = t.constant(block.b_up.slice_vec(m * ff, ff)?);
                let gate = block.w_gate.as_ref().map(|w| w.slice_cols(m * ff, ff)).transpose()?.map(|w| t.constant(w));
                let down = t.constant(block.w_down.slice_rows(m * ff, ff)?);
                let z = mlp_partial(&mut t, n2v, up, bu, gate, down, config.mlp_kind)?;
                let z = t.value(z);
                let (rows, _) = z.dims2()?;
                *slot += match norm {
                    MlpNorm::MeanTokenL2 => (0..rows)
                        .map(|r| z.row(r).iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt())
                        .sum::<f64>(),
                    MlpNorm::Frobenius => z.data().iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>(),
                };
            }
        }
    }
    for row in &mut acc {
        for v in row.iter_mut() {
            *v = match norm {
                MlpNorm::MeanTokenL2 => *v / tokens.max(1) as f64,
                MlpNorm::Frobenius => v.sqrt(),
            };
        }
    }
    Ok(acc)
}

fn add_bias_rows(y: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, cols) = y.dims2()?;
    if bias.shape() != [cols] {
        return Err(SpdError::Dimension(format!("bias {:?} for width {cols}", bias.shape())));
    }
    let data = (0..rows).flat_map(|r| y.row(r).iter().zip(bias.data()).map(|(a, b)| a + b)).collect();
    Tensor::new(vec![rows, cols], data)
}

/// Head placement for one block: group `g` runs on device `matching[g]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadGrouping {
    #[serde(rename = "A")]
    pub groups: Vec<Vec<usize>>,
    #[serde(rename = "MC")]
    pub matching: Vec<usize>,
    /// Original head index at each new head position.
    pub head_order: Vec<usize>,
}

impl HeadGrouping {
    pub fn new(groups: Vec<Vec<usize>>, matching: Vec<usize>, n_heads: usize) -> Result<Self> {
        let d = groups.len();
        let mut seen = vec![false; d];
        if matching.len() != d || matching.iter().any(|&m| m >= d || std::mem::replace(&mut seen[m], true)) {
            return Err(SpdError::Contract(format!("matching {matching:?} is not a permutation of 0..{d}")));
        }
        let mut head_order = Vec::with_capacity(n_heads);
        for device in 0..d {
            let g = matching.iter().position(|&m| m == device).expect("matching is a permutation");
            let mut heads = groups[g].clone();
            heads.sort_unstable();
            head_order.extend(heads);
        }
        check_head_order(&head_order, n_heads)?;
        if groups.iter().any(|g| g.len() * d != n_heads) {
            return Err(SpdError::Contract("head groups must have equal size".into()));
        }
        Ok(Self { groups, matching, head_order })
    }

    pub fn identity(n_heads: usize, devices: usize) -> Result<Self> {
        if devices == 0 || n_heads % devices != 0 {
            return Err(SpdError::Config(format!("{n_heads} heads over {devices} devices")));
        }
        let per = n_heads / devices;
        let groups = (0..devices).map(|g| (g * per..(g + 1) * per).collect()).collect();
        Self::new(groups, (0..devices).collect(), n_heads)
    }

    /// Head order that restores the original layout from reordered weights.
    pub fn inverse_order(&self) -> Vec<usize> {
        let mut pos = vec![0; self.head_order.len()];
        for (new, &old) in self.head_order.iter().enumerate() {
            pos[old] = new;
        }
        pos
    }
}

/// Permutes head column groups of the Q/K/V projections and head row groups
/// of the output projection so that new head `k` is original head `order[k]`.
pub fn reorder_block_weights(
    block: &DecoderBlockWeights,
    order: &[usize],
    config: &ModelConfig,
) -> Result<DecoderBlockWeights> {
    check_head_order(order, config.n_heads)?;
    let hd = config.head_dim;
    Ok(DecoderBlockWeights {
        wq: gather_heads(&block.wq, order, hd, false)?,
        wk: gather_heads(&block.wk, order, hd, false)?,
        wv: gather_heads(&block.wv, order, hd, false)?,
        wo: gather_heads(&block.wo, order, hd, true)?,
        ..block.clone()
    })
}

/// Export record of one block's grouping decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingReport {
    pub block: usize,
    #[serde(flatten)]
    pub grouping: HeadGrouping,
    pub scatter: ScatterOutcome,
    pub mlp_scores: Vec<Vec<f64>>,
    pub match_objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupingOptions {
    pub mode: ScatterMode,
    pub restarts: usize,
    pub norm: MlpNorm,
    pub seed: u64,
}

impl Default for GroupingOptions {
    fn default() -> Self {
        Self { mode: ScatterMode::Exact, restarts: DEFAULT_RESTARTS, norm: MlpNorm::MeanTokenL2, seed: 0 }
    }
}

/// Scatter, match and build the placement for one block.
pub fn group_heads(
    block_index: usize,
    block: &DecoderBlockWeights,
    config: &ModelConfig,
    inputs: &[Tensor],
    devices: usize,
    opts: &GroupingOptions,
) -> Result<GroupingReport> {
    config.check_devices(devices)?;
    let sigs = head_score_vectors(block, config, inputs)?;
    let scatter = head_scatter(&sigs, devices, opts.mode, opts.restarts, opts.seed)?;
    let matched = mlp_match(block, config, inputs, &scatter.groups, opts.norm)?;
    let grouping = HeadGrouping::new(scatter.groups.clone(), matched.matching, config.n_heads)?;
    Ok(GroupingReport {
        block: block_index,
        grouping,
        scatter,
        mlp_scores: matched.scores,
        match_objective: matched.objective,
    })
}
