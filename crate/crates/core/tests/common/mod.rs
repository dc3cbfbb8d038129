//! Independent loop-based oracles. Nothing here calls the crate's tensor,
//! tape or sharding code; weights are read out as plain nested vectors.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spd_core::model::{DecoderBlockWeights, MlpKind, Model, ModelConfig, NormKind, NormParams};
use spd_core::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    let (r, c) = t.dims2().unwrap();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(k, v)| v * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn add_row(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|x| x.iter().zip(b).map(|(p, q)| p + q).collect()).collect()
}

pub fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

pub fn max_abs(a: &Mat, b: &Mat) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn norm_rows(x: &Mat, p: &NormParams, kind: NormKind, eps: f64) -> Mat {
    let w = p.weight.data();
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = match kind {
                NormKind::RmsNorm => 0.0,
                NormKind::LayerNorm => row.iter().sum::<f64>() / n,
            };
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * w[j] + p.bias.as_ref().map_or(0.0, |b| b.data()[j]))
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn causal_softmax(s: &Mat) -> Mat {
    s.iter()
        .enumerate()
        .map(|(t, row)| {
            let m = row[..=t].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row[..=t].iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..row.len()).map(|j| if j <= t { e[j] / z } else { 0.0 }).collect()
        })
        .collect()
}

fn cols(m: &Mat, start: usize, len: usize) -> Mat {
    m.iter().map(|r| r[start..start + len].to_vec()).collect()
}

fn rows(m: &Mat, start: usize, len: usize) -> Mat {
    m[start..start + len].to_vec()
}

fn transpose(m: &Mat) -> Mat {
    (0..m[0].len()).map(|j| m.iter().map(|r| r[j]).collect()).collect()
}

/// Attention probabilities of one head on already-normalized input.
pub fn head_probs(n1: &Mat, b: &DecoderBlockWeights, cfg: &ModelConfig, h: usize) -> Mat {
    let hd = cfg.head_dim;
    let q = cols(&matmul(n1, &mat(&b.wq)), h * hd, hd);
    let k = cols(&matmul(n1, &mat(&b.wk)), h * hd, hd);
    let scale = 1.0 / (hd as f64).sqrt();
    let s: Mat = matmul(&q, &transpose(&k)).iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
    causal_softmax(&s)
}

/// Sum over `heads` of each head's output projected through its rows of `wo`.
pub fn partial_attention(n1: &Mat, b: &DecoderBlockWeights, cfg: &ModelConfig, heads: &[usize]) -> Mat {
    let hd = cfg.head_dim;
    let v_all = matmul(n1, &mat(&b.wv));
    let wo = mat(&b.wo);
    let mut out = zeros(n1.len(), cfg.d_model);
    for &h in heads {
        let o = matmul(&head_probs(n1, b, cfg, h), &cols(&v_all, h * hd, hd));
        out = add(&out, &matmul(&o, &rows(&wo, h * hd, hd)));
    }
    out
}

/// MLP partition `m` of `parts` without the down-projection bias.
pub fn partial_mlp(n2: &Mat, b: &DecoderBlockWeights, cfg: &ModelConfig, m: usize, parts: usize) -> Mat {
    let ff = cfg.d_ff / parts;
    let up = add_row(&matmul(n2, &cols(&mat(&b.w_up), m * ff, ff)), &b.b_up.data()[m * ff..(m + 1) * ff]);
    let act: Mat = match cfg.mlp_kind {
        MlpKind::Gelu2 => up.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect(),
        MlpKind::SwiGlu => {
            let gate = matmul(n2, &cols(&mat(b.w_gate.as_ref().unwrap()), m * ff, ff));
            gate.iter().zip(&up).map(|(g, u)| g.iter().zip(u).map(|(a, c)| silu(*a) * c).collect()).collect()
        }
    };
    matmul(&act, &rows(&mat(&b.w_down), m * ff, ff))
}

pub fn reference_block(x: &Mat, b: &DecoderBlockWeights, cfg: &ModelConfig) -> Mat {
    let all: Vec<usize> = (0..cfg.n_heads).collect();
    let n1 = norm_rows(x, &b.norm1, cfg.norm_kind, cfg.norm_eps);
    let mut y = partial_attention(&n1, b, cfg, &all);
    if let Some(bo) = &b.bo {
        y = add_row(&y, bo.data());
    }
    let h = add(x, &y);
    let n2 = norm_rows(&h, &b.norm2, cfg.norm_kind, cfg.norm_eps);
    add_row(&add(&h, &partial_mlp(&n2, b, cfg, 0, 1)), b.b_down.data())
}

/// SPD block with contiguous head and MLP placement on `d` devices:
/// `X + sum_i Y_i + sum_i Z_i + b_down`, with the attention-output bias
/// counted once (`X + b + ...`) and fed into every local MLP input.
pub fn spd_block(x: &Mat, b: &DecoderBlockWeights, cfg: &ModelConfig, d: usize) -> Mat {
    let per = cfg.n_heads / d;
    let n1 = norm_rows(x, &b.norm1, cfg.norm_kind, cfg.norm_eps);
    let mut out = x.clone();
    if let Some(bo) = &b.bo {
        out = add_row(&out, bo.data());
    }
    for i in 0..d {
        let heads: Vec<usize> = (i * per..(i + 1) * per).collect();
        let p = partial_attention(&n1, b, cfg, &heads);
        let mut local = add(x, &p);
        if let Some(bo) = &b.bo {
            local = add_row(&local, bo.data());
        }
        let n2 = norm_rows(&local, &b.norm2, cfg.norm_kind, cfg.norm_eps);
        out = add(&out, &p);
        out = add(&out, &partial_mlp(&n2, b, cfg, i, d));
    }
    add_row(&out, b.b_down.data())
}

/// Full single-device logits.
pub fn reference_logits(model: &Model, tokens: &[u32]) -> Mat {
    let emb = mat(&model.embed);
    let pos = mat(&model.pos);
    let mut h: Mat = tokens
        .iter()
        .enumerate()
        .map(|(t, &id)| emb[id as usize].iter().zip(&pos[t]).map(|(a, b)| a + b).collect())
        .collect();
    for b in &model.blocks {
        h = reference_block(&h, b, &model.config);
    }
    let n = norm_rows(&h, &model.final_norm, model.config.norm_kind, model.config.norm_eps);
    match &model.head {
        Some(w) => matmul(&n, &mat(w)),
        None => matmul(&n, &transpose(&emb)),
    }
}

/// Mean next-token NLL, exponentiated, over several sequences.
pub fn perplexity(model: &Model, seqs: &[Vec<u32>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for s in seqs {
        let logits = reference_logits(model, s);
        for t in 0..s.len() - 1 {
            let row = &logits[t];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            total += lse - row[s[t + 1] as usize];
            count += 1;
        }
    }
    (total / count as f64).exp()
}

pub fn random_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Mat {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tokens(n: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// Gives every zero bias a random value so bias paths are exercised.
pub fn randomize_biases(model: &mut Model, seed: u64) {
    let mut r = rng(seed);
    let mut fill = |t: &mut Tensor| {
        for v in t.data_mut() {
            *v = r.random_range(-0.2..0.2);
        }
    };
    for b in &mut model.blocks {
        fill(&mut b.b_up);
        fill(&mut b.b_down);
        if let Some(bo) = &mut b.bo {
            fill(bo);
        }
        if let Some(nb) = &mut b.norm1.bias {
            fill(nb);
        }
        if let Some(nb) = &mut b.norm2.bias {
            fill(nb);
        }
    }
}

/// Best balanced partition by trying every labelling of heads with group
/// ids; labellings that differ only by renaming groups tie, and the
/// canonical (sorted) form of the first maximum is returned.
pub fn brute_force_scatter(dist: &[Vec<f64>], d: usize) -> (f64, Vec<Vec<usize>>) {
    let n = dist.len();
    let per = n / d;
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let total = d.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        let mut groups = vec![Vec::new(); d];
        for h in 0..n {
            groups[c % d].push(h);
            c /= d;
        }
        if groups.iter().any(|g| g.len() != per) {
            continue;
        }
        let mut obj = 0.0;
        for g in &groups {
            for a in 0..g.len() {
                for b in a + 1..g.len() {
                    obj += dist[g[a]][g[b]];
                }
            }
        }
        if obj > best.0 + 1e-12 {
            groups.sort();
            best = (obj, groups);
        }
    }
    best
}

/// Every permutation by recursion, scored by the sum of selected entries.
pub fn brute_force_match(scores: &[Vec<f64>]) -> (f64, Vec<usize>) {
    fn rec(k: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, s: &[Vec<f64>], best: &mut (f64, Vec<usize>)) {
        if k == s.len() {
            let v: f64 = cur.iter().enumerate().map(|(g, &m)| s[g][m]).sum();
            if v > best.0 {
                *best = (v, cur.clone());
            }
            return;
        }
        for m in 0..s.len() {
            if !used[m] {
                used[m] = true;
                cur.push(m);
                rec(k + 1, used, cur, s, best);
                cur.pop();
                used[m] = false;
            }
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    rec(0, &mut vec![false; scores.len()], &mut Vec::new(), scores, &mut best);
    best
}

/// Score of head group `g` feeding MLP partition `m`: mean per-token L2
/// norm of the partition's output on `norm2(X + Y_g [+ b])`.
pub fn group_partition_score(
    inputs: &[Mat],
    b: &DecoderBlockWeights,
    cfg: &ModelConfig,
    group: &[usize],
    m: usize,
    d: usize,
) -> f64 {
    let mut total = 0.0;
    let mut tokens = 0;
    for x in inputs {
        let n1 = norm_rows(x, &b.norm1, cfg.norm_kind, cfg.norm_eps);
        let mut local = add(x, &partial_attention(&n1, b, cfg, group));
        if let Some(bo) = &b.bo {
            local = add_row(&local, bo.data());
        }
        let n2 = norm_rows(&local, &b.norm2, cfg.norm_kind, cfg.norm_eps);
        for row in partial_mlp(&n2, b, cfg, m, d) {
            total += row.iter().map(|v| v * v).sum::<f64>().sqrt();
            tokens += 1;
        }
    }
    total / tokens as f64
}

pub fn small_config(layers: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        n_layers: layers,
        d_model: 4 * heads,
        n_heads: heads,
        head_dim: 4,
        d_ff: 8 * heads,
        vocab_size: 32,
        max_seq: 16,
        ..ModelConfig::default()
    }
}
