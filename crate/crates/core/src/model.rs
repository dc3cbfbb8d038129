//! Desk-scale pre-norm decoder: configuration, weights, the single-device
//! reference forward, toy pretraining and perplexity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use crate::autodiff::NormKind;
use crate::autodiff::{Tape, Var};
use crate::corpus::CalibrationSet;
use crate::error::{Result, SpdError};
use crate::optim::Adam;
use crate::tensor::{Elem, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlpKind {
    /// `gelu(x W_up + b_up) W_down`
    Gelu2,
    /// `(silu(x W_gate) * (x W_up + b_up)) W_down`
    SwiGlu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub norm_kind: NormKind,
    pub norm_eps: Elem,
    /// Bias on the attention output projection (OPT-style when true).
    pub attn_out_bias: bool,
    pub mlp_kind: MlpKind,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 128,
            n_heads: 8,
            head_dim: 16,
            d_ff: 512,
            vocab_size: 256,
            norm_kind: NormKind::RmsNorm,
            norm_eps: 1e-5,
            attn_out_bias: false,
            mlp_kind: MlpKind::Gelu2,
            max_seq: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(SpdError::Config(format!("{name} must be positive")));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(SpdError::Config(format!(
                "d_model {} != n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if self.norm_eps <= 0.0 {
            return Err(SpdError::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Checks that a device count can shard both heads and the MLP evenly.
    pub fn check_devices(&self, devices: usize) -> Result<()> {
        if devices == 0 || self.n_heads % devices != 0 || self.d_ff % devices != 0 {
            return Err(SpdError::Config(format!(
                "{devices} devices cannot evenly split {} heads and d_ff {}",
                self.n_heads, self.d_ff
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub weight: Tensor,
    /// Present for layernorm only.
    pub bias: Option<Tensor>,
}

impl NormParams {
    fn new(d: usize, kind: NormKind) -> Self {
        Self {
            weight: Tensor::full(&[d], 1.0),
            bias: (kind == NormKind::LayerNorm).then(|| Tensor::zeros(&[d])),
        }
    }
}

/// Weights of one decoder block. Matrices are stored `[in, out]`, so head
/// `h` owns columns `h*head_dim..(h+1)*head_dim` of `wq`/`wk`/`wv` and the
/// same row range of `wo`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlockWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub bo: Option<Tensor>,
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub w_gate: Option<Tensor>,
    pub w_down: Tensor,
    pub b_down: Tensor,
    pub norm1: NormParams,
    pub norm2: NormParams,
}

impl DecoderBlockWeights {
    /// All tensors with stable names, in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("w_up", &self.w_up),
            ("b_up", &self.b_up),
            ("w_down", &self.w_down),
            ("b_down", &self.b_down),
            ("norm1.weight", &self.norm1.weight),
            ("norm2.weight", &self.norm2.weight),
        ];
        if let Some(b) = &self.bo {
            out.push(("bo", b));
        }
        if let Some(g) = &self.w_gate {
            out.push(("w_gate", g));
        }
        if let Some(b) = &self.norm1.bias {
            out.push(("norm1.bias", b));
        }
        if let Some(b) = &self.norm2.bias {
            out.push(("norm2.bias", b));
        }
        out
    }

    /// Mutable view matching the order of [`named`](Self::named).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w_up,
            &mut self.b_up,
            &mut self.w_down,
            &mut self.b_down,
            &mut self.norm1.weight,
            &mut self.norm2.weight,
        ];
        out.extend(self.bo.as_mut());
        out.extend(self.w_gate.as_mut());
        out.extend(self.norm1.bias.as_mut());
        out.extend(self.norm2.bias.as_mut());
        out
    }

    /// Rebuilds a block from named tensors (the inverse of `named`).
    pub fn from_named(mut get: impl FnMut(&str) -> Option<Tensor>) -> Result<Self> {
        let mut req = |n: &str| get(n).ok_or_else(|| SpdError::Format(format!("missing tensor {n}")));
        let wq = req("wq")?;
        let wk = req("wk")?;
        let wv = req("wv")?;
        let wo = req("wo")?;
        let w_up = req("w_up")?;
        let b_up = req("b_up")?;
        let w_down = req("w_down")?;
        let b_down = req("b_down")?;
        let n1 = req("norm1.weight")?;
        let n2 = req("norm2.weight")?;
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            bo: get("bo"),
            w_up,
            b_up,
            w_gate: get("w_gate"),
            w_down,
            b_down,
            norm1: NormParams { weight: n1, bias: get("norm1.bias") },
            norm2: NormParams { weight: n2, bias: get("norm2.bias") },
        })
    }

    /// SHA-256 over names, shapes and raw bytes of every tensor.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Tensor,
    /// Learned absolute positions, `[max_seq, d_model]`.
    pub pos: Tensor,
    pub blocks: Vec<DecoderBlockWeights>,
    pub final_norm: NormParams,
    /// Untied output projection `[d_model, vocab]`; `None` ties to `embed`.
    pub head: Option<Tensor>,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng) as Elem).collect())
        .expect("shape matches")
}

/// Deterministic initialization: scaled normal matrices, zero biases, unit
/// norm weights.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let ff = config.d_ff;
    let in_std = 1.0 / (d as f64).sqrt();
    let out_scale = 1.0 / (2.0 * config.n_layers.max(1) as f64).sqrt();
    let embed = normal(&mut rng, &[config.vocab_size, d], 1.0);
    let pos = normal(&mut rng, &[config.max_seq, d], 0.1);
    let blocks = (0..config.n_layers)
        .map(|_| DecoderBlockWeights {
            wq: normal(&mut rng, &[d, d], in_std),
            wk: normal(&mut rng, &[d, d], in_std),
            wv: normal(&mut rng, &[d, d], in_std),
            wo: normal(&mut rng, &[d, d], in_std * out_scale),
            bo: config.attn_out_bias.then(|| Tensor::zeros(&[d])),
            w_up: normal(&mut rng, &[d, ff], in_std),
            b_up: Tensor::zeros(&[ff]),
            w_gate: (config.mlp_kind == MlpKind::SwiGlu).then(|| normal(&mut rng, &[d, ff], in_std)),
            w_down: normal(&mut rng, &[ff, d], out_scale / (ff as f64).sqrt()),
            b_down: Tensor::zeros(&[d]),
            norm1: NormParams::new(d, config.norm_kind),
            norm2: NormParams::new(d, config.norm_kind),
        })
        .collect();
    Ok(Model {
        config: config.clone(),
        embed,
        pos,
        blocks,
        final_norm: NormParams::new(d, config.norm_kind),
        head: Some(normal(&mut rng, &[d, config.vocab_size], in_std)),
    })
}

/// Tape handles for one block's parameters.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Option<Var>,
    pub w_up: Var,
    pub b_up: Var,
    pub w_gate: Option<Var>,
    pub w_down: Var,
    pub b_down: Var,
    pub norm1: (Var, Option<Var>),
    pub norm2: (Var, Option<Var>),
}

impl BlockVars {
    pub fn load(tape: &mut Tape, w: &DecoderBlockWeights, trainable: bool) -> Self {
        let mut put = |t: &Tensor| {
            let mut t = t.clone();
            t.requires_grad = trainable;
            tape.leaf(t)
        };
        Self {
            wq: put(&w.wq),
            wk: put(&w.wk),
            wv: put(&w.wv),
            wo: put(&w.wo),
            bo: w.bo.as_ref().map(&mut put),
            w_up: put(&w.w_up),
            b_up: put(&w.b_up),
            w_gate: w.w_gate.as_ref().map(&mut put),
            w_down: put(&w.w_down),
            b_down: put(&w.b_down),
            norm1: (put(&w.norm1.weight), w.norm1.bias.as_ref().map(&mut put)),
            norm2: (put(&w.norm2.weight), w.norm2.bias.as_ref().map(&mut put)),
        }
    }

    /// Inverse of [`ordered`](Self::ordered): which optional handles are
    /// present is taken from `template`.
    pub fn from_ordered(vars: &[Var], template: &DecoderBlockWeights) -> Result<Self> {
        let expected = template.named().len();
        if vars.len() != expected {
            return Err(SpdError::Contract(format!("{} handles for {expected} block tensors", vars.len())));
        }
        let mut rest = vars[10..].iter().copied();
        let mut opt = |present: bool| if present { rest.next() } else { None };
        let bo = opt(template.bo.is_some());
        let w_gate = opt(template.w_gate.is_some());
        let n1b = opt(template.norm1.bias.is_some());
        let n2b = opt(template.norm2.bias.is_some());
        Ok(Self {
            wq: vars[0],
            wk: vars[1],
            wv: vars[2],
            wo: vars[3],
            bo,
            w_up: vars[4],
            b_up: vars[5],
            w_gate,
            w_down: vars[6],
            b_down: vars[7],
            norm1: (vars[8], n1b),
            norm2: (vars[9], n2b),
        })
    }

    /// Handles in the order of [`DecoderBlockWeights::named`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.w_up,
            self.b_up,
            self.w_down,
            self.b_down,
            self.norm1.0,
            self.norm2.0,
        ];
        out.extend(self.bo);
        out.extend(self.w_gate);
        out.extend(self.norm1.1);
        out.extend(self.norm2.1);
        out
    }
}

/// Multi-head causal self-attention over the head columns present in the
/// projection matrices. Returns the concatenated per-head outputs
/// `[T, n_heads * head_dim]`, before the output projection.
pub(crate) fn attention_heads(
    tape: &mut Tape,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    head_dim: usize,
) -> Result<Var> {
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let (_, width) = tape.value(q).dims2()?;
    let scale = 1.0 / (head_dim as Elem).sqrt();
    let mut outs = Vec::with_capacity(width / head_dim);
    for h in 0..width / head_dim {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let probs = tape.softmax_causal(scores)?;
        outs.push(tape.matmul(probs, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// MLP body without the down-projection bias.
pub(crate) fn mlp_partial(
    tape: &mut Tape,
    x: Var,
    w_up: Var,
    b_up: Var,
    w_gate: Option<Var>,
    w_down: Var,
    kind: MlpKind,
) -> Result<Var> {
    let up = tape.matmul(x, w_up)?;
    let up = tape.add_row(up, b_up)?;
    let act = match (kind, w_gate) {
        (MlpKind::Gelu2, _) => tape.gelu(up)?,
        (MlpKind::SwiGlu, Some(g)) => {
            let gate = tape.matmul(x, g)?;
            let gate = tape.silu(gate)?;
            tape.mul(gate, up)?
        }
        (MlpKind::SwiGlu, None) => {
            return Err(SpdError::Config("swiglu MLP without gate weights".into()))
        }
    };
    tape.matmul(act, w_down)
}

pub(crate) fn norm(tape: &mut Tape, x: Var, p: (Var, Option<Var>), cfg: &ModelConfig) -> Result<Var> {
    tape.normalize(x, p.0, p.1, cfg.norm_kind, cfg.norm_eps)
}

/// Single-device block: `h += Attn(norm1(h)); h += MLP(norm2(h))`.
pub fn reference_block(tape: &mut Tape, b: &BlockVars, x: Var, cfg: &ModelConfig) -> Result<Var> {
    let n1 = norm(tape, x, b.norm1, cfg)?;
    let heads = attention_heads(tape, n1, b.wq, b.wk, b.wv, cfg.head_dim)?;
    let mut y = tape.matmul(heads, b.wo)?;
    if let Some(bo) = b.bo {
        y = tape.add_row(y, bo)?;
    }
    let h = tape.add(x, y)?;
    let n2 = norm(tape, h, b.norm2, cfg)?;
    let z = mlp_partial(tape, n2, b.w_up, b.b_up, b.w_gate, b.w_down, cfg.mlp_kind)?;
    let z = tape.add_row(z, b.b_down)?;
    tape.add(h, z)
}

/// Tape handles for the whole model.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub embed: Var,
    pub pos: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: (Var, Option<Var>),
    pub head: Option<Var>,
}

impl Model {
    pub fn load(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let mut put = |t: &Tensor| {
            let mut t = t.clone();
            t.requires_grad = trainable;
            tape.leaf(t)
        };
        let embed = put(&self.embed);
        let pos = put(&self.pos);
        let final_norm = (put(&self.final_norm.weight), self.final_norm.bias.as_ref().map(&mut put));
        let head = self.head.as_ref().map(&mut put);
        let blocks = self.blocks.iter().map(|b| BlockVars::load(tape, b, trainable)).collect();
        ModelVars { embed, pos, blocks, final_norm, head }
    }

    /// All parameters in the order used by [`ModelVars::ordered`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed, &mut self.pos, &mut self.final_norm.weight];
        out.extend(self.final_norm.bias.as_mut());
        out.extend(self.head.as_mut());
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Err(SpdError::Data("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq {
            return Err(SpdError::Data(format!(
                "sequence of {} exceeds max_seq {}",
                tokens.len(),
                self.config.max_seq
            )));
        }
        tokens
            .iter()
            .map(|&t| {
                let t = t as usize;
                if t < self.config.vocab_size {
                    Ok(t)
                } else {
                    Err(SpdError::Data(format!("token {t} outside vocab {}", self.config.vocab_size)))
                }
            })
            .collect()
    }
}

impl ModelVars {
    /// Inverse of [`ordered`](Self::ordered) for a model shaped like `template`.
    pub fn from_ordered(vars: &[Var], template: &Model) -> Result<Self> {
        let mut it = vars.iter().copied();
        let mut next = || it.next().ok_or_else(|| SpdError::Contract("too few handles for model".into()));
        let embed = next()?;
        let pos = next()?;
        let fw = next()?;
        let fb = if template.final_norm.bias.is_some() { Some(next()?) } else { None };
        let head = if template.head.is_some() { Some(next()?) } else { None };
        let mut blocks = Vec::with_capacity(template.blocks.len());
        let mut at = vars.len() - it.len();
        for b in &template.blocks {
            let n = b.named().len();
            let slice = vars.get(at..at + n).ok_or_else(|| SpdError::Contract("too few handles for blocks".into()))?;
            blocks.push(BlockVars::from_ordered(slice, b)?);
            at += n;
        }
        if at != vars.len() {
            return Err(SpdError::Contract(format!("{} handles for {at} model tensors", vars.len())));
        }
        Ok(Self { embed, pos, blocks, final_norm: (fw, fb), head })
    }

    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.embed, self.pos, self.final_norm.0];
        out.extend(self.final_norm.1);
        out.extend(self.head);
        for b in &self.blocks {
            out.extend(b.ordered());
        }
        out
    }

    /// Token plus position embedding, `[T, d_model]`.
    pub fn embed_tokens(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        let tok = tape.gather_rows(self.embed, ids)?;
        let pos = tape.slice_rows(self.pos, 0, ids.len())?;
        tape.add(tok, pos)
    }

    /// Final norm and output head.
    pub fn logits(&self, tape: &mut Tape, h: Var, cfg: &ModelConfig) -> Result<Var> {
        let n = norm(tape, h, self.final_norm, cfg)?;
        match self.head {
            Some(head) => tape.matmul(n, head),
            None => {
                let et = tape.transpose(self.embed)?;
                tape.matmul(n, et)
            }
        }
    }
}

/// Reference forward on an existing tape.
pub fn forward_reference_on(
    tape: &mut Tape,
    vars: &ModelVars,
    ids: &[usize],
    cfg: &ModelConfig,
) -> Result<Var> {
    let mut h = vars.embed_tokens(tape, ids)?;
    for b in &vars.blocks {
        h = reference_block(tape, b, h, cfg)?;
    }
    vars.logits(tape, h, cfg)
}

/// Single-device forward producing `[T, vocab]` logits.
pub fn forward_reference(model: &Model, tokens: &[u32]) -> Result<Tensor> {
    let ids = model.check_tokens(tokens)?;
    let mut tape = Tape::new();
    let vars = model.load(&mut tape, false);
    let out = forward_reference_on(&mut tape, &vars, &ids, &model.config)?;
    Ok(tape.value(out).clone())
}

/// Anything that maps a token sequence to logits.
pub trait LogitsSource {
    fn logits(&self, tokens: &[u32]) -> Result<Tensor>;
}

impl LogitsSource for Model {
    fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
        forward_reference(self, tokens)
    }
}

/// Sum of next-token NLL over positions `0..T-1` and the number of positions.
pub fn sequence_nll(logits: &Tensor, tokens: &[u32]) -> Result<(f64, usize)> {
    let (rows, vocab) = logits.dims2()?;
    if rows != tokens.len() {
        return Err(SpdError::Dimension(format!("{rows} logit rows for {} tokens", tokens.len())));
    }
    let mut total = 0.0f64;
    for t in 0..rows.saturating_sub(1) {
        let row = logits.row(t);
        let target = tokens[t + 1] as usize;
        if target >= vocab {
            return Err(SpdError::Data(format!("token {target} outside vocab {vocab}")));
        }
        let max = row.iter().copied().fold(Elem::NEG_INFINITY, Elem::max) as f64;
        let lse = row.iter().map(|&l| (l as f64 - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[target] as f64;
    }
    Ok((total, rows.saturating_sub(1)))
}

/// `exp(mean NLL)` over every next-token position of every sample.
pub fn perplexity(source: &dyn LogitsSource, data: &CalibrationSet) -> Result<f64> {
    if data.samples.is_empty() {
        return Err(SpdError::Data("empty calibration set".into()));
    }
    let mut total = 0.0;
    let mut count = 0;
    for sample in &data.samples {
        let logits = source.logits(sample)?;
        let (nll, n) = sequence_nll(&logits, sample)?;
        total += nll;
        count += n;
    }
    if count == 0 {
        return Err(SpdError::Data("calibration samples have no next-token positions".into()));
    }
    Ok((total / count as f64).exp())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: Elem,
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { lr: 3e-3, steps: 300, batch: 4, seq_len: 64, seed: 0 }
    }
}

/// Mean over `windows` of the next-token cross-entropy of each window.
pub fn lm_loss_on(tape: &mut Tape, vars: &ModelVars, cfg: &ModelConfig, windows: &[Vec<usize>]) -> Result<Var> {
    if windows.is_empty() || windows.iter().any(|w| w.len() < 2) {
        return Err(SpdError::Data("language-model loss needs windows of at least two tokens".into()));
    }
    let mut total: Option<Var> = None;
    for ids in windows {
        let logits = forward_reference_on(tape, vars, &ids[..ids.len() - 1], cfg)?;
        let l = tape.cross_entropy(logits, &ids[1..])?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    tape.scale(total.expect("non-empty"), 1.0 / windows.len() as Elem)
}

/// Next-token cross-entropy pretraining with Adam on random corpus windows.
/// Returns the trained model and the per-step loss curve.
pub fn train_toy(model: &Model, corpus: &[u32], hyper: &TrainHyper) -> Result<(Model, Vec<Elem>)> {
    if hyper.seq_len < 2 || hyper.seq_len > model.config.max_seq || hyper.batch == 0 {
        return Err(SpdError::Config(format!(
            "invalid training shape: batch {} seq_len {} (max_seq {})",
            hyper.batch, hyper.seq_len, model.config.max_seq
        )));
    }
    if corpus.len() < hyper.seq_len {
        return Err(SpdError::Data(format!(
            "corpus of {} tokens is shorter than seq_len {}",
            corpus.len(),
            hyper.seq_len
        )));
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut adam = Adam::new(hyper.lr);
    let mut losses = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let mut tape = Tape::new();
        let vars = model.load(&mut tape, true);
        let windows = (0..hyper.batch)
            .map(|_| {
                let start = rng.random_range(0..=corpus.len() - hyper.seq_len);
                model.check_tokens(&corpus[start..start + hyper.seq_len])
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = lm_loss_on(&mut tape, &vars, &model.config, &windows)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(SpdError::Diverged { step, block: None });
        }
        losses.push(value);
        let grads = tape.backward(loss)?;
        let order = vars.ordered();
        let mut params = model.tensors_mut();
        let g: Vec<Tensor> = order
            .iter()
            .zip(params.iter())
            .map(|(&v, p)| grads.get_or_zeros(v, p))
            .collect();
        adam.update(&mut params, &g)?;
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 4,
            head_dim: 4,
            d_ff: 32,
            vocab_size: 11,
            max_seq: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_config();
        assert_eq!(init_model(&cfg, 3).unwrap(), init_model(&cfg, 3).unwrap());
        assert_ne!(init_model(&cfg, 3).unwrap().blocks[0].wq, init_model(&cfg, 4).unwrap().blocks[0].wq);
    }

    #[test]
    fn init_rejects_bad_dims() {
        let cfg = ModelConfig { head_dim: 5, ..tiny_config() };
        assert!(matches!(init_model(&cfg, 0), Err(SpdError::Config(_))));
    }

    #[test]
    fn zero_layer_model_is_norm_and_head() {
        let cfg = ModelConfig { n_layers: 0, ..tiny_config() };
        let m = init_model(&cfg, 1).unwrap();
        let tokens = [1u32, 5, 2];
        let logits = forward_reference(&m, &tokens).unwrap();
        let mut h = Vec::new();
        for (t, &tok) in tokens.iter().enumerate() {
            let e = m.embed.row(tok as usize);
            let p = m.pos.row(t);
            h.push(e.iter().zip(p).map(|(a, b)| a + b).collect::<Vec<_>>());
        }
        let h = Tensor::from_rows(&h).unwrap();
        let n = crate::autodiff::normalize(&h, &m.final_norm.weight, None, cfg.norm_kind, cfg.norm_eps).unwrap();
        let expect = n.matmul(m.head.as_ref().unwrap()).unwrap();
        assert_eq!(logits, expect);
    }

    #[test]
    fn out_of_vocab_token_is_data_error() {
        let m = init_model(&tiny_config(), 0).unwrap();
        assert!(matches!(forward_reference(&m, &[3, 11]), Err(SpdError::Data(_))));
    }

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let mut m = init_model(&tiny_config(), 0).unwrap();
        m.head = Some(Tensor::zeros(&[16, 11]));
        let data = CalibrationSet { samples: vec![vec![1, 2, 3, 4], vec![5, 6, 7]], seq_len: 0, seed: 0, source: "t".into() };
        let ppl = perplexity(&m, &data).unwrap();
        assert!((ppl - 11.0).abs() <= 1e-12 * 11.0, "{ppl}");
        let empty = CalibrationSet { samples: vec![], seq_len: 4, seed: 0, source: "t".into() };
        assert!(matches!(perplexity(&m, &empty), Err(SpdError::Data(_))));
    }

    struct Oracle;
    impl LogitsSource for Oracle {
        fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
            let mut rows = vec![vec![0.0; 4]; tokens.len()];
            for (t, row) in rows.iter_mut().enumerate().take(tokens.len() - 1) {
                row[tokens[t + 1] as usize] = 1e6;
            }
            Tensor::from_rows(&rows)
        }
    }

    #[test]
    fn certain_model_has_unit_perplexity() {
        let data = CalibrationSet { samples: vec![vec![2, 3]], seq_len: 2, seed: 0, source: "t".into() };
        assert_eq!(perplexity(&Oracle, &data).unwrap(), 1.0);
    }

    #[test]
    fn zero_steps_leaves_model_unchanged() {
        let m = init_model(&tiny_config(), 0).unwrap();
        let corpus: Vec<u32> = (0..64).map(|i| i % 11).collect();
        let hyper = TrainHyper { steps: 0, seq_len: 8, ..TrainHyper::default() };
        let (trained, losses) = train_toy(&m, &corpus, &hyper).unwrap();
        assert_eq!(trained, m);
        assert!(losses.is_empty());
    }
}
