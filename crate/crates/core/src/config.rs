//! Flat TOML run configuration shared by every pipeline stage.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{sample_calibration, CalibrationSet};
use crate::distill::{DistillHyper, PrefixMode};
use crate::error::{Result, SpdError};
use crate::grouping::{GroupingOptions, MlpNorm, ScatterMode, DEFAULT_RESTARTS};
use crate::model::{MlpKind, ModelConfig, NormKind, TrainHyper};
use crate::pipeline::Strategy;
use crate::sensitivity::{DEFAULT_TAU1, DEFAULT_TAU2};

/// How many blocks lose their attention sync-point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Count(usize),
    /// Share of all blocks, rounded down.
    Fraction(f64),
}

impl Budget {
    pub fn resolve(self, n_layers: usize) -> Result<usize> {
        match self {
            Budget::Count(n) if n <= n_layers => Ok(n),
            Budget::Count(n) => Err(SpdError::Config(format!("budget {n} exceeds {n_layers} blocks"))),
            Budget::Fraction(f) if (0.0..=1.0).contains(&f) => {
                // The slack keeps products such as 0.29 * 100 from rounding
                // down past the intended integer.
                Ok(((f * n_layers as f64 + 1e-9).floor() as usize).min(n_layers))
            }
            Budget::Fraction(f) => Err(SpdError::Config(format!("budget fraction {f} outside [0, 1]"))),
        }
    }
}

impl FromStr for Budget {
    type Err = SpdError;

    /// `"5"` is a block count; `"0.7"` and `"70%"` are fractions.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || SpdError::Config(format!("cannot parse budget `{s}`"));
        if let Some(p) = s.strip_suffix('%') {
            let v: f64 = p.trim().parse().map_err(|_| bad())?;
            return Ok(Budget::Fraction(v / 100.0));
        }
        if let Ok(n) = s.parse::<usize>() {
            return Ok(Budget::Count(n));
        }
        s.parse::<f64>().map(Budget::Fraction).map_err(|_| bad())
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Count(n) => write!(f, "{n}"),
            Budget::Fraction(v) => write!(f, "{}%", v * 100.0),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BudgetRepr {
    Int(u64),
    Float(f64),
    Text(String),
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match BudgetRepr::deserialize(d)? {
            BudgetRepr::Int(n) => Ok(Budget::Count(n as usize)),
            BudgetRepr::Float(f) => Ok(Budget::Fraction(f)),
            BudgetRepr::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl Serialize for Budget {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            Budget::Count(n) => s.serialize_u64(n as u64),
            Budget::Fraction(f) => s.serialize_f64(f),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Vec<u32>,
    pub calib: CalibrationSet,
    pub eval: CalibrationSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub checkpoint: Option<String>,
    /// Text file to train and calibrate on; a synthetic corpus otherwise.
    pub corpus: Option<String>,
    pub synthetic_bytes: usize,
    pub out: String,
    pub seed: u64,
    pub devices: usize,
    pub budget: Budget,
    pub tau1: f64,
    pub tau2: f64,
    pub mode: Strategy,
    pub profiles: Vec<String>,

    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub norm_kind: NormKind,
    pub mlp_kind: MlpKind,
    pub attn_out_bias: bool,

    pub train_steps: usize,
    pub train_lr: f64,
    pub train_batch: usize,
    pub train_seq_len: usize,

    pub calib_samples: usize,
    pub calib_seq_len: usize,
    pub eval_samples: usize,

    pub distill_lr: f64,
    pub distill_epochs: usize,
    pub prefix_mode: PrefixMode,

    pub grouping_mode: ScatterMode,
    pub grouping_restarts: usize,
    pub mlp_norm: MlpNorm,
    pub signature_samples: usize,
    pub signature_tokens: usize,

    pub batch: usize,
    pub cost_seq_len: usize,
    pub compute_time_per_block: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainHyper::default();
        let d = DistillHyper::default();
        Self {
            checkpoint: None,
            corpus: None,
            synthetic_bytes: 200_000,
            out: "out".into(),
            seed: 0,
            devices: 4,
            budget: Budget::Fraction(0.5),
            tau1: DEFAULT_TAU1,
            tau2: DEFAULT_TAU2,
            mode: Strategy::ZsB2bHg,
            profiles: vec!["hbw-1node".into(), "lbw-1node".into()],
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            head_dim: m.head_dim,
            d_ff: m.d_ff,
            max_seq: m.max_seq,
            norm_kind: m.norm_kind,
            mlp_kind: m.mlp_kind,
            attn_out_bias: m.attn_out_bias,
            train_steps: t.steps,
            train_lr: t.lr as f64,
            train_batch: t.batch,
            train_seq_len: t.seq_len,
            calib_samples: 16,
            calib_seq_len: 64,
            eval_samples: 16,
            distill_lr: d.lr as f64,
            distill_epochs: d.epochs,
            prefix_mode: PrefixMode::AllTp,
            grouping_mode: ScatterMode::Exact,
            grouping_restarts: DEFAULT_RESTARTS,
            mlp_norm: MlpNorm::MeanTokenL2,
            signature_samples: 4,
            signature_tokens: 128,
            batch: 1,
            cost_seq_len: 128,
            compute_time_per_block: 0.0,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| SpdError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&crate::checkpoint::read_text(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SpdError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices == 0 {
            return Err(SpdError::Config("devices must be at least 1".into()));
        }
        if !(self.tau1 <= self.tau2) {
            return Err(SpdError::Config(format!("tau1 {} must not exceed tau2 {}", self.tau1, self.tau2)));
        }
        if self.calib_samples == 0 || self.calib_seq_len < 2 || self.eval_samples == 0 {
            return Err(SpdError::Config("calibration needs samples of at least two tokens".into()));
        }
        if let Budget::Fraction(f) = self.budget {
            if !(0.0..=1.0).contains(&f) {
                return Err(SpdError::Config(format!("budget fraction {f} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Architecture for a freshly initialized model.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            d_ff: self.d_ff,
            vocab_size: crate::corpus::BYTE_VOCAB,
            norm_kind: self.norm_kind,
            mlp_kind: self.mlp_kind,
            attn_out_bias: self.attn_out_bias,
            max_seq: self.max_seq,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }

    pub fn train_hyper(&self) -> TrainHyper {
        TrainHyper {
            lr: self.train_lr as _,
            steps: self.train_steps,
            batch: self.train_batch,
            seq_len: self.train_seq_len,
            seed: self.seed,
        }
    }

    pub fn distill_hyper(&self) -> DistillHyper {
        DistillHyper { lr: self.distill_lr as _, epochs: self.distill_epochs, ..DistillHyper::default() }
    }

    /// Token stream from `corpus`, or seeded synthetic text when unset.
    pub fn load_corpus(&self) -> Result<Vec<u32>> {
        match &self.corpus {
            Some(path) => crate::corpus::load_and_tokenize(path),
            None => Ok(crate::corpus::tokenize(&crate::corpus::synthetic_corpus(self.synthetic_bytes, self.seed))),
        }
    }

    /// Splits the corpus into a training/calibration stream (first 90%) and a
    /// held-out stream, and samples the calibration and evaluation sets.
    pub fn datasets(&self) -> Result<Datasets> {
        let stream = self.load_corpus()?;
        let cut = stream.len() * 9 / 10;
        let (train, heldout) = stream.split_at(cut);
        let calib = sample_calibration(train, self.calib_samples, self.calib_seq_len, self.seed)?;
        let eval = sample_calibration(heldout, self.eval_samples, self.calib_seq_len, self.seed.wrapping_add(1))?;
        Ok(Datasets { train: train.to_vec(), calib, eval })
    }

    pub fn grouping_options(&self) -> GroupingOptions {
        GroupingOptions {
            mode: self.grouping_mode,
            restarts: self.grouping_restarts,
            norm: self.mlp_norm,
            seed: self.seed,
        }
    }
}
