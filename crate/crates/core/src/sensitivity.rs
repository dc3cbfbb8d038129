//! Block-wise sync sensitivity.
//!
//! The suffix curve holds `L + 1` perplexities: entry `j` runs blocks `>= j`
//! in SPD mode and the rest fully synchronized. The sensitivity of block `i`
//! is the perplexity jump from also dropping its sync-point,
//! `curve[i] - curve[i + 1]`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::CalibrationSet;
use crate::error::{Result, SpdError};
use crate::model::{perplexity, Model};
use crate::parallel::{ParallelModel, SyncPlan};

/// Default in-sensitive threshold.
pub const DEFAULT_TAU1: f64 = 0.05;
/// Default extremely-sensitive threshold.
pub const DEFAULT_TAU2: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Category {
    /// In-sensitive: dropped zero-shot.
    Isb,
    /// Sensitive: distilled before dropping.
    Sb,
    /// Extremely sensitive: head-grouped and distilled before dropping.
    Esb,
}

impl Category {
    pub fn of(score: f64, tau1: f64, tau2: f64) -> Self {
        if score <= tau1 {
            Category::Isb
        } else if score <= tau2 {
            Category::Sb
        } else {
            Category::Esb
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub devices: usize,
    pub suffix_ppl: Vec<f64>,
    #[serde(rename = "S")]
    pub scores: Vec<f64>,
    /// Block indices ascending by score; ties by block index.
    #[serde(rename = "B")]
    pub ranking: Vec<usize>,
    pub categories: Vec<Category>,
    pub tau1: f64,
    pub tau2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub ranking: Vec<usize>,
    pub categories: Vec<Category>,
}

/// Perplexity of every suffix-SPD plan, `j = 0..=L`.
pub fn suffix_ppl_curve(model: &Model, devices: usize, calib: &CalibrationSet) -> Result<Vec<f64>> {
    if calib.is_empty() {
        return Err(SpdError::Data("empty calibration set".into()));
    }
    model.config.check_devices(devices)?;
    let n = model.n_layers();
    (0..=n)
        .map(|first_spd| {
            let plan = SyncPlan::suffix(n, first_spd);
            perplexity(&ParallelModel::new(model, &plan, devices)?, calib)
        })
        .collect()
}

pub fn sensitivity_scores(curve: &[f64]) -> Result<Vec<f64>> {
    if curve.is_empty() {
        return Err(SpdError::Contract("sensitivity curve needs L + 1 >= 1 entries".into()));
    }
    Ok(curve.windows(2).map(|w| w[0] - w[1]).collect())
}

pub fn classify_blocks(scores: &[f64], tau1: f64, tau2: f64) -> Result<Classification> {
    if !(tau1 <= tau2) {
        return Err(SpdError::Config(format!("tau1 {tau1} must not exceed tau2 {tau2}")));
    }
    let mut ranking: Vec<usize> = (0..scores.len()).collect();
    ranking.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let categories = scores.iter().map(|&s| Category::of(s, tau1, tau2)).collect();
    Ok(Classification { ranking, categories })
}

impl SensitivityReport {
    pub fn from_curve(curve: Vec<f64>, devices: usize, tau1: f64, tau2: f64) -> Result<Self> {
        let scores = sensitivity_scores(&curve)?;
        let Classification { ranking, categories } = classify_blocks(&scores, tau1, tau2)?;
        Ok(Self { devices, suffix_ppl: curve, scores, ranking, categories, tau1, tau2 })
    }

    pub fn n_layers(&self) -> usize {
        self.scores.len()
    }

    /// CSV of the suffix curve, one row per first-SPD block index.
    pub fn curve_csv(&self) -> String {
        let n = self.n_layers();
        let mut out = String::from("first_spd_block,spd_blocks,ppl,block_score,block_category\n");
        for (j, ppl) in self.suffix_ppl.iter().enumerate() {
            let (score, cat) = if j < n {
                (format!("{}", self.scores[j]), format!("{:?}", self.categories[j]).to_uppercase())
            } else {
                (String::new(), String::new())
            };
            let _ = writeln!(out, "{j},{},{ppl},{score},{cat}", n - j);
        }
        out
    }
}

/// Full scan: suffix curve, scores and classification.
pub fn scan(model: &Model, devices: usize, calib: &CalibrationSet, tau1: f64, tau2: f64) -> Result<SensitivityReport> {
    classify_blocks(&[], tau1, tau2)?;
    let curve = suffix_ppl_curve(model, devices, calib)?;
    SensitivityReport::from_curve(curve, devices, tau1, tau2)
}
