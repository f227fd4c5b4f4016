//! Minimum risk training: expected risk under a sharpened distribution over candidates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_zoo::MASKED;
use crate::numerics::{log_sum_exp, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateGen {
    #[default]
    Beam,
    Sample,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Risk {
    /// `-sentence_bleu / 100`
    #[default]
    NegSentenceBleu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MrtConfig {
    /// Sharpness of the candidate distribution.
    pub alpha: f64,
    pub num_candidates: usize,
    pub candidate_gen: CandidateGen,
    pub include_gold: bool,
    pub risk: Risk,
    /// Divide the summed risk by the number of sources.
    pub average: bool,
}

impl Default for MrtConfig {
    fn default() -> Self {
        MrtConfig {
            alpha: 0.005,
            num_candidates: 4,
            candidate_gen: CandidateGen::Beam,
            include_gold: true,
            risk: Risk::NegSentenceBleu,
            average: false,
        }
    }
}

impl MrtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("MRT alpha {} must be positive", self.alpha)));
        }
        if self.num_candidates == 0 {
            return Err(Error::Config("num_candidates must be at least 1".into()));
        }
        Ok(())
    }
}

/// The grid searched by [`super::mrt_alpha_search`] by default.
pub const ALPHA_GRID: [f64; 6] = [0.005, 0.05, 0.5, 1.0, 1.5, 2.0];

/// `Q(y) = exp(α·logP(y)) / Σ exp(α·logP(y'))`, in log space.
pub fn candidate_distribution(log_probs: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if log_probs.is_empty() {
        return Err(Error::Candidate(0));
    }
    let scaled: Vec<f64> = log_probs.iter().map(|lp| alpha * lp).collect();
    let z = log_sum_exp(&scaled);
    Ok(scaled.iter().map(|s| (s - z).exp()).collect())
}

/// Risk of one source, `Σ Q(y) Δ(y)`.
pub fn expected_risk(log_probs: &[f64], risks: &[f64], alpha: f64) -> Result<f64> {
    if log_probs.len() != risks.len() {
        return Err(Error::Shape(format!("{} log-probs with {} risks", log_probs.len(), risks.len())));
    }
    let q = candidate_distribution(log_probs, alpha)?;
    Ok(q.iter().zip(risks).map(|(q, r)| q * r).sum())
}

/// Differentiable risk over several sources. `scores` holds candidate
/// log-probabilities `[N]`, grouped consecutively by `group_sizes`.
pub fn mrt_objective(
    g: &mut Graph<'_>,
    scores: Var,
    group_sizes: &[usize],
    risks: &[f64],
    alpha: f64,
    average: bool,
) -> Result<Var> {
    if let Some(i) = group_sizes.iter().position(|&s| s == 0) {
        return Err(Error::Candidate(i));
    }
    let n: usize = group_sizes.iter().sum();
    if g.shape(scores) != [n] || risks.len() != n || group_sizes.is_empty() {
        return Err(Error::Shape(format!(
            "{:?} scores, {} risks, groups {group_sizes:?}",
            g.shape(scores),
            risks.len()
        )));
    }
    let width = *group_sizes.iter().max().expect("non-empty");
    let mut rows = Vec::with_capacity(group_sizes.len() * width);
    let mut mask = Vec::with_capacity(rows.capacity());
    let mut weights = Vec::with_capacity(rows.capacity());
    let mut at = 0;
    for &s in group_sizes {
        for k in 0..width {
            let real = k < s;
            rows.push(if real { at + k } else { at });
            mask.push(if real { 0.0 } else { MASKED });
            weights.push(if real { risks[at + k] } else { 0.0 });
        }
        at += s;
    }
    let shape = vec![group_sizes.len(), width];
    let column = g.reshape(scores, &[n, 1])?;
    let grid = g.select_rows(column, &rows)?;
    let grid = g.reshape(grid, &shape)?;
    let sharp = g.scale(grid, alpha)?;
    let mask = g.constant(Tensor::new(shape.clone(), mask)?);
    let masked = g.add(sharp, mask)?;
    let q = g.softmax(masked)?;
    let delta = g.constant(Tensor::new(shape, weights)?);
    let weighted = g.mul(q, delta)?;
    let total = g.sum(weighted)?;
    if average {
        g.scale(total, 1.0 / group_sizes.len() as f64)
    } else {
        Ok(total)
    }
}
