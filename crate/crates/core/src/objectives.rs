//! Dual-level alignment losses, dynamic sample filtering and the combined
//! training objective.
//!
//! Scalar functions here operate on plain vectors and are what the examples
//! and the CLI report against; the `*_rows` functions build the same
//! quantities for a whole batch on a [`Graph`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// The five alignment objectives, in their fixed index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentObjective {
    InterT,
    InterI,
    InterMm,
    IntraPos,
    IntraNeg,
}

impl AlignmentObjective {
    pub const ALL: [AlignmentObjective; 5] = [
        AlignmentObjective::InterT,
        AlignmentObjective::InterI,
        AlignmentObjective::InterMm,
        AlignmentObjective::IntraPos,
        AlignmentObjective::IntraNeg,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_inter(self) -> bool {
        self.index() < 3
    }

    pub fn name(self) -> &'static str {
        match self {
            AlignmentObjective::InterT => "inter_t",
            AlignmentObjective::InterI => "inter_i",
            AlignmentObjective::InterMm => "inter_mm",
            AlignmentObjective::IntraPos => "intra_pos",
            AlignmentObjective::IntraNeg => "intra_neg",
        }
    }
}

pub const N_OBJECTIVES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSchedule {
    pub delta_bar_start: f64,
    pub delta_bar_end: f64,
    /// Sigmoid sharpness applied to the similarity margin.
    pub filter_sharpness: f64,
    /// Reliability below which a triplet's loss is down-weighted.
    pub delta_threshold: f64,
}

impl Default for FilterSchedule {
    fn default() -> Self {
        Self {
            delta_bar_start: 0.2,
            delta_bar_end: -0.2,
            filter_sharpness: 10.0,
            delta_threshold: 0.6,
        }
    }
}

impl FilterSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_bar_start >= self.delta_bar_end) {
            return Err(Error::validation("delta_bar_start must be >= delta_bar_end"));
        }
        if !(self.filter_sharpness > 0.0) {
            return Err(Error::validation("filter_sharpness must be positive"));
        }
        if !(self.delta_threshold > 0.0 && self.delta_threshold < 1.0) {
            return Err(Error::validation("delta_threshold must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Margin offset at `step`, linearly interpolated from start to end.
    pub fn delta_bar(&self, step: usize, total_steps: usize) -> Result<f64> {
        if step > total_steps {
            return Err(Error::validation(format!("step {step} beyond total {total_steps}")));
        }
        if total_steps == 0 {
            return Ok(self.delta_bar_start);
        }
        let t = step as f64 / total_steps as f64;
        Ok(self.delta_bar_start + (self.delta_bar_end - self.delta_bar_start) * t)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `−log softmax` of the positive logit against the negatives, logits being
/// dot products divided by `tau`.
pub fn contrastive_loss(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::validation(format!("temperature must be positive, got {tau}")));
    }
    if negatives.is_empty() {
        return Err(Error::validation("at least one negative is required"));
    }
    let d = anchor.len();
    if positive.len() != d || negatives.iter().any(|n| n.len() != d) {
        return Err(Error::validation("representations differ in dimension"));
    }
    let pos = dot(anchor, positive) / tau;
    let logits: Vec<f64> = std::iter::once(pos)
        .chain(negatives.iter().map(|n| dot(anchor, n) / tau))
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - pos)
}

/// Inter-product alignment of a query against the positive item's
/// multimodal representation.
pub fn inter_loss(r_q: &[f64], r_p_mm: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    contrastive_loss(r_q, r_p_mm, negatives, tau)
}

/// Intra-product alignment of an item's image-only representation with its
/// own text against unrelated texts.
pub fn intra_loss(r_img: &[f64], r_txt: &[f64], unrelated_texts: &[&[f64]], tau_tilde: f64) -> Result<f64> {
    contrastive_loss(r_img, r_txt, unrelated_texts, tau_tilde)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Reliability `σ(sharpness · (q·p − q·n − Δ̄))` of one triplet.
pub fn reliability_weight(
    r_q: &[f64],
    r_p: &[f64],
    r_n: &[f64],
    schedule: &FilterSchedule,
    step: usize,
    total_steps: usize,
) -> Result<f64> {
    if r_p.len() != r_q.len() || r_n.len() != r_q.len() {
        return Err(Error::validation("representations differ in dimension"));
    }
    let delta_bar = schedule.delta_bar(step, total_steps)?;
    Ok(sigmoid(
        schedule.filter_sharpness * (dot(r_q, r_p) - dot(r_q, r_n) - delta_bar),
    ))
}

/// Loss multiplier: `φ` below the threshold, `1` at or above it.
pub fn filter_weight(phi: f64, delta_threshold: f64) -> f64 {
    if phi < delta_threshold {
        phi
    } else {
        1.0
    }
}

pub fn filter_weights(phis: &[f64], delta_threshold: f64) -> Vec<f64> {
    phis.iter().map(|&p| filter_weight(p, delta_threshold)).collect()
}

/// Per-step decomposition of the training objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Filter-weighted batch mean of each objective, in [`AlignmentObjective::ALL`] order.
    pub objective_losses: [f64; N_OBJECTIVES],
    /// Objective weights `ω`.
    pub omega: [f64; N_OBJECTIVES],
    /// Which objectives contributed this step.
    pub active: [bool; N_OBJECTIVES],
    pub aux: f64,
    pub sparsity: f64,
    pub alpha_aux: f64,
    pub beta: f64,
    /// Reliability `φ` per triplet, in batch order.
    pub reliability: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes the total from the parts.
    pub fn recompose(&self) -> Result<f64> {
        let parts: Vec<(f64, f64)> = (0..N_OBJECTIVES)
            .filter(|&m| self.active[m])
            .map(|m| (self.omega[m], self.objective_losses[m]))
            .collect();
        total_loss(&parts, self.aux, self.sparsity, self.alpha_aux, self.beta)
    }

    pub fn mean_reliability(&self) -> f64 {
        if self.reliability.is_empty() {
            return 1.0;
        }
        self.reliability.iter().sum::<f64>() / self.reliability.len() as f64
    }
}

/// `Σ ω_m L_m + alpha_aux·L_aux + beta·L_sparsity` over `(ω_m, L_m)` pairs.
pub fn total_loss(weighted: &[(f64, f64)], aux: f64, sparsity: f64, alpha_aux: f64, beta: f64) -> Result<f64> {
    for (m, (w, l)) in weighted.iter().enumerate() {
        if !w.is_finite() || !l.is_finite() {
            return Err(Error::Numeric(format!("objective {m} is not finite (omega {w}, loss {l})")));
        }
    }
    if !aux.is_finite() {
        return Err(Error::Numeric("load-balancing loss is not finite".into()));
    }
    if !sparsity.is_finite() {
        return Err(Error::Numeric("sparsity loss is not finite".into()));
    }
    Ok(weighted.iter().map(|(w, l)| w * l).sum::<f64>() + alpha_aux * aux + beta * sparsity)
}

/// Batched contrastive loss, one row per anchor.
///
/// Anchor `b` is scored against every row of `positives` (its own row is the
/// positive, the rest act as in-batch negatives) plus row `b` of
/// `hard_negatives`.
pub fn contrastive_rows(g: &mut Graph, anchors: Var, positives: Var, hard_negatives: Var, tau: f64) -> Var {
    let in_batch = g.matmul_t(anchors, positives);
    let hard = g.row_dot(anchors, hard_negatives);
    let logits = g.concat_cols(&[in_batch, hard]);
    let logits = g.scale(logits, 1.0 / tau);
    let targets = (0..g.shape(anchors).0).collect();
    g.cross_entropy_rows(logits, targets)
}

/// Batched reliability weights `σ(sharpness · (q·p − q·n − Δ̄))`, `B×1`.
pub fn reliability_rows(g: &mut Graph, q: Var, p: Var, n: Var, sharpness: f64, delta_bar: f64) -> Var {
    let qp = g.row_dot(q, p);
    let qn = g.row_dot(q, n);
    let margin = g.sub(qp, qn);
    let scaled = g.scale(margin, sharpness);
    let shifted = g.add_scalar(scaled, -sharpness * delta_bar);
    g.sigmoid(shifted)
}

/// `(1/B) Σ_b w_b ℓ_b` for `B×1` columns.
pub fn weighted_mean(g: &mut Graph, losses: Var, weights: Var) -> Var {
    let w = g.mul(losses, weights);
    g.mean(w)
}
