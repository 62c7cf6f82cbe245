//! Modality-driven mixture-of-experts feed-forward layer.
//!
//! Routing is token-level top-k over a softmax gate. On top of it sits the
//! dual-alignment matrix `W*` (experts × alignment objectives): its row
//! softmax gives each expert's preference over objectives, and combining
//! those preferences with the routing weights of each objective's query-side
//! samples yields one weight per objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoEConfig {
    /// Number of experts (`Z`).
    pub n_experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    /// Number of alignment objectives (`M`).
    pub n_objectives: usize,
}

impl Default for MoEConfig {
    fn default() -> Self {
        Self {
            n_experts: 4,
            top_k: 2,
            expert_hidden: 128,
            n_objectives: 5,
        }
    }
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 || self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::validation(format!(
                "top_k must lie in 1..={} (got {})",
                self.n_experts, self.top_k
            )));
        }
        if self.n_objectives == 0 || self.expert_hidden == 0 {
            return Err(Error::validation("n_objectives and expert_hidden must be positive"));
        }
        Ok(())
    }
}

/// How objective weights are post-processed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaMode {
    /// Rescaled so the weights average to one.
    #[default]
    Renormalized,
    /// Used as computed, each in (0, 1].
    Raw,
}

/// Gate activations for one MoE layer.
pub struct GateOutput {
    /// Softmax activations `G`, tokens × experts.
    pub probs: Var,
    /// Top-k renormalized weights `G̃`; zero outside the selection.
    pub weights: Var,
    /// Selected experts per token, ascending.
    pub selected: Vec<Vec<usize>>,
}

pub struct ExpertWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Gate over hidden states `h` (tokens × D) with gating matrix `w_gate` (D × Z).
pub fn gate(g: &mut Graph, h: Var, w_gate: Var, top_k: usize) -> Result<GateOutput> {
    if g.value(h).iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite hidden state entering the gate".into()));
    }
    let logits = g.matmul(h, w_gate);
    let probs = g.softmax_rows(logits);
    Ok(route(g, probs, top_k))
}

/// Top-k selection over precomputed activations.
pub fn route(g: &mut Graph, probs: Var, top_k: usize) -> GateOutput {
    let weights = g.top_k_renorm(probs, top_k);
    let selected = g
        .value(weights)
        .rows()
        .into_iter()
        .map(|r| r.iter().enumerate().filter(|(_, &w)| w > 0.0).map(|(j, _)| j).collect())
        .collect();
    GateOutput {
        probs,
        weights,
        selected,
    }
}

pub fn expert_ffn(g: &mut Graph, x: Var, e: &ExpertWeights) -> Var {
    let h = g.matmul(x, e.w1);
    let h = g.add_row(h, e.b1);
    let h = g.gelu(h);
    let o = g.matmul(h, e.w2);
    g.add_row(o, e.b2)
}

/// `ĥ = Σ_z G̃_z · f_z(h)`, each expert evaluated only on the tokens routed to it.
pub fn moe_combine<F>(g: &mut Graph, h: Var, gate: &GateOutput, mut expert: F) -> Result<Var>
where
    F: FnMut(&mut Graph, Var, usize) -> Var,
{
    let (n, d) = g.shape(h);
    let z_count = g.shape(gate.weights).1;
    let mut out: Option<Var> = None;
    for z in 0..z_count {
        let idx: Vec<usize> = (0..n).filter(|&i| gate.selected[i].contains(&z)).collect();
        if idx.is_empty() {
            continue;
        }
        let xz = g.gather_rows(h, idx.clone());
        let fz = expert(g, xz, z);
        if g.shape(fz) != (idx.len(), d) {
            return Err(Error::validation(format!(
                "expert {z} returned shape {:?}, expected {:?}",
                g.shape(fz),
                (idx.len(), d)
            )));
        }
        let col = g.select_col(gate.weights, z);
        let wz = g.gather_rows(col, idx.clone());
        let scaled = g.mul_col(fz, wz);
        let placed = g.scatter_rows(scaled, idx, n);
        out = Some(match out {
            Some(acc) => g.add(acc, placed),
            None => placed,
        });
    }
    out.ok_or_else(|| Error::validation("no tokens routed to any expert"))
}

pub fn moe_forward(g: &mut Graph, h: Var, experts: &[ExpertWeights], gate: &GateOutput) -> Result<Var> {
    let d = g.shape(h).1;
    for (z, e) in experts.iter().enumerate() {
        if g.shape(e.w1).0 != d || g.shape(e.w2).1 != d {
            return Err(Error::validation(format!("expert {z} dimensions do not match D={d}")));
        }
    }
    moe_combine(g, h, gate, |g, x, z| expert_ffn(g, x, &experts[z]))
}

/// Row softmax of the dual-alignment matrix: `P[z, m]`.
pub fn expert_preferences(g: &mut Graph, w_star: Var) -> Var {
    g.softmax_rows(w_star)
}

/// Objective weights `ω` (1 × M).
///
/// `sample_routing` holds one row per encoded sample: the mean routing weight
/// of each expert over that sample's tokens. `groups[m]` lists the rows that
/// participate in objective `m`. Objectives without samples get weight 1 and
/// are excluded from renormalization.
pub fn objective_weights(
    g: &mut Graph,
    sample_routing: Var,
    prefs: Var,
    groups: &[Vec<usize>],
    mode: OmegaMode,
) -> Result<Var> {
    let m_count = g.shape(prefs).1;
    if groups.len() != m_count {
        return Err(Error::Config(format!(
            "{} sample groups for {m_count} objectives",
            groups.len()
        )));
    }
    if groups.iter().all(Vec::is_empty) {
        return Err(Error::Config("no objective has registered samples".into()));
    }
    let mut raw = Vec::new();
    for (m, group) in groups.iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        let rows = g.gather_rows(sample_routing, group.clone());
        let mean = g.mean_rows(rows);
        let support = g.matmul(mean, prefs);
        raw.push((m, g.element(support, 0, m)));
    }
    let present: Vec<Var> = raw.iter().map(|(_, v)| *v).collect();
    let joined = g.concat_cols(&present);
    let scaled = match mode {
        OmegaMode::Renormalized => g.normalize_to_mean(joined, 1.0),
        OmegaMode::Raw => joined,
    };
    if present.len() == m_count {
        return Ok(scaled);
    }
    let mut parts = Vec::with_capacity(m_count);
    let mut next = 0;
    for m in 0..m_count {
        if raw.get(next).map(|(idx, _)| *idx) == Some(m) {
            parts.push(g.element(scaled, 0, next));
            next += 1;
        } else {
            parts.push(g.constant_scalar(1.0));
        }
    }
    Ok(g.concat_cols(&parts))
}

/// Switch-style load-balancing loss averaged over layers:
/// `Z · Σ_z f_z · P̄_z`, with `f_z` the share of routing slots taken by
/// expert `z` and `P̄_z` its mean gate probability.
pub fn load_balance_loss(g: &mut Graph, gates: &[&GateOutput]) -> Result<Var> {
    if gates.is_empty() {
        return Err(Error::validation("load balancing needs at least one gate"));
    }
    let mut terms = Vec::with_capacity(gates.len());
    for gate in gates {
        let (n, z) = g.shape(gate.probs);
        if n == 0 {
            return Err(Error::validation("load balancing over an empty batch"));
        }
        let slots: usize = gate.selected.iter().map(Vec::len).sum();
        let mut counts = vec![0.0; z];
        for sel in &gate.selected {
            for &e in sel {
                counts[e] += 1.0;
            }
        }
        let fractions = ndarray::Array2::from_shape_vec(
            (1, z),
            counts.iter().map(|c| c / slots as f64).collect(),
        )
        .expect("row");
        let f = g.leaf(fractions);
        let mean_probs = g.mean_rows(gate.probs);
        let prod = g.mul(f, mean_probs);
        let s = g.sum(prod);
        terms.push(g.scale(s, z as f64));
    }
    let all = g.concat_cols(&terms);
    Ok(g.mean(all))
}

/// Mean row entropy of the expert preferences.
pub fn sparsity_loss(g: &mut Graph, prefs: Var) -> Var {
    let h = g.entropy_rows(prefs);
    g.mean(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mat;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn leaf(g: &mut Graph, m: Mat) -> Var {
        g.leaf(m)
    }

    #[test]
    fn single_expert_gets_all_weight() {
        let mut g = Graph::default();
        let h = leaf(&mut g, array![[0.3, -1.0], [2.0, 0.5]]);
        let w = leaf(&mut g, array![[0.7], [-0.2]]);
        let out = gate(&mut g, h, w, 1).unwrap();
        assert_eq!(g.value(out.weights), &array![[1.0], [1.0]]);
    }

    #[test]
    fn zero_gate_is_uniform_before_selection() {
        let mut g = Graph::default();
        let h = leaf(&mut g, array![[0.3, -1.0, 4.0]]);
        let w = leaf(&mut g, Mat::zeros((3, 4)));
        let out = gate(&mut g, h, w, 2).unwrap();
        assert!(g.value(out.probs).iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn top2_renormalization_arithmetic() {
        let mut g = Graph::default();
        let p = leaf(&mut g, array![[0.5, 0.3, 0.15, 0.05]]);
        let out = route(&mut g, p, 2);
        let w = g.value(out.weights);
        assert!((w[[0, 0]] - 0.625).abs() < 1e-12);
        assert!((w[[0, 1]] - 0.375).abs() < 1e-12);
        assert_eq!(out.selected, vec![vec![0, 1]]);
    }

    #[test]
    fn non_finite_hidden_state_is_a_numeric_error() {
        let mut g = Graph::default();
        let h = leaf(&mut g, array![[f64::NAN, 1.0]]);
        let w = leaf(&mut g, Mat::zeros((2, 2)));
        assert!(matches!(gate(&mut g, h, w, 1), Err(Error::Numeric(_))));
    }

    #[test]
    fn identity_and_negation_experts_mix_linearly() {
        let mut g = Graph::default();
        let hv = array![[1.0, -2.0, 0.5], [3.0, 0.0, -1.0]];
        let h = leaf(&mut g, hv.clone());
        let p = leaf(&mut g, array![[0.75, 0.25], [0.75, 0.25]]);
        let gate = route(&mut g, p, 2);
        let out = moe_combine(&mut g, h, &gate, |g, x, z| if z == 0 { x } else { g.scale(x, -1.0) })
            .unwrap();
        let expected = hv * 0.5;
        assert!(g.value(out).iter().zip(expected.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn single_expert_forward_equals_the_expert() {
        let mut g = Graph::default();
        let h = leaf(&mut g, array![[0.2, -0.4], [1.0, 0.1]]);
        let e = ExpertWeights {
            w1: leaf(&mut g, array![[0.5, -0.3, 0.2], [0.1, 0.9, -0.7]]),
            b1: leaf(&mut g, array![[0.0, 0.1, -0.1]]),
            w2: leaf(&mut g, array![[0.3, 0.2], [-0.5, 0.4], [0.8, -0.1]]),
            b2: leaf(&mut g, array![[0.05, -0.05]]),
        };
        let wg = leaf(&mut g, array![[0.3], [0.2]]);
        let gt = gate(&mut g, h, wg, 1).unwrap();
        let out = moe_forward(&mut g, h, std::slice::from_ref(&e), &gt).unwrap();
        let direct = expert_ffn(&mut g, h, &e);
        assert_eq!(g.value(out), g.value(direct));
    }

    #[test]
    fn identical_experts_are_invariant_to_mixing() {
        let mut g = Graph::default();
        let h = leaf(&mut g, array![[0.2, -0.4], [1.0, 0.1], [-0.3, 0.3]]);
        let p = leaf(&mut g, array![[0.1, 0.9], [0.6, 0.4], [0.5, 0.5]]);
        let gt = route(&mut g, p, 2);
        let out = moe_combine(&mut g, h, &gt, |g, x, _| g.gelu(x)).unwrap();
        let direct = g.gelu(h);
        let diff = (g.value(out) - g.value(direct)).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d < 1e-12));
    }

    #[test]
    fn mismatched_expert_output_is_rejected() {
        let mut g = Graph::default();
        let h = leaf(&mut g, array![[0.2, -0.4]]);
        let p = leaf(&mut g, array![[1.0]]);
        let gt = route(&mut g, p, 1);
        let r = moe_combine(&mut g, h, &gt, |g, x, _| g.select_col(x, 0));
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn preference_softmax_examples() {
        let mut g = Graph::default();
        let w0 = leaf(&mut g, Mat::zeros((4, 5)));
        let p0 = expert_preferences(&mut g, w0);
        assert!(g.value(p0).iter().all(|&p| (p - 0.2).abs() < 1e-15));

        let w = leaf(&mut g, array![[3f64.ln(), 0.0]]);
        let p = expert_preferences(&mut g, w);
        assert!((g.value(p)[[0, 0]] - 0.75).abs() < 1e-12);
        assert!((g.value(p)[[0, 1]] - 0.25).abs() < 1e-12);

        let shifted = leaf(&mut g, array![[3f64.ln() + 7.5, 7.5]]);
        let ps = expert_preferences(&mut g, shifted);
        assert!((g.value(ps) - g.value(p)).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn objective_weight_examples() {
        // uniform preferences: raw 1/M, renormalized 1
        let mut g = Graph::default();
        let routing = leaf(&mut g, array![[0.7, 0.3, 0.0], [0.1, 0.1, 0.8]]);
        let prefs = leaf(&mut g, Mat::from_elem((3, 4), 0.25));
        let groups = vec![vec![0], vec![1], vec![0, 1], vec![1]];
        let raw = objective_weights(&mut g, routing, prefs, &groups, OmegaMode::Raw).unwrap();
        assert!(g.value(raw).iter().all(|&w| (w - 0.25).abs() < 1e-12));
        let ren = objective_weights(&mut g, routing, prefs, &groups, OmegaMode::Renormalized).unwrap();
        assert!(g.value(ren).iter().all(|&w| (w - 1.0).abs() < 1e-12));

        // single expert collapses to its preference row
        let one = leaf(&mut g, array![[1.0]]);
        let prow = leaf(&mut g, array![[0.1, 0.6, 0.3]]);
        let groups = vec![vec![0]; 3];
        let raw = objective_weights(&mut g, one, prow, &groups, OmegaMode::Raw).unwrap();
        assert_eq!(g.value(raw), &array![[0.1, 0.6, 0.3]]);
        let ren = objective_weights(&mut g, one, prow, &groups, OmegaMode::Renormalized).unwrap();
        assert!((g.value(ren).mean().unwrap() - 1.0).abs() < 1e-12);

        // hand-evaluated two-expert case
        let routing = leaf(&mut g, array![[0.5, 0.5]]);
        let prefs = leaf(&mut g, array![[0.8, 0.2], [0.4, 0.6]]);
        let groups = vec![vec![0], vec![0]];
        let raw = objective_weights(&mut g, routing, prefs, &groups, OmegaMode::Raw).unwrap();
        let ren = objective_weights(&mut g, routing, prefs, &groups, OmegaMode::Renormalized).unwrap();
        let (r, n) = (g.value(raw), g.value(ren));
        assert!((r[[0, 0]] - 0.6).abs() < 1e-12 && (r[[0, 1]] - 0.4).abs() < 1e-12);
        assert!((n[[0, 0]] - 1.2).abs() < 1e-12 && (n[[0, 1]] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn empty_objective_group_gets_unit_weight() {
        let mut g = Graph::default();
        let routing = leaf(&mut g, array![[0.5, 0.5]]);
        let prefs = leaf(&mut g, array![[0.8, 0.1, 0.1], [0.4, 0.5, 0.1]]);
        let groups = vec![vec![0], vec![], vec![0]];
        let w = objective_weights(&mut g, routing, prefs, &groups, OmegaMode::Renormalized).unwrap();
        let v = g.value(w);
        assert_eq!(v[[0, 1]], 1.0);
        assert!((v.sum() - 3.0).abs() < 1e-12);
        let none = vec![vec![], vec![], vec![]];
        assert!(matches!(
            objective_weights(&mut g, routing, prefs, &none, OmegaMode::Renormalized),
            Err(Error::Config(_))
        ));
    }

    fn gate_from(g: &mut Graph, probs: Mat, k: usize) -> GateOutput {
        let p = g.leaf(probs);
        route(g, p, k)
    }

    #[test]
    fn load_balance_examples() {
        let mut g = Graph::default();
        // perfectly uniform: every expert equally likely and equally chosen
        let uniform = gate_from(&mut g, Mat::from_elem((4, 4), 0.25), 1);
        // tie-breaking sends all four tokens to expert 0, so use a rotated assignment
        let rotated = gate_from(
            &mut g,
            array![
                [0.25 + 1e-9, 0.25, 0.25, 0.25 - 1e-9],
                [0.25, 0.25 + 1e-9, 0.25 - 1e-9, 0.25],
                [0.25 - 1e-9, 0.25, 0.25 + 1e-9, 0.25],
                [0.25, 0.25 - 1e-9, 0.25, 0.25 + 1e-9]
            ],
            1,
        );
        let l = load_balance_loss(&mut g, &[&rotated]).unwrap();
        assert!((g.scalar(l) - 1.0).abs() < 1e-9);
        let l = load_balance_loss(&mut g, &[&uniform]).unwrap();
        // all slots on expert 0 but probabilities uniform: 4 · (1 · 0.25)
        assert!((g.scalar(l) - 1.0).abs() < 1e-12);

        let collapsed = gate_from(&mut g, Array2::from_shape_fn((6, 4), |(_, j)| if j == 2 { 1.0 } else { 0.0 }), 1);
        let l = load_balance_loss(&mut g, &[&collapsed]).unwrap();
        assert!((g.scalar(l) - 4.0).abs() < 1e-12);

        let single = gate_from(&mut g, Mat::ones((5, 1)), 1);
        let l = load_balance_loss(&mut g, &[&single]).unwrap();
        assert!((g.scalar(l) - 1.0).abs() < 1e-12);
        assert!(load_balance_loss(&mut g, &[]).is_err());
    }

    #[test]
    fn sparsity_examples() {
        let mut g = Graph::default();
        let onehot = leaf(&mut g, array![[1.0, 0.0], [0.0, 1.0]]);
        let s = sparsity_loss(&mut g, onehot);
        assert_eq!(g.scalar(s), 0.0);
        let uni = leaf(&mut g, array![[0.5, 0.5], [0.5, 0.5]]);
        let s = sparsity_loss(&mut g, uni);
        assert!((g.scalar(s) - 2f64.ln()).abs() < 1e-12);
        let mixed = leaf(&mut g, array![[0.75, 0.25], [0.5, 0.5]]);
        let s = sparsity_loss(&mut g, mixed);
        let h1 = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((h1 - 0.5623).abs() < 1e-4);
        assert!((g.scalar(s) - (h1 + 2f64.ln()) / 2.0).abs() < 1e-12);
        assert!((g.scalar(s) - 0.6277).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn routing_rows_are_stochastic(
            logits in proptest::collection::vec(-5.0f64..5.0, 6 * 4),
            k in 1usize..=4,
        ) {
            let mut g = Graph::default();
            let l = g.leaf(Mat::from_shape_vec((6, 4), logits).unwrap());
            let p = g.softmax_rows(l);
            let out = route(&mut g, p, k);
            for row in g.value(out.weights).rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&w| w >= 0.0));
                prop_assert!(row.iter().filter(|&&w| w > 0.0).count() <= k);
            }
        }

        #[test]
        fn combine_is_linear_in_routing_weights(
            hv in proptest::collection::vec(-2.0f64..2.0, 3 * 2),
            a in 0.05f64..0.95,
            b in 0.05f64..0.95,
        ) {
            // superposition: mixing with weights a·u + (1−a)·v equals the same mix of outputs
            let h = Mat::from_shape_vec((3, 2), hv).unwrap();
            let eval = |w0: f64| {
                let mut g = Graph::default();
                let hv = g.leaf(h.clone());
                let p = g.leaf(Mat::from_shape_fn((3, 2), |(_, j)| if j == 0 { w0 } else { 1.0 - w0 }));
                let gt = route(&mut g, p, 2);
                let out = moe_combine(&mut g, hv, &gt, |g, x, z| {
                    if z == 0 { g.gelu(x) } else { g.scale(x, 0.3) }
                }).unwrap();
                g.value(out).clone()
            };
            let mix = a * b + (1.0 - a) * (1.0 - b);
            let lhs = eval(mix);
            let rhs = eval(b) * a + eval(1.0 - b) * (1.0 - a);
            prop_assert!((lhs - rhs).iter().all(|d| d.abs() < 1e-9));
        }

        #[test]
        fn sparsity_is_bounded(w in proptest::collection::vec(-4.0f64..4.0, 4 * 5)) {
            let mut g = Graph::default();
            let ws = g.leaf(Mat::from_shape_vec((4, 5), w).unwrap());
            let p = expert_preferences(&mut g, ws);
            for row in g.value(p).rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            }
            let s = sparsity_loss(&mut g, p);
            prop_assert!(g.scalar(s) >= 0.0 && g.scalar(s) <= 5f64.ln() + 1e-12);
        }
    }
}
