//! Single-stage multimodal joint training, plus the fixed-ratio mixed
//! baseline.
//!
//! A JOINT step encodes every triplet nine ways (three query modalities,
//! multimodal positive and negative, image-only and text-only positive and
//! negative) in one packed forward pass and optimizes all five alignment
//! objectives weighted by `ω`, plus the load-balancing and sparsity
//! regularizers. A MIXED step draws one query modality from the configured
//! ratio and optimizes only that inter-product objective.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, hex, CheckpointMeta};
use crate::data::{self, ModalityComposition, Triplet};
use crate::encoder::{EncodeInput, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::moe::{self, MoEConfig, OmegaMode};
use crate::objectives::{self, AlignmentObjective, FilterSchedule, LossBreakdown, N_OBJECTIVES};
use crate::par::Exec;
use crate::params;
use crate::tensor::{Graph, Mat, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Joint,
    Mixed,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(TrainMode::Joint),
            "mixed" => Ok(TrainMode::Mixed),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Step counts per block for image-only, text-only and multimodal queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixedRatio {
    pub image: u32,
    pub text: u32,
    pub multimodal: u32,
}

impl Default for MixedRatio {
    fn default() -> Self {
        Self {
            image: 12,
            text: 3,
            multimodal: 2,
        }
    }
}

impl std::str::FromStr for MixedRatio {
    type Err = Error;
    /// Parses `image:text:multimodal`, e.g. `12:3:2`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<u32> = s
            .split(':')
            .map(|p| p.trim().parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("mixed_ratio `{s}` is not image:text:multimodal")))?;
        match parts.as_slice() {
            &[image, text, multimodal] => Ok(Self {
                image,
                text,
                multimodal,
            }),
            _ => Err(Error::Config(format!("mixed_ratio `{s}` needs three parts"))),
        }
    }
}

impl std::fmt::Display for MixedRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.image, self.text, self.multimodal)
    }
}

impl MixedRatio {
    fn block(&self) -> Vec<ModalityComposition> {
        let mut b = Vec::new();
        b.extend(std::iter::repeat_n(ModalityComposition::ImageOnly, self.image as usize));
        b.extend(std::iter::repeat_n(ModalityComposition::TextOnly, self.text as usize));
        b.extend(std::iter::repeat_n(ModalityComposition::Multimodal, self.multimodal as usize));
        b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub output_dir: Option<PathBuf>,
    pub encoder: EncoderConfig,
    pub filter: FilterSchedule,
    pub filter_enabled: bool,
    pub tau: f64,
    pub tau_tilde: f64,
    pub alpha_aux: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub mode: TrainMode,
    pub mixed_ratio: MixedRatio,
    pub omega_mode: OmegaMode,
    /// Let the objective weights pass gradient back into the gate and `W*`.
    pub omega_grad: bool,
    /// Let the reliability weights pass gradient back into the encoder.
    pub reliability_grad: bool,
    /// Include the intra-product objectives (JOINT only).
    pub use_intra: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("train.jsonl"),
            output_dir: None,
            encoder: EncoderConfig::default(),
            filter: FilterSchedule::default(),
            filter_enabled: true,
            tau: 0.07,
            tau_tilde: 0.07,
            alpha_aux: 0.01,
            beta: 0.01,
            batch_size: 32,
            steps: 1000,
            learning_rate: 1e-5,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
            seed: 0,
            mode: TrainMode::Joint,
            mixed_ratio: MixedRatio::default(),
            omega_mode: OmegaMode::Renormalized,
            omega_grad: true,
            reliability_grad: false,
            use_intra: true,
        }
    }
}

/// Flat key/value form of [`TrainConfig`] used by config files.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlatConfig {
    dataset: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    mode: Option<String>,
    seed: Option<u64>,
    steps: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    weight_decay: Option<f64>,
    grad_clip: Option<f64>,
    tau: Option<f64>,
    tau_tilde: Option<f64>,
    alpha_aux: Option<f64>,
    beta: Option<f64>,
    filter_enabled: Option<bool>,
    delta_bar_start: Option<f64>,
    delta_bar_end: Option<f64>,
    filter_sharpness: Option<f64>,
    delta_threshold: Option<f64>,
    mixed_ratio: Option<String>,
    omega_mode: Option<OmegaMode>,
    omega_grad: Option<bool>,
    reliability_grad: Option<bool>,
    use_intra: Option<bool>,
    hidden_dim: Option<usize>,
    visual_tokens: Option<usize>,
    text_len: Option<usize>,
    n_layers: Option<usize>,
    n_heads: Option<usize>,
    vocab_size: Option<usize>,
    feature_dim: Option<usize>,
    normalize_output: Option<bool>,
    n_experts: Option<usize>,
    top_k: Option<usize>,
    expert_hidden: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.filter.validate()?;
        if self.encoder.moe.n_objectives != N_OBJECTIVES {
            return Err(Error::Config(format!(
                "training uses {N_OBJECTIVES} alignment objectives, encoder has {}",
                self.encoder.moe.n_objectives
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau_tilde > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        let r = self.mixed_ratio;
        if r.image == 0 || r.text == 0 || r.multimodal == 0 {
            return Err(Error::Config("mixed_ratio parts must be positive integers".into()));
        }
        Ok(())
    }

    /// Parses a flat `key = value` (TOML) config; unset keys keep their defaults.
    pub fn from_flat(text: &str) -> Result<Self> {
        let f: FlatConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut c = TrainConfig::default();
        macro_rules! set {
            ($($src:ident => $($dst:ident).+),* $(,)?) => {
                $( if let Some(v) = f.$src { c.$($dst).+ = v; } )*
            };
        }
        set!(
            dataset => dataset, seed => seed, steps => steps, batch_size => batch_size,
            learning_rate => learning_rate, weight_decay => weight_decay, tau => tau,
            tau_tilde => tau_tilde, alpha_aux => alpha_aux, beta => beta,
            filter_enabled => filter_enabled, delta_bar_start => filter.delta_bar_start,
            delta_bar_end => filter.delta_bar_end, filter_sharpness => filter.filter_sharpness,
            delta_threshold => filter.delta_threshold, omega_mode => omega_mode,
            omega_grad => omega_grad, reliability_grad => reliability_grad, use_intra => use_intra,
            hidden_dim => encoder.hidden_dim, visual_tokens => encoder.visual_tokens,
            text_len => encoder.text_len, n_layers => encoder.n_layers, n_heads => encoder.n_heads,
            vocab_size => encoder.vocab_size, feature_dim => encoder.feature_dim,
            normalize_output => encoder.normalize_output, n_experts => encoder.moe.n_experts,
            top_k => encoder.moe.top_k, expert_hidden => encoder.moe.expert_hidden,
        );
        if f.output_dir.is_some() {
            c.output_dir = f.output_dir;
        }
        if let Some(clip) = f.grad_clip {
            c.grad_clip = (clip > 0.0).then_some(clip);
        }
        if let Some(m) = f.mode {
            c.mode = m.parse()?;
        }
        if let Some(r) = f.mixed_ratio {
            c.mixed_ratio = r.parse()?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_flat(&self) -> String {
        let e = &self.encoder;
        let f = FlatConfig {
            dataset: Some(self.dataset.clone()),
            output_dir: self.output_dir.clone(),
            mode: Some(match self.mode {
                TrainMode::Joint => "joint".into(),
                TrainMode::Mixed => "mixed".into(),
            }),
            seed: Some(self.seed),
            steps: Some(self.steps),
            batch_size: Some(self.batch_size),
            learning_rate: Some(self.learning_rate),
            weight_decay: Some(self.weight_decay),
            grad_clip: Some(self.grad_clip.unwrap_or(0.0)),
            tau: Some(self.tau),
            tau_tilde: Some(self.tau_tilde),
            alpha_aux: Some(self.alpha_aux),
            beta: Some(self.beta),
            filter_enabled: Some(self.filter_enabled),
            delta_bar_start: Some(self.filter.delta_bar_start),
            delta_bar_end: Some(self.filter.delta_bar_end),
            filter_sharpness: Some(self.filter.filter_sharpness),
            delta_threshold: Some(self.filter.delta_threshold),
            mixed_ratio: Some(self.mixed_ratio.to_string()),
            omega_mode: Some(self.omega_mode),
            omega_grad: Some(self.omega_grad),
            reliability_grad: Some(self.reliability_grad),
            use_intra: Some(self.use_intra),
            hidden_dim: Some(e.hidden_dim),
            visual_tokens: Some(e.visual_tokens),
            text_len: Some(e.text_len),
            n_layers: Some(e.n_layers),
            n_heads: Some(e.n_heads),
            vocab_size: Some(e.vocab_size),
            feature_dim: Some(e.feature_dim),
            normalize_output: Some(e.normalize_output),
            n_experts: Some(e.moe.n_experts),
            top_k: Some(e.moe.top_k),
            expert_hidden: Some(e.moe.expert_hidden),
        };
        toml::to_string(&f).expect("flat config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_flat(&text)
    }

    /// Digest of everything that determines a run: the config without its
    /// paths, plus the bytes of the training file.
    pub fn config_hash(&self) -> Result<String> {
        let bytes = std::fs::read(&self.dataset).map_err(|e| Error::io(&self.dataset, e))?;
        Ok(self.config_hash_with_data(&bytes))
    }

    pub fn config_hash_with_data(&self, dataset_bytes: &[u8]) -> String {
        let mut c = self.clone();
        c.dataset = PathBuf::new();
        c.output_dir = None;
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&c).expect("config serializes"));
        h.update(Sha256::digest(dataset_bytes));
        hex(&h.finalize()[..8])
    }
}

/// Linear decay of the margin offset.
pub fn schedule_delta_bar(step: usize, total_steps: usize, schedule: &FilterSchedule) -> Result<f64> {
    schedule.delta_bar(step, total_steps)
}

/// Cosine-decayed learning rate at `step` of `total_steps`, reaching zero at the end.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base;
    }
    let t = step as f64 / total_steps as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleState {
    pub step: usize,
    pub delta_bar: f64,
    pub learning_rate: f64,
}

impl ScheduleState {
    pub fn at(config: &TrainConfig, step: usize) -> Result<Self> {
        Ok(Self {
            step,
            delta_bar: schedule_delta_bar(step, config.steps, &config.filter)?,
            learning_rate: cosine_lr(config.learning_rate, step, config.steps),
        })
    }
}

/// What one optimization step trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Joint,
    Mixed(ModalityComposition),
}

/// The loss graph of one step.
pub struct StepGraph {
    pub graph: Graph,
    /// Parameter leaves in storage order.
    pub params: Vec<Var>,
    pub total: Var,
    pub breakdown: LossBreakdown,
}

impl StepGraph {
    /// Gradients for every parameter, zero where none flowed.
    pub fn param_grads(&self) -> Vec<Mat> {
        let grads = self.graph.backward(self.total);
        self.params
            .iter()
            .map(|&p| grads.get_or_zeros(p, self.graph.shape(p)))
            .collect()
    }
}

fn block_rows(g: &mut Graph, reps: Var, block: usize, b: usize) -> Var {
    g.gather_rows(reps, (block * b..(block + 1) * b).collect())
}

/// Builds the full training objective for `batch` at parameter values
/// `values` (in the encoder's storage order).
pub fn step_objective(
    encoder: &Encoder,
    values: &[Mat],
    config: &TrainConfig,
    batch: &[&Triplet],
    kind: StepKind,
    delta_bar: f64,
    exec: Exec,
) -> Result<StepGraph> {
    use ModalityComposition::{ImageOnly as I, Multimodal as MM, TextOnly as T};
    let b = batch.len();
    if b == 0 {
        return Err(Error::validation("empty batch"));
    }
    let mut g = Graph::new(exec);
    let w = params::load_into(&mut g, values);
    let query_kinds: Vec<ModalityComposition> = match kind {
        StepKind::Joint => vec![T, I, MM],
        StepKind::Mixed(m) => vec![m],
    };
    let intra = kind == StepKind::Joint && config.use_intra;
    let mut inputs: Vec<EncodeInput> = Vec::with_capacity(9 * b);
    for &m in &query_kinds {
        inputs.extend(batch.iter().map(|t| EncodeInput::new(&t.query, m)));
    }
    inputs.extend(batch.iter().map(|t| EncodeInput::new(&t.positive, MM)));
    inputs.extend(batch.iter().map(|t| EncodeInput::new(&t.negative, MM)));
    if intra {
        inputs.extend(batch.iter().map(|t| EncodeInput::new(&t.positive, I)));
        inputs.extend(batch.iter().map(|t| EncodeInput::new(&t.negative, I)));
        inputs.extend(batch.iter().map(|t| EncodeInput::new(&t.positive, T)));
        inputs.extend(batch.iter().map(|t| EncodeInput::new(&t.negative, T)));
    }
    let fwd = encoder.forward(&mut g, &w, &inputs)?;
    let nq = query_kinds.len();
    let reps = fwd.reps;
    let p_mm = block_rows(&mut g, reps, nq, b);
    let n_mm = block_rows(&mut g, reps, nq + 1, b);
    let queries: Vec<Var> = (0..nq).map(|i| block_rows(&mut g, reps, i, b)).collect();

    // reliability from the multimodal query when available, else the trained one
    let q_for_filter = queries[query_kinds.iter().position(|&m| m == MM).unwrap_or(0)];
    let (qf, pf, nf) = if config.reliability_grad {
        (q_for_filter, p_mm, n_mm)
    } else {
        (g.detach(q_for_filter), g.detach(p_mm), g.detach(n_mm))
    };
    let phi = objectives::reliability_rows(&mut g, qf, pf, nf, config.filter.filter_sharpness, delta_bar);
    let multipliers = if config.filter_enabled {
        g.filter_multiplier(phi, config.filter.delta_threshold)
    } else {
        g.leaf(Mat::ones((b, 1)))
    };

    let mut objective_vars: [Option<Var>; N_OBJECTIVES] = [None; N_OBJECTIVES];
    for (i, &m) in query_kinds.iter().enumerate() {
        let rows = objectives::contrastive_rows(&mut g, queries[i], p_mm, n_mm, config.tau);
        let obj = match m {
            T => AlignmentObjective::InterT,
            I => AlignmentObjective::InterI,
            MM => AlignmentObjective::InterMm,
        };
        objective_vars[obj.index()] = Some(objectives::weighted_mean(&mut g, rows, multipliers));
    }
    if intra {
        let p_i = block_rows(&mut g, reps, nq + 2, b);
        let n_i = block_rows(&mut g, reps, nq + 3, b);
        let p_t = block_rows(&mut g, reps, nq + 4, b);
        let n_t = block_rows(&mut g, reps, nq + 5, b);
        let pos = objectives::contrastive_rows(&mut g, p_i, p_t, n_t, config.tau_tilde);
        let neg = objectives::contrastive_rows(&mut g, n_i, n_t, p_t, config.tau_tilde);
        objective_vars[AlignmentObjective::IntraPos.index()] = Some(g.mean(pos));
        objective_vars[AlignmentObjective::IntraNeg.index()] = Some(g.mean(neg));
    }

    let w_star = w[encoder.dual_alignment_index()];
    let prefs = moe::expert_preferences(&mut g, w_star);
    let omega = match kind {
        StepKind::Joint => {
            let last = fwd
                .layers
                .last()
                .ok_or_else(|| Error::Config("objective weights need at least one MoE layer".into()))?;
            let routing = g.segment_mean(last.gate.weights, &fwd.segments);
            let omega_prefs = if config.omega_grad { prefs } else { g.detach(prefs) };
            let mut groups: Vec<Vec<usize>> = vec![Vec::new(); N_OBJECTIVES];
            for (i, _) in query_kinds.iter().enumerate() {
                groups[i] = (i * b..(i + 1) * b).collect();
            }
            if intra {
                groups[AlignmentObjective::IntraPos.index()] = ((nq + 2) * b..(nq + 3) * b).collect();
                groups[AlignmentObjective::IntraNeg.index()] = ((nq + 3) * b..(nq + 4) * b).collect();
            }
            let routing = if config.omega_grad { routing } else { g.detach(routing) };
            Some(moe::objective_weights(&mut g, routing, omega_prefs, &groups, config.omega_mode)?)
        }
        StepKind::Mixed(_) => None,
    };

    let gates: Vec<&moe::GateOutput> = fwd.layers.iter().map(|l| &l.gate).collect();
    let aux = if gates.is_empty() {
        g.constant_scalar(1.0)
    } else {
        moe::load_balance_loss(&mut g, &gates)?
    };
    let sparsity = moe::sparsity_loss(&mut g, prefs);

    let mut terms = Vec::new();
    let mut breakdown = LossBreakdown {
        objective_losses: [0.0; N_OBJECTIVES],
        omega: [1.0; N_OBJECTIVES],
        active: [false; N_OBJECTIVES],
        aux: g.scalar(aux),
        sparsity: g.scalar(sparsity),
        alpha_aux: config.alpha_aux,
        beta: config.beta,
        reliability: g.value(phi).iter().copied().collect(),
        total: 0.0,
    };
    for (m, var) in objective_vars.iter().enumerate() {
        let Some(loss) = *var else { continue };
        breakdown.active[m] = true;
        breakdown.objective_losses[m] = g.scalar(loss);
        let term = match omega {
            Some(om) => {
                let wm = g.element(om, 0, m);
                breakdown.omega[m] = g.scalar(wm);
                g.mul(wm, loss)
            }
            None => loss,
        };
        terms.push(term);
    }
    terms.push(g.scale(aux, config.alpha_aux));
    terms.push(g.scale(sparsity, config.beta));
    let all = g.concat_cols(&terms);
    let total = g.sum(all);
    breakdown.total = g.scalar(total);
    Ok(StepGraph {
        graph: g,
        params: w,
        total,
        breakdown,
    })
}

/// Decoupled-weight-decay Adam over `f32` parameters.
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(shapes: &[(usize, usize)], lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: shapes.iter().map(|&s| Mat::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Mat::zeros(s)).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// One update. Row-vector parameters (biases, norms) are not decayed.
    pub fn step(&mut self, params: &mut [ndarray::Array2<f32>], grads: &[Mat]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if p.nrows() > 1 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                    let x = f64::from(*p);
                    *p = (x - self.lr * (update + decay * x)) as f32;
                });
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub kind: StepKind,
    pub losses: std::collections::BTreeMap<String, f64>,
    pub omega: [f64; N_OBJECTIVES],
    pub aux: f64,
    pub sparsity: f64,
    pub total: f64,
    pub delta_bar: f64,
    pub mean_reliability: f64,
    pub lr: f64,
}

impl StepMetrics {
    fn new(step: usize, kind: StepKind, sched: &ScheduleState, b: &LossBreakdown) -> Self {
        let losses = AlignmentObjective::ALL
            .iter()
            .filter(|o| b.active[o.index()])
            .map(|o| (o.name().to_owned(), b.objective_losses[o.index()]))
            .collect();
        Self {
            step,
            kind,
            losses,
            omega: b.omega,
            aux: b.aux,
            sparsity: b.sparsity,
            total: b.total,
            delta_bar: sched.delta_bar,
            mean_reliability: b.mean_reliability(),
            lr: sched.learning_rate,
        }
    }
}

pub struct TrainOutcome {
    pub encoder: Encoder,
    pub metrics: Vec<StepMetrics>,
    pub config_hash: String,
}

/// Deterministic batch order: seeded epoch shuffles, each batch sorted by id.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            cursor: n,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0ba7c4),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    fn next<'a>(&mut self, data: &'a [Triplet], b: usize) -> Vec<&'a Triplet> {
        let b = b.min(data.len());
        if self.cursor + b > self.order.len() {
            self.reshuffle();
        }
        let mut batch: Vec<&Triplet> = self.order[self.cursor..self.cursor + b]
            .iter()
            .map(|&i| &data[i])
            .collect();
        self.cursor += b;
        batch.sort_by(|x, y| x.triplet_id.cmp(&y.triplet_id));
        batch
    }
}

/// Modality sequence for MIXED training: shuffled blocks that each contain
/// the exact ratio.
pub fn mixed_schedule(ratio: MixedRatio, steps: usize, seed: u64) -> Vec<ModalityComposition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00d1_5ced);
    let mut out = Vec::with_capacity(steps);
    while out.len() < steps {
        let mut block = ratio.block();
        block.shuffle(&mut rng);
        out.extend(block);
    }
    out.truncate(steps);
    out
}

fn grad_norm(grads: &[Mat]) -> f64 {
    grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// Trains on already-loaded triplets.
pub fn train_on(config: &TrainConfig, data: &[Triplet], config_hash: String, exec: Exec) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    let mut encoder = Encoder::init(config.encoder.clone(), config.seed)?;
    let shapes: Vec<(usize, usize)> = encoder.params.tensors().iter().map(|t| t.dim()).collect();
    let mut opt = AdamW::new(&shapes, config.learning_rate, config.weight_decay);
    let mut sampler = BatchSampler::new(data.len(), config.seed);
    let mixed = match config.mode {
        TrainMode::Mixed => mixed_schedule(config.mixed_ratio, config.steps, config.seed),
        TrainMode::Joint => Vec::new(),
    };
    let mut metrics = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let sched = ScheduleState::at(config, step)?;
        let batch = sampler.next(data, config.batch_size);
        let kind = match config.mode {
            TrainMode::Joint => StepKind::Joint,
            TrainMode::Mixed => StepKind::Mixed(mixed[step]),
        };
        let values = encoder.params.to_f64();
        let sg = step_objective(&encoder, &values, config, &batch, kind, sched.delta_bar, exec)?;
        if !sg.breakdown.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step}: {:?}",
                sg.breakdown
            )));
        }
        let mut grads = sg.param_grads();
        if let Some(clip) = config.grad_clip {
            let norm = grad_norm(&grads);
            if norm > clip {
                grads.iter_mut().for_each(|g| *g *= clip / norm);
            }
        }
        opt.set_lr(sched.learning_rate);
        opt.step(encoder.params.tensors_mut(), &grads);
        metrics.push(StepMetrics::new(step, kind, &sched, &sg.breakdown));
        if step % 100 == 0 {
            tracing::debug!(step, total = sg.breakdown.total, "train step");
        }
    }
    Ok(TrainOutcome {
        encoder,
        metrics,
        config_hash,
    })
}

/// Paths written by [`train`] when `output_dir` is set.
pub fn output_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("checkpoint.bin"), dir.join("metrics.jsonl"))
}

/// Loads the configured dataset, trains, and writes checkpoint plus metrics
/// log into `output_dir` when set.
pub fn train(config: &TrainConfig, exec: Exec) -> Result<TrainOutcome> {
    config.validate()?;
    let bytes = std::fs::read(&config.dataset).map_err(|e| Error::io(&config.dataset, e))?;
    let hash = config.config_hash_with_data(&bytes);
    let data = data::load_triplets(&config.dataset)?;
    let outcome = train_on(config, &data, hash, exec)?;
    if let Some(dir) = &config.output_dir {
        let (ck, log) = output_paths(dir);
        let mut meta = CheckpointMeta::new(outcome.config_hash.clone(), config.steps);
        if let Some(last) = outcome.metrics.last() {
            meta.metrics.insert("total".into(), last.total);
            for (k, v) in &last.losses {
                meta.metrics.insert(k.clone(), *v);
            }
        }
        checkpoint::save_checkpoint(&ck, &outcome.encoder, &meta)?;
        write_metrics(&log, &outcome.metrics)?;
        let cfg_path = dir.join("config.toml");
        std::fs::write(&cfg_path, config.to_flat()).map_err(|e| Error::io(&cfg_path, e))?;
    }
    Ok(outcome)
}

pub fn write_metrics(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for m in metrics {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Micro configuration convenient for tests and gradient checks.
pub fn micro_encoder_config(vocab_size: usize, visual_tokens: usize, feature_dim: usize, text_len: usize) -> EncoderConfig {
    EncoderConfig {
        hidden_dim: 8,
        visual_tokens,
        text_len,
        n_layers: 1,
        n_heads: 2,
        vocab_size,
        feature_dim,
        normalize_output: true,
        moe: MoEConfig {
            n_experts: 2,
            top_k: 1,
            expert_hidden: 8,
            n_objectives: N_OBJECTIVES,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, DatasetManifest};

    fn tiny_setup(dir: &Path) -> (TrainConfig, Vec<Triplet>) {
        let m = DatasetManifest {
            vocab_size: 48,
            patches: 2,
            feature_dim: 6,
            text_len: 6,
            n_train: 40,
            n_test: 8,
            ..DatasetManifest::default()
        };
        let files = generate_synthetic_dataset(&m, dir).unwrap();
        let mut cfg = TrainConfig {
            dataset: files.train.clone(),
            encoder: micro_encoder_config(48, 2, 6, 6),
            batch_size: 4,
            steps: 6,
            learning_rate: 1e-3,
            seed: 3,
            ..TrainConfig::default()
        };
        cfg.encoder.moe.top_k = 1;
        let data = data::load_triplets(&files.train).unwrap();
        (cfg, data)
    }

    #[test]
    fn delta_bar_endpoints_and_midpoint() {
        let s = FilterSchedule::default();
        assert_eq!(schedule_delta_bar(0, 10, &s).unwrap(), 0.2);
        assert_eq!(schedule_delta_bar(10, 10, &s).unwrap(), -0.2);
        assert!(schedule_delta_bar(5, 10, &s).unwrap().abs() < 1e-15);
        assert!(schedule_delta_bar(11, 10, &s).is_err());
    }

    #[test]
    fn zero_steps_returns_the_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, data) = tiny_setup(dir.path());
        cfg.steps = 0;
        let out = train_on(&cfg, &data, "h".into(), Exec::Sequential).unwrap();
        let init = Encoder::init(cfg.encoder.clone(), cfg.seed).unwrap();
        assert!(out.encoder.params.bitwise_eq(&init.params));
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn training_is_bitwise_reproducible_across_exec_modes() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, data) = tiny_setup(dir.path());
        let a = train_on(&cfg, &data, "h".into(), Exec::Sequential).unwrap();
        let b = train_on(&cfg, &data, "h".into(), Exec::Parallel).unwrap();
        assert!(a.encoder.params.bitwise_eq(&b.encoder.params));
        assert_eq!(a.metrics, b.metrics);
        assert!(!a.encoder.params.bitwise_eq(&Encoder::init(cfg.encoder.clone(), cfg.seed).unwrap().params));
    }

    #[test]
    fn joint_steps_cover_all_objectives_and_recompose() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, data) = tiny_setup(dir.path());
        let enc = Encoder::init(cfg.encoder.clone(), 1).unwrap();
        let batch: Vec<&Triplet> = data.iter().take(4).collect();
        let sg = step_objective(&enc, &enc.params.to_f64(), &cfg, &batch, StepKind::Joint, 0.1, Exec::Sequential).unwrap();
        let b = &sg.breakdown;
        assert!(b.active.iter().all(|&a| a));
        assert!(b.objective_losses.iter().all(|l| l.is_finite() && *l >= 0.0));
        assert!((b.omega.iter().sum::<f64>() - 5.0).abs() < 1e-9);
        assert!((b.recompose().unwrap() - b.total).abs() < 1e-6);
        assert_eq!(b.reliability.len(), 4);

        let sg = step_objective(
            &enc,
            &enc.params.to_f64(),
            &cfg,
            &batch,
            StepKind::Mixed(ModalityComposition::TextOnly),
            0.1,
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(sg.breakdown.active, [true, false, false, false, false]);
        assert!((sg.breakdown.recompose().unwrap() - sg.breakdown.total).abs() < 1e-6);
    }

    #[test]
    fn mixed_schedule_matches_ratio() {
        let s = mixed_schedule(MixedRatio::default(), 1700, 9);
        let count = |m| s.iter().filter(|&&x| x == m).count() as f64 / 1700.0;
        assert!((count(ModalityComposition::ImageOnly) - 12.0 / 17.0).abs() < 0.02);
        assert!((count(ModalityComposition::TextOnly) - 3.0 / 17.0).abs() < 0.02);
        assert!((count(ModalityComposition::Multimodal) - 2.0 / 17.0).abs() < 0.02);
    }

    #[test]
    fn cosine_schedule_and_log_monotonicity() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, data) = tiny_setup(dir.path());
        let out = train_on(&cfg, &data, "h".into(), Exec::Sequential).unwrap();
        for w in out.metrics.windows(2) {
            assert!(w[1].delta_bar <= w[0].delta_bar);
        }
        for m in &out.metrics {
            let expected = 0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * m.step as f64 / cfg.steps as f64).cos());
            assert!((m.lr - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn flat_config_round_trip_and_errors() {
        let cfg = TrainConfig {
            mode: TrainMode::Mixed,
            seed: 42,
            grad_clip: None,
            ..TrainConfig::default()
        };
        let back = TrainConfig::from_flat(&cfg.to_flat()).unwrap();
        assert_eq!(back, cfg);
        assert!(TrainConfig::from_flat("bogus_key = 1").is_err());
        assert!(TrainConfig::from_flat("mixed_ratio = \"12:0:2\"").is_err());
        assert!(TrainConfig::from_flat("mode = \"both\"").is_err());
        let partial = TrainConfig::from_flat("steps = 7\nhidden_dim = 32\n").unwrap();
        assert_eq!((partial.steps, partial.encoder.hidden_dim), (7, 32));
    }

    #[test]
    fn train_writes_checkpoint_and_log() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, _) = tiny_setup(dir.path());
        cfg.output_dir = Some(dir.path().join("run"));
        cfg.steps = 3;
        let out = train(&cfg, Exec::Parallel).unwrap();
        let (ck, log) = output_paths(cfg.output_dir.as_ref().unwrap());
        let (enc, meta) = checkpoint::load_checkpoint(&ck).unwrap();
        assert!(enc.params.bitwise_eq(&out.encoder.params));
        assert_eq!(meta.config_hash, out.config_hash);
        assert_eq!(read_metrics(&log).unwrap(), out.metrics);
    }
}
