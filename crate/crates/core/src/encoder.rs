//! Toy generative-style multimodal encoder.
//!
//! Titles (and enriched titles) become `L` text tokens each, every image
//! (main and augmented) becomes `V` visual tokens through a linear projector,
//! image-only inputs get a learned instructional prompt prefix, and the whole
//! sequence runs through pre-norm transformer blocks whose feed-forward
//! sublayers are [`crate::moe`] layers. The representation is the mean of all
//! final hidden states, optionally unit-normalized.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{ModalityComposition, ProductContent, PAD_TOKEN};
use crate::error::{Error, Result};
use crate::moe::{self, ExpertWeights, GateOutput, MoEConfig};
use crate::par::Exec;
use crate::params::{self, Init, Params};
use crate::tensor::{Graph, Mat, Segment, Var};

/// Number of learned tokens prefixed to image-only inputs.
pub const PROMPT_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Hidden dimension `D`.
    pub hidden_dim: usize,
    /// Visual tokens per image `V`; must equal the dataset's patch count.
    pub visual_tokens: usize,
    /// Text feature length `L`.
    pub text_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    /// Patch feature dimension `F`.
    pub feature_dim: usize,
    pub normalize_output: bool,
    pub moe: MoEConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            visual_tokens: 4,
            text_len: 16,
            n_layers: 2,
            n_heads: 4,
            vocab_size: 512,
            feature_dim: 32,
            normalize_output: true,
            moe: MoEConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(Error::validation(format!(
                "hidden_dim {} must be a positive multiple of n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.visual_tokens == 0 || self.text_len == 0 {
            return Err(Error::validation("visual_tokens and text_len must be >= 1"));
        }
        if self.vocab_size < 2 || self.feature_dim == 0 {
            return Err(Error::validation("vocab_size must be >= 2 and feature_dim >= 1"));
        }
        self.moe.validate()
    }

    /// Sequence length for `content` under `modality`.
    pub fn sequence_len(&self, content: &ProductContent, modality: ModalityComposition) -> usize {
        let text = self.text_len * (1 + usize::from(content.enriched_title.is_some()));
        let visual = self.visual_tokens * (1 + content.aug_images.len());
        match modality {
            ModalityComposition::TextOnly => text,
            ModalityComposition::ImageOnly => PROMPT_LEN + visual,
            ModalityComposition::Multimodal => text + visual,
        }
    }
}

/// Unit-length (when configured) embedding of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub vector: Vec<f64>,
    pub modality: ModalityComposition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum TokenType {
    Title = 0,
    Enriched = 1,
    Image = 2,
    AugImage = 3,
    Prompt = 4,
}

const N_TOKEN_TYPES: usize = 5;

struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    gate: usize,
    experts: Vec<[usize; 4]>,
}

struct Layout {
    tok_emb: usize,
    text_pos: usize,
    type_emb: usize,
    prompt: usize,
    proj_w: usize,
    proj_b: usize,
    visual_pos: usize,
    layers: Vec<LayerIdx>,
    dual_alignment: usize,
}

/// Per-layer intermediate nodes exposed to the objectives and visualizations.
pub struct LayerTrace {
    pub attention: Var,
    pub gate: GateOutput,
}

pub struct ForwardOutput {
    /// One pooled row per input, in input order.
    pub reps: Var,
    pub layers: Vec<LayerTrace>,
    pub segments: Vec<Segment>,
    pub token_types: Vec<TokenType>,
}

/// One input for a packed forward pass.
#[derive(Clone, Copy)]
pub struct EncodeInput<'a> {
    pub content: &'a ProductContent,
    pub modality: ModalityComposition,
}

impl<'a> EncodeInput<'a> {
    pub fn new(content: &'a ProductContent, modality: ModalityComposition) -> Self {
        Self { content, modality }
    }
}

#[derive(Default)]
struct Packed {
    segments: Vec<Segment>,
    types: Vec<TokenType>,
    text_ids: Vec<usize>,
    text_pos: Vec<usize>,
    text_rows: Vec<usize>,
    img: Vec<f64>,
    img_patch: Vec<usize>,
    img_rows: Vec<usize>,
    prompt_idx: Vec<usize>,
    prompt_rows: Vec<usize>,
}

impl Packed {
    fn rows(&self) -> usize {
        self.types.len()
    }

    fn push_text(&mut self, cfg: &EncoderConfig, ids: &[u32], kind: TokenType) -> Result<()> {
        if ids.len() > cfg.text_len {
            return Err(Error::validation(format!(
                "text of {} tokens exceeds text_len {}",
                ids.len(),
                cfg.text_len
            )));
        }
        for pos in 0..cfg.text_len {
            let id = ids.get(pos).copied().unwrap_or(PAD_TOKEN) as usize;
            if id >= cfg.vocab_size {
                return Err(Error::validation(format!("token id {id} outside vocabulary")));
            }
            self.text_rows.push(self.rows());
            self.text_ids.push(id);
            self.text_pos.push(pos);
            self.types.push(kind);
        }
        Ok(())
    }

    fn push_image(&mut self, cfg: &EncoderConfig, image: &[Vec<f32>], kind: TokenType) -> Result<()> {
        if image.len() != cfg.visual_tokens || image.iter().any(|p| p.len() != cfg.feature_dim) {
            return Err(Error::validation(format!(
                "image must be {}x{} patch features",
                cfg.visual_tokens, cfg.feature_dim
            )));
        }
        for (p, patch) in image.iter().enumerate() {
            self.img_rows.push(self.rows());
            self.img_patch.push(p);
            self.img.extend(patch.iter().map(|&x| f64::from(x)));
            self.types.push(kind);
        }
        Ok(())
    }

    fn push_input(&mut self, cfg: &EncoderConfig, input: &EncodeInput) -> Result<()> {
        let start = self.rows();
        let c = input.content;
        let wants_text = input.modality != ModalityComposition::ImageOnly;
        let wants_image = input.modality != ModalityComposition::TextOnly;
        if wants_text && c.title.is_empty() {
            return Err(Error::validation("input requires a title"));
        }
        if wants_image && c.image.is_empty() {
            return Err(Error::validation("input requires an image"));
        }
        if input.modality == ModalityComposition::ImageOnly {
            for i in 0..PROMPT_LEN {
                self.prompt_rows.push(self.rows());
                self.prompt_idx.push(i);
                self.types.push(TokenType::Prompt);
            }
        }
        if wants_text {
            self.push_text(cfg, &c.title, TokenType::Title)?;
            if let Some(e) = &c.enriched_title {
                self.push_text(cfg, e, TokenType::Enriched)?;
            }
        }
        if wants_image {
            self.push_image(cfg, &c.image, TokenType::Image)?;
            for aug in &c.aug_images {
                self.push_image(cfg, aug, TokenType::AugImage)?;
            }
        }
        self.segments.push(Segment {
            start,
            len: self.rows() - start,
        });
        Ok(())
    }
}

/// Encoder parameters plus architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: Params,
}

impl Encoder {
    /// Fresh seeded initialization.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.hidden_dim;
        let mut init = Init::new(seed);
        let mut p = Params::default();
        let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let out_scale = lin(d) / (2.0 * c.n_layers.max(1) as f64).sqrt();
        p.push("embed.tokens", init.normal(c.vocab_size, d, 1.0));
        p.push("embed.text_pos", init.normal(c.text_len, d, 0.1));
        p.push("embed.types", init.normal(N_TOKEN_TYPES, d, 0.1));
        p.push("embed.prompt", init.normal(PROMPT_LEN, d, 1.0));
        p.push("visual.proj_w", init.normal(c.feature_dim, d, lin(c.feature_dim)));
        p.push("visual.proj_b", Init::zeros(1, d));
        p.push("visual.pos", init.normal(c.visual_tokens, d, 0.1));
        for l in 0..c.n_layers {
            let n = |s: &str| format!("layer{l}.{s}");
            p.push(n("ln1.g"), Init::ones(1, d));
            p.push(n("ln1.b"), Init::zeros(1, d));
            for w in ["q", "k", "v"] {
                p.push(n(&format!("attn.w{w}")), init.normal(d, d, lin(d)));
                p.push(n(&format!("attn.b{w}")), Init::zeros(1, d));
            }
            p.push(n("attn.wo"), init.normal(d, d, out_scale));
            p.push(n("attn.bo"), Init::zeros(1, d));
            p.push(n("ln2.g"), Init::ones(1, d));
            p.push(n("ln2.b"), Init::zeros(1, d));
            p.push(n("moe.gate"), init.normal(d, c.moe.n_experts, lin(d)));
            let hdim = c.moe.expert_hidden;
            for z in 0..c.moe.n_experts {
                p.push(n(&format!("moe.expert{z}.w1")), init.normal(d, hdim, lin(d)));
                p.push(n(&format!("moe.expert{z}.b1")), Init::zeros(1, hdim));
                p.push(
                    n(&format!("moe.expert{z}.w2")),
                    init.normal(hdim, d, lin(hdim) / (2.0 * c.n_layers as f64).sqrt()),
                );
                p.push(n(&format!("moe.expert{z}.b2")), Init::zeros(1, d));
            }
        }
        p.push(
            "moe.dual_alignment",
            init.normal(c.moe.n_experts, c.moe.n_objectives, 0.01),
        );
        Ok(Self { config, params: p })
    }

    /// Wraps existing parameters after checking they match the architecture.
    pub fn from_params(config: EncoderConfig, params: Params) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        if reference.params.names() != params.names() {
            return Err(Error::Integrity("parameter names do not match the encoder config".into()));
        }
        for ((name, a), b) in params
            .names()
            .iter()
            .zip(reference.params.tensors())
            .zip(params.tensors())
        {
            if a.dim() != b.dim() {
                return Err(Error::Integrity(format!(
                    "parameter {name} has shape {:?}, config implies {:?}",
                    b.dim(),
                    a.dim()
                )));
            }
        }
        Ok(Self { config, params })
    }

    fn layout(&self) -> Layout {
        let names = self.params.names();
        let idx = |n: &str| {
            names
                .iter()
                .position(|x| x == n)
                .unwrap_or_else(|| panic!("missing parameter {n}"))
        };
        let layers = (0..self.config.n_layers)
            .map(|l| {
                let n = |s: &str| idx(&format!("layer{l}.{s}"));
                LayerIdx {
                    ln1_g: n("ln1.g"),
                    ln1_b: n("ln1.b"),
                    wq: n("attn.wq"),
                    bq: n("attn.bq"),
                    wk: n("attn.wk"),
                    bk: n("attn.bk"),
                    wv: n("attn.wv"),
                    bv: n("attn.bv"),
                    wo: n("attn.wo"),
                    bo: n("attn.bo"),
                    ln2_g: n("ln2.g"),
                    ln2_b: n("ln2.b"),
                    gate: n("moe.gate"),
                    experts: (0..self.config.moe.n_experts)
                        .map(|z| {
                            [
                                n(&format!("moe.expert{z}.w1")),
                                n(&format!("moe.expert{z}.b1")),
                                n(&format!("moe.expert{z}.w2")),
                                n(&format!("moe.expert{z}.b2")),
                            ]
                        })
                        .collect(),
                }
            })
            .collect();
        Layout {
            tok_emb: idx("embed.tokens"),
            text_pos: idx("embed.text_pos"),
            type_emb: idx("embed.types"),
            prompt: idx("embed.prompt"),
            proj_w: idx("visual.proj_w"),
            proj_b: idx("visual.proj_b"),
            visual_pos: idx("visual.pos"),
            layers,
            dual_alignment: idx("moe.dual_alignment"),
        }
    }

    /// Index of the dual-alignment matrix within the parameter list.
    pub fn dual_alignment_index(&self) -> usize {
        self.layout().dual_alignment
    }

    /// Sum of all embedded input rows before the transformer stack, one row per token.
    fn embed(&self, g: &mut Graph, w: &[Var], lay: &Layout, packed: Packed) -> Var {
        let n = packed.rows();
        let mut parts = Vec::with_capacity(4);
        if !packed.text_rows.is_empty() {
            let tok = g.gather_rows(w[lay.tok_emb], packed.text_ids);
            let pos = g.gather_rows(w[lay.text_pos], packed.text_pos);
            let t = g.add(tok, pos);
            parts.push(g.scatter_rows(t, packed.text_rows, n));
        }
        if !packed.img_rows.is_empty() {
            let f = self.config.feature_dim;
            let feats = Array2::from_shape_vec((packed.img_rows.len(), f), packed.img).expect("patch rows");
            let feats = g.leaf(feats);
            let proj = g.matmul(feats, w[lay.proj_w]);
            let proj = g.add_row(proj, w[lay.proj_b]);
            let pos = g.gather_rows(w[lay.visual_pos], packed.img_patch);
            let v = g.add(proj, pos);
            parts.push(g.scatter_rows(v, packed.img_rows, n));
        }
        if !packed.prompt_rows.is_empty() {
            let pr = g.gather_rows(w[lay.prompt], packed.prompt_idx);
            parts.push(g.scatter_rows(pr, packed.prompt_rows, n));
        }
        let types: Vec<usize> = packed.types.iter().map(|&t| t as usize).collect();
        let mut x = g.gather_rows(w[lay.type_emb], types);
        for p in parts {
            x = g.add(x, p);
        }
        x
    }

    /// Packed forward pass of `inputs` on graph `g`, where `w` are this
    /// encoder's parameters loaded as graph nodes (see [`params::load_into`]).
    pub fn forward(&self, g: &mut Graph, w: &[Var], inputs: &[EncodeInput]) -> Result<ForwardOutput> {
        if inputs.is_empty() {
            return Err(Error::validation("nothing to encode"));
        }
        let cfg = &self.config;
        let lay = self.layout();
        let mut packed = Packed::default();
        for input in inputs {
            packed.push_input(cfg, input)?;
        }
        let segments = packed.segments.clone();
        let token_types = packed.types.clone();
        let mut x = self.embed(g, w, &lay, packed);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in &lay.layers {
            let a = g.layer_norm(x, w[l.ln1_g], w[l.ln1_b]);
            let proj = |g: &mut Graph, wi: usize, bi: usize| {
                let y = g.matmul(a, w[wi]);
                g.add_row(y, w[bi])
            };
            let q = proj(g, l.wq, l.bq);
            let k = proj(g, l.wk, l.bk);
            let v = proj(g, l.wv, l.bv);
            let att = g.attention(q, k, v, &segments, cfg.n_heads);
            let o = g.matmul(att, w[l.wo]);
            let o = g.add_row(o, w[l.bo]);
            x = g.add(x, o);
            let m = g.layer_norm(x, w[l.ln2_g], w[l.ln2_b]);
            let gate = moe::gate(g, m, w[l.gate], cfg.moe.top_k)?;
            let experts: Vec<ExpertWeights> = l
                .experts
                .iter()
                .map(|e| ExpertWeights {
                    w1: w[e[0]],
                    b1: w[e[1]],
                    w2: w[e[2]],
                    b2: w[e[3]],
                })
                .collect();
            let ff = moe::moe_forward(g, m, &experts, &gate)?;
            x = g.add(x, ff);
            layers.push(LayerTrace { attention: att, gate });
        }
        let pooled = g.segment_mean(x, &segments);
        let reps = if cfg.normalize_output {
            g.l2_normalize_rows(pooled)
        } else {
            pooled
        };
        Ok(ForwardOutput {
            reps,
            layers,
            segments,
            token_types,
        })
    }

    /// Encodes a single input.
    pub fn encode(&self, content: &ProductContent, modality: ModalityComposition) -> Result<Representation> {
        let vals = self.params.to_f64();
        let mut g = Graph::new(Exec::Sequential);
        let w = params::load_into(&mut g, &vals);
        let out = self.forward(&mut g, &w, &[EncodeInput::new(content, modality)])?;
        Ok(Representation {
            vector: g.value(out.reps).row(0).to_vec(),
            modality,
        })
    }

    /// Encodes many inputs in fixed-size chunks, fanning chunks out per `exec`.
    /// Rows come back in input order and do not depend on `exec`.
    pub fn encode_batch(&self, inputs: &[EncodeInput], exec: Exec) -> Result<Mat> {
        const CHUNK: usize = 64;
        if inputs.is_empty() {
            return Ok(Mat::zeros((0, self.config.hidden_dim)));
        }
        let vals = self.params.to_f64();
        let chunks: Vec<Result<Mat>> = exec.map_chunks(inputs, CHUNK, |chunk| {
            let mut g = Graph::new(Exec::Sequential);
            let w = params::load_into(&mut g, &vals);
            let out = self.forward(&mut g, &w, chunk)?;
            Ok(g.value(out.reps).clone())
        });
        let chunks = chunks.into_iter().collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
        Ok(ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths"))
    }

    /// Attention maps `[layer][head]`, each `S×S` with rows summing to one.
    pub fn attention_weights(
        &self,
        content: &ProductContent,
        modality: ModalityComposition,
    ) -> Result<Vec<Vec<Mat>>> {
        let vals = self.params.to_f64();
        let mut g = Graph::new(Exec::Sequential);
        let w = params::load_into(&mut g, &vals);
        let out = self.forward(&mut g, &w, &[EncodeInput::new(content, modality)])?;
        Ok(out
            .layers
            .iter()
            .map(|l| {
                let (probs, _) = g.attention_probs(l.attention).expect("attention node");
                probs.to_vec()
            })
            .collect())
    }

    /// Token types of the sequence built for `content` under `modality`.
    pub fn token_layout(&self, content: &ProductContent, modality: ModalityComposition) -> Result<Vec<TokenType>> {
        let mut packed = Packed::default();
        packed.push_input(&self.config, &EncodeInput::new(content, modality))?;
        Ok(packed.types)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_config() -> EncoderConfig {
        EncoderConfig {
            hidden_dim: 16,
            visual_tokens: 4,
            text_len: 8,
            n_layers: 2,
            n_heads: 2,
            vocab_size: 64,
            feature_dim: 6,
            normalize_output: true,
            moe: MoEConfig {
                n_experts: 4,
                top_k: 2,
                expert_hidden: 16,
                n_objectives: 5,
            },
        }
    }

    pub(crate) fn random_content(rng: &mut ChaCha8Rng, cfg: &EncoderConfig, n_aug: usize, enriched: bool) -> ProductContent {
        let mut text = |len: usize| (0..len).map(|_| rng.gen_range(1..cfg.vocab_size as u32)).collect::<Vec<_>>();
        let title = text(5);
        let enriched_title = enriched.then(|| text(7));
        let mut img = || -> Vec<Vec<f32>> {
            (0..cfg.visual_tokens)
                .map(|_| (0..cfg.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect()
        };
        let image = img();
        let aug_images = (0..n_aug).map(|_| img()).collect();
        ProductContent {
            title,
            enriched_title,
            description: None,
            image,
            aug_images,
            category_label: None,
            attribute_labels: None,
            latent: None,
        }
    }

    #[test]
    fn zero_layer_single_token_is_its_embedding() {
        let cfg = EncoderConfig {
            n_layers: 0,
            text_len: 1,
            normalize_output: false,
            ..small_config()
        };
        let enc = Encoder::init(cfg, 3).unwrap();
        let content = ProductContent {
            title: vec![17],
            enriched_title: None,
            description: None,
            image: vec![vec![0.0; 6]; 4],
            aug_images: vec![],
            category_label: None,
            attribute_labels: None,
            latent: None,
        };
        let r = enc.encode(&content, ModalityComposition::TextOnly).unwrap();
        let p = &enc.params;
        let row = |name: &str, i: usize| p.get(name).unwrap().row(i).mapv(f64::from);
        let expected = row("embed.tokens", 17) + row("embed.text_pos", 0) + row("embed.types", 0);
        for (a, b) in r.vector.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn outputs_are_unit_norm() {
        let cfg = small_config();
        let enc = Encoder::init(cfg.clone(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let c = random_content(&mut rng, &cfg, 2, true);
            for m in ModalityComposition::ALL {
                let r = enc.encode(&c, m).unwrap();
                let n: f64 = r.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
                assert_eq!(r.vector.len(), cfg.hidden_dim);
            }
        }
    }

    #[test]
    fn full_multimodal_sequence_length() {
        let cfg = small_config();
        let enc = Encoder::init(cfg.clone(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_content(&mut rng, &cfg, 2, true);
        assert_eq!(cfg.sequence_len(&c, ModalityComposition::Multimodal), 2 * 8 + 3 * 4);
        assert_eq!(enc.token_layout(&c, ModalityComposition::Multimodal).unwrap().len(), 28);
        let maps = enc.attention_weights(&c, ModalityComposition::Multimodal).unwrap();
        assert_eq!(maps.len(), cfg.n_layers);
        assert!(maps.iter().all(|l| l.len() == cfg.n_heads && l.iter().all(|m| m.dim() == (28, 28))));
        assert_eq!(cfg.sequence_len(&c, ModalityComposition::ImageOnly), PROMPT_LEN + 12);
        assert_eq!(cfg.sequence_len(&c, ModalityComposition::TextOnly), 16);
    }

    #[test]
    fn attention_rows_are_stochastic_and_deterministic() {
        let cfg = small_config();
        let enc = Encoder::init(cfg.clone(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random_content(&mut rng, &cfg, 1, false);
        let a = enc.attention_weights(&c, ModalityComposition::ImageOnly).unwrap();
        let b = enc.attention_weights(&c, ModalityComposition::ImageOnly).unwrap();
        assert_eq!(a, b);
        for m in a.iter().flatten() {
            for row in m.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn missing_fields_and_bad_shapes_are_rejected() {
        let cfg = small_config();
        let enc = Encoder::init(cfg.clone(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut c = random_content(&mut rng, &cfg, 0, false);
        let mut no_title = c.clone();
        no_title.title.clear();
        assert!(enc.encode(&no_title, ModalityComposition::TextOnly).is_err());
        assert!(enc.encode(&no_title, ModalityComposition::ImageOnly).is_ok());
        let mut no_image = c.clone();
        no_image.image.clear();
        assert!(enc.encode(&no_image, ModalityComposition::Multimodal).is_err());
        assert!(enc.encode(&no_image, ModalityComposition::TextOnly).is_ok());
        c.image[0].pop();
        assert!(matches!(
            enc.encode(&c, ModalityComposition::ImageOnly),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn batch_encoding_matches_single_encoding_in_both_modes() {
        let cfg = small_config();
        let enc = Encoder::init(cfg.clone(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let items: Vec<ProductContent> = (0..70).map(|i| random_content(&mut rng, &cfg, i % 3, i % 2 == 0)).collect();
        let inputs: Vec<EncodeInput> = items
            .iter()
            .enumerate()
            .map(|(i, c)| EncodeInput::new(c, ModalityComposition::ALL[i % 3]))
            .collect();
        let seq = enc.encode_batch(&inputs, Exec::Sequential).unwrap();
        let par = enc.encode_batch(&inputs, Exec::Parallel).unwrap();
        assert_eq!(seq, par);
        for (i, input) in inputs.iter().enumerate().step_by(13) {
            let single = enc.encode(input.content, input.modality).unwrap();
            for (a, b) in single.vector.iter().zip(seq.row(i).iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn distinct_inputs_give_distinct_representations() {
        let cfg = small_config();
        let enc = Encoder::init(cfg.clone(), 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let items: Vec<ProductContent> = (0..1000).map(|_| random_content(&mut rng, &cfg, 0, false)).collect();
        let inputs: Vec<EncodeInput> = items
            .iter()
            .map(|c| EncodeInput::new(c, ModalityComposition::Multimodal))
            .collect();
        let reps = enc.encode_batch(&inputs, Exec::Parallel).unwrap();
        let mut keys: Vec<Vec<u64>> = reps.rows().into_iter().map(|r| r.iter().map(|x| x.to_bits()).collect()).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 1000);
    }

    #[test]
    fn permuting_title_tokens_changes_the_representation() {
        let cfg = small_config();
        let enc = Encoder::init(cfg.clone(), 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let c = random_content(&mut rng, &cfg, 0, false);
        let mut p = c.clone();
        p.title.reverse();
        let a = enc.encode(&c, ModalityComposition::TextOnly).unwrap();
        let b = enc.encode(&p, ModalityComposition::TextOnly).unwrap();
        assert_ne!(a.vector, b.vector);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_heads = EncoderConfig {
            hidden_dim: 10,
            n_heads: 4,
            ..small_config()
        };
        assert!(Encoder::init(bad_heads, 0).is_err());
        let mut bad_k = small_config();
        bad_k.moe.top_k = 5;
        assert!(Encoder::init(bad_k, 0).is_err());
    }
}
