//! Image-text co-augmentation: entity extraction, entity-aware title
//! enrichment, two-stage visual expansion and title-image similarity
//! filtering. Model calls go through [`EnrichmentClient`] and [`EditClient`];
//! the mocks here are deterministic stand-ins.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, token_word, word_token, DatasetManifest, ImageFeatures, ModalityComposition, ProductContent, Triplet};
use crate::encoder::{EncodeInput, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::moe::MoEConfig;
use crate::par::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntitySource {
    Title,
    Description,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub text: String,
    pub source: EntitySource,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySet {
    pub entities: Vec<Entity>,
}

impl EntitySet {
    fn push(&mut self, text: &str, source: EntitySource) {
        if !text.is_empty() && !self.entities.iter().any(|e| e.text == text) {
            self.entities.push(Entity {
                text: text.to_owned(),
                source,
            });
        }
    }

    pub fn words(&self) -> Vec<&str> {
        self.entities.iter().map(|e| e.text.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Rule-based extractor: title words that reappear in the description, then
/// title words in the lexicon, then description words in the lexicon.
pub fn extract_entities(title: &str, description: &str, lexicon: &[String]) -> Result<EntitySet> {
    let title = tokenize(title);
    if title.is_empty() {
        return Err(Error::validation("entity extraction needs a non-empty title"));
    }
    let desc = tokenize(description);
    let in_lexicon = |w: &String| lexicon.iter().any(|l| l.eq_ignore_ascii_case(w));
    let mut set = EntitySet::default();
    for w in title.iter().filter(|w| desc.contains(w)) {
        set.push(w, EntitySource::Title);
    }
    for w in title.iter().filter(|w| in_lexicon(w)) {
        set.push(w, EntitySource::Title);
    }
    for w in desc.iter().filter(|w| in_lexicon(w)) {
        set.push(w, EntitySource::Description);
    }
    Ok(set)
}

/// Produces an enriched title from the original title, image and entities.
pub trait EnrichmentClient: Sync {
    fn enrich(&self, title: &[String], image: &ImageFeatures, entities: &EntitySet) -> Result<Vec<String>>;
}

/// Subject extraction and prompt-guided image editing.
pub trait EditClient: Sync {
    fn extract_subject(&self, image: &ImageFeatures) -> Result<ImageFeatures>;
    fn edit(&self, subject: &ImageFeatures, title: &[String], prompt: &str) -> Result<ImageFeatures>;
}

/// Appends entities missing from the title, in entity order, then truncates
/// to `max_len` words.
#[derive(Debug, Clone)]
pub struct MockEnrichmentClient {
    pub max_len: usize,
}

impl EnrichmentClient for MockEnrichmentClient {
    fn enrich(&self, title: &[String], _image: &ImageFeatures, entities: &EntitySet) -> Result<Vec<String>> {
        let mut out = title.to_vec();
        for e in entities.words() {
            if !out.iter().any(|w| w == e) {
                out.push(e.to_owned());
            }
        }
        out.truncate(self.max_len);
        if out.is_empty() {
            return Err(Error::validation("enrichment produced an empty title"));
        }
        Ok(out)
    }
}

/// Subject extraction shrinks each patch toward the patch mean
/// (soft-threshold of the deviation); editing applies a prompt-keyed
/// orthonormal rotation plus a small bias.
#[derive(Debug, Clone)]
pub struct MockEditClient {
    /// Soft-threshold as a fraction of each feature's deviation spread.
    pub shrink: f64,
    /// Maximum Givens angle in radians.
    pub max_angle: f64,
    pub bias_scale: f64,
}

impl Default for MockEditClient {
    fn default() -> Self {
        Self {
            shrink: 0.25,
            max_angle: 0.3,
            bias_scale: 0.05,
        }
    }
}

fn prompt_rng(title: &[String], prompt: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(prompt.as_bytes());
    h.update([0u8]);
    h.update(title.join(" ").as_bytes());
    let d = h.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(d[..8].try_into().expect("8 bytes")))
}

impl EditClient for MockEditClient {
    fn extract_subject(&self, image: &ImageFeatures) -> Result<ImageFeatures> {
        let p = image.len();
        if p == 0 {
            return Err(Error::validation("subject extraction on an empty image"));
        }
        let f = image[0].len();
        let mut out = image.clone();
        for j in 0..f {
            let mean = image.iter().map(|r| f64::from(r[j])).sum::<f64>() / p as f64;
            let spread = (image.iter().map(|r| (f64::from(r[j]) - mean).powi(2)).sum::<f64>() / p as f64).sqrt();
            let lambda = self.shrink * spread;
            for (i, row) in image.iter().enumerate() {
                let d = f64::from(row[j]) - mean;
                let shrunk = d.signum() * (d.abs() - lambda).max(0.0);
                out[i][j] = (mean + shrunk) as f32;
            }
        }
        Ok(out)
    }

    fn edit(&self, subject: &ImageFeatures, title: &[String], prompt: &str) -> Result<ImageFeatures> {
        let f = subject.first().map_or(0, Vec::len);
        if f == 0 {
            return Err(Error::validation("edit on an empty image"));
        }
        let mut rng = prompt_rng(title, prompt);
        let rotations: Vec<(usize, usize, f64)> = (0..f.max(2))
            .filter_map(|_| {
                let a = rng.gen_range(0..f);
                let b = rng.gen_range(0..f);
                let theta = rng.gen_range(-self.max_angle..=self.max_angle);
                (a != b).then_some((a, b, theta))
            })
            .collect();
        let bias: Vec<f64> = (0..f)
            .map(|_| self.bias_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(subject
            .iter()
            .map(|patch| {
                let mut x: Vec<f64> = patch.iter().map(|&v| f64::from(v)).collect();
                for &(a, b, t) in &rotations {
                    let (c, s) = (t.cos(), t.sin());
                    let (xa, xb) = (x[a], x[b]);
                    x[a] = c * xa - s * xb;
                    x[b] = s * xa + c * xb;
                }
                x.iter().zip(&bias).map(|(v, b)| (v + b) as f32).collect()
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptCategory {
    Background,
    Angle,
    Detail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub category: PromptCategory,
    pub text: String,
}

impl PromptTemplate {
    pub fn defaults() -> Vec<PromptTemplate> {
        vec![
            PromptTemplate {
                category: PromptCategory::Background,
                text: "place the main subject in a bright indoor scene".into(),
            },
            PromptTemplate {
                category: PromptCategory::Angle,
                text: "show the main subject from a three-quarter angle".into(),
            },
            PromptTemplate {
                category: PromptCategory::Detail,
                text: "enhance the texture and material details of the main subject".into(),
            },
        ]
    }

    /// Prompt for one product, mentioning its title.
    pub fn render(&self, title: &[String]) -> String {
        format!("{} ({})", self.text, title.join(" "))
    }
}

fn check_templates(templates: &[PromptTemplate]) -> Result<()> {
    for c in [PromptCategory::Background, PromptCategory::Angle, PromptCategory::Detail] {
        if !templates.iter().any(|t| t.category == c) {
            return Err(Error::Config(format!("prompt templates lack a {c:?} entry")));
        }
    }
    Ok(())
}

pub struct VisualExpansion {
    pub subject: ImageFeatures,
    pub variants: Vec<ImageFeatures>,
    pub prompts: Vec<String>,
}

/// Stage one extracts the subject; stage two edits it once per prompt,
/// cycling through the templates for `n` variants.
pub fn expand_visual(
    image: &ImageFeatures,
    title: &[String],
    n: usize,
    client: &dyn EditClient,
    templates: &[PromptTemplate],
) -> Result<VisualExpansion> {
    check_templates(templates)?;
    let subject = client.extract_subject(image)?;
    let mut variants = Vec::with_capacity(n);
    let mut prompts = Vec::with_capacity(n);
    for k in 0..n {
        let mut prompt = templates[k % templates.len()].render(title);
        if k >= templates.len() {
            prompt.push_str(&format!(" #{}", k / templates.len()));
        }
        let v = client.edit(&subject, title, &prompt)?;
        if v.len() != image.len() || v.iter().zip(image).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::validation("edit changed the image shape"));
        }
        variants.push(v);
        prompts.push(prompt);
    }
    Ok(VisualExpansion {
        subject,
        variants,
        prompts,
    })
}

/// Indices of scores meeting `threshold`.
pub fn filter_by_scores(scores: &[f64], threshold: f64) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= threshold)
        .map(|(i, _)| i)
        .collect()
}

pub struct FilterOutcome {
    pub kept: Vec<ImageFeatures>,
    pub scores: Vec<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Similarity of each variant to the title under `reference`.
pub fn similarity_scores(variants: &[ImageFeatures], title: &[u32], reference: &Encoder) -> Result<Vec<f64>> {
    let text = ProductContent {
        title: title.to_vec(),
        enriched_title: None,
        description: None,
        image: Vec::new(),
        aug_images: Vec::new(),
        category_label: None,
        attribute_labels: None,
        latent: None,
    };
    let images: Vec<ProductContent> = variants
        .iter()
        .map(|v| ProductContent {
            image: v.clone(),
            ..text.clone()
        })
        .collect();
    let mut inputs = vec![EncodeInput::new(&text, ModalityComposition::TextOnly)];
    inputs.extend(images.iter().map(|c| EncodeInput::new(c, ModalityComposition::ImageOnly)));
    let reps = reference.encode_batch(&inputs, Exec::Sequential)?;
    let t = reps.row(0).to_vec();
    Ok((1..reps.nrows()).map(|i| cosine(&t, &reps.row(i).to_vec())).collect())
}

/// Keeps variants whose title similarity is at least `threshold`.
pub fn similarity_filter(
    variants: &[ImageFeatures],
    title: &[u32],
    reference: &Encoder,
    threshold: f64,
) -> Result<FilterOutcome> {
    let scores = similarity_scores(variants, title, reference)?;
    let kept = filter_by_scores(&scores, threshold)
        .into_iter()
        .map(|i| variants[i].clone())
        .collect();
    Ok(FilterOutcome { kept, scores })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Edited variants generated per item.
    pub n_variants: usize,
    /// Cap on kept augmented images per item.
    pub max_aug: usize,
    pub text_len: usize,
    pub threshold: f64,
    pub seed: u64,
    /// Frozen reference encoder checkpoint; a fresh seeded encoder when unset.
    pub reference_checkpoint: Option<PathBuf>,
    pub reference_encoder: EncoderConfig,
    pub templates: Vec<PromptTemplate>,
}

impl AugmentConfig {
    pub fn for_manifest(m: &DatasetManifest) -> Self {
        Self {
            n_variants: 3,
            max_aug: m.n_aug,
            text_len: m.text_len,
            threshold: 0.2,
            seed: m.seed,
            reference_checkpoint: None,
            reference_encoder: EncoderConfig {
                hidden_dim: 32,
                visual_tokens: m.patches,
                text_len: m.text_len,
                n_layers: 1,
                n_heads: 2,
                vocab_size: m.vocab_size,
                feature_dim: m.feature_dim,
                normalize_output: true,
                moe: MoEConfig {
                    n_experts: 2,
                    top_k: 1,
                    expert_hidden: 32,
                    n_objectives: 5,
                },
            },
            templates: PromptTemplate::defaults(),
        }
    }

    pub fn reference(&self) -> Result<Encoder> {
        match &self.reference_checkpoint {
            Some(p) => Ok(crate::checkpoint::load_checkpoint(p)?.0),
            None => Encoder::init(self.reference_encoder.clone(), self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemReport {
    pub role: String,
    pub entities: Vec<String>,
    pub prompts: Vec<String>,
    pub generated: usize,
    pub kept: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordReport {
    pub triplet_id: String,
    pub items: Vec<ItemReport>,
    /// Set when an item ended with no augmented image or the record failed.
    pub flagged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSummary {
    pub records: usize,
    pub failed: usize,
    pub flagged: usize,
    pub generated: usize,
    pub kept: usize,
}

pub struct Clients<'a> {
    pub enrich: &'a dyn EnrichmentClient,
    pub edit: &'a dyn EditClient,
}

fn words(ids: &[u32]) -> Vec<String> {
    ids.iter().map(|&i| token_word(i)).collect()
}

fn augment_item(
    item: &ProductContent,
    role: &str,
    clients: &Clients,
    config: &AugmentConfig,
    lexicon: &[String],
    reference: &Encoder,
) -> Result<(ProductContent, ItemReport)> {
    let title = words(&item.title);
    let description = item.description.as_deref().map(data::tokens_to_text).unwrap_or_default();
    let entities = extract_entities(&title.join(" "), &description, lexicon)?;
    let enriched = clients.enrich.enrich(&title, &item.image, &entities)?;
    let enriched_ids = enriched
        .iter()
        .map(|w| word_token(w).ok_or_else(|| Error::validation(format!("enriched word `{w}` is not in the vocabulary"))))
        .collect::<Result<Vec<u32>>>()?;
    let expansion = expand_visual(&item.image, &title, config.n_variants, clients.edit, &config.templates)?;
    let filtered = similarity_filter(&expansion.variants, &item.title, reference, config.threshold)?;
    let mut out = item.clone();
    out.enriched_title = Some(enriched_ids.into_iter().take(config.text_len).collect());
    out.aug_images = filtered.kept.into_iter().take(config.max_aug).collect();
    let report = ItemReport {
        role: role.to_owned(),
        entities: entities.words().into_iter().map(str::to_owned).collect(),
        prompts: expansion.prompts,
        generated: expansion.variants.len(),
        kept: out.aug_images.len(),
        scores: filtered.scores,
    };
    Ok((out, report))
}

/// Augments one triplet's positive and negative; the query is untouched.
pub fn augment_triplet(
    t: &Triplet,
    clients: &Clients,
    config: &AugmentConfig,
    lexicon: &[String],
    reference: &Encoder,
) -> (Triplet, RecordReport) {
    let result = augment_item(&t.positive, "positive", clients, config, lexicon, reference).and_then(|(p, rp)| {
        augment_item(&t.negative, "negative", clients, config, lexicon, reference).map(|(n, rn)| (p, n, rp, rn))
    });
    match result {
        Ok((positive, negative, rp, rn)) => {
            let flagged = config.n_variants > 0 && config.max_aug > 0 && (rp.kept == 0 || rn.kept == 0);
            (
                Triplet {
                    positive,
                    negative,
                    ..t.clone()
                },
                RecordReport {
                    triplet_id: t.triplet_id.clone(),
                    items: vec![rp, rn],
                    flagged,
                    error: None,
                },
            )
        }
        Err(e) => {
            let err = Error::Augmentation {
                record: t.triplet_id.clone(),
                message: e.to_string(),
            };
            tracing::warn!("{err}");
            (
                t.clone(),
                RecordReport {
                    triplet_id: t.triplet_id.clone(),
                    items: Vec::new(),
                    flagged: true,
                    error: Some(err.to_string()),
                },
            )
        }
    }
}

/// Augments every record of `input` into `output` (same order) and writes a
/// per-record JSONL report to `report`.
pub fn co_augment_dataset(
    input: &Path,
    output: &Path,
    report: &Path,
    clients: &Clients,
    config: &AugmentConfig,
    lexicon: &[String],
    exec: Exec,
) -> Result<AugmentationSummary> {
    check_templates(&config.templates)?;
    let triplets = data::load_triplets(input)?;
    let reference = config.reference()?;
    let results = exec.map(&triplets, |t| augment_triplet(t, clients, config, lexicon, &reference));
    let (out, reports): (Vec<Triplet>, Vec<RecordReport>) = results.into_iter().unzip();
    data::write_triplets(output, &out)?;
    let file = std::fs::File::create(report).map_err(|e| Error::io(report, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in &reports {
        writeln!(w, "{}", serde_json::to_string(r).expect("report serializes")).map_err(|e| Error::io(report, e))?;
    }
    w.flush().map_err(|e| Error::io(report, e))?;
    let items = reports.iter().flat_map(|r| &r.items);
    Ok(AugmentationSummary {
        records: reports.len(),
        failed: reports.iter().filter(|r| r.error.is_some()).count(),
        flagged: reports.iter().filter(|r| r.flagged).count(),
        generated: items.clone().map(|i| i.generated).sum(),
        kept: items.map(|i| i.kept).sum(),
    })
}
