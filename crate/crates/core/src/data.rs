//! Triplet dataset schema, deterministic synthetic generation, label-noise
//! injection and JSONL loading.
//!
//! Synthetic products live in a latent space: every product has a unit latent
//! vector drawn around one of `n_classes` prototypes. Image patches are a
//! fixed random linear map of the latent plus Gaussian noise, and title words
//! are sampled from a latent-conditioned topic distribution, so both
//! modalities carry partial, noisy evidence about the same latent.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token id reserved for padding; never sampled as a word.
pub const PAD_TOKEN: u32 = 0;

/// Patch-feature matrix, `P` rows of `F` features.
pub type ImageFeatures = Vec<Vec<f32>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductContent {
    pub title: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enriched_title: Option<Vec<u32>>,
    /// Longer free text used only by the co-augmentation entity extractor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<Vec<u32>>,
    pub image: ImageFeatures,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aug_images: Vec<ImageFeatures>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_label: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute_labels: Option<Vec<u32>>,
    /// Generating latent of synthetic products.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub triplet_id: String,
    pub query: ProductContent,
    pub positive: ProductContent,
    pub negative: ProductContent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModalityComposition {
    #[serde(rename = "t")]
    TextOnly,
    #[serde(rename = "i")]
    ImageOnly,
    #[serde(rename = "mm")]
    Multimodal,
}

impl ModalityComposition {
    pub const ALL: [ModalityComposition; 3] = [
        ModalityComposition::TextOnly,
        ModalityComposition::ImageOnly,
        ModalityComposition::Multimodal,
    ];

    pub fn short(self) -> &'static str {
        match self {
            ModalityComposition::TextOnly => "t",
            ModalityComposition::ImageOnly => "i",
            ModalityComposition::Multimodal => "mm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "t" | "text" => Ok(ModalityComposition::TextOnly),
            "i" | "image" => Ok(ModalityComposition::ImageOnly),
            "mm" | "multimodal" => Ok(ModalityComposition::Multimodal),
            other => Err(Error::validation(format!("unknown modality `{other}`"))),
        }
    }
}

/// Everything needed to regenerate a synthetic dataset bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub vocab_size: usize,
    /// Patches per image (`P`).
    pub patches: usize,
    /// Features per patch (`F`).
    pub feature_dim: usize,
    /// Maximum title length in tokens.
    pub text_len: usize,
    /// Maximum augmented images per item (`n_c`).
    pub n_aug: usize,
    pub latent_dim: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
    pub n_attributes: usize,
    /// Negatives have latent cosine to the query strictly below this cap.
    pub hardness_cap: f64,
    /// Spread of item latents around their class prototype.
    pub class_spread: f64,
    /// Perturbation applied to the query latent to obtain the positive.
    pub positive_noise: f64,
    pub image_noise: f64,
    /// Inverse temperature of the title topic distribution.
    pub topic_sharpness: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip_rate: Option<f64>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            patches: 4,
            feature_dim: 32,
            text_len: 16,
            n_aug: 2,
            latent_dim: 16,
            seed: 7,
            n_train: 1000,
            n_test: 200,
            n_classes: 10,
            n_attributes: 8,
            hardness_cap: 0.6,
            class_spread: 0.8,
            positive_noise: 0.35,
            image_noise: 1.0,
            topic_sharpness: 2.0,
            flip_rate: None,
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("patches", self.patches),
            ("feature_dim", self.feature_dim),
            ("text_len", self.text_len),
            ("latent_dim", self.latent_dim),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::validation(format!("manifest field {name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::validation("vocab_size must leave room for the pad token"));
        }
        if self.text_len < 2 {
            return Err(Error::validation("text_len must be at least 2"));
        }
        if !(self.hardness_cap > -1.0 && self.hardness_cap < 1.0) {
            return Err(Error::validation("hardness_cap must lie in (-1, 1)"));
        }
        for (name, v) in [
            ("class_spread", self.class_spread),
            ("positive_noise", self.positive_noise),
            ("image_noise", self.image_noise),
            ("topic_sharpness", self.topic_sharpness),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::validation(format!("manifest field {name} must be >= 0")));
            }
        }
        if let Some(f) = self.flip_rate {
            check_flip_rate(f)?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let m: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Checks one triplet against the manifest's dimensions.
    pub fn check_triplet(&self, t: &Triplet) -> Result<()> {
        for (role, item) in [("query", &t.query), ("positive", &t.positive), ("negative", &t.negative)] {
            let ctx = |msg: String| Error::validation(format!("triplet {} {role}: {msg}", t.triplet_id));
            let texts = std::iter::once(&item.title).chain(item.enriched_title.iter());
            for seq in texts {
                if seq.len() > self.text_len {
                    return Err(ctx(format!("text length {} exceeds {}", seq.len(), self.text_len)));
                }
                if let Some(bad) = seq.iter().find(|&&id| id as usize >= self.vocab_size) {
                    return Err(ctx(format!("token id {bad} outside vocabulary")));
                }
            }
            for img in std::iter::once(&item.image).chain(item.aug_images.iter()) {
                if img.len() != self.patches || img.iter().any(|r| r.len() != self.feature_dim) {
                    return Err(ctx(format!(
                        "image shape does not match {}x{}",
                        self.patches, self.feature_dim
                    )));
                }
            }
            if item.aug_images.len() > self.n_aug {
                return Err(ctx(format!("{} augmented images exceed n_aug", item.aug_images.len())));
            }
        }
        Ok(())
    }
}

/// Class and attribute names as token sequences, plus the salient-word
/// lexicon used by the entity extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelNames {
    pub classes: Vec<Vec<u32>>,
    pub attributes: Vec<Vec<u32>>,
}

impl LabelNames {
    pub fn lexicon(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.classes
            .iter()
            .chain(&self.attributes)
            .flatten()
            .filter(|id| seen.insert(**id))
            .map(|&id| token_word(id))
            .collect()
    }
}

/// Surface form of a synthetic token id.
pub fn token_word(id: u32) -> String {
    format!("w{id}")
}

/// Inverse of [`token_word`].
pub fn word_token(word: &str) -> Option<u32> {
    word.strip_prefix('w')?.parse().ok()
}

pub fn tokens_to_text(ids: &[u32]) -> String {
    ids.iter().map(|&i| token_word(i)).collect::<Vec<_>>().join(" ")
}

/// Paths written by [`generate_synthetic_dataset`].
#[derive(Debug, Clone)]
pub struct DatasetFiles {
    pub dir: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    pub manifest: PathBuf,
    pub labels: PathBuf,
}

impl DatasetFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            train: dir.join("train.jsonl"),
            test: dir.join("test.jsonl"),
            manifest: dir.join("manifest.toml"),
            labels: dir.join("labels.json"),
        }
    }
}

struct World {
    prototypes: Vec<Vec<f64>>,
    word_vectors: Vec<Vec<f64>>,
    patch_maps: Vec<Vec<Vec<f64>>>,
    attribute_dirs: Vec<Vec<f64>>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt()).max(1e-12)
}

impl World {
    fn new(m: &DatasetManifest, rng: &mut ChaCha8Rng) -> Self {
        let d = m.latent_dim;
        let prototypes = (0..m.n_classes).map(|_| unit(normal_vec(rng, d))).collect();
        let word_vectors = (0..m.vocab_size).map(|_| normal_vec(rng, d)).collect();
        let scale = 1.0 / (d as f64).sqrt();
        let patch_maps = (0..m.patches)
            .map(|_| {
                (0..m.feature_dim)
                    .map(|_| normal_vec(rng, d).into_iter().map(|x| x * scale * 2.0).collect())
                    .collect()
            })
            .collect();
        let attribute_dirs = (0..m.n_attributes).map(|_| unit(normal_vec(rng, d))).collect();
        Self {
            prototypes,
            word_vectors,
            patch_maps,
            attribute_dirs,
        }
    }

    fn latent_near(&self, m: &DatasetManifest, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let noise = normal_vec(rng, m.latent_dim);
        let s = m.class_spread / (m.latent_dim as f64).sqrt();
        unit(
            self.prototypes[class]
                .iter()
                .zip(noise)
                .map(|(p, n)| p + s * n)
                .collect(),
        )
    }

    fn topic(&self, m: &DatasetManifest, z: &[f64]) -> WeightedIndex<f64> {
        let logits: Vec<f64> = self
            .word_vectors
            .iter()
            .map(|w| m.topic_sharpness * dot(w, z))
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(i, l)| if i as u32 == PAD_TOKEN { 0.0 } else { (l - max).exp() })
            .collect();
        WeightedIndex::new(weights).expect("non-degenerate topic")
    }

    fn product(
        &self,
        m: &DatasetManifest,
        z: &[f64],
        class: usize,
        with_description: bool,
        rng: &mut ChaCha8Rng,
    ) -> ProductContent {
        let topic = self.topic(m, z);
        let lo = (m.text_len / 2).max(1);
        let hi = (m.text_len * 3 / 4).max(lo);
        let len = rng.gen_range(lo..=hi);
        let title = (0..len).map(|_| topic.sample(rng) as u32).collect();
        let description = with_description
            .then(|| (0..2 * m.text_len).map(|_| topic.sample(rng) as u32).collect());
        let image = self
            .patch_maps
            .iter()
            .map(|map| {
                map.iter()
                    .map(|row| {
                        let noise: f64 = StandardNormal.sample(rng);
                        (dot(row, z) + m.image_noise * noise) as f32
                    })
                    .collect()
            })
            .collect();
        let attributes = self
            .attribute_dirs
            .iter()
            .enumerate()
            .filter(|(_, u)| dot(u, z) > 0.25)
            .map(|(a, _)| a as u32)
            .collect();
        ProductContent {
            title,
            enriched_title: None,
            description,
            image,
            aug_images: Vec::new(),
            category_label: Some(class as u32),
            attribute_labels: Some(attributes),
            latent: Some(z.iter().map(|&x| x as f32).collect()),
        }
    }

    fn label_names(&self) -> LabelNames {
        let top = |dir: &[f64], n: usize| -> Vec<u32> {
            let mut scored: Vec<(f64, u32)> = self
                .word_vectors
                .iter()
                .enumerate()
                .filter(|(i, _)| *i as u32 != PAD_TOKEN)
                .map(|(i, w)| (dot(w, dir), i as u32))
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            scored.into_iter().take(n).map(|(_, i)| i).collect()
        };
        LabelNames {
            classes: self.prototypes.iter().map(|p| top(p, 4)).collect(),
            attributes: self.attribute_dirs.iter().map(|a| top(a, 3)).collect(),
        }
    }

    fn triplet(&self, m: &DatasetManifest, id: String, rng: &mut ChaCha8Rng) -> Triplet {
        let class = rng.gen_range(0..m.n_classes);
        let zq = self.latent_near(m, class, rng);
        let pos_scale = m.positive_noise / (m.latent_dim as f64).sqrt();
        let zp = loop {
            let noise = normal_vec(rng, m.latent_dim);
            let cand = unit(zq.iter().zip(noise).map(|(a, n)| a + pos_scale * n).collect());
            if cosine(&zq, &cand) >= m.hardness_cap {
                break cand;
            }
        };
        let zn = loop {
            // half of the negatives come from the query's own class
            let c = if rng.gen_bool(0.5) { class } else { rng.gen_range(0..m.n_classes) };
            let cand = self.latent_near(m, c, rng);
            if cosine(&zq, &cand) < m.hardness_cap {
                break (cand, c);
            }
        };
        Triplet {
            triplet_id: id,
            query: self.product(m, &zq, class, false, rng),
            positive: self.product(m, &zp, class, true, rng),
            negative: self.product(m, &zn.0, zn.1, true, rng),
        }
    }
}

/// Writes `train.jsonl`, `test.jsonl`, `manifest.toml` and `labels.json`
/// into `out_dir`.
pub fn generate_synthetic_dataset(manifest: &DatasetManifest, out_dir: &Path) -> Result<DatasetFiles> {
    manifest.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = DatasetFiles::in_dir(out_dir);
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
    let world = World::new(manifest, &mut rng);
    let train: Vec<Triplet> = (0..manifest.n_train)
        .map(|i| world.triplet(manifest, format!("train-{i:06}"), &mut rng))
        .collect();
    let test: Vec<Triplet> = (0..manifest.n_test)
        .map(|i| world.triplet(manifest, format!("test-{i:06}"), &mut rng))
        .collect();
    write_triplets(&files.train, &train)?;
    write_triplets(&files.test, &test)?;
    std::fs::write(&files.manifest, manifest.to_toml()).map_err(|e| Error::io(&files.manifest, e))?;
    let labels = serde_json::to_string(&world.label_names()).expect("labels serialize");
    std::fs::write(&files.labels, labels).map_err(|e| Error::io(&files.labels, e))?;
    Ok(files)
}

pub fn load_label_names(path: &Path) -> Result<LabelNames> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn write_triplets(path: &Path, triplets: &[Triplet]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in triplets {
        let line = serde_json::to_string(t).expect("triplet serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Streaming reader over a JSONL triplet file, yielding in file order.
pub struct TripletReader {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
    manifest: Option<DatasetManifest>,
}

impl TripletReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            lines: BufReader::new(file).lines(),
            line_no: 0,
            manifest: None,
        })
    }

    /// Also validate every record's dimensions against `manifest`.
    pub fn with_manifest(mut self, manifest: DatasetManifest) -> Self {
        self.manifest = Some(manifest);
        self
    }
}

impl Iterator for TripletReader {
    type Item = Result<Triplet>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Triplet = match serde_json::from_str(&line) {
                Ok(t) => t,
                Err(e) => {
                    return Some(Err(Error::Parse {
                        path: self.path.clone(),
                        line: self.line_no,
                        message: e.to_string(),
                    }))
                }
            };
            if let Err(e) = check_non_empty(&parsed) {
                return Some(Err(Error::Parse {
                    path: self.path.clone(),
                    line: self.line_no,
                    message: e.to_string(),
                }));
            }
            if let Some(m) = &self.manifest {
                if let Err(e) = m.check_triplet(&parsed) {
                    return Some(Err(e));
                }
            }
            return Some(Ok(parsed));
        }
    }
}

fn check_non_empty(t: &Triplet) -> Result<()> {
    for (role, item) in [("query", &t.query), ("positive", &t.positive), ("negative", &t.negative)] {
        if item.title.is_empty() || item.image.is_empty() {
            return Err(Error::validation(format!(
                "triplet {} {role} lacks text or image",
                t.triplet_id
            )));
        }
    }
    Ok(())
}

pub fn load_triplets(path: &Path) -> Result<Vec<Triplet>> {
    let triplets: Vec<Triplet> = TripletReader::open(path)?.collect::<Result<_>>()?;
    let mut seen = HashSet::with_capacity(triplets.len());
    for t in &triplets {
        if !seen.insert(t.triplet_id.as_str()) {
            return Err(Error::validation(format!("duplicate triplet id {}", t.triplet_id)));
        }
    }
    Ok(triplets)
}

fn check_flip_rate(flip_rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&flip_rate) {
        return Err(Error::validation(format!("flip_rate {flip_rate} outside [0, 1)")));
    }
    Ok(())
}

/// Number of triplets flipped for a given rate: `round(flip_rate × n)`,
/// halves rounded away from zero.
pub fn flip_count(flip_rate: f64, n: usize) -> usize {
    (flip_rate * n as f64).round() as usize
}

/// Path of the flipped-id sidecar written next to a noisy dataset.
pub fn sidecar_path(noisy: &Path) -> PathBuf {
    let mut s = noisy.as_os_str().to_owned();
    s.push(".flipped");
    PathBuf::from(s)
}

/// Swaps positive and negative for a seeded `flip_rate` fraction of the
/// triplets in `input`, writing the result to `output` and the flipped ids
/// (in file order, one per line) to [`sidecar_path`]`(output)`.
pub fn inject_label_noise(input: &Path, output: &Path, flip_rate: f64, seed: u64) -> Result<Vec<String>> {
    check_flip_rate(flip_rate)?;
    let mut triplets = load_triplets(input)?;
    let n_flip = flip_count(flip_rate, triplets.len());
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut chosen: Vec<usize> = order.into_iter().take(n_flip).collect();
    chosen.sort_unstable();
    let mut ids = Vec::with_capacity(n_flip);
    for &i in &chosen {
        let t = &mut triplets[i];
        std::mem::swap(&mut t.positive, &mut t.negative);
        ids.push(t.triplet_id.clone());
    }
    write_triplets(output, &triplets)?;
    let sidecar = sidecar_path(output);
    let mut body = ids.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    std::fs::write(&sidecar, body).map_err(|e| Error::io(&sidecar, e))?;
    Ok(ids)
}

pub fn read_sidecar(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_owned).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetManifest {
        DatasetManifest {
            n_train: 100,
            n_test: 20,
            ..DatasetManifest::default()
        }
    }

    #[test]
    fn generation_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let fa = generate_synthetic_dataset(&small(), a.path()).unwrap();
        let fb = generate_synthetic_dataset(&small(), b.path()).unwrap();
        for (x, y) in [(&fa.train, &fb.train), (&fa.test, &fb.test), (&fa.manifest, &fb.manifest)] {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }

    #[test]
    fn positives_are_closer_than_negatives_in_latent_space() {
        let dir = tempfile::tempdir().unwrap();
        let files = generate_synthetic_dataset(&small(), dir.path()).unwrap();
        for t in load_triplets(&files.train).unwrap() {
            let f = |c: &ProductContent| -> Vec<f64> {
                c.latent.as_ref().unwrap().iter().map(|&x| x as f64).collect()
            };
            let (q, p, n) = (f(&t.query), f(&t.positive), f(&t.negative));
            assert!(cosine(&q, &p) > cosine(&q, &n));
            assert!(cosine(&q, &n) < 0.6);
            assert!(t.query.description.is_none() && t.positive.description.is_some());
        }
    }

    #[test]
    fn reload_counts_match_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            n_train: 1000,
            n_test: 200,
            ..DatasetManifest::default()
        };
        let files = generate_synthetic_dataset(&m, dir.path()).unwrap();
        let train = load_triplets(&files.train).unwrap();
        let test = load_triplets(&files.test).unwrap();
        assert_eq!((train.len(), test.len()), (1000, 200));
        let reloaded = DatasetManifest::load(&files.manifest).unwrap();
        assert_eq!(reloaded, m);
        let ids: HashSet<_> = train.iter().chain(&test).map(|t| t.triplet_id.clone()).collect();
        assert_eq!(ids.len(), 1200);
    }

    #[test]
    fn truncated_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let files = generate_synthetic_dataset(&small(), dir.path()).unwrap();
        let text = std::fs::read_to_string(&files.train).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
        let half = lines[4].len() / 2;
        lines[4].truncate(half);
        let broken = dir.path().join("broken.jsonl");
        std::fs::write(&broken, lines.join("\n")).unwrap();
        match load_triplets(&broken) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_dimension_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let files = generate_synthetic_dataset(&small(), dir.path()).unwrap();
        let other = DatasetManifest {
            feature_dim: 31,
            ..small()
        };
        let err = TripletReader::open(&files.train)
            .unwrap()
            .with_manifest(other)
            .next()
            .unwrap()
            .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn write_then_load_is_field_equal() {
        let dir = tempfile::tempdir().unwrap();
        let files = generate_synthetic_dataset(&small(), dir.path()).unwrap();
        let original = load_triplets(&files.test).unwrap();
        let copy = dir.path().join("copy.jsonl");
        write_triplets(&copy, &original).unwrap();
        assert_eq!(load_triplets(&copy).unwrap(), original);
    }

    #[test]
    fn noise_injection_bookkeeping() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            n_train: 1000,
            n_test: 1,
            ..DatasetManifest::default()
        };
        let files = generate_synthetic_dataset(&m, dir.path()).unwrap();
        let zero = dir.path().join("zero.jsonl");
        assert!(inject_label_noise(&files.train, &zero, 0.0, 3).unwrap().is_empty());
        assert_eq!(std::fs::read(&zero).unwrap(), std::fs::read(&files.train).unwrap());

        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        let ids_a = inject_label_noise(&files.train, &a, 0.2, 3).unwrap();
        let ids_b = inject_label_noise(&files.train, &b, 0.2, 3).unwrap();
        assert_eq!(ids_a.len(), 200);
        assert_eq!(ids_a, ids_b);
        assert_eq!(read_sidecar(&sidecar_path(&a)).unwrap(), ids_a);

        // swapping the recorded ids back restores the clean file
        let flipped: HashSet<String> = ids_a.into_iter().collect();
        let mut restored = load_triplets(&a).unwrap();
        for t in restored.iter_mut().filter(|t| flipped.contains(&t.triplet_id)) {
            std::mem::swap(&mut t.positive, &mut t.negative);
        }
        let back = dir.path().join("back.jsonl");
        write_triplets(&back, &restored).unwrap();
        assert_eq!(std::fs::read(&back).unwrap(), std::fs::read(&files.train).unwrap());
    }

    #[test]
    fn flip_rate_out_of_range_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let files = generate_synthetic_dataset(&small(), dir.path()).unwrap();
        let out = dir.path().join("x.jsonl");
        for bad in [1.0, -0.1, 1.5] {
            assert!(matches!(
                inject_label_noise(&files.train, &out, bad, 1),
                Err(Error::Validation(_))
            ));
        }
    }

    #[test]
    fn word_round_trip() {
        assert_eq!(word_token(&token_word(417)), Some(417));
        assert_eq!(word_token("knit"), None);
    }
}
