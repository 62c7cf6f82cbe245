//! Zero-shot evaluation: exhaustive embedding index, Recall@k over the five
//! retrieval directions, label-name classification, attention heatmaps and
//! report tables.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{token_word, LabelNames, ModalityComposition, ProductContent, Triplet};
use crate::encoder::{EncodeInput, Encoder, TokenType};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RetrievalTask {
    pub query: ModalityComposition,
    pub candidate: ModalityComposition,
}

impl RetrievalTask {
    /// t→mm, i→mm, mm→mm, t→i, i→t.
    pub const STANDARD: [RetrievalTask; 5] = {
        use ModalityComposition::{ImageOnly as I, Multimodal as MM, TextOnly as T};
        [
            RetrievalTask { query: T, candidate: MM },
            RetrievalTask { query: I, candidate: MM },
            RetrievalTask { query: MM, candidate: MM },
            RetrievalTask { query: T, candidate: I },
            RetrievalTask { query: I, candidate: T },
        ]
    };

    pub fn name(&self) -> String {
        format!("{}2{}", self.query.short(), self.candidate.short())
    }

    /// Parses names like `t2mm`.
    pub fn parse(s: &str) -> Result<Self> {
        let (q, c) = s
            .split_once('2')
            .ok_or_else(|| Error::validation(format!("task `{s}` is not of the form <query>2<candidate>")))?;
        Ok(Self {
            query: ModalityComposition::parse(q)?,
            candidate: ModalityComposition::parse(c)?,
        })
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',').map(|t| Self::parse(t.trim())).collect()
    }
}

/// Exhaustive index of unit-norm embeddings keyed by candidate id.
#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    pub ids: Vec<String>,
    pub vectors: Mat,
}

fn normalize_rows(mut m: Mat) -> Mat {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    m
}

fn check_modality(id: &str, c: &ProductContent, m: ModalityComposition) -> Result<()> {
    if m != ModalityComposition::ImageOnly && c.title.is_empty() {
        return Err(Error::validation(format!("item `{id}` has no title for {} encoding", m.short())));
    }
    if m != ModalityComposition::TextOnly && c.image.is_empty() {
        return Err(Error::validation(format!("item `{id}` has no image for {} encoding", m.short())));
    }
    Ok(())
}

/// Encodes `items` under `modality`, returning unit-norm rows in item order.
pub fn embed(
    encoder: &Encoder,
    items: &[(String, &ProductContent)],
    modality: ModalityComposition,
    exec: Exec,
) -> Result<Mat> {
    for (id, c) in items {
        check_modality(id, c, modality)?;
    }
    let inputs: Vec<EncodeInput> = items.iter().map(|(_, c)| EncodeInput::new(c, modality)).collect();
    Ok(normalize_rows(encoder.encode_batch(&inputs, exec)?))
}

impl Index {
    pub fn from_vectors(ids: Vec<String>, vectors: Mat) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::validation("cannot build an index over zero candidates"));
        }
        if ids.len() != vectors.nrows() {
            return Err(Error::validation("index ids and vectors differ in count"));
        }
        Ok(Self {
            ids,
            vectors: normalize_rows(vectors),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// 0-based rank of candidate `target` for query vector `q`: the number of
    /// candidates scoring higher, or equal with a smaller id.
    pub fn rank_of(&self, q: ndarray::ArrayView1<f64>, target: usize) -> usize {
        let scores = self.vectors.dot(&q);
        let st = scores[target];
        let tid = &self.ids[target];
        scores
            .iter()
            .zip(&self.ids)
            .filter(|(&s, id)| s > st || (s == st && *id < tid))
            .count()
    }

    /// Candidate ids ordered by score, ties by id.
    pub fn search(&self, q: ndarray::ArrayView1<f64>, k: usize) -> Vec<(String, f64)> {
        let scores = self.vectors.dot(&q);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| self.ids[a].cmp(&self.ids[b])));
        order
            .into_iter()
            .take(k)
            .map(|i| (self.ids[i].clone(), scores[i]))
            .collect()
    }
}

pub fn build_index(
    encoder: &Encoder,
    candidates: &[(String, &ProductContent)],
    modality: ModalityComposition,
    exec: Exec,
) -> Result<Index> {
    if candidates.is_empty() {
        return Err(Error::validation("cannot build an index over zero candidates"));
    }
    let vectors = embed(encoder, candidates, modality, exec)?;
    Index::from_vectors(candidates.iter().map(|(id, _)| id.clone()).collect(), vectors)
}

/// Recall@k for each entry of `ks`: the fraction of queries whose ground
/// truth ranks inside the top k.
pub fn recall_at_k(
    query_ids: &[String],
    queries: &Mat,
    ground_truth: &HashMap<String, String>,
    index: &Index,
    ks: &[usize],
    exec: Exec,
) -> Result<Vec<f64>> {
    if query_ids.len() != queries.nrows() {
        return Err(Error::validation("query ids and vectors differ in count"));
    }
    if query_ids.is_empty() {
        return Err(Error::validation("no queries"));
    }
    let positions = HashMap::<&str, usize>::from_iter(index.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)));
    let targets = query_ids
        .iter()
        .map(|q| {
            let gt = ground_truth
                .get(q)
                .ok_or_else(|| Error::validation(format!("query `{q}` has no ground truth")))?;
            positions
                .get(gt.as_str())
                .copied()
                .ok_or_else(|| Error::validation(format!("ground truth `{gt}` of query `{q}` is not indexed")))
        })
        .collect::<Result<Vec<usize>>>()?;
    let queries = normalize_rows(queries.clone());
    let ranks = exec.map_range(query_ids.len(), |i| index.rank_of(queries.row(i), targets[i]));
    let n = ranks.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / n)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
}

impl TaskResult {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }
}

pub fn positive_id(t: &Triplet) -> String {
    format!("{}/pos", t.triplet_id)
}

pub fn negative_id(t: &Triplet) -> String {
    format!("{}/neg", t.triplet_id)
}

/// Runs retrieval tasks over a test split: each query retrieves among all
/// positives and negatives of the split, its own positive being the target.
pub fn evaluate_retrieval(
    encoder: &Encoder,
    test: &[Triplet],
    tasks: &[RetrievalTask],
    ks: &[usize],
    exec: Exec,
) -> Result<Vec<TaskResult>> {
    let query_items: Vec<(String, &ProductContent)> =
        test.iter().map(|t| (t.triplet_id.clone(), &t.query)).collect();
    let candidates: Vec<(String, &ProductContent)> = test
        .iter()
        .flat_map(|t| [(positive_id(t), &t.positive), (negative_id(t), &t.negative)])
        .collect();
    let gt: HashMap<String, String> = test.iter().map(|t| (t.triplet_id.clone(), positive_id(t))).collect();
    let query_ids: Vec<String> = query_items.iter().map(|(id, _)| id.clone()).collect();
    let mut query_cache: BTreeMap<&str, Mat> = BTreeMap::new();
    let mut index_cache: BTreeMap<&str, Index> = BTreeMap::new();
    let mut out = Vec::with_capacity(tasks.len());
    for task in tasks {
        if !query_cache.contains_key(task.query.short()) {
            query_cache.insert(task.query.short(), embed(encoder, &query_items, task.query, exec)?);
        }
        if !index_cache.contains_key(task.candidate.short()) {
            index_cache.insert(task.candidate.short(), build_index(encoder, &candidates, task.candidate, exec)?);
        }
        let recall = recall_at_k(
            &query_ids,
            &query_cache[task.query.short()],
            &gt,
            &index_cache[task.candidate.short()],
            ks,
            exec,
        )?;
        out.push(TaskResult {
            task: task.name(),
            ks: ks.to_vec(),
            recall,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn macro_metrics(n_labels: usize, truth: &[Vec<u32>], predicted: &[Vec<u32>]) -> (f64, f64, f64) {
    let mut tp = vec![0usize; n_labels];
    let mut fp = vec![0usize; n_labels];
    let mut fneg = vec![0usize; n_labels];
    for (t, p) in truth.iter().zip(predicted) {
        for &l in p {
            if t.contains(&l) {
                tp[l as usize] += 1;
            } else {
                fp[l as usize] += 1;
            }
        }
        for &l in t {
            if !p.contains(&l) {
                fneg[l as usize] += 1;
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut ps, mut rs, mut fs) = (0.0, 0.0, 0.0);
    for l in 0..n_labels {
        let p = ratio(tp[l], tp[l] + fp[l]);
        let r = ratio(tp[l], tp[l] + fneg[l]);
        ps += p;
        rs += r;
        fs += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    let n = n_labels as f64;
    (ps / n, rs / n, fs / n)
}

/// Labels ordered by similarity to `v`, ties by label id.
fn ranked_labels(labels: &Mat, v: ndarray::ArrayView1<f64>) -> Vec<u32> {
    let scores = labels.dot(&v);
    let mut order: Vec<u32> = (0..labels.nrows() as u32).collect();
    order.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b)));
    order
}

fn check_labels(n_labels: usize, truth: &[Vec<u32>]) -> Result<()> {
    if n_labels == 0 {
        return Err(Error::validation("label set is empty"));
    }
    if let Some(bad) = truth.iter().flatten().find(|&&l| l as usize >= n_labels) {
        return Err(Error::validation(format!("ground-truth label {bad} is outside the {n_labels} known labels")));
    }
    Ok(())
}

/// Single-label classification by nearest label embedding.
pub fn classify_vectors(items: &Mat, labels: &Mat, truth: &[u32]) -> Result<ClassificationMetrics> {
    let truth: Vec<Vec<u32>> = truth.iter().map(|&t| vec![t]).collect();
    check_labels(labels.nrows(), &truth)?;
    let (items, labels) = (normalize_rows(items.clone()), normalize_rows(labels.clone()));
    let predicted: Vec<Vec<u32>> = items.rows().into_iter().map(|r| vec![ranked_labels(&labels, r)[0]]).collect();
    let correct = truth.iter().zip(&predicted).filter(|(t, p)| t == p).count();
    let (precision, recall, f1) = macro_metrics(labels.nrows(), &truth, &predicted);
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / truth.len().max(1) as f64,
        precision,
        recall,
        f1,
    })
}

/// Multi-label prediction: each item takes its top-r labels, r being the
/// size of its ground-truth set. Accuracy is the exact-set match rate.
pub fn predict_attributes(items: &Mat, labels: &Mat, truth: &[Vec<u32>]) -> Result<ClassificationMetrics> {
    check_labels(labels.nrows(), truth)?;
    let (items, labels) = (normalize_rows(items.clone()), normalize_rows(labels.clone()));
    let predicted: Vec<Vec<u32>> = items
        .rows()
        .into_iter()
        .zip(truth)
        .map(|(r, t)| ranked_labels(&labels, r).into_iter().take(t.len()).collect())
        .collect();
    let exact = truth
        .iter()
        .zip(&predicted)
        .filter(|(t, p)| {
            let mut a = (*t).clone();
            let mut b = (*p).clone();
            a.sort_unstable();
            b.sort_unstable();
            a == b
        })
        .count();
    let (precision, recall, f1) = macro_metrics(labels.nrows(), truth, &predicted);
    Ok(ClassificationMetrics {
        accuracy: exact as f64 / truth.len().max(1) as f64,
        precision,
        recall,
        f1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotResult {
    pub category: ClassificationMetrics,
    pub attributes: Option<ClassificationMetrics>,
    pub n_classes: usize,
}

fn label_content(tokens: &[u32]) -> ProductContent {
    ProductContent {
        title: tokens.to_vec(),
        enriched_title: None,
        description: None,
        image: Vec::new(),
        aug_images: Vec::new(),
        category_label: None,
        attribute_labels: None,
        latent: None,
    }
}

/// Encodes every label name as text and assigns each item (encoded under
/// `modality`) to its nearest labels.
pub fn classify_zero_shot(
    encoder: &Encoder,
    items: &[&ProductContent],
    modality: ModalityComposition,
    labels: &LabelNames,
    exec: Exec,
) -> Result<ZeroShotResult> {
    let embed_labels = |names: &[Vec<u32>]| -> Result<Mat> {
        let contents: Vec<ProductContent> = names.iter().map(|n| label_content(n)).collect();
        let keyed: Vec<(String, &ProductContent)> =
            contents.iter().enumerate().map(|(i, c)| (format!("label-{i}"), c)).collect();
        embed(encoder, &keyed, ModalityComposition::TextOnly, exec)
    };
    let keyed: Vec<(String, &ProductContent)> =
        items.iter().enumerate().map(|(i, c)| (format!("item-{i}"), *c)).collect();
    let vectors = embed(encoder, &keyed, modality, exec)?;
    let class_truth = items
        .iter()
        .enumerate()
        .map(|(i, c)| {
            c.category_label
                .ok_or_else(|| Error::validation(format!("item {i} has no category label")))
        })
        .collect::<Result<Vec<u32>>>()?;
    let category = classify_vectors(&vectors, &embed_labels(&labels.classes)?, &class_truth)?;
    let attributes = if labels.attributes.is_empty() || items.iter().any(|c| c.attribute_labels.is_none()) {
        None
    } else {
        let truth: Vec<Vec<u32>> = items.iter().map(|c| c.attribute_labels.clone().unwrap_or_default()).collect();
        Some(predict_attributes(&vectors, &embed_labels(&labels.attributes)?, &truth)?)
    };
    Ok(ZeroShotResult {
        category,
        attributes,
        n_classes: labels.classes.len(),
    })
}

/// Last-layer attention averaged over heads, with a label per position.
pub struct Heatmap {
    pub labels: Vec<String>,
    pub grid: Mat,
}

pub fn heatmap(encoder: &Encoder, content: &ProductContent, modality: ModalityComposition) -> Result<Heatmap> {
    let maps = encoder.attention_weights(content, modality)?;
    let last = maps
        .last()
        .ok_or_else(|| Error::validation("encoder has no attention layers"))?;
    let mut grid = Mat::zeros(last[0].dim());
    for h in last {
        grid += h;
    }
    grid /= last.len() as f64;
    let layout = encoder.token_layout(content, modality)?;
    Ok(Heatmap {
        labels: token_labels(&layout, content, encoder.config.text_len, encoder.config.visual_tokens),
        grid,
    })
}

fn token_labels(layout: &[TokenType], content: &ProductContent, text_len: usize, visual: usize) -> Vec<String> {
    let mut seen = [0usize; 5];
    layout
        .iter()
        .map(|&t| {
            let j = seen[t as usize];
            seen[t as usize] += 1;
            let word = |ids: &[u32], j: usize| ids.get(j).map_or_else(|| "<pad>".to_owned(), |&id| token_word(id));
            match t {
                TokenType::Title => word(&content.title, j % text_len),
                TokenType::Enriched => word(content.enriched_title.as_deref().unwrap_or(&[]), j % text_len),
                TokenType::Image => format!("img.p{}", j % visual),
                TokenType::AugImage => format!("aug{}.p{}", j / visual, j % visual),
                TokenType::Prompt => format!("prompt{j}"),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct HeatmapFiles {
    pub csv: PathBuf,
    pub pgm: PathBuf,
}

/// Writes `<stem>.csv` (labelled grid) and `<stem>.pgm` (8-bit grayscale,
/// scaled to the grid maximum).
pub fn export_heatmap(
    encoder: &Encoder,
    content: &ProductContent,
    modality: ModalityComposition,
    out_stem: &Path,
) -> Result<HeatmapFiles> {
    let hm = heatmap(encoder, content, modality)?;
    let csv = out_stem.with_extension("csv");
    let pgm = out_stem.with_extension("pgm");
    if let Some(dir) = csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = String::from("token");
    for l in &hm.labels {
        let _ = write!(text, ",{l}");
    }
    text.push('\n');
    for (l, row) in hm.labels.iter().zip(hm.grid.rows()) {
        text.push_str(l);
        for v in row {
            let _ = write!(text, ",{v:.8}");
        }
        text.push('\n');
    }
    std::fs::write(&csv, text).map_err(|e| Error::io(&csv, e))?;
    let (rows, cols) = hm.grid.dim();
    let max = hm.grid.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend(hm.grid.iter().map(|v| (v / max * 255.0).round().clamp(0.0, 255.0) as u8));
    std::fs::write(&pgm, bytes).map_err(|e| Error::io(&pgm, e))?;
    Ok(HeatmapFiles { csv, pgm })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seed: u64,
    pub retrieval: Vec<TaskResult>,
    #[serde(default)]
    pub zero_shot: Option<ZeroShotResult>,
    pub runtime_secs: f64,
}

impl MetricsReport {
    pub fn task(&self, name: &str) -> Option<&TaskResult> {
        self.retrieval.iter().find(|t| t.task == name)
    }

    pub fn recall(&self, task: &str, k: usize) -> Option<f64> {
        self.task(task)?.at(k)
    }

    /// Long-form CSV: one metric per row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("config_hash,seed,section,name,metric,value\n");
        let mut row = |section: &str, name: &str, metric: &str, v: f64| {
            let _ = writeln!(s, "{},{},{section},{name},{metric},{v:.6}", self.config_hash, self.seed);
        };
        for t in &self.retrieval {
            for (k, r) in t.ks.iter().zip(&t.recall) {
                row("retrieval", &t.task, &format!("R@{k}"), *r);
            }
        }
        if let Some(z) = &self.zero_shot {
            let mut put = |name: &str, m: &ClassificationMetrics| {
                row("classification", name, "accuracy", m.accuracy);
                row("classification", name, "precision", m.precision);
                row("classification", name, "recall", m.recall);
                row("classification", name, "f1", m.f1);
            };
            put("category", &z.category);
            if let Some(a) = &z.attributes {
                put("attribute", a);
            }
        }
        row("run", "eval", "runtime_secs", self.runtime_secs);
        s
    }

    /// Aligned plain-text tables.
    pub fn to_text(&self) -> String {
        let mut s = format!("config hash: {}\nseed: {}\n\n", self.config_hash, self.seed);
        let mut ks: Vec<usize> = self.retrieval.iter().flat_map(|t| t.ks.iter().copied()).collect();
        ks.sort_unstable();
        ks.dedup();
        if !self.retrieval.is_empty() {
            let _ = write!(s, "{:<8}", "task");
            for k in &ks {
                let _ = write!(s, "{:>9}", format!("R@{k}"));
            }
            s.push('\n');
            for t in &self.retrieval {
                let _ = write!(s, "{:<8}", t.task);
                for &k in &ks {
                    match t.at(k) {
                        Some(r) => {
                            let _ = write!(s, "{:>9.4}", r);
                        }
                        None => {
                            let _ = write!(s, "{:>9}", "-");
                        }
                    }
                }
                s.push('\n');
            }
            s.push('\n');
        }
        if let Some(z) = &self.zero_shot {
            let _ = writeln!(s, "{:<10}{:>10}{:>11}{:>9}{:>9}", "labels", "accuracy", "precision", "recall", "f1");
            let mut put = |name: &str, m: &ClassificationMetrics| {
                let _ = writeln!(
                    s,
                    "{:<10}{:>10.4}{:>11.4}{:>9.4}{:>9.4}",
                    name, m.accuracy, m.precision, m.recall, m.f1
                );
            };
            put("category", &z.category);
            if let Some(a) = &z.attributes {
                put("attribute", a);
            }
            s.push('\n');
        }
        let _ = writeln!(s, "runtime: {:.3}s", self.runtime_secs);
        s
    }
}

#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub text: PathBuf,
    pub csv: PathBuf,
    pub json: PathBuf,
}

/// Writes `report.txt`, `report.csv` and the raw `results.json` into `out_dir`.
pub fn write_report(report: &MetricsReport, out_dir: &Path) -> Result<ReportFiles> {
    if report.retrieval.is_empty() && report.zero_shot.is_none() {
        return Err(Error::validation("report needs at least one result"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = ReportFiles {
        text: out_dir.join("report.txt"),
        csv: out_dir.join("report.csv"),
        json: out_dir.join("results.json"),
    };
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    for (path, body) in [(&files.text, report.to_text()), (&files.csv, report.to_csv()), (&files.json, json)] {
        std::fs::write(path, body).map_err(|e| Error::io(path, e))?;
    }
    Ok(files)
}

/// Re-reads a `results.json` written by [`write_report`].
pub fn load_results(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i:04}")).collect()
    }

    fn brute_force(queries: &Mat, cands: &Mat, gt: &[usize], ids: &[String], k: usize) -> f64 {
        let q = normalize_rows(queries.clone());
        let c = normalize_rows(cands.clone());
        let mut hits = 0;
        for (i, row) in q.rows().into_iter().enumerate() {
            let mut scored: Vec<(f64, &String, usize)> =
                c.rows().into_iter().enumerate().map(|(j, r)| (row.dot(&r), &ids[j], j)).collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
            if scored.iter().take(k).any(|s| s.2 == gt[i]) {
                hits += 1;
            }
        }
        hits as f64 / q.nrows() as f64
    }

    #[test]
    fn exact_match_and_vacuous_cutoff() {
        let c = random_mat(20, 5, 1);
        let cid = ids("c", 20);
        let qid = ids("q", 20);
        let gt: HashMap<_, _> = qid.iter().cloned().zip(cid.iter().cloned()).collect();
        let index = Index::from_vectors(cid, c.clone()).unwrap();
        let r = recall_at_k(&qid, &c, &gt, &index, &[1, 20, 50], Exec::Sequential).unwrap();
        assert_eq!(r, vec![1.0, 1.0, 1.0]);
        let r = recall_at_k(&qid, &random_mat(20, 5, 2), &gt, &index, &[20], Exec::Sequential).unwrap();
        assert_eq!(r, vec![1.0]);
    }

    #[test]
    fn random_recall_matches_brute_force() {
        let q = random_mat(100, 8, 3);
        let c = random_mat(100, 8, 4);
        let cid = ids("c", 100);
        let qid = ids("q", 100);
        let gt_idx: Vec<usize> = (0..100).collect();
        let gt: HashMap<_, _> = qid.iter().cloned().zip(cid.iter().cloned()).collect();
        let index = Index::from_vectors(cid.clone(), c.clone()).unwrap();
        let ks = [1, 5, 10];
        let r = recall_at_k(&qid, &q, &gt, &index, &ks, Exec::Parallel).unwrap();
        for (i, &k) in ks.iter().enumerate() {
            assert_eq!(r[i], brute_force(&q, &c, &gt_idx, &cid, k));
        }
        assert!(r[0] < 0.06);
        assert!(r.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn ties_break_by_candidate_id() {
        let mut c = Mat::zeros((3, 2));
        c.row_mut(0).assign(&ndarray::arr1(&[1.0, 0.0]));
        c.row_mut(1).assign(&ndarray::arr1(&[1.0, 0.0]));
        c.row_mut(2).assign(&ndarray::arr1(&[0.0, 1.0]));
        let index = Index::from_vectors(vec!["b".into(), "a".into(), "c".into()], c).unwrap();
        let q = ndarray::arr2(&[[1.0, 0.0]]);
        assert_eq!(index.rank_of(q.row(0), 1), 0);
        assert_eq!(index.rank_of(q.row(0), 0), 1);
        let hits: Vec<String> = index.search(q.row(0), 2).into_iter().map(|h| h.0).collect();
        assert_eq!(hits, vec!["a", "b"]);
        let gt = HashMap::from([("q".to_string(), "b".to_string())]);
        let a = recall_at_k(&["q".into()], &q, &gt, &index, &[1, 2], Exec::Sequential).unwrap();
        let b = recall_at_k(&["q".into()], &q, &gt, &index, &[1, 2], Exec::Sequential).unwrap();
        assert_eq!(a, vec![0.0, 1.0]);
        assert_eq!(a, b);
    }

    #[test]
    fn index_errors() {
        assert!(Index::from_vectors(vec![], Mat::zeros((0, 3))).is_err());
        let index = Index::from_vectors(ids("c", 2), random_mat(2, 3, 1)).unwrap();
        let err = recall_at_k(&["q".into()], &random_mat(1, 3, 2), &HashMap::new(), &index, &[1], Exec::Sequential);
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn classification_metrics() {
        let labels = random_mat(3, 4, 9);
        let items = ndarray::concatenate(ndarray::Axis(0), &[labels.view(), labels.view()]).unwrap();
        let m = classify_vectors(&items, &labels, &[0, 1, 2, 0, 1, 2]).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
        // identical label embeddings: everything goes to label 0
        let same = ndarray::concatenate(ndarray::Axis(0), &[labels.row(0).insert_axis(ndarray::Axis(0)); 2]).unwrap();
        let m = classify_vectors(&items.slice(ndarray::s![..2, ..]).to_owned(), &same, &[0, 1]).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert!((m.precision - 0.25).abs() < 1e-12);
        assert!((m.recall - 0.5).abs() < 1e-12);
        assert!(classify_vectors(&items, &labels, &[0, 1, 2, 0, 1, 7]).is_err());
        let attrs = predict_attributes(&labels, &labels, &[vec![0], vec![1], vec![]]).unwrap();
        assert_eq!(attrs.accuracy, 1.0);
    }

    #[test]
    fn task_names_round_trip() {
        let names: Vec<String> = RetrievalTask::STANDARD.iter().map(|t| t.name()).collect();
        assert_eq!(names, ["t2mm", "i2mm", "mm2mm", "t2i", "i2t"]);
        assert_eq!(RetrievalTask::parse_list("t2mm,i2t").unwrap().len(), 2);
        assert!(RetrievalTask::parse("x2mm").is_err());
    }

    fn sample_report() -> MetricsReport {
        MetricsReport {
            config_hash: "abc".into(),
            seed: 3,
            retrieval: RetrievalTask::STANDARD
                .iter()
                .map(|t| TaskResult {
                    task: t.name(),
                    ks: vec![1, 5, 10],
                    recall: vec![0.1, 0.3, 0.5],
                })
                .collect(),
            zero_shot: None,
            runtime_secs: 1.5,
        }
    }

    #[test]
    fn report_cells_and_regeneration() {
        let dir = tempfile::tempdir().unwrap();
        let files = write_report(&sample_report(), dir.path()).unwrap();
        let csv = std::fs::read_to_string(&files.csv).unwrap();
        assert_eq!(csv.lines().filter(|l| l.contains(",retrieval,")).count(), 15);
        let again = load_results(&files.json).unwrap();
        let other = tempfile::tempdir().unwrap();
        let files2 = write_report(&again, other.path()).unwrap();
        assert_eq!(std::fs::read(&files.csv).unwrap(), std::fs::read(&files2.csv).unwrap());
        assert_eq!(std::fs::read(&files.text).unwrap(), std::fs::read(&files2.text).unwrap());

        let one = MetricsReport {
            retrieval: vec![TaskResult {
                task: "t2mm".into(),
                ks: vec![1],
                recall: vec![0.5],
            }],
            ..sample_report()
        };
        assert_eq!(one.to_csv().lines().filter(|l| l.contains(",retrieval,")).count(), 1);
        let empty = MetricsReport {
            retrieval: vec![],
            ..sample_report()
        };
        assert!(write_report(&empty, dir.path()).is_err());
    }
}
