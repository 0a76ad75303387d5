//! Failure detection and failure-cause taxonomy: keyword extraction, fuzzy
//! merging, dendrogram-based K selection, K-means and cluster labelling.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collision::{collision_radius, first_contact};
use crate::error::{Error, Result};
use crate::forge::lexicon::{self, Category, LEXICON};
use crate::planner::{overlay_outputs, run_planner, PlannerModel, PlannerOutput};
use crate::scene::{Archetype, BevScene, Dataset, ObjectClass, SceneRaster, SceneTags};

pub const EMBED_DIM: usize = 64;
pub const MERGE_THRESHOLD: f64 = 0.8;
const ANCHOR_SHARE: f64 = 0.45;

/// What an analyzer may know about a failure besides the overlay itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureContext {
    pub archetype: Option<Archetype>,
    pub tags: SceneTags,
    pub collider_class: ObjectClass,
    pub collider_caption: String,
    pub collision_time: usize,
    /// Distance from the contact point to the nearest lane edge or crossing, meters.
    pub edge_clearance: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub scene_id: String,
    pub collision_time: usize,
    pub collider: f32,
    pub context: FailureContext,
    pub overlay: SceneRaster,
    pub output: PlannerOutput,
}

/// Scenes whose plan comes within the inflated threshold of an object at
/// some timestep in `1..=t_e2e`; the earliest contact is recorded.
pub fn detect_failures(model: &dyn PlannerModel, dataset: &Dataset, epsilon: f64, t_e2e: usize) -> Result<Vec<FailureRecord>> {
    let mut out = Vec::new();
    for s in &dataset.scenes {
        let output = run_planner(model, s)?;
        let n = t_e2e.min(output.plan.len());
        let Some(c) = first_contact(s, epsilon, 1..=n, |t| output.plan.poses[t - 1]) else {
            continue;
        };
        let o = &s.objects[c.object_index];
        let (e, p) = (output.plan.poses[c.timestep - 1], o.trajectory.at(c.timestep));
        let (mx, my) = ((e.x as f64 + p.x as f64) / 2.0, (e.y as f64 + p.y as f64) / 2.0);
        let context = FailureContext {
            archetype: Some(s.archetype),
            tags: s.tags,
            collider_class: o.class,
            collider_caption: o.dense_caption.clone(),
            collision_time: c.timestep,
            edge_clearance: s.map.edge_clearance(mx, my).min(1e3) as f32,
        };
        let raster = model.config().raster_for(s)?;
        let overlay = overlay_outputs(&raster, &output, s, &model.config().view);
        out.push(FailureRecord { scene_id: s.id.clone(), collision_time: c.timestep, collider: c.instance_id, context, overlay, output });
    }
    Ok(out)
}

/// Reference oracle: every timestep against every object, minimum over time
/// then object index.
pub fn brute_force_failures(plans: &[(&BevScene, &crate::scene::Trajectory)], epsilon: f64, t_e2e: usize) -> Vec<(String, usize, f32)> {
    let mut out = Vec::new();
    for (s, plan) in plans {
        let mut best: Option<(usize, usize)> = None;
        for (j, o) in s.objects.iter().enumerate() {
            for t in 1..=t_e2e.min(plan.len()) {
                let d = plan.poses[t - 1].distance(&o.trajectory.at(t));
                if d < collision_radius(epsilon, &o.footprint) && best.is_none_or(|b| (t, j) < b) {
                    best = Some((t, j));
                }
            }
        }
        if let Some((t, j)) = best {
            out.push((s.id.clone(), t, s.objects[j].instance_id));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CauseAnnotation {
    pub scene_id: String,
    pub descriptions: Vec<String>,
    /// Reference cause category, when known.
    #[serde(default)]
    pub category: Option<Category>,
    #[serde(default)]
    pub context: Option<FailureContext>,
}

/// Keyword extraction backend (mock lexicon or a live language model).
pub trait Extractor {
    fn extract(&self, text: &str) -> Result<BTreeSet<String>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MockExtractor;

impl Extractor for MockExtractor {
    fn extract(&self, text: &str) -> Result<BTreeSet<String>> {
        Ok(lexicon::extract(text, None))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Keywords {
    pub keywords: BTreeSet<String>,
    /// Set when no keyword could be extracted.
    pub flagged: bool,
}

pub fn extract_keywords(annotation: &CauseAnnotation, extractor: &dyn Extractor) -> Result<Keywords> {
    let mut keywords = BTreeSet::new();
    for d in &annotation.descriptions {
        keywords.extend(extractor.extract(d)?.into_iter().map(|k| k.to_lowercase()));
    }
    Ok(Keywords { flagged: keywords.is_empty(), keywords })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordEmbedding {
    pub keyword: String,
    pub vector: Vec<f64>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Signed hashed bigrams and trigrams of `#word#`, unit norm.
pub fn ngram_vector(word: &str) -> Vec<f64> {
    let chars: Vec<char> = format!("#{word}#").chars().collect();
    let mut v = vec![0.0; EMBED_DIM];
    for n in [2, 3] {
        for w in chars.windows(n) {
            let h = fnv1a(w.iter().collect::<String>().as_bytes());
            let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
            v[(h % EMBED_DIM as u64) as usize] += sign;
        }
    }
    normalize(&mut v);
    v
}

/// Orthonormal anchors, one per cause category.
fn anchors() -> [Vec<f64>; 3] {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for c in Category::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(c.label().as_bytes()));
        let mut v: Vec<f64> = (0..EMBED_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        normalize(&mut v);
        out.push(v);
    }
    out.try_into().unwrap()
}

/// Category of a keyword or any of the lexicon's surface forms.
pub fn surface_category(word: &str) -> Option<Category> {
    let spaced = word.replace('_', " ");
    LEXICON
        .iter()
        .find(|e| e.keyword == word || e.surfaces.iter().any(|s| *s == word || *s == spaced))
        .map(|e| e.category)
}

/// Deterministic embedding: character n-grams blended with a category anchor
/// for lexicon words, so words of one cause category sit closer together.
pub fn embed(word: &str) -> KeywordEmbedding {
    let mut v = ngram_vector(word);
    if let Some(c) = surface_category(word) {
        let a = &anchors()[Category::ALL.iter().position(|x| *x == c).unwrap()];
        let (wa, wn) = (ANCHOR_SHARE.sqrt(), (1.0 - ANCHOR_SHARE).sqrt());
        v.iter_mut().zip(a).for_each(|(x, y)| *x = wn * *x + wa * y);
        normalize(&mut v);
    }
    KeywordEmbedding { keyword: word.to_string(), vector: v }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedKeywords {
    /// Canonical keywords with summed frequencies, sorted by keyword.
    pub canonical: BTreeMap<String, usize>,
    /// Every input keyword to its canonical form.
    pub aliases: BTreeMap<String, String>,
}

/// Single-link merge of keywords within `threshold`; each group is named by
/// its most frequent member (ties: lexicographically smallest).
pub fn fuzzy_merge(
    frequencies: &BTreeMap<String, usize>,
    embeddings: &BTreeMap<String, Vec<f64>>,
    threshold: f64,
) -> Result<MergedKeywords> {
    let words: Vec<&String> = frequencies.keys().collect();
    let vecs = words
        .iter()
        .map(|w| embeddings.get(*w).ok_or_else(|| Error::invalid(format!("no embedding for keyword `{w}`"))))
        .collect::<Result<Vec<_>>>()?;
    let n = words.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        p[i] = r;
        r
    }
    for i in 0..n {
        for j in i + 1..n {
            if euclidean(vecs[i], vecs[j]) <= threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut out = MergedKeywords { canonical: BTreeMap::new(), aliases: BTreeMap::new() };
    for members in groups.values() {
        let head = *members
            .iter()
            .max_by(|&&a, &&b| frequencies[words[a]].cmp(&frequencies[words[b]]).then(words[b].cmp(words[a])))
            .unwrap();
        let total: usize = members.iter().map(|&m| frequencies[words[m]]).sum();
        out.canonical.insert(words[head].clone(), total);
        for &m in members {
            out.aliases.insert(words[m].clone(), words[head].clone());
        }
    }
    Ok(out)
}

/// Merge heights of average-linkage agglomerative clustering, ascending.
pub fn average_linkage_heights(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let dist: Vec<Vec<f64>> = points.iter().map(|a| points.iter().map(|b| euclidean(a, b)).collect()).collect();
    let mut heights = Vec::with_capacity(n.saturating_sub(1));
    while clusters.len() > 1 {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let s: f64 = clusters[i].iter().flat_map(|&a| clusters[j].iter().map(move |&b| (a, b))).map(|(a, b)| dist[a][b]).sum();
                let d = s / (clusters[i].len() * clusters[j].len()) as f64;
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        let merged = clusters.remove(best.2);
        clusters[best.1].extend(merged);
        heights.push(best.0);
    }
    heights
}

/// K at the largest relative gap between consecutive merge heights; ties
/// prefer the smaller K. Fewer than 3 points gives K = count.
pub fn select_k(points: &[Vec<f64>]) -> usize {
    let n = points.len();
    if n < 3 {
        return n;
    }
    let h = average_linkage_heights(points);
    let mut best = (0.0f64, 1usize);
    for i in 0..h.len() - 1 {
        let gap = if h[i] > 1e-12 { (h[i + 1] - h[i]) / h[i] } else if h[i + 1] > 1e-12 { f64::INFINITY } else { 0.0 };
        // Cutting between merge i and i+1 leaves n - 1 - i clusters.
        let k = n - 1 - i;
        if gap > best.0 || (gap == best.0 && gap > 0.0 && k < best.1) {
            best = (gap, k);
        }
    }
    best.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmeansResult {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Objective after each assignment step.
    pub objective: Vec<f64>,
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq(p, c);
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

/// Lloyd iterations from explicit initial centroids.
pub fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> KmeansResult {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut objective = Vec::new();
    for _ in 0..200 {
        objective.push(points.iter().zip(&assignment).map(|(p, &a)| sq(p, &centroids[a])).sum());
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an empty cluster at the point worst served by its centroid.
                let far = (0..points.len())
                    .max_by(|&i, &j| sq(&points[i], &centroids[assignment[i]]).total_cmp(&sq(&points[j], &centroids[assignment[j]])).then(j.cmp(&i)))
                    .unwrap();
                centroids[c] = points[far].clone();
            } else {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    objective.push(points.iter().zip(&assignment).map(|(p, &a)| sq(p, &centroids[a])).sum());
    KmeansResult { assignment, centroids, objective }
}

/// K-means with farthest-point initialization; the first center is chosen
/// from the seed.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KmeansResult> {
    if k == 0 || k > points.len() {
        return Err(Error::invalid(format!("K = {k} with {} points", points.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.gen_range(0..points.len())];
    while chosen.len() < k {
        let far = (0..points.len())
            .filter(|i| !chosen.contains(i))
            .max_by(|&i, &j| {
                let di = chosen.iter().map(|&c| sq(&points[i], &points[c])).fold(f64::INFINITY, f64::min);
                let dj = chosen.iter().map(|&c| sq(&points[j], &points[c])).fold(f64::INFINITY, f64::min);
                di.total_cmp(&dj).then(j.cmp(&i))
            })
            .unwrap();
        chosen.push(far);
    }
    Ok(lloyd(points, chosen.iter().map(|&i| points[i].clone()).collect()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub label: String,
    pub flagged: bool,
}

/// Names a cluster of keywords (mock table or a live language model).
pub trait Summarizer {
    fn summarize(&self, members: &[String]) -> Result<Label>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MockSummarizer;

impl Summarizer for MockSummarizer {
    fn summarize(&self, members: &[String]) -> Result<Label> {
        let mut counts: BTreeMap<Category, usize> = BTreeMap::new();
        for m in members {
            if let Some(c) = surface_category(m) {
                *counts.entry(c).or_default() += 1;
            }
        }
        Ok(match counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) {
            Some((c, _)) => Label { label: c.label().into(), flagged: false },
            None => Label { label: "other".into(), flagged: true },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub members: Vec<String>,
    pub centroid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureTaxonomy {
    pub clusters: Vec<Cluster>,
    pub labels: Vec<String>,
    pub flagged: Vec<bool>,
    pub aliases: BTreeMap<String, String>,
}

impl FailureTaxonomy {
    pub fn vocabulary(&self) -> BTreeSet<String> {
        self.clusters.iter().flat_map(|c| c.members.iter().cloned()).collect()
    }
}

pub fn summarize_labels(clusters: &[Cluster], summarizer: &dyn Summarizer) -> Result<Vec<Label>> {
    if clusters.is_empty() {
        return Err(Error::invalid("no clusters to summarize"));
    }
    clusters.iter().map(|c| summarizer.summarize(&c.members)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaxonomyConfig {
    pub merge_threshold: f64,
    pub seed: u64,
}

impl Default for TaxonomyConfig {
    fn default() -> Self {
        Self { merge_threshold: MERGE_THRESHOLD, seed: 0 }
    }
}

/// Extract → merge → select K → K-means → label.
pub fn build_taxonomy(
    annotations: &[CauseAnnotation],
    extractor: &dyn Extractor,
    summarizer: &dyn Summarizer,
    cfg: &TaxonomyConfig,
) -> Result<FailureTaxonomy> {
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for a in annotations {
        for k in extract_keywords(a, extractor)?.keywords {
            *freq.entry(k).or_default() += 1;
        }
    }
    if freq.is_empty() {
        return Err(Error::invalid("annotations yield no keywords"));
    }
    let embeddings: BTreeMap<String, Vec<f64>> = freq.keys().map(|k| (k.clone(), embed(k).vector)).collect();
    let merged = fuzzy_merge(&freq, &embeddings, cfg.merge_threshold)?;
    let words: Vec<&String> = merged.canonical.keys().collect();
    let points: Vec<Vec<f64>> = words.iter().map(|w| embeddings[*w].clone()).collect();
    let k = select_k(&points);
    let km = kmeans(&points, k, cfg.seed)?;
    let clusters: Vec<Cluster> = (0..k)
        .map(|c| Cluster {
            members: words.iter().zip(&km.assignment).filter(|(_, &a)| a == c).map(|(w, _)| (*w).clone()).collect(),
            centroid: km.centroids[c].clone(),
        })
        .collect();
    let labels = summarize_labels(&clusters, summarizer)?;
    Ok(FailureTaxonomy {
        clusters,
        flagged: labels.iter().map(|l| l.flagged).collect(),
        labels: labels.into_iter().map(|l| l.label).collect(),
        aliases: merged.aliases,
    })
}

const BUNDLED: &str = include_str!("../data/annotations.jsonl");

/// The bundled 27-case annotation set with reference categories and contexts.
pub fn bundled_annotations() -> Vec<CauseAnnotation> {
    BUNDLED.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).expect("bundled annotations parse")).collect()
}
