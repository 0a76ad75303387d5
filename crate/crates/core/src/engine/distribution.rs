use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Dataset;

/// Label for keywords outside the frozen vocabulary.
pub const RESIDUAL: &str = "<other>";
pub const MAX_VOCABULARY: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordDistribution {
    /// Vocabulary order followed by the residual bucket.
    pub labels: Vec<String>,
    pub probs: Vec<f64>,
}

/// Up to 100 keywords by corpus frequency, ties broken alphabetically.
pub fn vocabulary(corpus: &Dataset) -> Vec<String> {
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &corpus.scenes {
        for k in &s.keywords {
            *freq.entry(k.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.into_iter().take(MAX_VOCABULARY).map(|(k, _)| k.to_string()).collect()
}

/// Normalized keyword frequencies over `vocab`, with out-of-vocabulary
/// keywords pooled into [`RESIDUAL`].
pub fn keyword_distribution(dataset: &Dataset, vocab: &[String]) -> Result<KeywordDistribution> {
    if dataset.is_empty() {
        return Err(Error::invalid("keyword distribution of an empty dataset"));
    }
    let index: BTreeMap<&str, usize> = vocab.iter().enumerate().map(|(i, k)| (k.as_str(), i)).collect();
    let mut counts = vec![0usize; vocab.len() + 1];
    for s in &dataset.scenes {
        for k in &s.keywords {
            counts[index.get(k.as_str()).copied().unwrap_or(vocab.len())] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid(format!("dataset {} carries no keywords", dataset.name)));
    }
    let mut labels = vocab.to_vec();
    labels.push(RESIDUAL.to_string());
    Ok(KeywordDistribution { labels, probs: counts.iter().map(|&c| c as f64 / total as f64).collect() })
}

/// `(1/sqrt 2) * || sqrt p - sqrt q ||_2`, in `[0, 1]`.
pub fn hellinger(p: &KeywordDistribution, q: &KeywordDistribution) -> Result<f64> {
    if p.labels != q.labels || p.probs.len() != q.probs.len() {
        return Err(Error::invalid("distributions use different label orders"));
    }
    let s: f64 = p.probs.iter().zip(&q.probs).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
    Ok((s / 2.0).sqrt().min(1.0))
}
