//! Embedding-based negative selection.
//!
//! For each prompt the SFT target and all `R` sampled responses are embedded
//! and ranked by cosine similarity to the target. The `ceil((1 - a%) * R)` most
//! similar responses are treated as potential positives and dropped; the rest
//! are eligible negatives, from which `m` distinct strings are drawn.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PreferenceRecord, PromptRecord, ResponseSet};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("zero vector has no cosine similarity")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("no eligible negatives")]
    NoEligibleNegatives,
    #[error("no responses to filter")]
    NoResponses,
    #[error("invalid filter config: {0}")]
    InvalidConfig(String),
    #[error("prompt {id}: {reason}")]
    Alignment { id: String, reason: String },
    #[error("embedding failed for prompt {id}: {source}")]
    Embed { id: String, source: EmbedError },
}

/// Failure reported by an [`Embedder`] backend.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{0}")]
pub struct EmbedError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.0.iter().map(|v| v * v).sum())
    }
}

/// Produces one vector per input text, order-preserving.
pub trait Embedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError>;
}

/// Character n-grams of the text wrapped in `<` and `>`, each hashed with a
/// seeded 64-bit FNV-1a (finalized by SplitMix64) into `dim` signed buckets.
/// Bucket is `hash % dim`; the sign is `-1` when the top hash bit is set.
/// The result is L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashedNgramEmbedder {
    pub dim: usize,
    pub n: usize,
    pub seed: u64,
}

impl Default for HashedNgramEmbedder {
    fn default() -> Self {
        HashedNgramEmbedder { dim: 256, n: 3, seed: 0 }
    }
}

impl HashedNgramEmbedder {
    pub fn hash_gram(&self, gram: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed::mix64(self.seed);
        for &b in gram.as_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        seed::mix64(h)
    }

    /// The boundary-marked n-grams of `text`; a text shorter than `n - 2`
    /// yields its whole marked form as a single gram.
    pub fn ngrams(&self, text: &str) -> Vec<String> {
        let marked: Vec<char> = core::iter::once('<').chain(text.chars()).chain(core::iter::once('>')).collect();
        let n = self.n.max(1);
        if marked.len() <= n {
            return alloc::vec![marked.into_iter().collect()];
        }
        marked.windows(n).map(|w| w.iter().collect()).collect()
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector, FilterError> {
        if text.is_empty() {
            return Err(FilterError::EmptyText);
        }
        let mut v = alloc::vec![0.0; self.dim];
        for gram in self.ngrams(text) {
            let h = self.hash_gram(&gram);
            let bucket = (h % self.dim as u64) as usize;
            v[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
        }
        let out = EmbeddingVector(v);
        let norm = out.norm();
        if norm == 0.0 {
            // Signed buckets cancelled exactly; there is nothing to normalize.
            return Ok(out);
        }
        Ok(EmbeddingVector(out.0.into_iter().map(|x| x / norm).collect()))
    }
}

impl Embedder for HashedNgramEmbedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts.iter().map(|t| self.embed_one(t).map_err(|e| EmbedError(format!("{e} (text {t:?})")))).collect()
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, FilterError> {
    if u.dim() != v.dim() {
        return Err(FilterError::DimensionMismatch(u.dim(), v.dim()));
    }
    let sq = |w: &EmbeddingVector| w.0.iter().map(|x| x * x).sum::<f64>();
    let (su, sv) = (sq(u), sq(v));
    if su == 0.0 || sv == 0.0 {
        return Err(FilterError::ZeroVector);
    }
    let dot: f64 = u.0.iter().zip(&v.0).map(|(a, b)| a * b).sum();
    Ok((dot / libm::sqrt(su * sv)).clamp(-1.0, 1.0))
}

/// Number of top-ranked responses dropped as potential positives:
/// `ceil((1 - a%) * R)`.
pub fn excluded_count(r: usize, a_percent: f64) -> usize {
    let exact = (100.0 - a_percent) * r as f64 / 100.0;
    // Absorb representation error so that e.g. 75% of 32 is exactly 24.
    let c = libm::ceil(exact - 1e-9);
    (c.max(0.0) as usize).min(r)
}

/// Ranks by similarity (descending, ties by lower index), drops the top
/// [`excluded_count`] and returns the remaining indices in ascending
/// similarity order.
pub fn eligible_by_similarity(similarities: &[f64], a_percent: f64) -> Result<Vec<usize>, FilterError> {
    if similarities.is_empty() {
        return Err(FilterError::NoResponses);
    }
    let mut ranked: Vec<usize> = (0..similarities.len()).collect();
    ranked.sort_by(|&a, &b| similarities[b].total_cmp(&similarities[a]).then(a.cmp(&b)));
    let drop = excluded_count(similarities.len(), a_percent);
    let mut kept: Vec<usize> = ranked[drop..].to_vec();
    kept.reverse();
    if kept.is_empty() {
        return Err(FilterError::NoEligibleNegatives);
    }
    Ok(kept)
}

/// Eligible negative indices for one prompt (see [`eligible_by_similarity`]).
pub fn filter_negatives(
    target: &EmbeddingVector,
    responses: &[EmbeddingVector],
    a_percent: f64,
) -> Result<Vec<usize>, FilterError> {
    let sims = responses.iter().map(|r| cosine(target, r)).collect::<Result<Vec<_>, _>>()?;
    eligible_by_similarity(&sims, a_percent)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub negatives: Vec<String>,
    /// Fewer than `m` distinct strings were available.
    pub short: bool,
}

/// Deduplicates by exact string (first occurrence kept) and draws `m` without
/// replacement in seeded order.
pub fn select_negatives(eligible: &[&str], m: usize, seed: u64) -> Result<Selection, FilterError> {
    let mut seen = BTreeSet::new();
    let distinct: Vec<&str> = eligible.iter().copied().filter(|s| seen.insert(*s)).collect();
    if distinct.is_empty() {
        return Err(FilterError::NoEligibleNegatives);
    }
    let take = m.min(distinct.len());
    let mut rng = seed::rng(seed);
    let negatives = index::sample(&mut rng, distinct.len(), take).into_iter().map(|i| distinct[i].to_string()).collect();
    Ok(Selection { negatives, short: take < m })
}

/// Keys: `a_percent`, `m`, `r`, `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub a_percent: f64,
    pub m: usize,
    pub r: usize,
    pub seed: u64,
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        let bad = |s: &str| Err(FilterError::InvalidConfig(s.to_string()));
        if !(self.a_percent > 0.0 && self.a_percent <= 100.0) {
            return bad("a_percent must lie in (0, 100]");
        }
        if self.m == 0 {
            return bad("m must be at least 1");
        }
        if self.r < self.m {
            return bad("R must be at least m");
        }
        if self.a_percent * self.r as f64 / 100.0 < 1.0 - 1e-9 {
            return bad("a_percent * R / 100 must be at least 1");
        }
        Ok(())
    }
}

/// One diagnostics row: a response's rank by similarity to the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub id: String,
    pub rank: usize,
    pub similarity: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilterOutcome {
    pub records: Vec<PreferenceRecord>,
    pub diagnostics: Vec<DiagnosticRow>,
    /// Prompts dropped for lack of eligible negatives.
    pub skipped: Vec<String>,
    /// Prompts that received fewer than `m` negatives.
    pub short: Vec<String>,
}

/// Result of filtering a single prompt.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptFilter {
    Kept { record: PreferenceRecord, diagnostics: Vec<DiagnosticRow>, short: bool },
    Skipped { id: String },
}

impl FilterOutcome {
    /// Collects per-prompt results in prompt order.
    pub fn from_prompts(results: impl IntoIterator<Item = PromptFilter>) -> Self {
        let mut out = FilterOutcome::default();
        for r in results {
            match r {
                PromptFilter::Kept { record, diagnostics, short } => {
                    if short {
                        out.short.push(record.id.clone());
                    }
                    out.diagnostics.extend(diagnostics);
                    out.records.push(record);
                }
                PromptFilter::Skipped { id } => out.skipped.push(id),
            }
        }
        out
    }
}

/// Filters the `index`-th prompt of a dataset. The selection seed is
/// `derive(config.seed, index)`, so prompts can be processed in any order.
///
/// Responses string-equal to the target are dropped whenever `a% < 100`.
/// Empty responses cannot be embedded and are ranked with similarity 0, as
/// are responses whose embedding is the zero vector. A prompt whose target
/// embeds to zero is skipped.
pub fn filter_prompt(
    index: usize,
    prompt: &PromptRecord,
    set: &ResponseSet,
    embedder: &dyn Embedder,
    config: &FilterConfig,
) -> Result<PromptFilter, FilterError> {
    let skipped = |why: &str| {
        log::warn!("prompt {}: {why}, skipped", prompt.id);
        Ok(PromptFilter::Skipped { id: prompt.id.clone() })
    };
    if set.id != prompt.id {
        return Err(FilterError::Alignment { id: prompt.id.clone(), reason: format!("paired with response set {}", set.id) });
    }
    if set.responses.len() != config.r {
        return Err(FilterError::Alignment {
            id: prompt.id.clone(),
            reason: format!("{} responses, expected R = {}", set.responses.len(), config.r),
        });
    }
    let mut texts: Vec<&str> = alloc::vec![prompt.target.as_str()];
    texts.extend(set.responses.iter().map(|s| s.as_str()).filter(|s| !s.is_empty()));
    let embs = embedder.embed(&texts).map_err(|source| FilterError::Embed { id: prompt.id.clone(), source })?;
    if embs.len() != texts.len() {
        return Err(FilterError::Embed {
            id: prompt.id.clone(),
            source: EmbedError(format!("{} vectors for {} texts", embs.len(), texts.len())),
        });
    }
    if embs[0].norm() == 0.0 {
        return skipped("target embeds to the zero vector");
    }
    let mut next = embs[1..].iter();
    let mut sims = Vec::with_capacity(config.r);
    for resp in &set.responses {
        if resp.is_empty() {
            sims.push(0.0);
            continue;
        }
        let emb = next.next().expect("length checked");
        sims.push(if emb.norm() == 0.0 { 0.0 } else { cosine(&embs[0], emb)? });
    }

    let eligible = match eligible_by_similarity(&sims, config.a_percent) {
        Ok(e) => e,
        Err(FilterError::NoEligibleNegatives) => return skipped("no eligible negatives"),
        Err(e) => return Err(e),
    };
    let eligible: Vec<usize> = if config.a_percent < 100.0 {
        eligible.into_iter().filter(|&i| set.responses[i] != prompt.target).collect()
    } else {
        eligible
    };
    let strings: Vec<&str> = eligible.iter().map(|&i| set.responses[i].as_str()).collect();
    let selection = match select_negatives(&strings, config.m, seed::derive(config.seed, index as u64)) {
        Ok(s) => s,
        Err(FilterError::NoEligibleNegatives) => return skipped("no eligible negatives"),
        Err(e) => return Err(e),
    };
    if selection.short {
        log::debug!("prompt {}: only {} distinct negatives for m = {}", prompt.id, selection.negatives.len(), config.m);
    }

    let mut ranked: Vec<usize> = (0..sims.len()).collect();
    ranked.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    let eligible_set: BTreeSet<usize> = eligible.iter().copied().collect();
    let diagnostics = ranked
        .iter()
        .enumerate()
        .map(|(rank, &i)| DiagnosticRow {
            id: prompt.id.clone(),
            rank,
            similarity: sims[i],
            selected: eligible_set.contains(&i) && selection.negatives.contains(&set.responses[i]),
        })
        .collect();
    Ok(PromptFilter::Kept {
        record: PreferenceRecord {
            id: prompt.id.clone(),
            prompt: prompt.prompt.clone(),
            chosen: prompt.target.clone(),
            rejected: selection.negatives,
        },
        diagnostics,
        short: selection.short,
    })
}

/// Looks up each prompt's response set by id.
pub fn align_responses<'a>(
    prompts: &[PromptRecord],
    response_sets: &'a [ResponseSet],
) -> Result<Vec<&'a ResponseSet>, FilterError> {
    let by_id: BTreeMap<&str, &ResponseSet> = response_sets.iter().map(|s| (s.id.as_str(), s)).collect();
    prompts
        .iter()
        .map(|p| {
            by_id
                .get(p.id.as_str())
                .copied()
                .ok_or_else(|| FilterError::Alignment { id: p.id.clone(), reason: "no response set".into() })
        })
        .collect()
}

/// Builds the preference dataset: chosen is the SFT target, rejected are `m`
/// filtered self-generated responses (see [`filter_prompt`]).
pub fn build_preference_dataset(
    prompts: &[PromptRecord],
    response_sets: &[ResponseSet],
    embedder: &dyn Embedder,
    config: &FilterConfig,
) -> Result<FilterOutcome, FilterError> {
    config.validate()?;
    let sets = align_responses(prompts, response_sets)?;
    let results = prompts
        .iter()
        .zip(sets)
        .enumerate()
        .map(|(i, (p, s))| filter_prompt(i, p, s, embedder, config))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FilterOutcome::from_prompts(results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn cosine_examples() {
        let u = EmbeddingVector(vec![1.0, 0.0]);
        let v = EmbeddingVector(vec![1.0, 1.0]);
        assert!((cosine(&u, &v).unwrap() - 0.7071067811865476).abs() < 1e-15);
        assert_eq!(cosine(&v, &v).unwrap(), 1.0);
        assert_eq!(cosine(&v, &EmbeddingVector(vec![-1.0, -1.0])).unwrap(), -1.0);
        assert_eq!(cosine(&u, &EmbeddingVector(vec![0.0, 0.0])), Err(FilterError::ZeroVector));
        assert_eq!(cosine(&u, &EmbeddingVector(vec![1.0])), Err(FilterError::DimensionMismatch(2, 1)));
    }

    #[test]
    fn hashed_embedding_basics() {
        let e = HashedNgramEmbedder::default();
        let a = e.embed_one("abc").unwrap();
        assert_eq!(a, e.embed_one("abc").unwrap());
        assert!((a.norm() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&a, &a).unwrap(), 1.0);
        assert_eq!(e.embed_one(""), Err(FilterError::EmptyText));
        let near = cosine(&a, &e.embed_one("abd").unwrap()).unwrap();
        let far = cosine(&a, &e.embed_one("xyz").unwrap()).unwrap();
        assert!(near > far, "{near} vs {far}");
    }

    #[test]
    fn ngrams_have_boundaries() {
        let e = HashedNgramEmbedder::default();
        assert_eq!(e.ngrams("abc"), vec!["<ab", "abc", "bc>"]);
        assert_eq!(e.ngrams("a"), vec!["<a>"]);
    }

    #[test]
    fn disjoint_texts_are_orthogonal_without_collisions() {
        let e = HashedNgramEmbedder { dim: 1 << 16, n: 3, seed: 7 };
        let buckets = |t: &str| e.ngrams(t).iter().map(|g| e.hash_gram(g) % e.dim as u64).collect::<BTreeSet<_>>();
        let (x, y) = ("abcd", "wxyz");
        assert!(buckets(x).is_disjoint(&buckets(y)), "instance has a collision; pick another seed");
        assert_eq!(cosine(&e.embed_one(x).unwrap(), &e.embed_one(y).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn excluded_count_rounds_up() {
        assert_eq!(excluded_count(32, 25.0), 24);
        assert_eq!(excluded_count(64, 25.0), 48);
        assert_eq!(excluded_count(32, 100.0), 0);
        assert_eq!(excluded_count(8, 12.5), 7);
        assert_eq!(excluded_count(3, 50.0), 2);
    }

    #[test]
    fn eligible_examples() {
        let sims: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(eligible_by_similarity(&sims, 25.0).unwrap().len(), 8);
        assert_eq!(eligible_by_similarity(&sims, 100.0).unwrap().len(), 32);
        assert_eq!(eligible_by_similarity(&[0.9, 0.5, 0.5, 0.1], 50.0).unwrap(), vec![3, 2]);
        assert_eq!(eligible_by_similarity(&[0.5; 2], 10.0), Err(FilterError::NoEligibleNegatives));
        assert_eq!(eligible_by_similarity(&[], 10.0), Err(FilterError::NoResponses));
    }

    #[test]
    fn select_examples() {
        let s = select_negatives(&["x", "x", "y"], 2, 1).unwrap();
        assert_eq!(s.negatives.iter().collect::<BTreeSet<_>>(), ["x".to_string(), "y".to_string()].iter().collect());
        assert!(!s.short);
        assert_eq!(select_negatives(&["z"], 1, 5).unwrap().negatives, vec!["z"]);
        let eight = ["a", "b", "c", "d", "e", "f", "g", "h"];
        let s = select_negatives(&eight, 8, 3).unwrap();
        assert_eq!(s.negatives.iter().map(|x| x.as_str()).collect::<BTreeSet<_>>(), eight.into_iter().collect());
        let s = select_negatives(&["a", "a"], 3, 3).unwrap();
        assert!(s.short);
        assert_eq!(select_negatives(&[], 1, 0), Err(FilterError::NoEligibleNegatives));
        assert_eq!(select_negatives(&eight, 4, 9), select_negatives(&eight, 4, 9));
    }

    #[test]
    fn filter_config_validation() {
        let ok = FilterConfig { a_percent: 25.0, m: 8, r: 32, seed: 0 };
        assert!(ok.validate().is_ok());
        assert!(FilterConfig { a_percent: 0.0, ..ok }.validate().is_err());
        assert!(FilterConfig { a_percent: 100.5, ..ok }.validate().is_err());
        assert!(FilterConfig { m: 0, ..ok }.validate().is_err());
        assert!(FilterConfig { r: 4, ..ok }.validate().is_err());
        assert!(FilterConfig { a_percent: 2.0, m: 1, ..ok }.validate().is_err());
    }
}
